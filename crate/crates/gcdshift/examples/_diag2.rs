use gcdshift::backbone::{Bind, VitConfig};
use gcdshift::curriculum::CurriculumConfig;
use gcdshift::graph::Graph;
use gcdshift::ncut::AffinityConfig;
use gcdshift::synthdata::{make_dataset, GenConfig, SplitSpec};
use gcdshift::trainer::{Method, TrainConfig, Trainer};

fn main() {
    let epochs: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(30);
    let gen = GenConfig { k: 8, n_per_class_per_domain: 12, image_shape: [3, 32, 32], seed: 33 };
    let split = SplitSpec::first_n_base(4, 8, 0.5);
    let ds = make_dataset(&gen, &split, "diag").unwrap();
    let cfg = TrainConfig { epochs, ..TrainConfig::hilo() };
    let cur = CurriculumConfig { t_prime: 10, r_prime: 1.0, ..CurriculumConfig::corruption_preset() };
    let mut t = Trainer::new(Method::Hilo, cfg, VitConfig::default(), AffinityConfig::default(), cur, &ds, 1).unwrap();
    let steps = t.steps_per_epoch(&ds);
    for epoch in 0..epochs {
        t.epoch = epoch;
        for _ in 0..steps { t.step(&ds).unwrap(); }
    }
    // collect features of all unlabelled samples
    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut norms: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut preds: Vec<usize> = Vec::new();
    for i in 0..ds.len() {
        if ds.record(i).is_labelled { continue; }
        let mut g = Graph::new();
        let img = g.constant(ds.image_mat(i));
        let enc = t.models.vit.forward_image(&mut g, &t.models.store, img, Bind::Freeze).unwrap();
        let cls = enc.layer_cls[t.models.vit.cfg.depth];
        let raw = g.value(cls).row(0).to_vec();
        let norm: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        norms.push(norm);
        feats.push(raw.iter().map(|x| x / norm).collect());
        labels.push(ds.record(i).class_id);
        preds.push(t.predict(&ds, i).unwrap());
    }
    let n = feats.len();
    // 5-NN accuracy in normalized CLS space
    let mut knn_hit = 0;
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n).filter(|&j| j != i)
            .map(|j| {
                let d: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, labels[j])
            }).collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut votes = [0usize; 8];
        for &(_, l) in dists.iter().take(5) { votes[l] += 1; }
        let knn = votes.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0;
        if knn == labels[i] { knn_hit += 1; }
    }
    let mean_norm: f64 = norms.iter().sum::<f64>() / n as f64;
    println!("epochs {epochs}: CLS norm mean {:.2}", mean_norm);
    println!("5-NN acc in normalized CLS space: {:.3}", knn_hit as f64 / n as f64);
    let mut cluster_count = [0usize; 8];
    for &p in &preds { cluster_count[p] += 1; }
    println!("prototype cluster sizes: {cluster_count:?}");
    let rep = t.evaluate(&ds).unwrap();
    println!("hungarian All {:.3}", rep.overall.all.unwrap());
}
