use gcdshift::backbone::VitConfig;
use gcdshift::curriculum::CurriculumConfig;
use gcdshift::ncut::AffinityConfig;
use gcdshift::synthdata::{make_dataset, GenConfig, SplitSpec};
use gcdshift::trainer::{Method, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args[1].parse().unwrap();
    let seed: u64 = args[2].parse().unwrap();
    let mi: bool = args.get(3).map(|s| s == "mi").unwrap_or(true);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let gen = GenConfig { k: 8, n_per_class_per_domain: 12, image_shape: [3, 32, 32], seed: 33 };
    let split = SplitSpec::first_n_base(4, 8, 0.5);
    let ds = make_dataset(&gen, &split, "probe").unwrap();
    let cfg = TrainConfig { epochs: 50, lr, enable_mi: mi, batch_size: batch, ..TrainConfig::hilo() };
    let cur = CurriculumConfig { t_prime: 10, r_prime: 1.0, ..CurriculumConfig::corruption_preset() };
    let mut t = Trainer::new(Method::Hilo, cfg, VitConfig::default(), AffinityConfig::default(), cur, &ds, seed).unwrap();
    let steps = t.steps_per_epoch(&ds);
    for epoch in 0..50u64 {
        t.epoch = epoch;
        for _ in 0..steps { t.step(&ds).unwrap(); }
        if (epoch + 1) % 10 == 0 {
            let rep = t.evaluate(&ds).unwrap();
            println!("lr {lr} seed {seed} mi {mi} epoch {:2}: All {:.3} | d0 {:.3} d1 {:.3} | Old {:.3} New {:.3}",
                epoch + 1, rep.overall.all.unwrap(), rep.per_domain[0].all.unwrap(),
                rep.per_domain[1].all.unwrap(), rep.overall.old.unwrap(), rep.overall.new.unwrap());
        }
    }
}
