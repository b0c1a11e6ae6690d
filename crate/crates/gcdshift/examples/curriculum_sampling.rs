//! Pseudo-domain partitioning and the staged sampling schedule: pinned
//! 2-means over pooled amplitude spectra splits the unlabelled pool, and
//! new-domain-like samples only enter batches after the ramp epoch.
//!
//! ```text
//! cargo run --release --example curriculum_sampling
//! ```

use gcdshift::curriculum::{
    draw_batch, fft_amplitude_rep, ss_kmeans, CurriculumConfig, CurriculumState,
};
use gcdshift::synthdata::{grayscale, make_dataset, split_ids, GenConfig, SplitSpec};

fn main() -> gcdshift::Result<()> {
    let gen = GenConfig {
        k: 8,
        n_per_class_per_domain: 8,
        image_shape: [3, 32, 32],
        seed: 21,
    };
    let split = SplitSpec::first_n_base(4, 8, 0.5);
    let ds = make_dataset(&gen, &split, "curriculum-demo")?;
    let (dl, du) = split_ids(&ds.manifest, &split)?;

    let rep = |id: u64| {
        let idx = ds.index_of(id);
        fft_amplitude_rep(&grayscale(&ds.images[idx], (32, 32)), 32, 32).unwrap()
    };
    let l: Vec<Vec<f64>> = dl.iter().map(|&id| rep(id)).collect();
    let u: Vec<Vec<f64>> = du.iter().map(|&id| rep(id)).collect();
    let km = ss_kmeans(&l, &u, 100)?;

    let mut agree = 0;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, &id) in du.iter().enumerate() {
        if km.in_cluster_a[i] {
            a.push(id);
        } else {
            b.push(id);
        }
        let truth_a = ds.manifest.records[id as usize].domain_id == 0;
        if truth_a == km.in_cluster_a[i] {
            agree += 1;
        }
    }
    let frac = agree.max(du.len() - agree) as f64 / du.len() as f64;
    println!(
        "pinned 2-means on spectra: |A| = {}, |B| = {}, true-domain agreement {frac:.3}",
        a.len(),
        b.len()
    );

    let cfg = CurriculumConfig {
        r0: 0.0,
        r_prime: 0.05,
        t_prime: 80,
        ..CurriculumConfig::corruption_preset()
    };
    let state = CurriculumState::new(&dl, &a, &b, cfg);
    println!("\nsampling weights around the ramp epoch (r0 = 0, r' = 0.05, t' = 80):");
    for t in [0u64, 79, 80, 81, 120] {
        let wl = state.weight(dl[0], t)?;
        let wa = state.weight(a[0], t)?;
        let wb = state.weight(b[0], t)?;
        println!("  epoch {t:3}: labelled {wl:.3}, cluster A {wa:.3}, cluster B {wb:.3}");
    }

    // before the ramp no cluster-B sample can be drawn
    let weights: Vec<(u64, f64)> = du.iter().map(|&id| (id, state.weight(id, 10).unwrap())).collect();
    let draw = draw_batch(&dl, &weights, 16, 5)?;
    let b_drawn = draw.unlabelled.iter().filter(|id| b.contains(id)).count();
    println!("\nbatch at epoch 10: {} cluster-B samples drawn (weights are zero)", b_drawn);
    Ok(())
}
