//! Checkpoint round trip: train briefly, save, reload, and verify the
//! evaluation report is identical (parameters and optimizer state are
//! stored bit-exactly in the tensor container).
//!
//! ```text
//! cargo run --release --example evaluate_checkpoint
//! ```

use gcdshift::backbone::VitConfig;
use gcdshift::curriculum::CurriculumConfig;
use gcdshift::ncut::AffinityConfig;
use gcdshift::synthdata::{make_dataset, GenConfig, SplitSpec};
use gcdshift::trainer::{Method, TrainConfig, Trainer};

fn main() -> gcdshift::Result<()> {
    let gen = GenConfig {
        k: 4,
        n_per_class_per_domain: 6,
        image_shape: [3, 16, 16],
        seed: 11,
    };
    let split = SplitSpec::first_n_base(2, 4, 0.5);
    let ds = make_dataset(&gen, &split, "ckpt-demo")?;

    let vit = VitConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        tap_layer: 1,
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::hilo()
    };
    let curriculum = CurriculumConfig {
        t_prime: 1,
        r_prime: 1.0,
        ..CurriculumConfig::corruption_preset()
    };
    let mut trainer = Trainer::new(
        Method::Hilo,
        cfg.clone(),
        vit.clone(),
        AffinityConfig::default(),
        curriculum,
        &ds,
        9,
    )?;
    trainer.train(&ds, |_| {})?;

    let dir = std::env::temp_dir().join("gcdshift-demo-checkpoint");
    std::fs::create_dir_all(&dir)?;
    trainer.save_checkpoint(&dir)?;
    println!("checkpoint saved to {}", dir.display());

    let reloaded = Trainer::load_checkpoint(
        &dir,
        Method::Hilo,
        cfg,
        vit,
        AffinityConfig::default(),
        curriculum,
        &ds,
    )?;
    let before = trainer.evaluate(&ds)?;
    let after = reloaded.evaluate(&ds)?;
    assert_eq!(before, after, "reports must match bit-for-bit");

    println!("reloaded report matches the in-memory model:");
    let fmt = |x: Option<f64>| x.map_or("  -  ".into(), |v| format!("{v:.3}"));
    for (d, acc) in after.per_domain.iter().enumerate() {
        println!(
            "  domain {d}: All {} | Old {} | New {}",
            fmt(acc.all),
            fmt(acc.old),
            fmt(acc.new)
        );
    }
    Ok(())
}
