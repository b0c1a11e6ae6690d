//! Train the dual-encoder variant: factorized text prompts through a
//! frozen text tower, symmetric-KL vision-language alignment, boundary
//! pixel prompts, and model-first alternation.
//!
//! ```text
//! cargo run --release --example train_vlprompt
//! ```

use gcdshift::backbone::VitConfig;
use gcdshift::curriculum::CurriculumConfig;
use gcdshift::ncut::AffinityConfig;
use gcdshift::synthdata::{make_dataset, GenConfig, SplitSpec};
use gcdshift::trainer::{Method, TrainConfig, Trainer};

fn main() -> gcdshift::Result<()> {
    let gen = GenConfig {
        k: 8,
        n_per_class_per_domain: 8,
        image_shape: [3, 32, 32],
        seed: 7,
    };
    let split = SplitSpec::first_n_base(4, 8, 0.5);
    let dataset = make_dataset(&gen, &split, "vlprompt-demo")?;

    let cfg = TrainConfig {
        epochs: 6,
        k_alternate: 8,
        ..TrainConfig::vlprompt()
    };
    let curriculum = CurriculumConfig {
        t_prime: 2,
        r_prime: 1.0,
        ..CurriculumConfig::corruption_preset()
    };
    let mut trainer = Trainer::new(
        Method::Vlprompt,
        cfg,
        VitConfig::default(),
        AffinityConfig::default(),
        curriculum,
        &dataset,
        5,
    )?;

    let tp = trainer.models.text_prompts.as_ref().unwrap();
    let factorized = tp.param_count(&trainer.models.store);
    let independent = tp.k * (tp.cfg.n_ctx + 1) * 64;
    println!(
        "text prompt parameters: {factorized} (factorized) vs {independent} (independent per class)"
    );

    let steps = trainer.steps_per_epoch(&dataset);
    for epoch in 0..6 {
        trainer.epoch = epoch;
        let mut align = 0.0;
        let mut cls = 0.0;
        for _ in 0..steps {
            let rec = trainer.step(&dataset)?;
            align += rec.components.get("vl_align").copied().unwrap_or(0.0);
            cls += rec.components.get("vl_cls").copied().unwrap_or(0.0);
        }
        println!(
            "epoch {epoch}: mean matching loss {:.4}, mean alignment loss {:.4}",
            cls / steps as f64,
            align / steps as f64
        );
    }

    let report = trainer.evaluate(&dataset)?;
    let fmt = |x: Option<f64>| x.map_or("  -  ".into(), |v| format!("{v:.3}"));
    for (d, acc) in report.per_domain.iter().enumerate() {
        println!(
            "domain {d}: All {} | Old {} | New {}",
            fmt(acc.all),
            fmt(acc.old),
            fmt(acc.new)
        );
    }
    Ok(())
}
