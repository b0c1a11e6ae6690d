//! Train the spatial-prompt variant: spectral foreground masks gate a
//! shared learnable prompt, and prompt/model parameters alternate in
//! k-iteration phases.
//!
//! ```text
//! cargo run --release --example train_hlprompt
//! ```

use gcdshift::backbone::VitConfig;
use gcdshift::curriculum::CurriculumConfig;
use gcdshift::ncut::AffinityConfig;
use gcdshift::prompts::Phase;
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
    let dataset = make_dataset(&gen, &split, "hlprompt-demo")?;

    let cfg = TrainConfig {
        epochs: 6,
        k_alternate: 8,
        ..TrainConfig::hlprompt()
    };
    let curriculum = CurriculumConfig {
        t_prime: 2,
        r_prime: 1.0,
        ..CurriculumConfig::corruption_preset()
    };
    let mut trainer = Trainer::new(
        Method::Hlprompt,
        cfg,
        VitConfig::default(),
        AffinityConfig::default(),
        curriculum,
        &dataset,
        3,
    )?;

    let steps = trainer.steps_per_epoch(&dataset);
    let mut phase_flips = Vec::new();
    let mut last_phase = None;
    for epoch in 0..6 {
        trainer.epoch = epoch;
        for _ in 0..steps {
            let rec = trainer.step(&dataset)?;
            if last_phase != Some(rec.phase) {
                phase_flips.push((rec.step, rec.phase));
                last_phase = Some(rec.phase);
            }
        }
    }
    println!("phase spans (iteration, phase entered):");
    for (step, phase) in &phase_flips {
        let tag = match phase {
            Phase::Prompt => "prompt",
            Phase::Model => "model",
        };
        println!("  step {step:3} -> {tag}");
    }
    println!(
        "\nforeground masks computed: {} (one per image forward)",
        trainer.counters.masks_computed
    );

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
