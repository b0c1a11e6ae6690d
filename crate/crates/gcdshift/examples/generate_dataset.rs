//! Generate a two-domain glyph dataset, persist it, and reload it.
//!
//! ```text
//! cargo run --release --example generate_dataset
//! ```

use gcdshift::synthdata::{load, make_dataset, persist, GenConfig, SplitSpec};

fn main() -> gcdshift::Result<()> {
    let gen = GenConfig {
        k: 8,
        n_per_class_per_domain: 16,
        image_shape: [3, 32, 32],
        seed: 7,
    };
    let split = SplitSpec::first_n_base(4, 8, 0.5);
    let dataset = make_dataset(&gen, &split, "demo")?;

    let labelled = dataset
        .manifest
        .records
        .iter()
        .filter(|r| r.is_labelled)
        .count();
    println!(
        "{} records, K = {}, {} labelled (domain 0, base classes only)",
        dataset.len(),
        dataset.manifest.k,
        labelled
    );

    // ASCII view of one glyph per domain
    for (tag, idx) in [("domain 0", 0usize), ("domain 1", 16)] {
        let rec = dataset.record(idx);
        println!(
            "\nsample {} ({tag}, class {}):",
            rec.sample_id, rec.class_id
        );
        let gray = gcdshift::synthdata::grayscale(&dataset.images[idx], (32, 32));
        for row in 0..16 {
            let line: String = (0..32)
                .map(|col| {
                    let v = gray[(2 * row) * 32 + col];
                    match v {
                        v if v > 0.7 => '#',
                        v if v > 0.5 => '+',
                        v if v > 0.3 => '.',
                        _ => ' ',
                    }
                })
                .collect();
            println!("  {line}");
        }
    }

    let dir = std::env::temp_dir().join("gcdshift-demo-dataset");
    persist(&dataset, &dir)?;
    let back = load(&dir)?;
    assert_eq!(back.manifest, dataset.manifest);
    println!("\npersisted and reloaded from {}", dir.display());
    Ok(())
}
