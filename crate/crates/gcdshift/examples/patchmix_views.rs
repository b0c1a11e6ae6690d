//! Embedding-space mixing: per-patch Beta coefficients blend two
//! samples' patch embeddings, the CLS-attention maps set the semantic
//! share `alpha`, and labels soften toward uniform accordingly.
//!
//! ```text
//! cargo run --release --example patchmix_views
//! ```

use gcdshift::graph::{Graph, Mat};
use gcdshift::losses::one_hot;
use gcdshift::patchmix::{mix_patch_embeddings, pm_soft_label, MixPlan};

fn main() -> gcdshift::Result<()> {
    let labelled = [true, true, false, false, false, false];
    let n_patches = 16;
    let mut plan = MixPlan::generate(&labelled, n_patches, 1.0, 7)?;

    // synthetic attention maps: anchors focus on different patch blocks
    let attn: Vec<Vec<f64>> = (0..labelled.len())
        .map(|i| {
            let mut a = vec![0.02; n_patches];
            for j in 0..4 {
                a[(4 * i + j) % n_patches] = 0.25 - 3.0 * 0.02 / 4.0;
            }
            let s: f64 = a.iter().sum();
            a.iter().map(|x| x / s).collect()
        })
        .collect();
    plan.set_alphas(&attn)?;

    println!("anchor -> partner pairing (labelled anchors prefer unlabelled partners):");
    for (i, e) in plan.entries.iter().enumerate() {
        println!(
            "  {} {i} -> {} {}  beta_bar {:.3}  alpha {:.3}",
            if labelled[i] { "labelled  " } else { "unlabelled" },
            if labelled[e.partner] { "labelled  " } else { "unlabelled" },
            e.partner,
            e.beta_bar,
            e.alpha
        );
    }

    // endpoint sanity: beta = 1 keeps the anchor exactly
    let mut g = Graph::new();
    let a = g.constant(Mat::from_elem((4, 3), 1.0));
    let b = g.constant(Mat::from_elem((4, 3), -1.0));
    let kept = mix_patch_embeddings(&mut g, a, b, &[1.0; 4])?;
    assert_eq!(g.value(kept), g.value(a));

    println!("\nsoft labels for a one-hot class 1 of 4:");
    for alpha in [1.0, 0.75, 0.5, 0.0] {
        let q = pm_soft_label(&one_hot(1, 4), alpha, 4)?;
        println!("  alpha {alpha:.2}: {q:?}");
    }
    Ok(())
}
