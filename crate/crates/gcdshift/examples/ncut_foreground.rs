//! Spectral foreground detection on patch graphs: build the gated
//! Gaussian affinity from early-layer patch tokens, take the second
//! generalized eigenvector, and pick the side the CLS token attends to.
//!
//! ```text
//! cargo run --release --example ncut_foreground
//! ```

use gcdshift::backbone::{Bind, Vit, VitConfig};
use gcdshift::graph::{Graph, ParamGroup, ParamStore};
use gcdshift::ncut::{brute_force_min_ncut, ncut_mask, ncut_partition, AffinityConfig, ThresholdRule};
use gcdshift::synthdata::{render_glyph, GenConfig};

fn main() -> gcdshift::Result<()> {
    // the 4-node path graph: the relaxation attains the exhaustive optimum
    let mut w = gcdshift::graph::Mat::zeros((4, 4));
    for i in 0..3 {
        w[[i, i + 1]] = 1.0;
        w[[i + 1, i]] = 1.0;
    }
    let (_, brute) = brute_force_min_ncut(&w);
    let spectral = ncut_partition(&w, ThresholdRule::Zero)?;
    println!("4-node path graph: exhaustive minimum {brute:.4}, spectral value {:.4}", spectral.value);

    // foreground masks on rendered glyphs through an untrained encoder
    let _ = GenConfig {
        k: 8,
        n_per_class_per_domain: 4,
        image_shape: [3, 32, 32],
        seed: 7,
    };
    let mut store = ParamStore::new();
    let vit = Vit::new(&mut store, VitConfig::default(), ParamGroup::Encoder, 2)?;
    let cfg = AffinityConfig::default();

    for class in [0usize, 3, 5] {
        let img = render_glyph(class, (32, 32), 40 + class as u64);
        let mut g = Graph::new();
        let pixels: Vec<f64> = img.iter().map(|&x| x as f64).collect();
        let iv = g.constant(gcdshift::graph::Mat::from_shape_vec((1, pixels.len()), pixels).unwrap());
        let enc = vit.forward_image(&mut g, &store, iv, Bind::Freeze)?;
        let feats = g.value(enc.tap_patches).clone();
        let attn = g.value(enc.attn_cls).row(0).to_vec();
        let mask = ncut_mask(&feats, 8, &attn, &cfg)?;

        println!("\nclass {class}: foreground mask over the 8x8 patch grid");
        for row in 0..8 {
            let line: String = (0..8)
                .map(|col| if mask[row * 8 + col] { '#' } else { '.' })
                .collect();
            println!("  {line}");
        }
    }
    Ok(())
}
