//! Procedural two-domain glyph datasets.
//!
//! A class is a (shape, fill-pattern) pair drawn from a fixed 64-glyph
//! library, rendered in grayscale intensity with a constant per-channel
//! tint and jittered position/scale. Shapes are sized to near-equal area
//! and fills to near-equal mean intensity, so class identity lives in the
//! spatial pattern rather than global statistics: the photometric domain
//! transform then shifts every class the same way.
//!
//! Domain 0 is the clean rendering; domain 1 applies a deterministic
//! channel permutation, a +0.15 global brightness shift, and seeded
//! Gaussian pixel noise, clamped back to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::blob::{self, Tensor};
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::rng;

pub const GLYPH_LIBRARY_SIZE: usize = 64;
const N_SHAPES: usize = 8;
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.9, 0.8];
const BACKGROUND: f64 = 0.1;
const BRIGHTNESS_SHIFT: f64 = 0.15;
const NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub n_per_class_per_domain: usize,
    /// `[C, H, W]`, C = 3, H = W, H divisible by 4.
    pub image_shape: [usize; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSets {
    pub seen: Vec<u8>,
    pub new: Vec<u8>,
}

impl Default for DomainSets {
    fn default() -> Self {
        DomainSets {
            seen: vec![0],
            new: vec![1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub labelled_fraction_per_base_class: f64,
    #[serde(default)]
    pub domains: DomainSets,
}

impl SplitSpec {
    /// First `n_base` classes labelled-eligible, the rest novel.
    pub fn first_n_base(n_base: usize, k: usize, labelled_fraction: f64) -> Self {
        SplitSpec {
            base_classes: (0..n_base).collect(),
            novel_classes: (n_base..k).collect(),
            labelled_fraction_per_base_class: labelled_fraction,
            domains: DomainSets::default(),
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        for &c in self.base_classes.iter().chain(&self.novel_classes) {
            if c >= k {
                return Err(Error::Config(format!("class {c} out of range 0..{k}")));
            }
            if seen[c] {
                return Err(Error::Config(format!("class {c} appears twice in split")));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config(
                "base and novel classes must partition the class range".into(),
            ));
        }
        if self.base_classes.is_empty() {
            return Err(Error::Config("base class set must not be empty".into()));
        }
        let f = self.labelled_fraction_per_base_class;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!(
                "labelled fraction {f} outside (0, 1]"
            )));
        }
        Ok(())
    }

    pub fn is_base(&self, class_id: usize) -> bool {
        self.base_classes.contains(&class_id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub sample_id: u64,
    pub class_id: usize,
    pub domain_id: u8,
    pub is_labelled: bool,
    pub tensor_file_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_name: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub image_shape: [usize; 3],
    pub split_spec: SplitSpec,
    pub records: Vec<RecordMeta>,
    pub generator_seed: u64,
}

/// Manifest plus the image payload, pixels as generated (f32-exact).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.manifest.image_shape[1], self.manifest.image_shape[2])
    }

    /// Image as a `[1, C*H*W]` f64 row for graph use.
    pub fn image_mat(&self, idx: usize) -> Mat {
        let v: Vec<f64> = self.images[idx].iter().map(|&x| x as f64).collect();
        Mat::from_shape_vec((1, v.len()), v).unwrap()
    }

    pub fn record(&self, idx: usize) -> &RecordMeta {
        &self.manifest.records[idx]
    }

    pub fn index_of(&self, sample_id: u64) -> usize {
        // sample ids are assigned sequentially by the generator
        let idx = sample_id as usize;
        debug_assert_eq!(self.manifest.records[idx].sample_id, sample_id);
        idx
    }
}

// ---- glyph rendering --------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
    Plus,
    HBars,
    XCross,
}

const SHAPES: [Shape; N_SHAPES] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Ring,
    Shape::Plus,
    Shape::HBars,
    Shape::XCross,
];

impl Shape {
    /// Membership test in centered coordinates (units of px at the 32x32
    /// reference size). Constants are tuned to near-equal areas so class
    /// mean intensity varies little.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disk => x * x + y * y <= 8.2 * 8.2,
            Shape::Square => x.abs().max(y.abs()) <= 7.25,
            Shape::Triangle => y.abs() <= 10.0 && x.abs() <= 10.5 * (y + 10.0) / 20.0,
            Shape::Diamond => x.abs() + y.abs() <= 10.25,
            Shape::Ring => {
                let r2 = x * x + y * y;
                r2 <= 9.5 * 9.5 && r2 >= 4.8 * 4.8
            }
            Shape::Plus => {
                (x.abs() <= 3.0 && y.abs() <= 10.0) || (y.abs() <= 3.0 && x.abs() <= 10.0)
            }
            Shape::HBars => x.abs() <= 10.0 && (2.8..=8.0).contains(&y.abs()),
            Shape::XCross => {
                x.abs() <= 10.0
                    && y.abs() <= 10.0
                    && ((x - y).abs() <= 3.0 || (x + y).abs() <= 3.0)
            }
        }
    }
}

/// Fill intensity at an absolute pixel location. Patterns alternate
/// between 0.45 and 0.75: every fill has mean intensity near 0.6, stays
/// under 0.85 (headroom for the +0.15 domain brightness shift), and the
/// moderate contrast keeps class-driven spectral energy from drowning
/// the photometric domain signature.
fn fill_intensity(fill: usize, row: usize, col: usize, x: f64, y: f64) -> f64 {
    const LO: f64 = 0.45;
    const HI: f64 = 0.75;
    match fill {
        0 => 0.6,
        1 => {
            if col % 4 < 2 {
                HI
            } else {
                LO
            }
        }
        2 => {
            if row % 4 < 2 {
                HI
            } else {
                LO
            }
        }
        3 => {
            if (row / 2 + col / 2) % 2 == 0 {
                HI
            } else {
                LO
            }
        }
        4 => {
            let on = (1..=2).contains(&(row % 4)) && (1..=2).contains(&(col % 4));
            if on {
                HI
            } else {
                0.5
            }
        }
        5 => {
            if (row + col) % 4 < 2 {
                HI
            } else {
                LO
            }
        }
        6 => {
            let d = (x * x + y * y).sqrt();
            LO + (HI - LO) * (1.0 - (d / 10.0).min(1.0))
        }
        7 => {
            let d = (x * x + y * y).sqrt();
            if (d / 2.5).floor() as i64 % 2 == 0 {
                HI
            } else {
                LO
            }
        }
        _ => unreachable!("fill index out of library range"),
    }
}

/// Class to (shape, fill) mapping. The fill index is decorrelated from
/// the shape index so small K still spans distinct fill patterns; the map
/// stays a bijection onto the 64-glyph library.
pub fn glyph_of(class_id: usize) -> (usize, usize) {
    let shape = class_id % N_SHAPES;
    let fill = (shape * 3 + class_id / N_SHAPES) % N_SHAPES;
    (shape, fill)
}

/// Renders one clean (domain-0 style) glyph image. Pure in the seed.
pub fn render_glyph(class_id: usize, shape_hw: (usize, usize), seed: u64) -> Vec<f32> {
    let (h, w) = shape_hw;
    let (shape_idx, fill) = glyph_of(class_id);
    let shape = SHAPES[shape_idx];
    let mut r = rng::rng(seed, "glyph", &[]);
    use rand::Rng;
    let cx = w as f64 / 2.0 + r.gen_range(-1.5..=1.5);
    let cy = h as f64 / 2.0 + r.gen_range(-1.5..=1.5);
    let scale = r.gen_range(0.92..=1.0) * h as f64 / 32.0;

    let mut img = vec![0f32; 3 * h * w];
    for row in 0..h {
        for col in 0..w {
            let x = (col as f64 + 0.5 - cx) / scale;
            let y = (row as f64 + 0.5 - cy) / scale;
            let intensity = if shape.contains(x, y) {
                fill_intensity(fill, row, col, x, y)
            } else {
                BACKGROUND
            };
            for c in 0..3 {
                img[c * h * w + row * w + col] = (intensity * CHANNEL_GAIN[c]) as f32;
            }
        }
    }
    img
}

/// Photometric covariate shift. Domain 0 is the identity; domain 1
/// permutes channels, brightens by +0.15, adds seeded Gaussian noise
/// (sigma 0.05), and clamps to `[0, 1]`.
pub fn apply_domain_transform(
    image: &[f32],
    shape_hw: (usize, usize),
    domain_id: u8,
    seed: u64,
) -> Result<Vec<f32>> {
    let (h, w) = shape_hw;
    let plane = h * w;
    if image.len() != 3 * plane {
        return Err(Error::Invalid(format!(
            "image length {} does not match 3x{h}x{w}",
            image.len()
        )));
    }
    match domain_id {
        0 => Ok(image.to_vec()),
        1 => {
            let mut r = rng::rng(seed, "domain-transform", &[]);
            // one noise draw per pixel location, shared by all channels
            let noise: Vec<f64> = (0..plane).map(|_| NOISE_SIGMA * rng::normal(&mut r)).collect();
            let mut out = vec![0f32; image.len()];
            for c in 0..3 {
                let src = (c + 1) % 3;
                for p in 0..plane {
                    let v = image[src * plane + p] as f64 + BRIGHTNESS_SHIFT + noise[p];
                    out[c * plane + p] = v.clamp(0.0, 1.0) as f32;
                }
            }
            Ok(out)
        }
        d => Err(Error::Invalid(format!("unknown domain id {d}"))),
    }
}

// ---- dataset assembly -------------------------------------------------

fn validate_gen(gen: &GenConfig) -> Result<()> {
    if gen.k < 2 || gen.k % 2 != 0 {
        return Err(Error::Config(format!("K = {} must be even and >= 2", gen.k)));
    }
    if gen.k > GLYPH_LIBRARY_SIZE {
        return Err(Error::Config(format!(
            "K = {} exceeds the {GLYPH_LIBRARY_SIZE}-glyph library",
            gen.k
        )));
    }
    if gen.n_per_class_per_domain < 4 {
        return Err(Error::Config(
            "need at least 4 samples per class per domain".into(),
        ));
    }
    let [c, h, w] = gen.image_shape;
    if c != 3 || h != w || h % 4 != 0 || h < 8 {
        return Err(Error::Config(format!(
            "image shape [{c}, {h}, {w}] must be [3, H, H] with H >= 8 divisible by 4"
        )));
    }
    Ok(())
}

fn blob_header_len(rank: usize) -> u64 {
    4 + 3 + 8 * rank as u64
}

/// Generates the full dataset. Deterministic: the same `(gen, split)`
/// yields byte-identical images and manifest.
pub fn make_dataset(gen: &GenConfig, split: &SplitSpec, name: &str) -> Result<Dataset> {
    validate_gen(gen)?;
    split.validate(gen.k)?;
    let [_, h, w] = gen.image_shape;
    let n = gen.n_per_class_per_domain;
    let per_image = 3 * h * w;

    let mut images = Vec::with_capacity(gen.k * n * 2);
    let mut records = Vec::with_capacity(gen.k * n * 2);
    let mut sample_id: u64 = 0;
    for class_id in 0..gen.k {
        for domain_id in 0..2u8 {
            for i in 0..n {
                let gseed = rng::derive(
                    gen.seed,
                    "render",
                    &[class_id as u64, domain_id as u64, i as u64],
                );
                let clean = render_glyph(class_id, (h, w), gseed);
                let tseed = rng::derive(
                    gen.seed,
                    "shift",
                    &[class_id as u64, domain_id as u64, i as u64],
                );
                let img = apply_domain_transform(&clean, (h, w), domain_id, tseed)?;
                let offset = blob_header_len(4) + sample_id * (per_image as u64) * 4;
                records.push(RecordMeta {
                    sample_id,
                    class_id,
                    domain_id,
                    is_labelled: false,
                    tensor_file_offset: offset,
                });
                images.push(img);
                sample_id += 1;
            }
        }
    }

    let mut manifest = DatasetManifest {
        dataset_name: name.to_string(),
        k: gen.k,
        image_shape: gen.image_shape,
        split_spec: split.clone(),
        records,
        generator_seed: gen.seed,
    };
    let (dl, _du) = split_ids(&manifest, split)?;
    for id in dl {
        manifest.records[id as usize].is_labelled = true;
    }
    debug_assert!(manifest
        .records
        .iter()
        .all(|r| !r.is_labelled || (r.domain_id == 0 && split.is_base(r.class_id))));
    Ok(Dataset { manifest, images })
}

/// Computes the labelled/unlabelled partition from a manifest: the lowest
/// `floor(fraction * count)` domain-0 sample ids of each base class are
/// labelled (at least one per base class), everything else is unlabelled.
pub fn split_ids(manifest: &DatasetManifest, split: &SplitSpec) -> Result<(Vec<u64>, Vec<u64>)> {
    split.validate(manifest.k)?;
    let mut labelled = Vec::new();
    for &base in &split.base_classes {
        let mut ids: Vec<u64> = manifest
            .records
            .iter()
            .filter(|r| r.class_id == base && r.domain_id == 0)
            .map(|r| r.sample_id)
            .collect();
        if ids.is_empty() {
            return Err(Error::Invalid(format!(
                "base class {base} has no domain-0 samples"
            )));
        }
        ids.sort_unstable();
        let take = ((split.labelled_fraction_per_base_class * ids.len() as f64).floor() as usize)
            .max(1)
            .min(ids.len());
        labelled.extend_from_slice(&ids[..take]);
    }
    labelled.sort_unstable();
    let unlabelled: Vec<u64> = manifest
        .records
        .iter()
        .map(|r| r.sample_id)
        .filter(|id| labelled.binary_search(id).is_err())
        .collect();
    Ok((labelled, unlabelled))
}

// ---- persistence ------------------------------------------------------

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.gcdt";

pub fn persist(dataset: &Dataset, dir: &std::path::Path) -> Result<()> {
    let [c, h, w] = dataset.manifest.image_shape;
    let n = dataset.images.len();
    let mut data = Vec::with_capacity(n * c * h * w);
    for img in &dataset.images {
        data.extend(img.iter().map(|&x| x as f64));
    }
    let tensor = Tensor::f32(vec![n as u64, c as u64, h as u64, w as u64], data);
    blob::write_file_atomic(&dir.join(IMAGES_FILE), |f| blob::write_tensor(f, &tensor))?;
    let json = serde_json::to_vec_pretty(&dataset.manifest)?;
    blob::write_file_atomic(&dir.join(MANIFEST_FILE), |f| {
        f.write_all(&json)?;
        Ok(())
    })?;
    Ok(())
}

pub fn load(dir: &std::path::Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(dir.join(IMAGES_FILE))?);
    let tensor = blob::read_tensor(&mut f)?;
    if tensor.dtype != blob::Dtype::F32 {
        return Err(Error::BadDtype(tensor.dtype as u8));
    }
    let [c, h, w] = manifest.image_shape;
    let want = vec![manifest.records.len() as u64, c as u64, h as u64, w as u64];
    if tensor.dims != want {
        return Err(Error::InconsistentManifest(format!(
            "manifest describes dims {want:?}, blob holds {:?}",
            tensor.dims
        )));
    }
    let per = c * h * w;
    let images = (0..manifest.records.len())
        .map(|i| {
            tensor.data[i * per..(i + 1) * per]
                .iter()
                .map(|&x| x as f32)
                .collect()
        })
        .collect();
    Ok(Dataset { manifest, images })
}

// ---- training-view augmentation ----------------------------------------

/// Seeded training augmentation: shift by up to 2 px with zero padding,
/// horizontal flip, brightness jitter within +-0.1, clamped. The stream is
/// keyed by (sample, view, epoch) so views are stable across replays.
pub fn augment_view(
    image: &[f32],
    shape_hw: (usize, usize),
    base_seed: u64,
    sample_id: u64,
    view: u64,
    epoch: u64,
) -> Vec<f64> {
    use rand::Rng;
    let (h, w) = shape_hw;
    let plane = h * w;
    let mut r = rng::rng(base_seed, "augment", &[sample_id, view, epoch]);
    let max_shift = 2.min(h as i64 / 8);
    let dx = r.gen_range(-max_shift..=max_shift);
    let dy = r.gen_range(-max_shift..=max_shift);
    let flip = r.gen_bool(0.5);
    let delta: f64 = r.gen_range(-0.1..=0.1);

    let mut out = vec![0f64; image.len()];
    for c in 0..3 {
        for row in 0..h {
            for col in 0..w {
                let src_col = if flip { w - 1 - col } else { col };
                let sr = row as i64 + dy;
                let sc = src_col as i64 + dx;
                let v = if sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64 {
                    image[c * plane + sr as usize * w + sc as usize] as f64
                } else {
                    0.0
                };
                out[c * plane + row * w + col] = (v + delta).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Grayscale view (channel mean), `[H*W]`.
pub fn grayscale(image: &[f32], shape_hw: (usize, usize)) -> Vec<f64> {
    let (h, w) = shape_hw;
    let plane = h * w;
    (0..plane)
        .map(|p| (image[p] as f64 + image[plane + p] as f64 + image[2 * plane + p] as f64) / 3.0)
        .collect()
}
