//! ShapeSet: a deterministic synthetic 16x16 grayscale classification
//! dataset with 8 parametric glyph classes, used for training surrogates and
//! targets and for attack evaluation.
//!
//! Classes: 0 horizontal bar, 1 vertical bar, 2 diagonal, 3 cross,
//! 4 filled disk, 5 ring, 6 square outline, 7 checker.
//!
//! Each instance is the class glyph translated by up to `max_translation`
//! pixels, plus Gaussian noise, clipped to [0,1] and rounded to f32 (the
//! stored precision), so in-memory data compares bit-equal with a saved and
//! reloaded copy.

use crate::container::{self, Header};
use crate::error::{Error, Result};
use crate::rng::{stream_key, Rng};
use crate::tensor::Tensor;
use std::ops::Range;
use std::path::Path;

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 8;

#[derive(Debug, Clone)]
pub struct ShapeSetConfig {
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub max_translation: usize,
    pub seed: u64,
}

impl Default for ShapeSetConfig {
    fn default() -> Self {
        ShapeSetConfig {
            samples_per_class: 640,
            noise_sigma: 0.1,
            max_translation: 2,
            seed: 0,
        }
    }
}

impl ShapeSetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class < 1 {
            return Err(Error::InvalidConfig("samples_per_class must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if self.max_translation > 3 {
            return Err(Error::InvalidConfig("max_translation must be <= 3".into()));
        }
        Ok(())
    }
}

/// Image classification dataset stored densely: `images` holds `len * 256`
/// pixel values in [0,1], sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<u8>,
    targets: Option<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn target(&self, i: usize) -> Option<u8> {
        self.targets.as_ref().map(|t| t[i])
    }

    pub fn has_targets(&self) -> bool {
        self.targets.is_some()
    }

    /// Stacks samples `range` into a `[n,1,16,16]` tensor.
    pub fn image_batch(&self, range: Range<usize>) -> Tensor {
        let n = range.len();
        let data = self.images[range.start * PIXELS..range.end * PIXELS].to_vec();
        Tensor::new(vec![n, 1, SIDE, SIDE], data).expect("dense layout")
    }

    /// Stacks arbitrary sample indices into a `[n,1,16,16]` tensor.
    pub fn image_batch_indices(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * PIXELS);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![idx.len(), 1, SIDE, SIDE], data).expect("dense layout")
    }

    /// Per-class split: the first `train_per_class` instances of each class
    /// go to the training set, the rest to the test set. Requires the
    /// class-major layout produced by [`generate_shapeset`].
    pub fn split_per_class(&self, train_per_class: usize) -> Result<(Dataset, Dataset)> {
        let spc = self.len() / CLASSES;
        if self.len() % CLASSES != 0 || train_per_class > spc {
            return Err(Error::InvalidConfig(format!(
                "cannot split {} samples into {train_per_class} train per class",
                self.len()
            )));
        }
        let mut tr = DatasetBuilder::new(self.targets.is_some());
        let mut te = DatasetBuilder::new(self.targets.is_some());
        for c in 0..CLASSES {
            for i in 0..spc {
                let idx = c * spc + i;
                let dst = if i < train_per_class { &mut tr } else { &mut te };
                dst.push(self.image(idx), self.labels[idx], self.target(idx));
            }
        }
        Ok((tr.build(), te.build()))
    }

    /// New dataset containing the given samples, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut b = DatasetBuilder::new(self.targets.is_some());
        for &i in idx {
            b.push(self.image(i), self.labels[i], self.target(i));
        }
        b.build()
    }

    pub fn class_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

struct DatasetBuilder {
    images: Vec<f64>,
    labels: Vec<u8>,
    targets: Option<Vec<u8>>,
}

impl DatasetBuilder {
    fn new(with_targets: bool) -> Self {
        DatasetBuilder {
            images: Vec::new(),
            labels: Vec::new(),
            targets: if with_targets { Some(Vec::new()) } else { None },
        }
    }

    fn push(&mut self, image: &[f64], label: u8, target: Option<u8>) {
        self.images.extend_from_slice(image);
        self.labels.push(label);
        if let (Some(ts), Some(t)) = (&mut self.targets, target) {
            ts.push(t);
        }
    }

    fn build(self) -> Dataset {
        Dataset {
            images: self.images,
            labels: self.labels,
            targets: self.targets,
        }
    }
}

/// Paints the class glyph into a zeroed canvas at integer offset (dy, dx).
fn draw_glyph(class: usize, dy: i64, dx: i64, out: &mut [f64]) {
    let mut set = |y: i64, x: i64, v: f64| {
        let (y, x) = (y + dy, x + dx);
        if (0..SIDE as i64).contains(&y) && (0..SIDE as i64).contains(&x) {
            out[y as usize * SIDE + x as usize] = v;
        }
    };
    let c = (SIDE / 2) as i64; // 8
    match class {
        // horizontal bar
        0 => {
            for y in c - 1..=c {
                for x in 2..SIDE as i64 - 2 {
                    set(y, x, 1.0);
                }
            }
        }
        // vertical bar
        1 => {
            for y in 2..SIDE as i64 - 2 {
                for x in c - 1..=c {
                    set(y, x, 1.0);
                }
            }
        }
        // main diagonal, two pixels wide
        2 => {
            for i in 1..SIDE as i64 - 1 {
                set(i, i, 1.0);
                set(i, i - 1, 1.0);
            }
        }
        // cross: horizontal plus vertical bar
        3 => {
            for y in c - 1..=c {
                for x in 2..SIDE as i64 - 2 {
                    set(y, x, 1.0);
                }
            }
            for y in 2..SIDE as i64 - 2 {
                for x in c - 1..=c {
                    set(y, x, 1.0);
                }
            }
        }
        // filled disk, radius 4 around the half-pixel center
        4 => {
            for y in 0..SIDE as i64 {
                for x in 0..SIDE as i64 {
                    let (fy, fx) = (y as f64 - 7.5, x as f64 - 7.5);
                    if fy * fy + fx * fx <= 16.0 {
                        set(y, x, 1.0);
                    }
                }
            }
        }
        // ring: radius in (3, 5]
        5 => {
            for y in 0..SIDE as i64 {
                for x in 0..SIDE as i64 {
                    let (fy, fx) = (y as f64 - 7.5, x as f64 - 7.5);
                    let r2 = fy * fy + fx * fx;
                    if r2 <= 25.0 && r2 > 9.0 {
                        set(y, x, 1.0);
                    }
                }
            }
        }
        // square outline from (3,3) to (12,12), one pixel thick
        6 => {
            for i in 3..=12i64 {
                set(3, i, 1.0);
                set(12, i, 1.0);
                set(i, 3, 1.0);
                set(i, 12, 1.0);
            }
        }
        // checkerboard of 2x2 blocks
        7 => {
            for y in 0..SIDE as i64 {
                for x in 0..SIDE as i64 {
                    if ((y / 2) + (x / 2)) % 2 == 0 {
                        set(y, x, 1.0);
                    }
                }
            }
        }
        _ => unreachable!("class < 8"),
    }
}

/// Generates the dataset: exact class balance, per-sample RNG substreams,
/// values clipped to [0,1] and rounded to f32 grid.
pub fn generate_shapeset(config: &ShapeSetConfig) -> Result<Dataset> {
    config.validate()?;
    let spc = config.samples_per_class;
    let mut images = Vec::with_capacity(CLASSES * spc * PIXELS);
    let mut labels = Vec::with_capacity(CLASSES * spc);
    for class in 0..CLASSES {
        for inst in 0..spc {
            let mut rng = Rng::new(stream_key(&[config.seed, class as u64, inst as u64]));
            let t = config.max_translation as i64;
            let (dy, dx) = if t > 0 {
                (rng.range_inclusive(-t, t), rng.range_inclusive(-t, t))
            } else {
                (0, 0)
            };
            let mut img = vec![0.0f64; PIXELS];
            draw_glyph(class, dy, dx, &mut img);
            if config.noise_sigma > 0.0 {
                for p in &mut img {
                    *p += config.noise_sigma * rng.normal();
                }
            }
            for p in &mut img {
                *p = p.clamp(0.0, 1.0) as f32 as f64;
            }
            images.extend_from_slice(&img);
            labels.push(class as u8);
        }
    }
    Ok(Dataset {
        images,
        labels,
        targets: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    NextClass,
    RandomExcludingTrue,
}

impl TargetRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "next_class" => Ok(TargetRule::NextClass),
            "random_excluding_true" => Ok(TargetRule::RandomExcludingTrue),
            other => Err(Error::InvalidConfig(format!("unknown target rule `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetRule::NextClass => "next_class",
            TargetRule::RandomExcludingTrue => "random_excluding_true",
        }
    }
}

/// Assigns targeted labels. `next_class`: y_tar = (y+1) mod 8.
/// `random_excluding_true`: uniform over the 7 other classes, per-sample
/// substream of `seed`.
pub fn assign_targets(data: &Dataset, rule: TargetRule, seed: u64) -> Dataset {
    let targets: Vec<u8> = data
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| match rule {
            TargetRule::NextClass => (y + 1) % CLASSES as u8,
            TargetRule::RandomExcludingTrue => {
                let mut rng = Rng::new(stream_key(&[seed, i as u64]));
                let t = rng.below(CLASSES as u64 - 1) as u8;
                if t >= y {
                    t + 1
                } else {
                    t
                }
            }
        })
        .collect();
    Dataset {
        images: data.images.clone(),
        labels: data.labels.clone(),
        targets: Some(targets),
    }
}

/// Writes the dataset container (magic `RPDS`): f32 images then u8 labels
/// then, if present, u8 targets.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut header = Header::new();
    header.push("count", data.len().to_string());
    header.push("shape", format!("1,{SIDE},{SIDE}"));
    header.push("has_targets", if data.has_targets() { "1" } else { "0" });
    let mut payload = container::f32_bytes(&data.images);
    payload.extend_from_slice(&data.labels);
    if let Some(t) = &data.targets {
        payload.extend_from_slice(t);
    }
    container::write_container(path, b"RPDS", &header, &payload)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, payload) = container::read_container(path, b"RPDS")?;
    let count: usize = header
        .require("count")?
        .parse()
        .map_err(|_| Error::Format("bad count".into()))?;
    if header.require("shape")? != format!("1,{SIDE},{SIDE}") {
        return Err(Error::Format("unsupported image shape".into()));
    }
    let has_targets = header.require("has_targets")? == "1";
    let img_bytes = count * PIXELS * 4;
    let expected = img_bytes + count + if has_targets { count } else { 0 };
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let images = container::f32_values(&payload[..img_bytes])?;
    let labels = payload[img_bytes..img_bytes + count].to_vec();
    if labels.iter().any(|&l| l as usize >= CLASSES) {
        return Err(Error::Format("label out of range".into()));
    }
    let targets = if has_targets {
        let t = payload[img_bytes + count..].to_vec();
        if t.iter().any(|&l| l as usize >= CLASSES) {
            return Err(Error::Format("target out of range".into()));
        }
        Some(t)
    } else {
        None
    };
    Ok(Dataset {
        images,
        labels,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ShapeSetConfig {
            samples_per_class: 4,
            ..Default::default()
        };
        let a = generate_shapeset(&cfg).unwrap();
        let b = generate_shapeset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_config_gives_identical_instances_within_class() {
        let cfg = ShapeSetConfig {
            samples_per_class: 3,
            noise_sigma: 0.0,
            max_translation: 0,
            seed: 5,
        };
        let d = generate_shapeset(&cfg).unwrap();
        for c in 0..CLASSES {
            let first = d.image(c * 3);
            for i in 1..3 {
                assert_eq!(d.image(c * 3 + i), first, "class {c}");
            }
        }
    }

    #[test]
    fn class_balance_is_exact() {
        let cfg = ShapeSetConfig {
            samples_per_class: 17,
            ..Default::default()
        };
        let d = generate_shapeset(&cfg).unwrap();
        assert_eq!(d.class_histogram(), [17; CLASSES]);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let cfg = ShapeSetConfig {
            samples_per_class: 8,
            noise_sigma: 0.5,
            ..Default::default()
        };
        let d = generate_shapeset(&cfg).unwrap();
        for i in 0..d.len() {
            assert!(d.image(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn next_class_rule_wraps() {
        let cfg = ShapeSetConfig {
            samples_per_class: 1,
            ..Default::default()
        };
        let d = generate_shapeset(&cfg).unwrap();
        let t = assign_targets(&d, TargetRule::NextClass, 0);
        for i in 0..t.len() {
            let y = t.label(i);
            assert_eq!(t.target(i).unwrap(), (y + 1) % 8);
        }
        // y=3 -> 4 and y=7 -> 0 are instances of the rule above.
        assert_eq!(t.target(3).unwrap(), 4);
        assert_eq!(t.target(7).unwrap(), 0);
    }

    #[test]
    fn random_rule_never_hits_true_label() {
        let cfg = ShapeSetConfig {
            samples_per_class: 64,
            ..Default::default()
        };
        let d = generate_shapeset(&cfg).unwrap();
        let t = assign_targets(&d, TargetRule::RandomExcludingTrue, 9);
        for i in 0..t.len() {
            assert_ne!(t.target(i).unwrap(), t.label(i));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ShapeSetConfig::default();
        cfg.samples_per_class = 0;
        assert!(generate_shapeset(&cfg).is_err());
        cfg = ShapeSetConfig::default();
        cfg.max_translation = 4;
        assert!(generate_shapeset(&cfg).is_err());
        cfg = ShapeSetConfig::default();
        cfg.noise_sigma = -0.1;
        assert!(generate_shapeset(&cfg).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rpds");
        let cfg = ShapeSetConfig {
            samples_per_class: 6,
            ..Default::default()
        };
        let d = assign_targets(&generate_shapeset(&cfg).unwrap(), TargetRule::NextClass, 0);
        save_dataset(&d, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(d, loaded);
    }

    #[test]
    fn split_keeps_balance() {
        let cfg = ShapeSetConfig {
            samples_per_class: 10,
            ..Default::default()
        };
        let d = generate_shapeset(&cfg).unwrap();
        let (tr, te) = d.split_per_class(8).unwrap();
        assert_eq!(tr.class_histogram(), [8; CLASSES]);
        assert_eq!(te.class_histogram(), [2; CLASSES]);
    }
}
