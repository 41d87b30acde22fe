//! Dataset ingestion (CIFAR binary records), the flip/crop augmentation
//! pair, and synthetic spatial tasks for fast trend tests.
//!
//! Images are stored as C x H x W reals in [0,1]; per-channel
//! standardization is applied when batches are assembled, so raw records
//! round-trip bit-exactly.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::RngCore;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::Elem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// C x H x W pixel values in [0,1].
    pub pixels: Vec<Elem>,
    pub shape: [usize; 3],
    pub label: usize,
    pub split: Split,
}

impl LabeledImage {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Per-channel standardization constants, kept in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<Elem>,
    pub std: Vec<Elem>,
}

pub const CIFAR10_MEAN: [Elem; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [Elem; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR100_MEAN: [Elem; 3] = [0.5071, 0.4865, 0.4409];
pub const CIFAR100_STD: [Elem; 3] = [0.2673, 0.2564, 0.2762];
/// Synthetic tasks map [0,1] onto [-1,1].
pub const SYNTHETIC_MEAN: Elem = 0.5;
pub const SYNTHETIC_STD: Elem = 0.5;

impl Normalization {
    pub fn cifar10() -> Self {
        Normalization { mean: CIFAR10_MEAN.to_vec(), std: CIFAR10_STD.to_vec() }
    }

    pub fn cifar100() -> Self {
        Normalization { mean: CIFAR100_MEAN.to_vec(), std: CIFAR100_STD.to_vec() }
    }

    pub fn synthetic(channels: usize) -> Self {
        Normalization {
            mean: vec![SYNTHETIC_MEAN; channels],
            std: vec![SYNTHETIC_STD; channels],
        }
    }

    /// (x - mean) / std, channel by channel, in place.
    pub fn standardize(&self, pixels: &mut [Elem], channels: usize) {
        let per = pixels.len() / channels;
        for c in 0..channels {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut pixels[c * per..(c + 1) * per] {
                *v = (*v - m) / s;
            }
        }
    }

    /// Inverse of [`Normalization::standardize`].
    pub fn unstandardize(&self, pixels: &mut [Elem], channels: usize) {
        let per = pixels.len() / channels;
        for c in 0..channels {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut pixels[c * per..(c + 1) * per] {
                *v = *v * s + m;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub classes: usize,
    pub shape: [usize; 3],
    pub norm: Normalization,
}

// ---------------------------------------------------------------------------
// CIFAR binary records

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    /// CIFAR-100 with fine labels.
    Cifar100Fine,
}

impl CifarVariant {
    fn label_bytes(&self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100Fine => 2,
        }
    }

    fn classes(&self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100Fine => 100,
        }
    }

    fn train_files(&self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100Fine => vec!["train.bin"],
        }
    }

    fn test_file(&self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100Fine => "test.bin",
        }
    }
}

/// Read a file of fixed-length records: `label_bytes` of labels followed by
/// C*H*W pixel bytes. The last label byte is the (fine) label. Pixels scale
/// to [0,1] by /255.
pub fn read_records(
    path: &Path,
    shape: [usize; 3],
    label_bytes: usize,
    split: Split,
) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path)?;
    let pixel_len: usize = shape.iter().product();
    let record_len = label_bytes + pixel_len;
    if bytes.len() % record_len != 0 {
        let complete = bytes.len() / record_len;
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            offset: (complete * record_len) as u64,
            detail: format!(
                "truncated record: file is {} bytes, record length {}",
                bytes.len(),
                record_len
            ),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / record_len);
    for rec in bytes.chunks_exact(record_len) {
        let label = rec[label_bytes - 1] as usize;
        let pixels: Vec<Elem> = rec[label_bytes..].iter().map(|&b| b as Elem / 255.0).collect();
        out.push(LabeledImage { pixels, shape, label, split });
    }
    Ok(out)
}

/// Write images back to the same record layout; pixels are rounded to the
/// nearest byte, so records produced from byte sources round-trip exactly.
pub fn write_records(path: &Path, images: &[LabeledImage], label_bytes: usize) -> Result<()> {
    let mut buf = Vec::new();
    for img in images {
        match label_bytes {
            1 => buf.push(img.label as u8),
            2 => {
                buf.push(0); // coarse label slot, unused
                buf.push(img.label as u8);
            }
            other => {
                return Err(Error::InvalidArg {
                    op: "write_records",
                    detail: format!("label_bytes must be 1 or 2, got {}", other),
                })
            }
        }
        buf.extend(img.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Load the train/test streams of a CIFAR directory, checking labels and
/// applying the [0,1] scaling; standardization constants ride along in the
/// returned dataset.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<Dataset> {
    let shape = [3usize, 32, 32];
    let mut train = Vec::new();
    for file in variant.train_files() {
        train.extend(read_records(
            &dir.join(file),
            shape,
            variant.label_bytes(),
            Split::Train,
        )?);
    }
    let test = read_records(&dir.join(variant.test_file()), shape, variant.label_bytes(), Split::Test)?;
    let classes = variant.classes();
    for img in train.iter().chain(&test) {
        if img.label >= classes {
            return Err(Error::DataFormat {
                path: dir.display().to_string(),
                offset: 0,
                detail: format!("label {} out of range for {} classes", img.label, classes),
            });
        }
    }
    let norm = match variant {
        CifarVariant::Cifar10 => Normalization::cifar10(),
        CifarVariant::Cifar100Fine => Normalization::cifar100(),
    };
    Ok(Dataset { train, test, classes, shape, norm })
}

// ---------------------------------------------------------------------------
// Augmentation

/// Horizontal flip.
pub fn flip_horizontal(img: &LabeledImage) -> LabeledImage {
    let [c, h, w] = img.shape;
    let mut pixels = img.pixels.clone();
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            pixels[row..row + w].reverse();
        }
    }
    LabeledImage { pixels, ..img.clone() }
}

pub const CROP_PAD: usize = 4;

/// Crop an H x W window out of the zero-padded image at offset (oy, ox);
/// offsets range over 0..=2*CROP_PAD and (CROP_PAD, CROP_PAD) recovers the
/// original image.
pub fn crop_padded(img: &LabeledImage, oy: usize, ox: usize) -> LabeledImage {
    let [c, h, w] = img.shape;
    let pad = CROP_PAD;
    let mut pixels = vec![0.0; img.pixels.len()];
    for ch in 0..c {
        for y in 0..h {
            let src_y = y as isize + oy as isize - pad as isize;
            if src_y < 0 || src_y >= h as isize {
                continue;
            }
            for x in 0..w {
                let src_x = x as isize + ox as isize - pad as isize;
                if src_x < 0 || src_x >= w as isize {
                    continue;
                }
                pixels[(ch * h + y) * w + x] =
                    img.pixels[(ch * h + src_y as usize) * w + src_x as usize];
            }
        }
    }
    LabeledImage { pixels, ..img.clone() }
}

/// When enabled: flip with probability 1/2, then zero-pad by [`CROP_PAD`]
/// on each side and crop a random window back to the original size.
/// Disabled augmentation is bit-identity.
pub fn augment(img: &LabeledImage, rng: &mut rand_chacha::ChaCha12Rng, enabled: bool) -> LabeledImage {
    if !enabled {
        return img.clone();
    }
    let flipped = if rng.next_u32() & 1 == 1 {
        flip_horizontal(img)
    } else {
        img.clone()
    };
    let oy = rng::index(rng, 2 * CROP_PAD + 1);
    let ox = rng::index(rng, 2 * CROP_PAD + 1);
    crop_padded(&flipped, oy, ox)
}

// ---------------------------------------------------------------------------
// Synthetic spatial tasks

/// 3x3 glyph bitmaps with distinct shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Plus,
    Ring,
    Solid,
    Diag,
}

impl Glyph {
    pub fn bitmap(&self) -> [[u8; 3]; 3] {
        match self {
            Glyph::Plus => [[0, 1, 0], [1, 1, 1], [0, 1, 0]],
            Glyph::Ring => [[1, 1, 1], [1, 0, 1], [1, 1, 1]],
            Glyph::Solid => [[1, 1, 1], [1, 1, 1], [1, 1, 1]],
            Glyph::Diag => [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        }
    }
}

/// What determines the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Class = which quadrant a fixed glyph sits in (4 classes). Labels are
    /// unrecoverable from any per-image pixel multiset.
    Position,
    /// Class = which glyph appears, anywhere (4 classes).
    Texture,
    /// Mixed: two texture classes (plus / ring anywhere) and two position
    /// classes (solid glyph top-left / bottom-right).
    PositionTexture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpatialTask {
    pub seed: u64,
    pub size: usize,
    pub kind: TaskKind,
    /// Uniform background noise amplitude.
    pub noise: Elem,
}

impl SyntheticSpatialTask {
    pub fn new(seed: u64, size: usize, kind: TaskKind) -> Self {
        SyntheticSpatialTask { seed, size, kind, noise: 0.2 }
    }

    pub fn classes(&self) -> usize {
        4
    }

    pub fn shape(&self) -> [usize; 3] {
        [1, self.size, self.size]
    }
}

fn stamp(pixels: &mut [Elem], size: usize, glyph: Glyph, cy: usize, cx: usize) {
    let bm = glyph.bitmap();
    for (dy, row) in bm.iter().enumerate() {
        for (dx, &on) in row.iter().enumerate() {
            if on == 1 {
                let y = cy + dy - 1;
                let x = cx + dx - 1;
                pixels[y * size + x] = 1.0;
            }
        }
    }
}

/// Center position uniformly inside a quadrant, one glyph-radius away from
/// every image border and the quadrant seam.
fn quadrant_center(
    rng: &mut rand_chacha::ChaCha12Rng,
    size: usize,
    top: bool,
    left: bool,
) -> (usize, usize) {
    let half = size / 2;
    let lo = 1;
    let hi = half - 1; // exclusive
    let cy = lo + rng::index(rng, hi - lo);
    let cx = lo + rng::index(rng, hi - lo);
    (
        if top { cy } else { cy + half },
        if left { cx } else { cx + half },
    )
}

fn anywhere_center(rng: &mut rand_chacha::ChaCha12Rng, size: usize) -> (usize, usize) {
    (
        1 + rng::index(rng, size - 2),
        1 + rng::index(rng, size - 2),
    )
}

/// Generate `n` reproducible, class-balanced images for one split.
pub fn gen_synthetic(task: &SyntheticSpatialTask, n: usize, split: Split) -> Result<Vec<LabeledImage>> {
    if n == 0 {
        return Err(Error::InvalidArg {
            op: "gen_synthetic",
            detail: "n must be positive".into(),
        });
    }
    if task.size < 8 {
        return Err(Error::InvalidArg {
            op: "gen_synthetic",
            detail: format!("image size {} too small for quadrant tasks", task.size),
        });
    }
    let size = task.size;
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    let classes = task.classes();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let mut rng = rng::stream(task.seed, Domain::Synthetic, &[split_tag, i as u64]);
        let mut pixels: Vec<Elem> = (0..size * size)
            .map(|_| task.noise * (rng.next_u32() as Elem / u32::MAX as Elem))
            .collect();
        match task.kind {
            TaskKind::Position => {
                let (top, left) = (label < 2, label % 2 == 0);
                let (cy, cx) = quadrant_center(&mut rng, size, top, left);
                stamp(&mut pixels, size, Glyph::Solid, cy, cx);
            }
            TaskKind::Texture => {
                let glyph = [Glyph::Plus, Glyph::Ring, Glyph::Solid, Glyph::Diag][label];
                let (cy, cx) = anywhere_center(&mut rng, size);
                stamp(&mut pixels, size, glyph, cy, cx);
            }
            TaskKind::PositionTexture => match label {
                0 => {
                    let (cy, cx) = anywhere_center(&mut rng, size);
                    stamp(&mut pixels, size, Glyph::Plus, cy, cx);
                }
                1 => {
                    let (cy, cx) = anywhere_center(&mut rng, size);
                    stamp(&mut pixels, size, Glyph::Ring, cy, cx);
                }
                2 => {
                    let (cy, cx) = quadrant_center(&mut rng, size, true, true);
                    stamp(&mut pixels, size, Glyph::Solid, cy, cx);
                }
                _ => {
                    let (cy, cx) = quadrant_center(&mut rng, size, false, false);
                    stamp(&mut pixels, size, Glyph::Solid, cy, cx);
                }
            },
        }
        out.push(LabeledImage {
            pixels,
            shape: task.shape(),
            label,
            split,
        });
    }
    Ok(out)
}

/// Train/test dataset for a synthetic task.
pub fn synthetic_dataset(task: &SyntheticSpatialTask, n_train: usize, n_test: usize) -> Result<Dataset> {
    Ok(Dataset {
        train: gen_synthetic(task, n_train, Split::Train)?,
        test: gen_synthetic(task, n_test, Split::Test)?,
        classes: task.classes(),
        shape: task.shape(),
        norm: Normalization::synthetic(1),
    })
}

/// Count exact 3x3 template matches of `glyph` in a raw [0,1] image; the
/// analytic classifier for texture tasks picks the glyph with most matches.
pub fn count_glyph_matches(img: &LabeledImage, glyph: Glyph, threshold: Elem) -> usize {
    let [_, h, w] = img.shape;
    let bm = glyph.bitmap();
    let mut count = 0;
    for cy in 1..h - 1 {
        for cx in 1..w - 1 {
            let mut ok = true;
            'scan: for dy in 0..3 {
                for dx in 0..3 {
                    let v = img.pixels[(cy + dy - 1) * w + (cx + dx - 1)];
                    let want_on = bm[dy][dx] == 1;
                    if want_on != (v > threshold) {
                        ok = false;
                        break 'scan;
                    }
                }
            }
            if ok {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> LabeledImage {
        LabeledImage {
            pixels: (0..2 * 4 * 4).map(|i| (i as Elem) / 40.0).collect(),
            shape: [2, 4, 4],
            label: 1,
            split: Split::Train,
        }
    }

    #[test]
    fn standardize_round_trips() {
        let norm = Normalization { mean: vec![0.3, 0.6], std: vec![0.2, 0.4] };
        let img = sample_image();
        let mut p = img.pixels.clone();
        norm.standardize(&mut p, 2);
        norm.unstandardize(&mut p, 2);
        for (a, b) in p.iter().zip(&img.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_record_standardizes_to_the_constants() {
        let norm = Normalization::cifar100();
        let mut p = vec![0.0; 3 * 4];
        norm.standardize(&mut p, 3);
        for c in 0..3 {
            for v in &p[c * 4..(c + 1) * 4] {
                let expect = (0.0 - CIFAR100_MEAN[c]) / CIFAR100_STD[c];
                assert_eq!(*v, expect);
            }
        }
    }

    #[test]
    fn records_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.bin");
        let task = SyntheticSpatialTask::new(3, 8, TaskKind::Texture);
        let imgs = gen_synthetic(&task, 12, Split::Train).unwrap();
        // Quantize to bytes first so the on-disk format is authoritative.
        write_records(&path, &imgs, 2).unwrap();
        let back = read_records(&path, task.shape(), 2, Split::Train).unwrap();
        write_records(&path, &back, 2).unwrap();
        let again = read_records(&path, task.shape(), 2, Split::Train).unwrap();
        assert_eq!(back, again);
        assert_eq!(back.len(), imgs.len());
        for (a, b) in back.iter().zip(&imgs) {
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn truncated_file_reports_the_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 2 * 3074 + 100]).unwrap();
        match read_records(&path, [3, 32, 32], 2, Split::Train) {
            Err(Error::DataFormat { offset, .. }) => assert_eq!(offset, 2 * 3074),
            other => panic!("expected DataFormat error, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn cifar_layout_loads_and_checks_labels() {
        let dir = tempfile::tempdir().unwrap();
        // 4-record CIFAR-100 train/test pair, labels cycling.
        let mut train = Vec::new();
        for i in 0..4u8 {
            train.push(7); // coarse
            train.push(i); // fine
            train.extend(std::iter::repeat(128).take(3072));
        }
        std::fs::write(dir.path().join("train.bin"), &train).unwrap();
        std::fs::write(dir.path().join("test.bin"), &train).unwrap();
        let ds = load_cifar(dir.path(), CifarVariant::Cifar100Fine).unwrap();
        assert_eq!(ds.train.len(), 4);
        assert_eq!(ds.test.len(), 4);
        assert!(ds.train.iter().all(|img| img.label < 100));
        assert_eq!(ds.train[2].label, 2);
        assert_eq!(ds.train[0].pixels[0], 128.0 / 255.0);
    }

    #[test]
    fn augment_disabled_is_bit_identity() {
        let img = sample_image();
        let mut rng = rng::stream(1, Domain::Augment, &[0]);
        assert_eq!(augment(&img, &mut rng, false), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = sample_image();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn center_crop_undoes_padding() {
        let img = sample_image();
        assert_eq!(crop_padded(&img, CROP_PAD, CROP_PAD), img);
    }

    #[test]
    fn augment_preserves_label_and_shape() {
        let img = sample_image();
        let mut rng = rng::stream(5, Domain::Augment, &[1]);
        for _ in 0..10 {
            let out = augment(&img, &mut rng, true);
            assert_eq!(out.label, img.label);
            assert_eq!(out.shape, img.shape);
        }
    }

    #[test]
    fn same_seed_generates_identical_streams() {
        let task = SyntheticSpatialTask::new(11, 16, TaskKind::PositionTexture);
        let a = gen_synthetic(&task, 32, Split::Train).unwrap();
        let b = gen_synthetic(&task, 32, Split::Train).unwrap();
        assert_eq!(a, b);
        let t = gen_synthetic(&task, 32, Split::Test).unwrap();
        assert_ne!(a, t);
    }

    #[test]
    fn classes_are_balanced() {
        let task = SyntheticSpatialTask::new(0, 16, TaskKind::Texture);
        let imgs = gen_synthetic(&task, 40, Split::Train).unwrap();
        let mut counts = [0usize; 4];
        for img in &imgs {
            counts[img.label] += 1;
        }
        assert_eq!(counts, [10, 10, 10, 10]);
    }

    #[test]
    fn counting_classifier_solves_the_texture_task() {
        let task = SyntheticSpatialTask::new(21, 16, TaskKind::Texture);
        let imgs = gen_synthetic(&task, 200, Split::Test).unwrap();
        let glyphs = [Glyph::Plus, Glyph::Ring, Glyph::Solid, Glyph::Diag];
        let mut correct = 0;
        for img in &imgs {
            let counts: Vec<usize> = glyphs
                .iter()
                .map(|&g| count_glyph_matches(img, g, 0.5))
                .collect();
            let pred = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .map(|(i, _)| i)
                .unwrap();
            if pred == img.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / imgs.len() as f64;
        assert!(acc > 0.9, "counting classifier accuracy {}", acc);
    }

    #[test]
    fn position_labels_vanish_under_full_image_shuffle() {
        // The position task uses one glyph for all classes, so any pixel
        // multiset is class-independent by construction; spot-check that a
        // shuffled image's sorted pixels carry no systematic class signal by
        // comparing per-class sorted-pixel centroids.
        let task = SyntheticSpatialTask::new(13, 16, TaskKind::Position);
        let imgs = gen_synthetic(&task, 400, Split::Train).unwrap();
        let n_px = 256;
        let mut centroids = vec![vec![0.0f64; n_px]; 4];
        let mut counts = [0usize; 4];
        for img in &imgs {
            let mut sorted: Vec<Elem> = img.pixels.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (slot, v) in centroids[img.label].iter_mut().zip(&sorted) {
                *slot += *v as f64;
            }
            counts[img.label] += 1;
        }
        for (c, count) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= count as f64;
            }
        }
        // Max centroid separation across classes stays within noise scale.
        let mut max_gap = 0.0f64;
        for a in 0..4 {
            for b in a + 1..4 {
                let gap: f64 = centroids[a]
                    .iter()
                    .zip(&centroids[b])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                max_gap = max_gap.max(gap);
            }
        }
        assert!(max_gap < 0.05, "sorted-pixel centroids separate: {}", max_gap);
    }
}
