//! CIFAR-10/100 binary records, normalization, augmentation and minibatching.
//!
//! A CIFAR-10 record is one label byte followed by 3072 pixel bytes (1024 R,
//! 1024 G, 1024 B, each row-major 32×32). CIFAR-100 records carry a coarse
//! label byte before the fine label. Train files are `data_batch_1..5.bin`
//! (CIFAR-10) or `train.bin` (CIFAR-100); test files are `test_batch.bin` and
//! `test.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Real, Tensor4};

pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_BYTES: usize = 3 * PLANE;
pub const PAD: usize = 4;
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cifar10" | "cifar-10" => Some(DatasetKind::Cifar10),
            "cifar100" | "cifar-100" => Some(DatasetKind::Cifar100),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    pub fn label_bytes(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 1,
            DatasetKind::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (DatasetKind::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (DatasetKind::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (DatasetKind::Cifar100, Split::Train) => vec!["train.bin"],
            (DatasetKind::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }

    /// Directory name used by the official archives.
    fn archive_dir(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Cifar100 => "cifar-100-binary",
        }
    }
}

/// Decoded records of one split. `coarse` is kept only so CIFAR-100 files
/// can be written back byte for byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub coarse: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    fn extend(&mut self, other: Dataset) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        self.coarse.extend(other.coarse);
    }

    /// Encodes back into the on-disk record layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.kind.record_len());
        for i in 0..self.len() {
            if self.kind == DatasetKind::Cifar100 {
                out.push(self.coarse[i]);
            }
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    /// First `n` records.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            kind: self.kind,
            images: self.images[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            coarse: self.coarse[..n.min(self.coarse.len())].to_vec(),
        }
    }
}

/// Decodes a whole file's worth of records. Never panics on malformed input.
pub fn parse_records(bytes: &[u8], kind: DatasetKind) -> Result<Dataset> {
    let rec = kind.record_len();
    if bytes.is_empty() {
        return Err(Error::format("file holds no records"));
    }
    if bytes.len() % rec != 0 {
        return Err(Error::format(format!(
            "length {} is not a multiple of the {}-byte {} record ({} whole records, {} bytes left over)",
            bytes.len(),
            rec,
            kind.name(),
            bytes.len() / rec,
            bytes.len() % rec
        )));
    }
    let n = bytes.len() / rec;
    let mut ds = Dataset {
        kind,
        images: Vec::with_capacity(n * IMAGE_BYTES),
        labels: Vec::with_capacity(n),
        coarse: Vec::new(),
    };
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let (labels, pixels) = r.split_at(kind.label_bytes());
        let fine = labels[labels.len() - 1];
        if fine as usize >= kind.n_classes() {
            return Err(Error::format(format!(
                "record {i}: label {fine} out of range for {} classes",
                kind.n_classes()
            )));
        }
        if kind == DatasetKind::Cifar100 {
            if labels[0] >= 20 {
                return Err(Error::format(format!(
                    "record {i}: coarse label {} out of range for 20",
                    labels[0]
                )));
            }
            ds.coarse.push(labels[0]);
        }
        ds.labels.push(fine);
        ds.images.extend_from_slice(pixels);
    }
    Ok(ds)
}

fn resolve_dir(dir: &Path, kind: DatasetKind, split: Split) -> PathBuf {
    let first = kind.files(split)[0];
    let nested = dir.join(kind.archive_dir());
    if !dir.join(first).exists() && nested.join(first).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Reads a split from the standard file layout in `dir` (or in the archive's
/// own subdirectory of `dir`).
pub fn load(dir: &Path, kind: DatasetKind, split: Split) -> Result<Dataset> {
    let dir = resolve_dir(dir, kind, split);
    let mut out: Option<Dataset> = None;
    for name in kind.files(split) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let ds = parse_records(&bytes, kind).map_err(|e| e.in_file(&path))?;
        match out.as_mut() {
            Some(o) => o.extend(ds),
            None => out = Some(ds),
        }
    }
    out.ok_or_else(|| Error::format("no files to read"))
}

/// Writes a split in the standard layout; CIFAR-10 train records are spread
/// over the five batch files.
pub fn save(dir: &Path, ds: &Dataset, split: Split) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ds.kind.files(split);
    let per = ds.len().div_ceil(files.len());
    for (k, name) in files.iter().enumerate() {
        let lo = (k * per).min(ds.len());
        let hi = ((k + 1) * per).min(ds.len());
        let part = Dataset {
            kind: ds.kind,
            images: ds.images[lo * IMAGE_BYTES..hi * IMAGE_BYTES].to_vec(),
            labels: ds.labels[lo..hi].to_vec(),
            coarse: if ds.coarse.is_empty() {
                vec![]
            } else {
                ds.coarse[lo..hi].to_vec()
            },
        };
        let path = dir.join(name);
        fs::write(&path, part.to_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Synthetic images in the record layout of `kind`: each class is a colored
/// Gaussian bump at a class-specific position over a noisy gray background.
/// Train and test splits drawn with the same `seed` share class prototypes.
pub fn synthetic(kind: DatasetKind, split: Split, n: usize, n_classes: usize, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || n_classes > kind.n_classes() {
        return Err(Error::config(format!(
            "synthetic {} data needs 1..={} classes, got {n_classes}",
            kind.name(),
            kind.n_classes()
        )));
    }
    if n == 0 {
        return Err(Error::config("synthetic dataset needs at least one sample"));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<([f64; 3], f64, f64)> = (0..n_classes)
        .map(|_| {
            let color = std::array::from_fn(|_| proto_rng.random_range(-90.0..90.0));
            let cy = proto_rng.random_range(8.0..24.0);
            let cx = proto_rng.random_range(8.0..24.0);
            (color, cy, cx)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + split as u64);
    let noise = Normal::new(0.0, 12.0).expect("valid std");
    let mut bytes = Vec::with_capacity(n * kind.record_len());
    for i in 0..n {
        let label = i % n_classes;
        let (color, cy, cx) = protos[label];
        let jy = rng.random_range(-2.0..2.0);
        let jx = rng.random_range(-2.0..2.0);
        if kind == DatasetKind::Cifar100 {
            bytes.push((label / 5) as u8);
        }
        bytes.push(label as u8);
        for c in color {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let r2 = (y as f64 - cy - jy).powi(2) + (x as f64 - cx - jx).powi(2);
                    let v = 128.0 + c * (-r2 / 72.0).exp() + noise.sample(&mut rng);
                    bytes.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    parse_records(&bytes, kind)
}

/// Per-channel statistics of `[0, 1]`-scaled pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalizer {
    /// Population mean and standard deviation over a (training) split. Sums
    /// are taken over raw bytes in integers, so a constant image set yields
    /// zero variance and normalizes to exactly zero.
    pub fn fit(ds: &Dataset) -> Self {
        let mut sum = [0u64; 3];
        let mut sq = [0u64; 3];
        for img in ds.images.chunks_exact(IMAGE_BYTES) {
            for (c, plane) in img.chunks_exact(PLANE).enumerate() {
                for &p in plane {
                    sum[c] += p as u64;
                    sq[c] += (p as u64) * (p as u64);
                }
            }
        }
        let m = (ds.len() * PLANE).max(1) as f64;
        let byte_mean = sum.map(|s| s as f64 / m);
        let std: [f64; 3] = std::array::from_fn(|c| {
            let var = sq[c] as f64 / m - byte_mean[c] * byte_mean[c];
            var.max(0.0).sqrt() / 255.0
        });
        Normalizer {
            mean: byte_mean.map(|v| v as f32 / 255.0),
            std: std.map(|v| v.max(NORM_EPS) as f32),
        }
    }

    pub fn apply<T: Real>(&self, c: usize, byte: u8) -> T {
        T::of(((byte as f32 / 255.0 - self.mean[c]) / self.std[c]) as f64)
    }

    /// One image as a `(1, 3, 32, 32)` slice of normalized values.
    pub fn image<T: Real>(&self, img: &[u8], out: &mut [T]) {
        for (c, (src, dst)) in img.chunks_exact(PLANE).zip(out.chunks_exact_mut(PLANE)).enumerate() {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = self.apply(c, s);
            }
        }
    }
}

/// Zero-pad by [`PAD`], crop a 32×32 window at `(oy, ox)` in the padded
/// image, then optionally mirror columns.
pub fn crop_flip(img: &[u8], oy: usize, ox: usize, flip: bool) -> Vec<u8> {
    debug_assert!(oy <= 2 * PAD && ox <= 2 * PAD);
    let mut out = vec![0u8; IMAGE_BYTES];
    for c in 0..3 {
        let src = &img[c * PLANE..(c + 1) * PLANE];
        let dst = &mut out[c * PLANE..(c + 1) * PLANE];
        for y in 0..SIDE {
            let sy = (y + oy) as isize - PAD as isize;
            if !(0..SIDE as isize).contains(&sy) {
                continue;
            }
            for x in 0..SIDE {
                let sx = (x + ox) as isize - PAD as isize;
                if !(0..SIDE as isize).contains(&sx) {
                    continue;
                }
                let tx = if flip { SIDE - 1 - x } else { x };
                dst[y * SIDE + tx] = src[sy as usize * SIDE + sx as usize];
            }
        }
    }
    out
}

/// Crop offsets in `[0, 2·PAD]²` and a fair coin for the flip.
pub fn draw_augment<R: Rng + ?Sized>(rng: &mut R) -> (usize, usize, bool) {
    let oy = rng.random_range(0..=2 * PAD);
    let ox = rng.random_range(0..=2 * PAD);
    (oy, ox, rng.random_bool(0.5))
}

/// Generator for the shuffle and augmentation of one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One epoch of `(images, labels)` minibatches. With `shuffle` the order is a
/// seeded permutation; with `augment` each sample gets a seeded crop and flip.
/// The last batch may be short.
pub struct Minibatches<'a, T> {
    ds: &'a Dataset,
    norm: Normalizer,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    augment: bool,
    rng: ChaCha8Rng,
    _t: std::marker::PhantomData<T>,
}

pub fn minibatches<T: Real>(
    ds: &Dataset,
    norm: Normalizer,
    batch: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
    augment: bool,
) -> Minibatches<'_, T> {
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut rng);
    }
    Minibatches {
        ds,
        norm,
        order,
        pos: 0,
        batch: batch.max(1),
        augment,
        rng,
        _t: std::marker::PhantomData,
    }
}

impl<T: Real> Minibatches<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }
}

impl<T: Real> Iterator for Minibatches<'_, T> {
    type Item = (Tensor4<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..(self.pos + self.batch).min(self.order.len())];
        self.pos += idx.len();
        let mut x = Tensor4::zeros(Dims4::new(idx.len(), 3, SIDE, SIDE));
        let mut labels = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut x.data_mut()[k * IMAGE_BYTES..(k + 1) * IMAGE_BYTES];
            if self.augment {
                let (oy, ox, flip) = draw_augment(&mut self.rng);
                self.norm.image(&crop_flip(self.ds.image(i), oy, ox, flip), dst);
            } else {
                self.norm.image(self.ds.image(i), dst);
            }
            labels.push(self.ds.label(i));
        }
        Some((x, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: DatasetKind, n: usize) -> Dataset {
        synthetic(kind, Split::Train, n, 2, 7).unwrap()
    }

    #[test]
    fn record_lengths() {
        assert_eq!(DatasetKind::Cifar10.record_len(), 3073);
        assert_eq!(DatasetKind::Cifar100.record_len(), 3074);
    }

    #[test]
    fn cifar100_layout() {
        let mut rec = vec![3u8, 42];
        rec.extend((0..IMAGE_BYTES).map(|i| (i % 251) as u8));
        let ds = parse_records(&rec, DatasetKind::Cifar100).unwrap();
        assert_eq!(ds.labels, [42]);
        assert_eq!(ds.coarse, [3]);
        assert_eq!(ds.image(0)[1024], (1024 % 251) as u8);
        assert_eq!(ds.to_bytes(), rec);
    }

    #[test]
    fn truncated_and_bad_labels() {
        let ds = tiny(DatasetKind::Cifar10, 3);
        let bytes = ds.to_bytes();
        assert!(matches!(
            parse_records(&bytes[..bytes.len() - 1], DatasetKind::Cifar10),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[3073] = 10;
        let err = parse_records(&bad, DatasetKind::Cifar10).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
        assert!(parse_records(&[], DatasetKind::Cifar10).is_err());
    }

    #[test]
    fn missing_and_truncated_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(dir.path(), DatasetKind::Cifar100, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        fs::write(dir.path().join("test.bin"), vec![0u8; 100]).unwrap();
        let err = load(dir.path(), DatasetKind::Cifar100, Split::Test).unwrap_err();
        assert!(err.to_string().contains("test.bin"), "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [DatasetKind::Cifar10, DatasetKind::Cifar100] {
            let ds = tiny(kind, 13);
            save(dir.path(), &ds, Split::Train).unwrap();
            assert_eq!(load(dir.path(), kind, Split::Train).unwrap(), ds);
        }
    }

    #[test]
    fn nested_archive_dir() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(DatasetKind::Cifar10, 4);
        save(&dir.path().join("cifar-10-batches-bin"), &ds, Split::Test).unwrap();
        assert_eq!(load(dir.path(), DatasetKind::Cifar10, Split::Test).unwrap(), ds);
    }

    #[test]
    fn constant_images_normalize_to_zero() {
        let mut ds = tiny(DatasetKind::Cifar10, 4);
        ds.images.fill(128);
        let n = Normalizer::fit(&ds);
        assert!((n.mean[0] - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(n.apply::<f32>(0, 128), 0.0);
    }

    #[test]
    fn normalized_split_is_standardized() {
        let ds = tiny(DatasetKind::Cifar10, 64);
        let n = Normalizer::fit(&ds);
        assert_eq!(n, Normalizer::fit(&ds));
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for (x, _) in minibatches::<f64>(&ds, n, 16, 0, 0, false, false) {
            for (k, v) in x.data().iter().enumerate() {
                let c = (k / PLANE) % 3;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let m = (64 * PLANE) as f64;
        for c in 0..3 {
            assert!((sum[c] / m).abs() < 1e-3);
            assert!(((sq[c] / m).sqrt() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_count_and_short_tail() {
        let ds = Dataset {
            kind: DatasetKind::Cifar10,
            images: vec![0; 200 * IMAGE_BYTES],
            labels: vec![0; 200],
            coarse: vec![],
        };
        let norm = Normalizer::fit(&ds);
        let it = minibatches::<f32>(&ds, norm, 64, 1, 0, true, false);
        assert_eq!(it.num_batches(), 4);
        let sizes: Vec<usize> = it.map(|(x, _)| x.dims().n).collect();
        assert_eq!(sizes, [64, 64, 64, 8]);
        assert_eq!(50_000usize.div_ceil(64), 782);
        assert_eq!(50_000 % 64, 16);
    }

    #[test]
    fn same_seed_same_stream() {
        let ds = tiny(DatasetKind::Cifar10, 40);
        let n = Normalizer::fit(&ds);
        for augment in [false, true] {
            let a: Vec<_> = minibatches::<f32>(&ds, n, 16, 5, 2, true, augment).collect();
            let b: Vec<_> = minibatches::<f32>(&ds, n, 16, 5, 2, true, augment).collect();
            assert_eq!(a, b);
        }
        let a: Vec<_> = minibatches::<f32>(&ds, n, 16, 5, 2, true, false).map(|b| b.1).collect();
        let c: Vec<_> = minibatches::<f32>(&ds, n, 16, 5, 3, true, false).map(|b| b.1).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn flip_reverses_columns() {
        let img: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i % 256) as u8).collect();
        let out = crop_flip(&img, PAD, PAD, true);
        for c in 0..3 {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    assert_eq!(out[c * PLANE + y * SIDE + x], img[c * PLANE + y * SIDE + SIDE - 1 - x]);
                }
            }
        }
        assert_eq!(crop_flip(&img, PAD, PAD, false), img);
    }

    #[test]
    fn corner_crop_shifts_in_zeros() {
        let img = vec![200u8; IMAGE_BYTES];
        let out = crop_flip(&img, 0, 0, false);
        assert_eq!(out[0], 0);
        assert_eq!(out[3 * SIDE + 3], 0);
        assert_eq!(out[4 * SIDE + 4], 200);
        let out = crop_flip(&img, 8, 8, false);
        assert_eq!(out[SIDE * SIDE - 1], 0);
        assert_eq!(out[27 * SIDE + 27], 200);
    }

    #[test]
    fn synthetic_labels_balanced_and_in_range() {
        let ds = synthetic(DatasetKind::Cifar100, Split::Test, 30, 3, 1).unwrap();
        assert_eq!(ds.labels.iter().filter(|&&l| l == 2).count(), 10);
        assert!(synthetic(DatasetKind::Cifar10, Split::Test, 30, 11, 1).is_err());
    }
}
