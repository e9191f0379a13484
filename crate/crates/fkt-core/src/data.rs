//! Dataset ingestion, deterministic splits and subsets, batching, and the
//! synthetic blob dataset used for fast end-to-end verification.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::augment::resize_bilinear;
use crate::error::{FktError, Result};
use crate::par;
use crate::rng::{fnv1a_bytes, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cifar10,
    IntelImage,
    Aptos2019,
    SyntheticBlobs,
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetName::Cifar10 => "cifar10",
            DatasetName::IntelImage => "intel_image",
            DatasetName::Aptos2019 => "aptos2019",
            DatasetName::SyntheticBlobs => "synthetic_blobs",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    #[serde(default)]
    pub root_path: PathBuf,
    /// Stratified train subset size; the test split is subsetted
    /// proportionally. None means the full dataset.
    #[serde(default)]
    pub subset_size: Option<usize>,
    pub num_classes: usize,
    pub image_size: usize,
    #[serde(default)]
    pub split_seed: u64,
    /// Samples per class for the synthetic dataset.
    #[serde(default = "default_per_class")]
    pub synthetic_per_class: usize,
    /// Optional per-file fnv64 checksums (hex), validated at ingest.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

fn default_per_class() -> usize {
    100
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let expected = match self.name {
            DatasetName::Cifar10 => Some(10),
            DatasetName::IntelImage => Some(6),
            DatasetName::Aptos2019 => Some(5),
            DatasetName::SyntheticBlobs => None,
        };
        if let Some(e) = expected {
            if self.num_classes != e {
                return Err(FktError::InvalidConfig(format!(
                    "dataset.num_classes: {} has {e} classes, got {}",
                    self.name, self.num_classes
                )));
            }
        } else if self.num_classes < 2 {
            return Err(FktError::InvalidConfig(format!(
                "dataset.num_classes: must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 8 {
            return Err(FktError::InvalidConfig(format!(
                "dataset.image_size: must be >= 8, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// A decoded batch: pixels in [0,1], one label and stable id per sample.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<String>,
}

/// A dataset split held as quantized u8 pixels, uniformly sized at ingest.
#[derive(Debug, Clone)]
pub struct Split {
    images: Vec<Vec<u8>>, // each 3 * size * size, CHW
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub image_size: usize,
    pub class_names: Vec<String>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Decode the given indices into a float batch.
    pub fn to_batch(&self, indices: &[usize]) -> ImageBatch {
        let s = self.image_size;
        let mut pixels = Array4::<f64>::zeros((indices.len(), 3, s, s));
        {
            let flat = pixels.as_slice_mut().unwrap();
            let images = &self.images;
            par::for_each_chunk_mut(flat, 3 * s * s, |i, slot| {
                for (dst, &src) in slot.iter_mut().zip(images[indices[i]].iter()) {
                    *dst = src as f64 / 255.0;
                }
            });
        }
        ImageBatch {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sample_ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    pub fn full_batch(&self) -> ImageBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.to_batch(&idx)
    }

    fn push(&mut self, pixels: Vec<u8>, label: usize, id: String) {
        self.images.push(pixels);
        self.labels.push(label);
        self.ids.push(id);
    }

    fn empty(image_size: usize, class_names: Vec<String>) -> Split {
        Split {
            images: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            image_size,
            class_names,
        }
    }

    fn select(&self, indices: &[usize]) -> Split {
        Split {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            image_size: self.image_size,
            class_names: self.class_names.clone(),
        }
    }
}

/// Per-channel mean and population std over every pixel of the split.
pub fn channel_stats(split: &Split) -> ([f64; 3], [f64; 3]) {
    let s = split.image_size;
    let plane = s * s;
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    for img in &split.images {
        for c in 0..3 {
            for &v in &img[c * plane..(c + 1) * plane] {
                let f = v as f64 / 255.0;
                sum[c] += f;
                sumsq[c] += f * f;
            }
        }
    }
    let n = (split.len() * plane) as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        std[c] = (sumsq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    (mean, std)
}

fn quantize(img: &Array3<f64>) -> Vec<u8> {
    img.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn resize_to(img: Array3<f64>, size: usize) -> Array3<f64> {
    if img.dim().1 == size && img.dim().2 == size {
        img
    } else {
        resize_bilinear(&img.view(), size)
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 channel-major pixels
const CIFAR_SIDE: usize = 32;

fn cifar_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read_checked(path: &Path, checksums: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| FktError::Ingest(format!("{}: {e}", path.display())))?;
    if let Some(expected) = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| checksums.get(n))
    {
        let actual = format!("{:016x}", fnv1a_bytes(&bytes));
        if &actual != expected {
            return Err(FktError::Integrity(format!(
                "{}: checksum {actual} != configured {expected}",
                path.display()
            )));
        }
    }
    Ok(bytes)
}

fn load_cifar_file(path: &Path, spec: &DatasetSpec, split: &mut Split, tag: &str) -> Result<()> {
    let bytes = read_checked(path, &spec.checksums)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(FktError::Ingest(format!(
            "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    let start = split.len();
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(FktError::Ingest(format!(
                "{}: record {r} has label byte {label}",
                path.display()
            )));
        }
        let img = Array3::from_shape_fn((3, CIFAR_SIDE, CIFAR_SIDE), |(c, y, x)| {
            record[1 + c * 1024 + y * 32 + x] as f64 / 255.0
        });
        let img = resize_to(img, spec.image_size);
        split.push(quantize(&img), label, format!("cifar_{tag}_{:05}", start + r));
    }
    Ok(())
}

fn load_cifar(spec: &DatasetSpec) -> Result<(Split, Split)> {
    let dir = cifar_dir(&spec.root_path);
    let class_names: Vec<String> = [
        "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut train = Split::empty(spec.image_size, class_names.clone());
    for i in 1..=5 {
        load_cifar_file(&dir.join(format!("data_batch_{i}.bin")), spec, &mut train, "train")?;
    }
    let mut test = Split::empty(spec.image_size, class_names);
    load_cifar_file(&dir.join("test_batch.bin"), spec, &mut test, "test")?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Image-folder layout: <root>/<split>/<class_name>/*.jpg
// ---------------------------------------------------------------------------

fn decode_image_file(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| FktError::Ingest(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let float = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    });
    Ok(quantize(&resize_to(float, size)))
}

fn load_image_folder_split(root: &Path, split_name: &str, spec: &DatasetSpec) -> Result<Split> {
    let dir = root.join(split_name);
    if !dir.is_dir() {
        return Err(FktError::Ingest(format!(
            "{}: split directory missing",
            dir.display()
        )));
    }
    let mut class_names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| FktError::Ingest(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    class_names.sort();
    if class_names.len() != spec.num_classes {
        return Err(FktError::Ingest(format!(
            "{}: found {} class directories, expected {}",
            dir.display(),
            class_names.len(),
            spec.num_classes
        )));
    }
    let mut split = Split::empty(spec.image_size, class_names.clone());
    for (label, class) in class_names.iter().enumerate() {
        let class_dir = dir.join(class);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .map_err(|e| FktError::Ingest(format!("{}: {e}", class_dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_lowercase),
                    Some(ref e) if e == "jpg" || e == "jpeg" || e == "png"
                )
            })
            .collect();
        files.sort();
        // Decode in parallel, keep file order.
        let size = spec.image_size;
        let decoded: Vec<Result<Vec<u8>>> =
            par::map_indexed(files.len(), |i| decode_image_file(&files[i], size));
        for (file, pixels) in files.iter().zip(decoded) {
            let id = format!(
                "{split_name}/{class}/{}",
                file.file_name().unwrap().to_string_lossy()
            );
            split.push(pixels?, label, id);
        }
    }
    Ok(split)
}

fn load_intel(spec: &DatasetSpec) -> Result<(Split, Split)> {
    let train = load_image_folder_split(&spec.root_path, "train", spec)?;
    let test = load_image_folder_split(&spec.root_path, "test", spec)?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// CSV-manifest layout: <root>/train.csv + <root>/images/<id_code>.png
// ---------------------------------------------------------------------------

/// Published test-split proportion: 399 of 3662 labeled images.
const APTOS_TEST_NUM: usize = 399;
const APTOS_TOTAL: usize = 3662;

fn load_aptos(spec: &DatasetSpec) -> Result<(Split, Split)> {
    let manifest = spec.root_path.join("train.csv");
    let text = String::from_utf8(read_checked(&manifest, &spec.checksums)?)
        .map_err(|_| FktError::Ingest(format!("{}: not utf-8", manifest.display())))?;
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    match lines.next() {
        Some("id_code,diagnosis") => {}
        other => {
            return Err(FktError::Ingest(format!(
                "{}: expected header id_code,diagnosis, got {other:?}",
                manifest.display()
            )))
        }
    }
    let mut entries: Vec<(String, usize)> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, diag) = line.split_once(',').ok_or_else(|| {
            FktError::Ingest(format!("{}: line {}: missing comma", manifest.display(), ln + 2))
        })?;
        let diag: usize = diag.trim().parse().map_err(|_| {
            FktError::Ingest(format!(
                "{}: line {}: diagnosis {diag:?} is not an integer",
                manifest.display(),
                ln + 2
            ))
        })?;
        if diag >= spec.num_classes {
            return Err(FktError::Ingest(format!(
                "{}: line {}: diagnosis {diag} out of range",
                manifest.display(),
                ln + 2
            )));
        }
        entries.push((id.trim().to_string(), diag));
    }

    // Seeded stratified split reproducing the published 399/3662 proportion.
    let total = entries.len();
    let test_total = ((total * APTOS_TEST_NUM) + APTOS_TOTAL / 2) / APTOS_TOTAL;
    let mut counts = vec![0usize; spec.num_classes];
    for (_, diag) in &entries {
        counts[*diag] += 1;
    }
    let targets = apportion(&counts, test_total);
    let mut test_pick = vec![false; total];
    for (class, &target) in targets.iter().enumerate() {
        let mut order: Vec<usize> = (0..total).filter(|&i| entries[i].1 == class).collect();
        StreamRng::from_key(&[spec.split_seed, class as u64, 0x5e57]).shuffle(&mut order);
        for &i in order.iter().take(target) {
            test_pick[i] = true;
        }
    }

    let class_names: Vec<String> = (0..spec.num_classes).map(|c| format!("grade_{c}")).collect();
    let mut train = Split::empty(spec.image_size, class_names.clone());
    let mut test = Split::empty(spec.image_size, class_names);
    let size = spec.image_size;
    let root = spec.root_path.clone();
    let decoded: Vec<Result<Vec<u8>>> = par::map_indexed(entries.len(), |i| {
        decode_image_file(&root.join("images").join(format!("{}.png", entries[i].0)), size)
    });
    for ((id, diag), (picked, pixels)) in entries
        .iter()
        .zip(test_pick.iter().zip(decoded))
    {
        let target = if *picked { &mut test } else { &mut train };
        target.push(pixels?, *diag, id.clone());
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Geometry encoded in a synthetic sample id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobGeometry {
    pub class: usize,
    pub center_x: usize,
    pub center_y: usize,
    pub radius: usize,
}

/// Parse the geometry out of an id produced by [`make_synthetic_blobs`].
pub fn parse_blob_geometry(id: &str) -> Option<BlobGeometry> {
    let mut class = None;
    let mut x = None;
    let mut y = None;
    let mut r = None;
    for part in id.split('_') {
        if let Some(v) = part.strip_prefix('c') {
            class = v.parse().ok();
        } else if let Some(v) = part.strip_prefix('x') {
            x = v.parse().ok();
        } else if let Some(v) = part.strip_prefix('y') {
            y = v.parse().ok();
        } else if let Some(v) = part.strip_prefix('r') {
            r = v.parse().ok();
        }
    }
    Some(BlobGeometry {
        class: class?,
        center_x: x?,
        center_y: y?,
        radius: r?,
    })
}

/// Gaussian color blobs on a noisy gray background. Each class has a distinct
/// hue and a distinct anchor position, so classes separate linearly in mean
/// color and localize spatially. 80/20 train/test split per class.
pub fn make_synthetic_blobs(
    num_per_class: usize,
    num_classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<(Split, Split)> {
    if num_classes < 2 {
        return Err(FktError::InvalidInput(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if num_per_class < 2 {
        return Err(FktError::InvalidInput(format!(
            "need at least 2 samples per class, got {num_per_class}"
        )));
    }
    if image_size < 8 {
        return Err(FktError::InvalidInput(format!(
            "image_size must be >= 8, got {image_size}"
        )));
    }
    let class_names: Vec<String> = (0..num_classes).map(|c| format!("blob_{c}")).collect();
    let mut train = Split::empty(image_size, class_names.clone());
    let mut test = Split::empty(image_size, class_names);
    let s = image_size as f64;

    for class in 0..num_classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        let anchor_x = s / 2.0 + (s / 4.0) * angle.cos();
        let anchor_y = s / 2.0 + (s / 4.0) * angle.sin();
        let color = hsv_to_rgb(class as f64 / num_classes as f64, 0.9, 0.95);
        let train_count = num_per_class * 4 / 5;

        for j in 0..num_per_class {
            let mut rng = StreamRng::from_key(&[seed, class as u64, j as u64]);
            let cx = anchor_x + rng.uniform_in(-s / 16.0, s / 16.0);
            let cy = anchor_y + rng.uniform_in(-s / 16.0, s / 16.0);
            let radius = s * rng.uniform_in(0.16, 0.22);
            let sigma = radius / 2.0;
            let wobble: Vec<f64> = (0..3).map(|_| rng.uniform_in(-0.05, 0.05)).collect();

            let mut img = Array3::<f64>::zeros((3, image_size, image_size));
            for y in 0..image_size {
                for x in 0..image_size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let weight = (-d2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..3 {
                        let bg = (0.5 + 0.08 * rng.normal()).clamp(0.0, 1.0);
                        let fg = (color[c] + wobble[c]).clamp(0.0, 1.0);
                        img[[c, y, x]] = bg * (1.0 - weight) + fg * weight;
                    }
                }
            }
            let id = format!(
                "blob_c{class}_i{j:04}_x{}_y{}_r{}",
                cx.round() as i64,
                cy.round() as i64,
                radius.round() as i64
            );
            let target = if j < train_count { &mut train } else { &mut test };
            target.push(quantize(&img), class, id);
        }
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Loading, subsetting, batching
// ---------------------------------------------------------------------------

/// Split `target` across classes proportionally to `counts`, within one of
/// exact proportionality (largest-remainder apportionment).
fn apportion(counts: &[usize], target: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let mut out: Vec<usize> = Vec::with_capacity(counts.len());
    let mut fractions: Vec<(usize, f64)> = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        let exact = target as f64 * n as f64 / total as f64;
        out.push(exact.floor() as usize);
        fractions.push((c, exact - exact.floor()));
    }
    let mut remainder = target - out.iter().sum::<usize>();
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (c, _) in fractions {
        if remainder == 0 {
            break;
        }
        if out[c] < counts[c] {
            out[c] += 1;
            remainder -= 1;
        }
    }
    out
}

/// Stratified seeded sample of `size` items; per-class counts stay within one
/// of exact proportionality.
fn stratified_subset(split: &Split, size: usize, seed: u64, tag: u64) -> Result<Split> {
    if size > split.len() {
        return Err(FktError::InvalidConfig(format!(
            "dataset.subset_size: {size} exceeds split size {}",
            split.len()
        )));
    }
    let counts = split.class_counts();
    let targets = apportion(&counts, size);

    let mut chosen: Vec<usize> = Vec::with_capacity(size);
    for (class, &target) in targets.iter().enumerate() {
        let mut members: Vec<usize> = (0..split.len())
            .filter(|&i| split.labels[i] == class)
            .collect();
        StreamRng::from_key(&[seed, class as u64, tag]).shuffle(&mut members);
        chosen.extend(members.into_iter().take(target));
    }
    chosen.sort_unstable();
    Ok(split.select(&chosen))
}

/// Load the named dataset: full splits, or stratified subsets when
/// `subset_size` is set.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Split, Split)> {
    spec.validate()?;
    if spec.name != DatasetName::SyntheticBlobs && !spec.root_path.exists() {
        return Err(FktError::Ingest(format!(
            "{}: dataset root does not exist",
            spec.root_path.display()
        )));
    }
    let (train, test) = match spec.name {
        DatasetName::Cifar10 => load_cifar(spec)?,
        DatasetName::IntelImage => load_intel(spec)?,
        DatasetName::Aptos2019 => load_aptos(spec)?,
        DatasetName::SyntheticBlobs => make_synthetic_blobs(
            spec.synthetic_per_class,
            spec.num_classes,
            spec.image_size,
            spec.split_seed,
        )?,
    };
    match spec.subset_size {
        None => Ok((train, test)),
        Some(size) => {
            let test_size =
                ((size * test.len()) as f64 / train.len().max(1) as f64).round() as usize;
            let test_size = test_size.clamp(1, test.len());
            let sub_train = stratified_subset(&train, size, spec.split_seed, 0x7281)?;
            let sub_test = stratified_subset(&test, test_size, spec.split_seed, 0x7e57)?;
            Ok((sub_train, sub_test))
        }
    }
}

/// Batches of a split in epoch-seeded shuffled order.
pub struct BatchIter<'a> {
    split: &'a Split,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    drop_last: bool,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let idx = &self.order[self.pos..self.pos + take];
        self.pos += take;
        Some(self.split.to_batch(idx))
    }
}

impl<'a> BatchIter<'a> {
    pub fn num_batches(&self) -> usize {
        if self.drop_last {
            self.order.len() / self.batch_size
        } else {
            self.order.len().div_ceil(self.batch_size)
        }
    }
}

/// Iterate `split` in an order reshuffled per (shuffle_seed, epoch). With
/// `drop_last` every batch has exactly `batch_size` samples.
pub fn batch_iterator<'a>(
    split: &'a Split,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
    drop_last: bool,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(FktError::InvalidInput("batch_size must be >= 1".into()));
    }
    if drop_last && batch_size > split.len() {
        return Err(FktError::EmptyEpoch(format!(
            "batch size {batch_size} exceeds split size {} with drop_last",
            split.len()
        )));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    StreamRng::from_key(&[shuffle_seed, epoch as u64, 0x0e9]).shuffle(&mut order);
    Ok(BatchIter {
        split,
        order,
        batch_size,
        pos: 0,
        drop_last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn blob_split_arithmetic() {
        let (train, test) = make_synthetic_blobs(100, 2, 16, 1).unwrap();
        assert_eq!(train.len(), 160);
        assert_eq!(test.len(), 40);
        assert_eq!(train.class_counts(), vec![80, 80]);
    }

    #[test]
    fn blobs_deterministic() {
        let (a, _) = make_synthetic_blobs(10, 3, 16, 42).unwrap();
        let (b, _) = make_synthetic_blobs(10, 3, 16, 42).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.ids, b.ids);
        let (c, _) = make_synthetic_blobs(10, 3, 16, 43).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn blob_ids_carry_geometry() {
        let (train, _) = make_synthetic_blobs(4, 2, 32, 7).unwrap();
        let geo = parse_blob_geometry(&train.ids[0]).unwrap();
        assert_eq!(geo.class, 0);
        assert!(geo.center_x < 32 && geo.center_y < 32);
        assert!(geo.radius >= 3);
    }

    #[test]
    fn batch_counts() {
        let (train, _) = make_synthetic_blobs(10, 2, 8, 0).unwrap();
        // 16 train samples
        assert_eq!(batch_iterator(&train, 5, 0, 0, true).unwrap().count(), 3);
        assert_eq!(batch_iterator(&train, 5, 0, 0, false).unwrap().count(), 4);
        let last = batch_iterator(&train, 5, 0, 0, false).unwrap().last().unwrap();
        assert_eq!(last.labels.len(), 1);
    }

    #[test]
    fn epoch_partition_property() {
        let (train, _) = make_synthetic_blobs(13, 2, 8, 0).unwrap();
        let seen: BTreeSet<String> = batch_iterator(&train, 4, 9, 2, false)
            .unwrap()
            .flat_map(|b| b.sample_ids)
            .collect();
        assert_eq!(seen, train.ids.iter().cloned().collect());
    }

    #[test]
    fn epochs_reshuffle_reproducibly() {
        let (train, _) = make_synthetic_blobs(20, 2, 8, 0).unwrap();
        let ids = |epoch: usize| -> Vec<String> {
            batch_iterator(&train, 8, 5, epoch, true)
                .unwrap()
                .flat_map(|b| b.sample_ids)
                .collect()
        };
        assert_eq!(ids(0), ids(0));
        assert_ne!(ids(0), ids(1));
    }

    #[test]
    fn empty_epoch_error() {
        let (train, _) = make_synthetic_blobs(3, 2, 8, 0).unwrap();
        assert!(matches!(
            batch_iterator(&train, 100, 0, 0, true),
            Err(FktError::EmptyEpoch(_))
        ));
    }

    #[test]
    fn subset_is_stratified_and_deterministic() {
        let (train, _) = make_synthetic_blobs(50, 4, 8, 3).unwrap(); // 160 train, 40/class
        let sub = stratified_subset(&train, 90, 11, 0).unwrap();
        assert_eq!(sub.len(), 90);
        for &c in &sub.class_counts() {
            assert!((22..=23).contains(&c), "class count {c}");
        }
        let sub2 = stratified_subset(&train, 90, 11, 0).unwrap();
        assert_eq!(sub.ids, sub2.ids);
    }

    #[test]
    fn nearest_centroid_separates_blobs() {
        let (train, test) = make_synthetic_blobs(100, 2, 16, 5).unwrap();
        // Mean color per class from the training split.
        let mut centroids = [[0.0f64; 3]; 2];
        let mut counts = vec![0usize; 2];
        for i in 0..train.len() {
            let batch = train.to_batch(&[i]);
            for (c, slot) in centroids[train.labels[i]].iter_mut().enumerate() {
                *slot += batch
                    .pixels
                    .index_axis(ndarray::Axis(0), 0)
                    .index_axis(ndarray::Axis(0), c)
                    .mean()
                    .unwrap();
            }
            counts[train.labels[i]] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let batch = test.to_batch(&[i]);
            let mut mean = [0.0f64; 3];
            for (c, slot) in mean.iter_mut().enumerate() {
                *slot = batch
                    .pixels
                    .index_axis(ndarray::Axis(0), 0)
                    .index_axis(ndarray::Axis(0), c)
                    .mean()
                    .unwrap();
            }
            let dist = |a: &[f64; 3]| -> f64 {
                (0..3).map(|c| (a[c] - mean[c]).powi(2)).sum()
            };
            let pred = if dist(&centroids[0]) <= dist(&centroids[1]) { 0 } else { 1 };
            if pred == test.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }
}
