//! Datasets: points in R^d with real labels and a labeled mask.
//!
//! Generators and loaders are pure functions of their inputs and seed. The
//! labels of unlabeled points are kept so accuracy can be scored on them.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, GlError, Result};
use crate::rng::seeded;

/// Binary class of a real label (labels at or above 1/2 are class 1).
#[inline]
pub fn class_of(label: f64) -> u8 {
    u8::from(label >= 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    dim: usize,
    points: Vec<f64>,
    labels: Vec<f64>,
    labeled_mask: Vec<bool>,
    /// Free-form provenance recorded by loaders (thresholds, encodings).
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    /// Builds a dataset from row-major `points` (`labels.len()` rows of `dim` coordinates).
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        points: Vec<f64>,
        labels: Vec<f64>,
        labeled_mask: Vec<bool>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        let n = labels.len();
        if n == 0 {
            return Err(invalid("dataset must contain at least one point"));
        }
        if points.len() != n * dim {
            return Err(invalid(format!(
                "expected {} coordinates for {n} points of dim {dim}, got {}",
                n * dim,
                points.len()
            )));
        }
        if labeled_mask.len() != n {
            return Err(invalid("labeled mask length differs from label count"));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite coordinate in point {}", i / dim)));
        }
        if let Some(i) = (0..n).find(|&i| labeled_mask[i] && !labels[i].is_finite()) {
            return Err(invalid(format!("labeled point {i} has a non-finite label")));
        }
        Ok(Self {
            name: name.into(),
            dim,
            points,
            labels,
            labeled_mask,
            metadata: BTreeMap::new(),
        })
    }

    /// Builds from a list of rows.
    pub fn from_rows(
        name: impl Into<String>,
        rows: &[Vec<f64>],
        labels: Vec<f64>,
        labeled_mask: Vec<bool>,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(invalid("rows have differing dimensions"));
        }
        Self::new(name, dim, rows.concat(), labels, labeled_mask)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled_mask[i]
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_mask.iter().filter(|&&m| m).count()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled_mask[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labeled_mask[i]).collect()
    }

    /// Fraction of labeled points, the labeling rate beta.
    pub fn labeling_rate(&self) -> f64 {
        self.labeled_count() as f64 / self.len() as f64
    }

    pub fn classes(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| class_of(l)).collect()
    }

    /// Rows `indices` in the given order, metadata kept.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("subset index {bad} out of range")));
        }
        let mut points = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            points.extend_from_slice(self.point(i));
        }
        let mut out = Self::new(
            self.name.clone(),
            self.dim,
            points,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.labeled_mask[i]).collect(),
        )?;
        out.metadata = self.metadata.clone();
        Ok(out)
    }

    /// Only the labeled rows.
    pub fn labeled_part(&self) -> Result<Self> {
        self.subset(&self.labeled_indices())
    }

    /// Appends `other` after `self`; dims must agree.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if other.dim != self.dim {
            return Err(invalid(format!("dimension mismatch {} vs {}", self.dim, other.dim)));
        }
        let mut out = self.clone();
        out.points.extend_from_slice(&other.points);
        out.labels.extend_from_slice(&other.labels);
        out.labeled_mask.extend_from_slice(&other.labeled_mask);
        Ok(out)
    }

    /// Same labels and mask, new coordinates.
    pub fn with_points(&self, points: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(
            self.name.clone(),
            self.dim,
            points,
            self.labels.clone(),
            self.labeled_mask.clone(),
        )?;
        out.metadata = self.metadata.clone();
        Ok(out)
    }

    /// Same points, new labels (mask kept).
    pub fn with_labels(&self, labels: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(
            self.name.clone(),
            self.dim,
            self.points.clone(),
            labels,
            self.labeled_mask.clone(),
        )?;
        out.metadata = self.metadata.clone();
        Ok(out)
    }

    pub fn with_mask(&self, labeled_mask: Vec<bool>) -> Result<Self> {
        let mut out = Self::new(
            self.name.clone(),
            self.dim,
            self.points.clone(),
            self.labels.clone(),
            labeled_mask,
        )?;
        out.metadata = self.metadata.clone();
        Ok(out)
    }

    pub fn all_labeled(&self) -> Self {
        let mut out = self.clone();
        out.labeled_mask.iter_mut().for_each(|m| *m = true);
        out
    }

    pub fn all_unlabeled(&self) -> Self {
        let mut out = self.clone();
        out.labeled_mask.iter_mut().for_each(|m| *m = false);
        out
    }

    /// CSV with columns `x0..x{d-1},label,labeled`.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for j in 0..self.dim {
            s.push_str(&format!("x{j},"));
        }
        s.push_str("label,labeled\n");
        for i in 0..self.len() {
            for v in self.point(i) {
                s.push_str(&format!("{v},"));
            }
            s.push_str(&format!("{},{}\n", self.labels[i], u8::from(self.labeled_mask[i])));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    /// Reads the format written by [`Dataset::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| GlError::Load(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text, has_header, &path.display().to_string())
    }

    pub fn parse_csv(text: &str, has_header: bool, name: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .from_reader(text.as_bytes());
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut mask = Vec::new();
        let mut dim = None;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| GlError::Load(format!("row {row}: {e}")))?;
            if rec.len() < 3 {
                return Err(GlError::Load(format!("row {row}: expected at least 3 columns")));
            }
            let d = rec.len() - 2;
            if *dim.get_or_insert(d) != d {
                return Err(GlError::Load(format!("row {row}: inconsistent column count")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| GlError::Load(format!("row {row}: cannot parse {s:?}")))
            };
            for v in rec.iter().take(d) {
                points.push(parse(v)?);
            }
            labels.push(parse(&rec[d])?);
            mask.push(match rec[d + 1].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(GlError::Load(format!("row {row}: bad labeled flag {other:?}"))),
            });
        }
        let dim = dim.ok_or_else(|| GlError::Load("empty csv".into()))?;
        Self::new(name, dim, points, labels, mask)
    }
}

/// Sizes of the train/test/validation splits drawn from a source dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub validation_count: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train_count + self.test_count + self.validation_count
    }
}

/// Two interleaving unit half-circles with isotropic Gaussian noise.
///
/// Class 0 lies on the upper circle centred at the origin, class 1 on the lower
/// circle centred at (1, 0.5). Every point is labeled; mask later.
pub fn gen_halfmoon(
    n_train: usize,
    n_test: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(invalid("halfmoon counts must be positive"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(invalid("noise_std must be a finite non-negative number"));
    }
    let train = halfmoon_split(n_train, noise_std, seed, 0)?.with_name("halfmoon-train");
    let test = halfmoon_split(n_test, noise_std, seed, 1)?.with_name("halfmoon-test");
    Ok((train, test))
}

fn halfmoon_split(n: usize, noise_std: f64, seed: u64, stream: u64) -> Result<Dataset> {
    let mut rng = seeded(seed, stream);
    let n0 = n.div_ceil(2);
    let mut rows: Vec<([f64; 2], f64)> = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random::<f64>() * PI;
        let (x, y, label) = if i < n0 {
            (t.cos(), t.sin(), 0.0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1.0)
        };
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        rows.push(([x + noise_std * nx, y + noise_std * ny], label));
    }
    rows.shuffle(&mut rng);
    let points = rows.iter().flat_map(|(p, _)| *p).collect();
    let labels = rows.iter().map(|(_, l)| *l).collect();
    let mut ds = Dataset::new("halfmoon", 2, points, labels, vec![true; n])?;
    ds.metadata.insert("noise_std".into(), noise_std.to_string());
    ds.metadata.insert("seed".into(), seed.to_string());
    Ok(ds)
}

/// `n` points uniform in the unit cube `[0,1]^dim`, labeled by `label_fn`.
pub fn gen_uniform_cube(
    n: usize,
    dim: usize,
    seed: u64,
    label_fn: impl Fn(&[f64]) -> f64,
) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return Err(invalid("uniform cube needs n > 0 and dim > 0"));
    }
    let mut rng = seeded(seed, 7);
    let points: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>()).collect();
    let labels = points.chunks(dim).map(&label_fn).collect();
    Dataset::new("uniform-cube", dim, points, labels, vec![true; n])
}

/// How the categorical sex column of Abalone is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SexEncoding {
    #[default]
    OneHot,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AbaloneOptions {
    pub has_header: bool,
    pub sex: SexEncoding,
}

/// Loads the UCI Abalone table and returns `(train, test, validation)`.
///
/// Features are standardized with train-split statistics; the label is
/// `rings > median(train rings)`, with the threshold stored in metadata.
pub fn load_abalone(
    path: impl AsRef<Path>,
    split: SplitSpec,
    opts: AbaloneOptions,
) -> Result<(Dataset, Dataset, Dataset)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| GlError::Load(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut rings: Vec<f64> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| GlError::Load(format!("abalone row {row}: {e}")))?;
        if rec.len() != 9 {
            return Err(GlError::Load(format!(
                "abalone row {row}: expected 9 columns, found {}",
                rec.len()
            )));
        }
        let mut f = Vec::with_capacity(10);
        match opts.sex {
            SexEncoding::OneHot => {
                let onehot = match rec[0].trim() {
                    "M" => [1.0, 0.0, 0.0],
                    "F" => [0.0, 1.0, 0.0],
                    "I" => [0.0, 0.0, 1.0],
                    other => {
                        return Err(GlError::Load(format!("abalone row {row}: unknown sex {other:?}")))
                    }
                };
                f.extend_from_slice(&onehot);
            }
            SexEncoding::Drop => {}
        }
        for j in 1..8 {
            let v: f64 = rec[j].trim().parse().map_err(|_| {
                GlError::Load(format!("abalone row {row}: bad number {:?}", &rec[j]))
            })?;
            f.push(v);
        }
        let r: f64 = rec[8]
            .trim()
            .parse()
            .map_err(|_| GlError::Load(format!("abalone row {row}: bad rings {:?}", &rec[8])))?;
        features.push(f);
        rings.push(r);
    }
    if split.total() > features.len() {
        return Err(GlError::Load(format!(
            "requested {} rows but the file has {}",
            split.total(),
            features.len()
        )));
    }
    if split.train_count == 0 {
        return Err(invalid("abalone train split must be non-empty"));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut seeded(split.seed, 11));
    let (train_idx, rest) = order.split_at(split.train_count);
    let (test_idx, rest) = rest.split_at(split.test_count);
    let val_idx = &rest[..split.validation_count];

    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    for &i in train_idx {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    let mut var = vec![0.0; dim];
    for &i in train_idx {
        for ((s, v), m) in var.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / train_idx.len() as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();

    let mut train_rings: Vec<f64> = train_idx.iter().map(|&i| rings[i]).collect();
    train_rings.sort_by(f64::total_cmp);
    let m = train_rings.len();
    let threshold = if m % 2 == 1 {
        train_rings[m / 2]
    } else {
        0.5 * (train_rings[m / 2 - 1] + train_rings[m / 2])
    };

    let build = |idx: &[usize], name: &str| -> Result<Dataset> {
        let mut points = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            for j in 0..dim {
                points.push((features[i][j] - mean[j]) / scale[j]);
            }
        }
        let labels = idx.iter().map(|&i| f64::from(u8::from(rings[i] > threshold))).collect();
        let mut ds = Dataset::new(name, dim, points, labels, vec![true; idx.len()])?;
        ds.metadata.insert("label_rule".into(), "rings > train median".into());
        ds.metadata.insert("rings_threshold".into(), threshold.to_string());
        ds.metadata.insert(
            "sex_encoding".into(),
            match opts.sex {
                SexEncoding::OneHot => "one-hot".into(),
                SexEncoding::Drop => "dropped".into(),
            },
        );
        Ok(ds)
    };
    Ok((
        build(train_idx, "abalone-train")?,
        build(test_idx, "abalone-test")?,
        build(val_idx, "abalone-validation")?,
    ))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| GlError::Load(format!("{what}: truncated header")))
}

/// Parsed IDX image file: `count` images of `rows * cols` bytes.
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(GlError::Load(format!("idx images: bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(GlError::Load(format!(
            "idx images: truncated, need {need} bytes, have {}",
            bytes.len()
        )));
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..need].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(GlError::Load(format!("idx labels: bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(GlError::Load(format!(
            "idx labels: truncated, need {need} bytes, have {}",
            bytes.len()
        )));
    }
    Ok(bytes[8..need].to_vec())
}

/// Serializes images in IDX format (used to write fixtures).
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Digits 1 (label 0) and 7 (label 1) from IDX files, pixels scaled to [0,1].
///
/// Draws `2 * per_class` images of each digit without replacement and splits
/// them evenly into train and test.
pub fn load_mnist_1v7(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if per_class == 0 {
        return Err(invalid("per_class must be positive"));
    }
    let read = |p: &Path| {
        fs::read(p).map_err(|e| GlError::Load(format!("{}: {e}", p.display())))
    };
    let imgs = parse_idx_images(&read(images.as_ref())?)?;
    let labs = parse_idx_labels(&read(labels.as_ref())?)?;
    if labs.len() != imgs.count {
        return Err(GlError::Load(format!(
            "image count {} differs from label count {}",
            imgs.count,
            labs.len()
        )));
    }
    mnist_1v7_from_parsed(&imgs, &labs, per_class, seed)
}

pub fn mnist_1v7_from_parsed(
    imgs: &IdxImages,
    labs: &[u8],
    per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut parts = mnist_1v7_splits(imgs, labs, per_class, 2, seed)?.into_iter();
    let train = parts.next().expect("two splits").with_name("mnist1v7-train");
    let test = parts.next().expect("two splits").with_name("mnist1v7-test");
    Ok((train, test))
}

/// `n_splits` disjoint splits, each with `per_class` images of digits 1 and 7.
pub fn mnist_1v7_splits(
    imgs: &IdxImages,
    labs: &[u8],
    per_class: usize,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if per_class == 0 || n_splits == 0 {
        return Err(invalid("per_class and n_splits must be positive"));
    }
    let dim = imgs.rows * imgs.cols;
    let mut rng = seeded(seed, 13);
    let need = n_splits * per_class;
    let mut pick = |digit: u8| -> Result<Vec<usize>> {
        let mut idx: Vec<usize> = (0..labs.len()).filter(|&i| labs[i] == digit).collect();
        if idx.len() < need {
            return Err(GlError::Load(format!("digit {digit}: need {need} images, file has {}", idx.len())));
        }
        idx.shuffle(&mut rng);
        idx.truncate(need);
        Ok(idx)
    };
    let ones = pick(1)?;
    let sevens = pick(7)?;
    let mut out = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let range = s * per_class..(s + 1) * per_class;
        let mut sel: Vec<(usize, f64)> = ones[range.clone()].iter().map(|&i| (i, 0.0)).collect();
        sel.extend(sevens[range].iter().map(|&i| (i, 1.0)));
        sel.shuffle(&mut rng);
        let mut points = Vec::with_capacity(sel.len() * dim);
        for &(i, _) in &sel {
            points.extend(imgs.pixels[i * dim..(i + 1) * dim].iter().map(|&p| f64::from(p) / 255.0));
        }
        let labels = sel.iter().map(|&(_, l)| l).collect();
        out.push(Dataset::new(format!("mnist1v7-{s}"), dim, points, labels, vec![true; sel.len()])?);
    }
    Ok(out)
}

/// IDX files from disk, split as in [`mnist_1v7_splits`].
pub fn load_mnist_1v7_splits(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    per_class: usize,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    let read = |p: &Path| fs::read(p).map_err(|e| GlError::Load(format!("{}: {e}", p.display())));
    let imgs = parse_idx_images(&read(images.as_ref())?)?;
    let labs = parse_idx_labels(&read(labels.as_ref())?)?;
    if labs.len() != imgs.count {
        return Err(GlError::Load(format!("image count {} differs from label count {}", imgs.count, labs.len())));
    }
    mnist_1v7_splits(&imgs, &labs, per_class, n_splits, seed)
}

const MASK_RETRIES: usize = 100;

/// Marks exactly `labeled_count` random points as labeled, resampling until
/// both classes appear among them.
pub fn apply_label_mask(ds: &Dataset, labeled_count: usize, seed: u64) -> Result<Dataset> {
    let n = ds.len();
    if labeled_count == 0 || labeled_count > n {
        return Err(invalid(format!("labeled_count must be in 1..={n}, got {labeled_count}")));
    }
    let classes = ds.classes();
    let mut rng = seeded(seed, 17);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..MASK_RETRIES {
        order.shuffle(&mut rng);
        let chosen = &order[..labeled_count];
        let has0 = chosen.iter().any(|&i| classes[i] == 0);
        let has1 = chosen.iter().any(|&i| classes[i] == 1);
        if has0 && has1 {
            let mut mask = vec![false; n];
            chosen.iter().for_each(|&i| mask[i] = true);
            return ds.with_mask(mask);
        }
        if labeled_count == n || labeled_count == 1 {
            break;
        }
    }
    Err(invalid(format!(
        "could not cover both classes with {labeled_count} labeled points after {MASK_RETRIES} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halfmoon_sizes_and_balance() {
        let (train, test) = gen_halfmoon(2000, 1000, 0.2, 7).unwrap();
        assert_eq!(train.len(), 2000);
        assert_eq!(test.len(), 1000);
        assert_eq!(train.dim(), 2);
        let ones = train.labels().iter().filter(|&&l| l == 1.0).count();
        assert_eq!(ones, 1000);
        assert!(train.labeled_mask().iter().all(|&m| m));
    }

    #[test]
    fn halfmoon_noiseless_on_circles() {
        let (train, test) = gen_halfmoon(2, 2, 0.0, 0).unwrap();
        for ds in [&train, &test] {
            for i in 0..ds.len() {
                let p = ds.point(i);
                let r = if ds.labels()[i] == 0.0 {
                    assert!(p[1] >= 0.0);
                    (p[0] * p[0] + p[1] * p[1]).sqrt()
                } else {
                    assert!(p[1] <= 0.5);
                    ((p[0] - 1.0).powi(2) + (p[1] - 0.5).powi(2)).sqrt()
                };
                assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn halfmoon_deterministic() {
        let a = gen_halfmoon(100, 1, 0.2, 3).unwrap();
        let b = gen_halfmoon(100, 1, 0.2, 3).unwrap();
        assert_eq!(a, b);
        assert!(gen_halfmoon(100, 0, 0.2, 3).is_err());
    }

    #[test]
    fn label_mask_rate_and_coverage() {
        let (train, _) = gen_halfmoon(500, 1, 0.2, 1).unwrap();
        let masked = apply_label_mask(&train, 100, 4).unwrap();
        assert_eq!(masked.labeled_count(), 100);
        assert!((masked.labeling_rate() - 0.2).abs() < 1e-15);
        assert_eq!(masked.labels(), train.labels());
        let all = apply_label_mask(&train, 500, 4).unwrap();
        assert_eq!(all.labeling_rate(), 1.0);
        assert!(apply_label_mask(&train, 1, 4).is_err());
        assert!(apply_label_mask(&train, 0, 4).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (train, _) = gen_halfmoon(20, 1, 0.2, 9).unwrap();
        let masked = apply_label_mask(&train, 5, 1).unwrap();
        let back = Dataset::parse_csv(&masked.to_csv_string(), true, "halfmoon").unwrap();
        assert_eq!(back.points(), masked.points());
        assert_eq!(back.labels(), masked.labels());
        assert_eq!(back.labeled_mask(), masked.labeled_mask());
    }

    #[test]
    fn invariants_enforced() {
        assert!(Dataset::new("x", 2, vec![0.0; 3], vec![0.0], vec![true]).is_err());
        assert!(Dataset::new("x", 1, vec![f64::NAN], vec![0.0], vec![true]).is_err());
        assert!(Dataset::new("x", 1, vec![0.0], vec![f64::NAN], vec![true]).is_err());
        assert!(Dataset::new("x", 1, vec![0.0], vec![f64::NAN], vec![false]).is_ok());
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        // Four 2x2 images: digits 1, 7, 1, 7.
        let pixels = vec![255, 0, 0, 0, 0, 255, 0, 0, 10, 20, 30, 40, 1, 2, 3, 255];
        let imgs = parse_idx_images(&encode_idx_images(2, 2, &pixels)).unwrap();
        let labs = parse_idx_labels(&encode_idx_labels(&[1, 7, 1, 7])).unwrap();
        let (train, test) = mnist_1v7_from_parsed(&imgs, &labs, 1, 0).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 2);
        assert_eq!(train.dim(), 4);
        let all: Vec<f64> = train.points().iter().chain(test.points()).copied().collect();
        assert!(all.contains(&1.0));
        assert!(all.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(mnist_1v7_from_parsed(&imgs, &labs, 2, 0).is_err());
        let mut bad = encode_idx_labels(&[1]);
        bad[3] = 0x03;
        assert!(parse_idx_labels(&bad).is_err());
        let trunc = encode_idx_images(2, 2, &pixels);
        assert!(parse_idx_images(&trunc[..20]).is_err());
    }

    fn abalone_fixture(rows: usize) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let sexes = ["M", "F", "I"];
        for i in 0..rows {
            let x = i as f64;
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                sexes[i % 3],
                0.3 + 0.001 * x,
                0.2 + 0.0007 * (x % 13.0),
                0.1 + 0.0003 * (x % 7.0),
                0.5 + 0.002 * x,
                0.2 + 0.001 * (x % 17.0),
                0.1 + 0.0005 * (x % 11.0),
                0.15 + 0.0004 * (x % 5.0),
                5 + (i * 7) % 15
            )
            .unwrap();
        }
        f
    }

    #[test]
    fn abalone_splits_and_standardization() {
        let f = abalone_fixture(800);
        let split = SplitSpec { train_count: 500, test_count: 100, validation_count: 100, seed: 3 };
        let (train, test, val) = load_abalone(f.path(), split, AbaloneOptions::default()).unwrap();
        assert_eq!((train.len(), test.len(), val.len()), (500, 100, 100));
        assert_eq!(train.dim(), 10);
        for j in 0..train.dim() {
            let col: Vec<f64> = (0..train.len()).map(|i| train.point(i)[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-9, "column {j} mean {m}");
            assert!((v - 1.0).abs() < 1e-9, "column {j} var {v}");
        }
        assert!(train.metadata.contains_key("rings_threshold"));
        let again = load_abalone(f.path(), split, AbaloneOptions::default()).unwrap();
        assert_eq!(again.0, train);
        let big = SplitSpec { train_count: 700, ..split };
        assert!(load_abalone(f.path(), big, AbaloneOptions::default()).is_err());
        assert!(load_abalone("/nonexistent/abalone.csv", split, AbaloneOptions::default()).is_err());
        let dropped =
            load_abalone(f.path(), split, AbaloneOptions { sex: SexEncoding::Drop, ..Default::default() })
                .unwrap();
        assert_eq!(dropped.0.dim(), 7);
    }

    #[test]
    fn abalone_malformed_row() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "M,0.1,0.2,0.3,0.4,0.5,0.6,0.7,9").unwrap();
        writeln!(f, "M,0.1,oops,0.3,0.4,0.5,0.6,0.7,9").unwrap();
        let split = SplitSpec { train_count: 1, test_count: 0, validation_count: 0, seed: 0 };
        assert!(matches!(
            load_abalone(f.path(), split, AbaloneOptions::default()),
            Err(GlError::Load(_))
        ));
    }
}
