//! Synthetic generators, domain shift, MNIST IDX files, label splits and
//! deterministic batch sampling.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::adcore::Tensor;
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::StreamKey;

/// Feature matrix with optional labels in `0..k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Option<Vec<usize>>,
    pub k: usize,
    pub name: String,
}

impl Dataset {
    /// Validates finiteness, label range, and that every class occurs.
    pub fn new(x: Tensor, y: Option<Vec<usize>>, k: usize, name: impl Into<String>) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(shape_err("dataset", format!("features must be a matrix, got {:?}", x.shape())));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { what: "dataset features".into() });
        }
        if k == 0 {
            return Err(invalid("class count must be positive"));
        }
        if let Some(y) = &y {
            if y.len() != x.rows() {
                return Err(shape_err("dataset", format!("{} rows, {} labels", x.rows(), y.len())));
            }
            let mut seen = vec![false; k];
            for &c in y {
                if c >= k {
                    return Err(invalid(format!("label {c} out of range for {k} classes")));
                }
                seen[c] = true;
            }
            if let Some(c) = seen.iter().position(|s| !s) {
                return Err(invalid(format!("class {c} has no samples")));
            }
        }
        Ok(Self { x, y, k, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.y
            .as_deref()
            .ok_or_else(|| invalid(format!("dataset `{}` has no labels", self.name)))
    }

    /// Rows `idx` as a new dataset (labels kept, class coverage re-checked).
    pub fn select(&self, idx: &[usize], name: impl Into<String>) -> Result<Self> {
        let y = self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect());
        Self::new(self.x.select_rows(idx), y, self.k, name)
    }

    /// Rows and labels at `idx` without class-coverage checks.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Option<Vec<usize>>) {
        let y = self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect());
        (self.x.select_rows(idx), y)
    }

    /// Indices of each class, in ascending order.
    pub fn class_indices(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.labels()?.iter().enumerate() {
            out[c].push(i);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    Blobs,
    TwoMoons,
    Rings,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "two_moons" | "moons" => Ok(Self::TwoMoons),
            "rings" => Ok(Self::Rings),
            other => Err(invalid(format!("unknown synthetic dataset `{other}`"))),
        }
    }
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::TwoMoons => "two_moons",
            Self::Rings => "rings",
        }
    }
}

/// Centers of `k` blobs: vertices of a regular polygon with adjacent
/// vertices one unit apart (two points one unit apart for `k = 2`).
pub fn blob_centers(k: usize) -> Vec<[f64; 2]> {
    let radius = 0.5 / (PI / k as f64).sin();
    (0..k)
        .map(|c| {
            let a = PI / 2.0 + 2.0 * PI * c as f64 / k as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Two-dimensional synthetic classification data with balanced classes.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, k: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k {
        return Err(invalid(format!("need at least 2 classes and n ≥ K, got n={n}, K={k}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(invalid("noise sigma must be non-negative"));
    }
    if kind == SyntheticKind::TwoMoons && k != 2 {
        return Err(invalid(format!("two_moons has exactly 2 classes, got {k}")));
    }
    let key = StreamKey::root(seed).child("synthetic").child(kind.as_str());
    let mut noise = key.child("noise").rng();
    let mut angles = key.child("angles").rng();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let centers = blob_centers(k);
    let per_class: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    let mut ordinal = vec![0usize; k];
    let mut rows = Vec::with_capacity(n);
    for &c in &labels {
        let j = ordinal[c];
        ordinal[c] += 1;
        let base = match kind {
            SyntheticKind::Blobs => centers[c],
            SyntheticKind::TwoMoons => {
                let m = per_class[c];
                let t = if m > 1 { PI * j as f64 / (m - 1) as f64 } else { 0.0 };
                if c == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
            SyntheticKind::Rings => {
                let r = (c + 1) as f64 / k as f64;
                let a: f64 = angles.random_range(0.0..2.0 * PI);
                [r * a.cos(), r * a.sin()]
            }
        };
        let e: [f64; 2] = [noise.sample(StandardNormal), noise.sample(StandardNormal)];
        rows.push((vec![base[0] + noise_sigma * e[0], base[1] + noise_sigma * e[1]], c));
    }
    rows.shuffle(&mut key.child("order").rng());
    let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = rows.into_iter().unzip();
    Dataset::new(Tensor::from_rows(&xs)?, Some(ys), k, kind.as_str())
}

/// `R(θ)·x + t + noise` applied row-wise; labels are kept.
pub fn shift_domain(ds: &Dataset, rotation_deg: f64, translation: &[f64], extra_noise: f64, seed: u64) -> Result<Dataset> {
    let d = ds.dim();
    if rotation_deg != 0.0 && d != 2 {
        return Err(invalid(format!("rotation needs 2-D inputs, got {d}")));
    }
    if !translation.is_empty() && translation.len() != d {
        return Err(shape_err("shift_domain", format!("translation of length {} for {d}-D data", translation.len())));
    }
    if !(extra_noise >= 0.0) {
        return Err(invalid("extra noise must be non-negative"));
    }
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let mut rng = StreamKey::root(seed).child("shift-noise").rng();
    let mut x = ds.x.clone();
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        if rotation_deg != 0.0 {
            let (a, b) = (row[0], row[1]);
            row[0] = c * a - s * b;
            row[1] = s * a + c * b;
        }
        for (j, v) in row.iter_mut().enumerate() {
            if let Some(t) = translation.get(j) {
                *v += t;
            }
            if extra_noise > 0.0 {
                *v += extra_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Dataset::new(x, ds.y.clone(), ds.k, format!("{}-shifted", ds.name))
}

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

fn idx_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "IDX",
        offset,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| idx_err(at, "truncated header"))
}

/// Image count, height, width and raw pixels of an IDX image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(0, format!("image magic {magic}, expected {IDX_IMAGES_MAGIC}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let need = n * h * w;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(idx_err(16 + body.len(), format!("pixel payload truncated: {} of {need} bytes", body.len())));
    }
    if body.len() > need {
        return Err(idx_err(16 + need, "trailing bytes after pixel payload"));
    }
    Ok((n, h, w, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(0, format!("label magic {magic}, expected {IDX_LABELS_MAGIC}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(idx_err(8 + body.len(), format!("label payload truncated: {} of {n} bytes", body.len())));
    }
    if body.len() > n {
        return Err(idx_err(8 + n, "trailing bytes after label payload"));
    }
    if let Some(i) = body.iter().position(|&b| b > 9) {
        return Err(idx_err(8 + i, format!("label {} outside 0..=9", body[i])));
    }
    Ok(body)
}

/// MNIST-style dataset from in-memory IDX files; pixels are scaled to `[0, 1]`.
pub fn idx_from_bytes(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let (n, h, w, px) = parse_idx_images(images)?;
    let lb = parse_idx_labels(labels)?;
    if lb.len() != n {
        return Err(idx_err(4, format!("label count {} does not match image count {n}", lb.len())));
    }
    let x = Tensor::matrix(n, h * w, px.iter().map(|&b| f64::from(b) / 255.0).collect())?;
    let y: Vec<usize> = lb.iter().map(|&b| usize::from(b)).collect();
    let k = y.iter().max().map_or(1, |m| m + 1);
    Dataset::new(x, Some(y), k, name)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path.as_ref())?;
    let labels = std::fs::read(labels_path)?;
    let name = images_path
        .as_ref()
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    idx_from_bytes(&images, &labels, &name)
}

/// IDX image and label bytes; pixels are `round(255·v)` clamped to a byte.
pub fn to_idx_bytes(ds: &Dataset, height: usize, width: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if height * width != ds.dim() {
        return Err(shape_err("to_idx_bytes", format!("{height}×{width} images for {}-wide rows", ds.dim())));
    }
    let y = ds.labels()?;
    if let Some(&c) = y.iter().find(|&&c| c > 9) {
        return Err(invalid(format!("label {c} does not fit the digit range")));
    }
    let mut img = Vec::with_capacity(16 + ds.x.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, height as u32, width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.x.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lbl = Vec::with_capacity(8 + y.len());
    for v in [IDX_LABELS_MAGIC, y.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(y.iter().map(|&c| c as u8));
    Ok((img, lbl))
}

/// Disjoint labeled, unlabeled and validation indices into one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SslSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified split: `val_fraction` of each class is held out, then
/// `labels_per_class` of each class are labeled and the rest unlabeled.
pub fn make_ssl_split(ds: &Dataset, labels_per_class: usize, val_fraction: f64, seed: u64) -> Result<SslSplit> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(invalid(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    if labels_per_class == 0 {
        return Err(invalid("at least one label per class is required"));
    }
    let key = StreamKey::root(seed).child("ssl-split");
    let mut split = SslSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        val: Vec::new(),
    };
    for (c, mut idx) in ds.class_indices()?.into_iter().enumerate() {
        idx.shuffle(&mut key.index(c as u64).rng());
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        let rest = idx.len() - n_val;
        if rest < labels_per_class {
            return Err(invalid(format!(
                "class {c} has {rest} training samples, fewer than {labels_per_class} labels requested"
            )));
        }
        split.val.extend_from_slice(&idx[..n_val]);
        split.labeled.extend_from_slice(&idx[n_val..n_val + labels_per_class]);
        split.unlabeled.extend_from_slice(&idx[n_val + labels_per_class..]);
    }
    split.labeled.sort_unstable();
    split.unlabeled.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Stratified training/validation split of a fully labeled source set.
pub fn make_source_split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<SslSplit> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(invalid(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let key = StreamKey::root(seed).child("source-split");
    let mut split = SslSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        val: Vec::new(),
    };
    for (c, mut idx) in ds.class_indices()?.into_iter().enumerate() {
        idx.shuffle(&mut key.index(c as u64).rng());
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        if n_val == idx.len() {
            return Err(invalid(format!("class {c} has no training samples left")));
        }
        split.val.extend_from_slice(&idx[..n_val]);
        split.labeled.extend_from_slice(&idx[n_val..]);
    }
    split.labeled.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Epoch-shuffled sampling over a pool of indices. Batch `step` covers
/// positions `step·b .. step·b + b` of the concatenated epoch permutations,
/// so batches are a pure function of `(seed, stream, step)`.
///
/// A batch larger than the pool is drawn uniformly with replacement.
pub fn sample_stream(pool: &[usize], batch: usize, key: StreamKey, step: u64) -> Vec<usize> {
    if batch == 0 || pool.is_empty() {
        return Vec::new();
    }
    let p = pool.len() as u64;
    if batch as u64 > p {
        let mut rng = key.child("replacement").index(step).rng();
        return (0..batch).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    }
    let perm = |epoch: u64| {
        let mut idx: Vec<usize> = pool.to_vec();
        idx.shuffle(&mut key.child("epoch").index(epoch).rng());
        idx
    };
    let start = step * batch as u64;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / p;
    let mut cur = perm(epoch);
    for pos in start..start + batch as u64 {
        if pos / p != epoch {
            epoch = pos / p;
            cur = perm(epoch);
        }
        out.push(cur[(pos % p) as usize]);
    }
    out
}

/// Labeled and unlabeled index batches for training step `step`; the two
/// streams are drawn independently.
pub fn next_batch(split: &SslSplit, n_l: usize, n_u: usize, seed: u64, step: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    next_batch_pools(&split.labeled, &split.unlabeled, n_l, n_u, seed, step)
}

/// [`next_batch`] over explicit pools (for example, source rows and target rows).
pub fn next_batch_pools(
    labeled: &[usize],
    unlabeled: &[usize],
    n_l: usize,
    n_u: usize,
    seed: u64,
    step: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_l == 0 {
        return Err(invalid("labeled batch size must be at least 1"));
    }
    if labeled.is_empty() {
        return Err(invalid("labeled pool is empty"));
    }
    if n_u > 0 && unlabeled.is_empty() {
        return Err(invalid("unlabeled pool is empty"));
    }
    let key = StreamKey::root(seed).child("batches");
    Ok((
        sample_stream(labeled, n_l, key.child("labeled"), step),
        sample_stream(unlabeled, n_u, key.child("unlabeled"), step),
    ))
}

/// Random translation of square images by up to `max_shift` pixels in each
/// direction, filling vacated pixels with zero.
pub fn shift_images(x: &Tensor, side: usize, max_shift: usize, key: StreamKey) -> Result<Tensor> {
    if side * side != x.cols() {
        return Err(shape_err("shift_images", format!("{}-wide rows are not {side}×{side} images", x.cols())));
    }
    let m = max_shift as i64;
    let mut out = Tensor::zeros(x.shape());
    let s = side as i64;
    for i in 0..x.rows() {
        let mut rng = key.index(i as u64).rng();
        let dx = rng.random_range(-m..=m);
        let dy = rng.random_range(-m..=m);
        let src = x.row(i);
        let dst = out.row_mut(i);
        for r in 0..s {
            let sr = r - dy;
            if !(0..s).contains(&sr) {
                continue;
            }
            for c in 0..s {
                let sc = c - dx;
                if (0..s).contains(&sc) {
                    dst[(r * s + c) as usize] = src[(sr * s + sc) as usize];
                }
            }
        }
    }
    Ok(out)
}

/// CSV with header `x0,..,x{d-1},y`; the `y` column is omitted when unlabeled.
pub fn to_csv(ds: &Dataset) -> String {
    let d = ds.dim();
    let mut s = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    if ds.y.is_some() {
        s.push_str(",y");
    }
    s.push('\n');
    for i in 0..ds.len() {
        let row = ds.x.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        if let Some(y) = &ds.y {
            write!(s, ",{}", y[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn from_csv(text: &str, k: Option<usize>, name: &str) -> Result<Dataset> {
    let csv_err = |line: usize, msg: String| Error::Format { kind: "CSV", offset: line, msg };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| csv_err(0, "missing header".into()))?.split(',').collect();
    let labeled = header.last() == Some(&"y");
    let d = header.len() - usize::from(labeled);
    for (j, h) in header[..d].iter().enumerate() {
        if *h != format!("x{j}") {
            return Err(csv_err(0, format!("unexpected column `{h}`")));
        }
    }
    let mut data = Vec::new();
    let mut ys = Vec::new();
    let mut n = 0;
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(csv_err(ln + 1, format!("{} fields, expected {}", fields.len(), header.len())));
        }
        for f in &fields[..d] {
            data.push(f.trim().parse::<f64>().map_err(|e| csv_err(ln + 1, format!("`{f}`: {e}")))?);
        }
        if labeled {
            let f = fields[d].trim();
            ys.push(f.parse::<usize>().map_err(|e| csv_err(ln + 1, format!("`{f}`: {e}")))?);
        }
        n += 1;
    }
    let k = k.unwrap_or_else(|| ys.iter().max().map_or(1, |m| m + 1));
    Dataset::new(Tensor::matrix(n, d, data)?, labeled.then_some(ys), k, name)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv(ds))?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>, k: Option<usize>) -> Result<Dataset> {
    let name = path
        .as_ref()
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    from_csv(&std::fs::read_to_string(path)?, k, &name)
}
