//! Labeled feature datasets: synthetic Gaussian clusters, CSV and TQNF
//! files, held-out splits, and triplet sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{count_u32, put_f32, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const DATASET_MAGIC: &[u8; 4] = b"TQNF";
const DATASET_VERSION: u32 = 1;

/// Feature rows with one class id per row. Items with equal labels are
/// similar, all others dissimilar.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<u32>,
    classes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Tqnf,
}

impl DataFormat {
    /// `.csv` means CSV, anything else TQNF.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Tqnf,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DataFormat::Csv),
            "tqnf" => Ok(DataFormat::Tqnf),
            other => Err(Error::invalid(format!("unknown data format '{other}'"))),
        }
    }
}

impl LabeledDataset {
    /// Class count is `max label + 1`.
    pub fn new(features: Matrix, labels: Vec<u32>) -> Result<Self> {
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        Self::with_classes(features, labels, classes)
    }

    pub fn with_classes(features: Matrix, labels: Vec<u32>, classes: u32) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Item count per class id.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes as usize];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Splits off `fraction` of every class (at least one item, rounded
    /// down) as queries; the rest is the database. Item order is kept in
    /// both parts.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!(
                "holdout fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut is_query = vec![false; self.len()];
        for (class, members) in self.members_by_class().into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            if members.len() < 2 {
                return Err(Error::invalid(format!(
                    "class {class} has {} item(s); a split needs at least 2",
                    members.len()
                )));
            }
            let take =
                ((members.len() as f64 * fraction).floor() as usize).clamp(1, members.len() - 1);
            let mut shuffled = members;
            shuffled.shuffle(&mut rng);
            for &i in &shuffled[..take] {
                is_query[i] = true;
            }
        }
        let (queries, db): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| is_query[i]);
        Ok((self.subset(&db), self.subset(&queries)))
    }

    fn members_by_class(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.classes as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            members[l as usize].push(i);
        }
        members
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            write!(out, "{}", self.labels[i]).unwrap();
            for v in self.features.row(i) {
                // Display prints the shortest string that parses back exactly.
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut data = Vec::new();
        let mut dim: Option<usize> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let at = || format!("line {line_no}");
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label_field = fields.next().unwrap_or("").trim();
            let label: i64 = label_field
                .parse()
                .map_err(|_| Error::format(at(), format!("bad label '{label_field}'")))?;
            if label < 0 {
                return Err(Error::format(at(), format!("negative label {label}")));
            }
            let label = u32::try_from(label)
                .map_err(|_| Error::format(at(), format!("label {label} too large")))?;
            let start = data.len();
            for f in fields {
                let f = f.trim();
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::format(at(), format!("bad value '{f}'")))?;
                if !v.is_finite() {
                    return Err(Error::format(at(), format!("non-finite value '{f}'")));
                }
                data.push(v);
            }
            let row_dim = data.len() - start;
            match dim {
                None if row_dim == 0 => {
                    return Err(Error::format(at(), "row has no feature values"))
                }
                None => dim = Some(row_dim),
                Some(d) if d != row_dim => {
                    return Err(Error::format(
                        at(),
                        format!("row has {row_dim} values, expected {d}"),
                    ))
                }
                Some(_) => {}
            }
            labels.push(label);
        }
        let dim = dim.ok_or_else(|| Error::format("line 1", "no data rows"))?;
        let features = Matrix::from_vec(labels.len(), dim, data)?;
        Self::new(features, labels)
    }

    pub fn to_tqnf_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + self.len() * (4 + 4 * self.dim()));
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, count_u32("item count", self.len())?);
        put_u32(&mut out, count_u32("dimension", self.dim())?);
        put_u32(&mut out, self.classes);
        for &l in &self.labels {
            put_u32(&mut out, l);
        }
        for &v in self.features.data() {
            put_f32(&mut out, v as f32);
        }
        Ok(out)
    }

    pub fn from_tqnf_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("dataset", bytes);
        r.expect_magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.err(format!("unsupported dataset version {version}")));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let classes = r.u32()?;
        let expected = count
            .checked_mul(4 + 4 * dim)
            .ok_or_else(|| r.err("dataset size overflows"))?;
        if bytes.len() - 20 != expected {
            return Err(r.err(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len() - 20
            )));
        }
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let l = r.u32()?;
            if l >= classes {
                return Err(r.err(format!("item {i} label {l} >= class count {classes}")));
            }
            labels.push(l);
        }
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(r.err("non-finite feature value"));
            }
            data.push(v as f64);
        }
        r.finish()?;
        Self::with_classes(Matrix::from_vec(count, dim, data)?, labels, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>, format: DataFormat) -> Result<()> {
        match format {
            DataFormat::Csv => fs::write(path, self.to_csv_string())?,
            DataFormat::Tqnf => fs::write(path, self.to_tqnf_bytes()?)?,
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, format: DataFormat) -> Result<Self> {
        match format {
            DataFormat::Csv => {
                let text = fs::read_to_string(path)?;
                Self::from_csv_str(&text)
            }
            DataFormat::Tqnf => Self::from_tqnf_bytes(&fs::read(path)?),
        }
    }
}

/// Gaussian blobs around centers drawn uniformly from `[−1, 1]^dim`.
/// Items are grouped by class, `per_class` each.
pub fn gen_clusters(
    classes: u32,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || per_class < 2 || dim == 0 {
        return Err(Error::invalid(format!(
            "need classes >= 2, per_class >= 2, dim >= 1 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be > 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let n = classes as usize * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(c as u32);
        }
    }
    LabeledDataset::with_classes(Matrix::from_vec(n, dim, data)?, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletIndexBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletIndexBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn anchors(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.anchor).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.positive).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.negative).collect()
    }
}

/// Draws triplets for a dataset. Anchors visit every item once per epoch
/// in shuffled order; the positive is uniform over the other items of the
/// anchor's class, the negative uniform over all items of other classes.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    labels: Vec<u32>,
    /// Item ids grouped by class, classes in ascending order.
    grouped: Vec<usize>,
    /// Start of each class inside `grouped`; one extra trailing entry.
    class_start: Vec<usize>,
    /// Position of each item inside `grouped`.
    slot: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl TripletSampler {
    pub fn new(data: &LabeledDataset, seed: u64) -> Result<Self> {
        let members = data.members_by_class();
        let present = members.iter().filter(|m| !m.is_empty()).count();
        if present < 2 {
            return Err(Error::invalid(format!(
                "triplet sampling needs at least 2 classes, found {present}"
            )));
        }
        if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| m.len() == 1) {
            return Err(Error::invalid(format!(
                "class {c} has {} item; positives need at least 2",
                m.len()
            )));
        }
        let mut grouped = Vec::with_capacity(data.len());
        let mut class_start = Vec::with_capacity(members.len() + 1);
        let mut slot = vec![0; data.len()];
        for m in &members {
            class_start.push(grouped.len());
            for &i in m {
                slot[i] = grouped.len();
                grouped.push(i);
            }
        }
        class_start.push(grouped.len());
        Ok(Self {
            labels: data.labels.clone(),
            grouped,
            class_start,
            slot,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.labels.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn complete(&mut self, anchor: usize) -> Triplet {
        let class = self.labels[anchor] as usize;
        let (lo, hi) = (self.class_start[class], self.class_start[class + 1]);
        let own = self.slot[anchor] - lo;
        let mut r = self.rng.random_range(0..hi - lo - 1);
        if r >= own {
            r += 1;
        }
        let positive = self.grouped[lo + r];
        let others = self.grouped.len() - (hi - lo);
        let mut r = self.rng.random_range(0..others);
        if r >= lo {
            r += hi - lo;
        }
        let negative = self.grouped[r];
        Triplet {
            anchor,
            positive,
            negative,
        }
    }

    /// Next `bs` triplets, continuing the current epoch and starting a new
    /// shuffled one whenever the anchors run out.
    pub fn next_batch(&mut self, bs: usize) -> Result<TripletIndexBatch> {
        if bs == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        let mut triplets = Vec::with_capacity(bs);
        while triplets.len() < bs {
            if self.cursor >= self.order.len() {
                self.reshuffle();
            }
            let a = self.order[self.cursor];
            self.cursor += 1;
            triplets.push(self.complete(a));
        }
        Ok(TripletIndexBatch { triplets })
    }

    /// One full epoch: every item is an anchor exactly once, chunked into
    /// batches of `bs` (the last may be shorter). Discards any partially
    /// consumed epoch.
    pub fn epoch(&mut self, bs: usize) -> Result<Vec<TripletIndexBatch>> {
        if bs == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        self.reshuffle();
        let order = std::mem::take(&mut self.order);
        let batches = order
            .chunks(bs)
            .map(|chunk| TripletIndexBatch {
                triplets: chunk.iter().map(|&a| self.complete(a)).collect(),
            })
            .collect();
        self.cursor = order.len();
        self.order = order;
        Ok(batches)
    }
}

/// Draws one batch from `sampler`.
pub fn sample_triplets(sampler: &mut TripletSampler, bs: usize) -> Result<TripletIndexBatch> {
    sampler.next_batch(bs)
}
