//! Binary codes: thresholding latent features into packed bits, Hamming
//! and Euclidean ranking, and the retrieval metrics used to compare them.

use std::fs;
use std::path::Path;

use crate::binio::{count_u32, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::THRESHOLD;

const CODES_MAGIC: &[u8; 4] = b"TQNC";
const CODES_VERSION: u32 = 1;

/// Fixed-length binary codes, bit `j` stored at word `j / 64`, position
/// `j % 64` (LSB first). Unused high bits of the last word are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodeSet {
    n_bits: usize,
    words_per_code: usize,
    count: usize,
    packed: Vec<u64>,
}

/// Borrowed view of one code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Code<'a> {
    pub n_bits: usize,
    pub words: &'a [u64],
}

fn words_for(n_bits: usize) -> usize {
    n_bits.div_ceil(64)
}

fn tail_mask(n_bits: usize) -> u64 {
    match n_bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BinaryCodeSet {
    /// Packs explicit bit vectors; every row must have `n_bits` entries.
    pub fn from_bits(n_bits: usize, rows: &[Vec<bool>]) -> Result<Self> {
        let wpc = words_for(n_bits);
        let mut packed = vec![0u64; wpc * rows.len()];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_bits {
                return Err(Error::invalid(format!(
                    "code {i} has {} bits, expected {n_bits}",
                    row.len()
                )));
            }
            for (j, &b) in row.iter().enumerate() {
                if b {
                    packed[i * wpc + j / 64] |= 1u64 << (j % 64);
                }
            }
        }
        Ok(Self {
            n_bits,
            words_per_code: wpc,
            count: rows.len(),
            packed,
        })
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn packed(&self) -> &[u64] {
        &self.packed
    }

    pub fn code(&self, i: usize) -> Code<'_> {
        Code {
            n_bits: self.n_bits,
            words: &self.packed[i * self.words_per_code..(i + 1) * self.words_per_code],
        }
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        assert!(
            j < self.n_bits,
            "bit {j} out of range for {} bits",
            self.n_bits
        );
        self.code(i).words[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn unpack(&self, i: usize) -> Vec<bool> {
        (0..self.n_bits).map(|j| self.bit(i, j)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 8 * self.packed.len());
        out.extend_from_slice(CODES_MAGIC);
        put_u32(&mut out, CODES_VERSION);
        put_u32(&mut out, count_u32("code count", self.count)?);
        put_u32(&mut out, count_u32("code length", self.n_bits)?);
        for &w in &self.packed {
            put_u64(&mut out, w);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("codes", bytes);
        r.expect_magic(CODES_MAGIC)?;
        let version = r.u32()?;
        if version != CODES_VERSION {
            return Err(r.err(format!("unsupported codes version {version}")));
        }
        let count = r.u32()? as usize;
        let n_bits = r.u32()? as usize;
        let wpc = words_for(n_bits);
        let expected = count
            .checked_mul(wpc * 8)
            .ok_or_else(|| r.err("code payload size overflows"))?;
        if bytes.len() - 16 != expected {
            return Err(r.err(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len() - 16
            )));
        }
        let mask = tail_mask(n_bits);
        let mut packed = Vec::with_capacity(count * wpc);
        for i in 0..count * wpc {
            let w = r.u64()?;
            if (i + 1) % wpc == 0 && w & !mask != 0 {
                return Err(r.err(format!("code {} has bits set beyond bit {n_bits}", i / wpc)));
            }
            packed.push(w);
        }
        r.finish()?;
        Ok(Self {
            n_bits,
            words_per_code: wpc,
            count,
            packed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One code per feature row: bit set iff the feature is strictly above 0.5.
pub fn quantize(features: &Matrix) -> Result<BinaryCodeSet> {
    if let Some(v) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!(
            "feature {v} outside [0, 1] cannot be quantized"
        )));
    }
    let n_bits = features.cols();
    let wpc = words_for(n_bits);
    let mut packed = vec![0u64; wpc * features.rows()];
    for i in 0..features.rows() {
        let code = &mut packed[i * wpc..(i + 1) * wpc];
        for (j, &f) in features.row(i).iter().enumerate() {
            if f > THRESHOLD {
                code[j / 64] |= 1u64 << (j % 64);
            }
        }
    }
    Ok(BinaryCodeSet {
        n_bits,
        words_per_code: wpc,
        count: features.rows(),
        packed,
    })
}

/// Number of differing bits.
pub fn hamming(a: Code<'_>, b: Code<'_>) -> Result<u32> {
    if a.n_bits != b.n_bits || a.words.len() != b.words.len() {
        return Err(Error::invalid(format!(
            "hamming: {} bits vs {} bits",
            a.n_bits, b.n_bits
        )));
    }
    Ok(a.words
        .iter()
        .zip(b.words)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum())
}

/// Database indices per query, most similar first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub per_query: Vec<Vec<usize>>,
}

impl Ranking {
    pub fn queries(&self) -> usize {
        self.per_query.len()
    }
}

/// Ascending Hamming distance, ties by ascending database index.
pub fn rank_by_hamming(queries: &BinaryCodeSet, db: &BinaryCodeSet) -> Result<Ranking> {
    if queries.n_bits != db.n_bits {
        return Err(Error::invalid(format!(
            "query codes have {} bits, database codes {}",
            queries.n_bits, db.n_bits
        )));
    }
    // Distances are bounded by n_bits, so a bucket pass is a stable sort.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); db.n_bits + 1];
    let per_query = (0..queries.len())
        .map(|q| {
            buckets.iter_mut().for_each(Vec::clear);
            let qc = queries.code(q);
            for i in 0..db.len() {
                let d = hamming(qc, db.code(i)).expect("equal lengths checked above");
                buckets[d as usize].push(i);
            }
            buckets.iter().flatten().copied().collect()
        })
        .collect();
    Ok(Ranking { per_query })
}

/// Ascending squared Euclidean distance, ties by ascending database index.
pub fn rank_by_euclidean(query_feats: &Matrix, db_feats: &Matrix) -> Result<Ranking> {
    if query_feats.cols() != db_feats.cols() {
        return Err(Error::invalid(format!(
            "query dimension {} vs database dimension {}",
            query_feats.cols(),
            db_feats.cols()
        )));
    }
    let per_query = (0..query_feats.rows())
        .map(|q| {
            let qr = query_feats.row(q);
            let dist: Vec<f64> = (0..db_feats.rows())
                .map(|i| {
                    qr.iter()
                        .zip(db_feats.row(i))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            let mut order: Vec<usize> = (0..db_feats.rows()).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            order
        })
        .collect();
    Ok(Ranking { per_query })
}

fn check_ranking(r: &Ranking, query_labels: &[u32], db_labels: &[u32]) -> Result<()> {
    if r.per_query.len() != query_labels.len() {
        return Err(Error::invalid(format!(
            "{} rankings for {} query labels",
            r.per_query.len(),
            query_labels.len()
        )));
    }
    if let Some(q) = r.per_query.iter().position(|p| p.len() != db_labels.len()) {
        return Err(Error::invalid(format!(
            "ranking for query {q} has {} entries, database has {}",
            r.per_query[q].len(),
            db_labels.len()
        )));
    }
    if r.per_query.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    Ok(())
}

/// Mean over queries of average precision over the full ranking.
pub fn mean_average_precision(r: &Ranking, query_labels: &[u32], db_labels: &[u32]) -> Result<f64> {
    check_ranking(r, query_labels, db_labels)?;
    let mut total = 0.0;
    for (q, order) in r.per_query.iter().enumerate() {
        let label = query_labels[q];
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if db_labels[i] == label {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits == 0 {
            return Err(Error::invalid(format!(
                "query {q} (label {label}) has no relevant database items"
            )));
        }
        total += precision_sum / hits as f64;
    }
    Ok(total / r.per_query.len() as f64)
}

/// Fraction of queries with at least one same-label item among the top `k`.
pub fn topk_accuracy(
    r: &Ranking,
    query_labels: &[u32],
    db_labels: &[u32],
    k: usize,
) -> Result<f64> {
    check_ranking(r, query_labels, db_labels)?;
    if k == 0 || k > db_labels.len() {
        return Err(Error::invalid(format!(
            "k = {k} must lie in [1, {}]",
            db_labels.len()
        )));
    }
    let hits = r
        .per_query
        .iter()
        .zip(query_labels)
        .filter(|(order, &label)| order[..k].iter().any(|&i| db_labels[i] == label))
        .count();
    Ok(hits as f64 / r.per_query.len() as f64)
}
