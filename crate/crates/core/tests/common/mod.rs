//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls into the code under test except to read
//! inputs back out.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tqn::hashing::BinaryCodeSet;
use tqn::linalg::Matrix;
use tqn::losses::{LossResult, TqnParams, TripletFeatures};

pub const FD_STEP: f64 = 1e-5;
/// Points closer than this to a hinge or clamp breakpoint are not checked.
pub const BREAKPOINT_GUARD: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Features kept away from 0 and 1 so that ±h stays inside the domain.
pub fn random_triplets(rng: &mut ChaCha8Rng, bs: usize, bits: usize) -> TripletFeatures {
    TripletFeatures::new(
        random_matrix(rng, bs, bits, 0.02, 0.98),
        random_matrix(rng, bs, bits, 0.02, 0.98),
        random_matrix(rng, bs, bits, 0.02, 0.98),
    )
    .unwrap()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Smallest distance of any triplet-loss hinge argument from zero.
pub fn triplet_breakpoint_gap(t: &TripletFeatures, alpha: f64) -> f64 {
    (0..t.batch_size())
        .map(|i| {
            let a = t.anchor.row(i);
            (alpha + sq_dist(a, t.positive.row(i)) - sq_dist(a, t.negative.row(i))).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn similar_breakpoint_gap(t: &TripletFeatures, alpha_s: f64) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..t.batch_size() {
        for j in 0..t.bits() {
            let prod = (t.anchor[(i, j)] - 0.5) * (t.positive[(i, j)] - 0.5);
            gap = gap.min((alpha_s - prod).abs());
        }
    }
    gap
}

/// Covers both the per-coordinate clamp at `delta` and the outer hinge.
pub fn dissimilar_breakpoint_gap(t: &TripletFeatures, alpha_d: f64, delta: f64) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..t.batch_size() {
        let mut clamped = 0.0;
        for j in 0..t.bits() {
            let d = t.anchor[(i, j)] - t.negative[(i, j)];
            gap = gap.min((d * d - delta).abs());
            clamped += (d * d).min(delta);
        }
        gap = gap.min((alpha_d - clamped).abs());
    }
    gap
}

pub fn tqn_breakpoint_gap(t: &TripletFeatures, p: &TqnParams) -> f64 {
    similar_breakpoint_gap(t, p.alpha_s).min(dissimilar_breakpoint_gap(t, p.alpha_d, p.delta))
}

/// Largest relative error between the analytic gradient of `loss` and a
/// central difference with step `h`, over every coordinate of a, p and n.
pub fn loss_fd_error(
    t: &TripletFeatures,
    h: f64,
    loss: impl Fn(&TripletFeatures) -> LossResult,
) -> f64 {
    let analytic = loss(t);
    let mut worst: f64 = 0.0;
    for role in 0..3 {
        let grad = match role {
            0 => &analytic.grad_a,
            1 => &analytic.grad_p,
            _ => &analytic.grad_n,
        };
        for i in 0..t.batch_size() {
            for j in 0..t.bits() {
                let value_at = |shift: f64| {
                    let mut moved = t.clone();
                    let m = match role {
                        0 => &mut moved.anchor,
                        1 => &mut moved.positive,
                        _ => &mut moved.negative,
                    };
                    m.row_mut(i)[j] += shift;
                    loss(&moved).value
                };
                let fd = (value_at(h) - value_at(-h)) / (2.0 * h);
                worst = worst.max(rel_err(grad[(i, j)], fd));
            }
        }
    }
    worst
}

/// Per-bit Hamming distance read through `unpack`.
pub fn hamming_oracle(codes_a: &BinaryCodeSet, i: usize, codes_b: &BinaryCodeSet, k: usize) -> u32 {
    let a = codes_a.unpack(i);
    let b = codes_b.unpack(k);
    assert_eq!(a.len(), b.len());
    let mut d = 0;
    for j in 0..a.len() {
        if a[j] != b[j] {
            d += 1;
        }
    }
    d
}

/// Selection sort on (distance, index): repeatedly takes the smallest
/// remaining pair.
pub fn selection_order<D: PartialOrd + Copy>(dist: &[D]) -> Vec<usize> {
    let n = dist.len();
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| dist[i] < dist[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        order.push(b);
    }
    order
}

pub fn hamming_ranking_oracle(queries: &BinaryCodeSet, db: &BinaryCodeSet) -> Vec<Vec<usize>> {
    (0..queries.len())
        .map(|q| {
            let dist: Vec<u32> = (0..db.len())
                .map(|i| hamming_oracle(queries, q, db, i))
                .collect();
            selection_order(&dist)
        })
        .collect()
}

pub fn euclidean_ranking_oracle(queries: &Matrix, db: &Matrix) -> Vec<Vec<usize>> {
    (0..queries.rows())
        .map(|q| {
            let dist: Vec<f64> = (0..db.rows())
                .map(|i| {
                    let mut s = 0.0;
                    for j in 0..db.cols() {
                        let d = queries[(q, j)] - db[(i, j)];
                        s += d * d;
                    }
                    s
                })
                .collect();
            selection_order(&dist)
        })
        .collect()
}

/// AP recomputed from scratch at every relevant rank.
pub fn map_oracle(per_query: &[Vec<usize>], query_labels: &[u32], db_labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (q, order) in per_query.iter().enumerate() {
        let mut relevant = 0;
        let mut sum = 0.0;
        for k in 0..order.len() {
            if db_labels[order[k]] != query_labels[q] {
                continue;
            }
            relevant += 1;
            let mut in_top = 0;
            for m in 0..=k {
                if db_labels[order[m]] == query_labels[q] {
                    in_top += 1;
                }
            }
            sum += in_top as f64 / (k + 1) as f64;
        }
        assert!(
            relevant > 0,
            "oracle called with a query that has no relevant items"
        );
        total += sum / relevant as f64;
    }
    total / per_query.len() as f64
}

pub fn topk_oracle(
    per_query: &[Vec<usize>],
    query_labels: &[u32],
    db_labels: &[u32],
    k: usize,
) -> f64 {
    let mut hits = 0;
    for (q, order) in per_query.iter().enumerate() {
        let mut found = false;
        for m in 0..k {
            if db_labels[order[m]] == query_labels[q] {
                found = true;
            }
        }
        if found {
            hits += 1;
        }
    }
    hits as f64 / per_query.len() as f64
}

pub fn random_codes(rng: &mut ChaCha8Rng, count: usize, n_bits: usize) -> BinaryCodeSet {
    let rows: Vec<Vec<bool>> = (0..count)
        .map(|_| (0..n_bits).map(|_| rng.random_bool(0.5)).collect())
        .collect();
    BinaryCodeSet::from_bits(n_bits, &rows).unwrap()
}

/// Features on a coarse grid so that distance ties are common.
pub fn grid_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(0..5) as f64 * 0.25)
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}
