//! Triplet loss and the triplet quantization loss over sigmoid latent
//! features, with analytic gradients for each role of the triplet.
//!
//! All hinges use the subgradient 0 at their breakpoint: a hinge whose
//! argument is exactly zero, or a clamped dimension with squared distance
//! exactly equal to the clamp, contributes no gradient.

use crate::error::{Error, Result};
use crate::linalg::{ensure_same_shape, Matrix};

/// Quantization threshold applied to sigmoid outputs.
pub const THRESHOLD: f64 = 0.5;

/// Latent outputs for a batch of triplets, one row per triplet.
#[derive(Debug, Clone)]
pub struct TripletFeatures {
    pub anchor: Matrix,
    pub positive: Matrix,
    pub negative: Matrix,
}

impl TripletFeatures {
    /// Validates that the three matrices share a shape, hold at least one
    /// triplet, and lie in the open unit interval.
    pub fn new(anchor: Matrix, positive: Matrix, negative: Matrix) -> Result<Self> {
        ensure_same_shape(&anchor, &positive, "triplet features")?;
        ensure_same_shape(&anchor, &negative, "triplet features")?;
        if anchor.rows() == 0 {
            return Err(Error::invalid("triplet batch is empty"));
        }
        for m in [&anchor, &positive, &negative] {
            if let Some(v) = m.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                return Err(Error::invalid(format!(
                    "latent feature {v} outside the open interval (0, 1)"
                )));
            }
        }
        Ok(Self {
            anchor,
            positive,
            negative,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.anchor.rows()
    }

    pub fn bits(&self) -> usize {
        self.anchor.cols()
    }

    fn zeros_like(&self) -> Matrix {
        Matrix::zeros(self.anchor.rows(), self.anchor.cols())
    }
}

/// Loss value plus its gradient with respect to each role's features.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_p: Matrix,
    pub grad_n: Matrix,
}

impl LossResult {
    fn zero(t: &TripletFeatures) -> Self {
        Self {
            value: 0.0,
            grad_a: t.zeros_like(),
            grad_p: t.zeros_like(),
            grad_n: t.zeros_like(),
        }
    }

    /// `self += weight * other`.
    fn accumulate(&mut self, other: &LossResult, weight: f64) -> Result<()> {
        self.value += weight * other.value;
        self.grad_a.add_scaled(&other.grad_a, weight)?;
        self.grad_p.add_scaled(&other.grad_p, weight)?;
        self.grad_n.add_scaled(&other.grad_n, weight)?;
        Ok(())
    }
}

/// Weights and slacks of the triplet quantization loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TqnParams {
    pub beta: f64,
    pub gamma: f64,
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub delta: f64,
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::invalid(format!("{name} must be finite, got {v}")));
    }
    Ok(())
}

/// Margin triplet loss `1/(2bs) Σ max(α + ‖a−p‖² − ‖a−n‖², 0)`.
pub fn triplet_loss(t: &TripletFeatures, alpha: f64) -> Result<LossResult> {
    check_finite("margin", alpha)?;
    if alpha < 0.0 {
        return Err(Error::invalid(format!("margin must be >= 0, got {alpha}")));
    }
    let bs = t.batch_size() as f64;
    let mut out = LossResult::zero(t);
    let mut total = 0.0;
    for i in 0..t.batch_size() {
        let (a, p, n) = (t.anchor.row(i), t.positive.row(i), t.negative.row(i));
        let d_pos: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
        let d_neg: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
        let hinge = alpha + d_pos - d_neg;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        let ga = out.grad_a.row_mut(i);
        for j in 0..a.len() {
            ga[j] = (n[j] - p[j]) / bs;
        }
        let gp = out.grad_p.row_mut(i);
        for j in 0..a.len() {
            gp[j] = (p[j] - a[j]) / bs;
        }
        let gn = out.grad_n.row_mut(i);
        for j in 0..a.len() {
            gn[j] = (a[j] - n[j]) / bs;
        }
    }
    out.value = total / (2.0 * bs);
    Ok(out)
}

/// Per-dimension same-side hinge for anchor/positive pairs,
/// `1/bs ΣᵢΣⱼ max(α_s − (aⱼ−½)(pⱼ−½), 0)`.
pub fn similar_loss(t: &TripletFeatures, alpha_s: f64) -> Result<LossResult> {
    check_finite("alpha_s", alpha_s)?;
    if !(0.0..=0.25).contains(&alpha_s) {
        return Err(Error::invalid(format!(
            "alpha_s must lie in [0, 0.25], got {alpha_s}"
        )));
    }
    let bs = t.batch_size() as f64;
    let mut out = LossResult::zero(t);
    let mut total = 0.0;
    for i in 0..t.batch_size() {
        let (a, p) = (t.anchor.row(i), t.positive.row(i));
        for j in 0..a.len() {
            let (ca, cp) = (a[j] - THRESHOLD, p[j] - THRESHOLD);
            let hinge = alpha_s - ca * cp;
            if hinge <= 0.0 {
                continue;
            }
            total += hinge;
            out.grad_a[(i, j)] = -cp / bs;
            out.grad_p[(i, j)] = -ca / bs;
        }
    }
    out.value = total / bs;
    Ok(out)
}

/// Clamped-distance hinge for anchor/negative pairs,
/// `1/(2bs) Σᵢ max(α_d − Σⱼ min((aⱼ−nⱼ)², δ), 0)`.
pub fn dissimilar_loss(t: &TripletFeatures, alpha_d: f64, delta: f64) -> Result<LossResult> {
    check_finite("alpha_d", alpha_d)?;
    check_finite("delta", delta)?;
    if alpha_d <= 0.0 || delta <= 0.0 {
        return Err(Error::invalid(format!(
            "alpha_d and delta must be > 0, got {alpha_d} and {delta}"
        )));
    }
    let bs = t.batch_size() as f64;
    let mut out = LossResult::zero(t);
    let mut total = 0.0;
    for i in 0..t.batch_size() {
        let (a, n) = (t.anchor.row(i), t.negative.row(i));
        let clamped: f64 = a
            .iter()
            .zip(n)
            .map(|(x, y)| ((x - y) * (x - y)).min(delta))
            .sum();
        let hinge = alpha_d - clamped;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        for j in 0..a.len() {
            let diff = a[j] - n[j];
            if diff * diff < delta {
                out.grad_a[(i, j)] = -diff / bs;
                out.grad_n[(i, j)] = diff / bs;
            }
        }
    }
    out.value = total / (2.0 * bs);
    Ok(out)
}

/// Triplet quantization loss `β·L_s + γ·L_d`.
pub fn tqn_loss(t: &TripletFeatures, p: &TqnParams) -> Result<LossResult> {
    check_finite("beta", p.beta)?;
    check_finite("gamma", p.gamma)?;
    if p.beta < 0.0 || p.gamma < 0.0 {
        return Err(Error::invalid(format!(
            "beta and gamma must be >= 0, got {} and {}",
            p.beta, p.gamma
        )));
    }
    let sim = similar_loss(t, p.alpha_s)?;
    let dis = dissimilar_loss(t, p.alpha_d, p.delta)?;
    let mut out = LossResult::zero(t);
    out.accumulate(&sim, p.beta)?;
    out.accumulate(&dis, p.gamma)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feats(a: &[&[f64]], p: &[&[f64]], n: &[&[f64]]) -> TripletFeatures {
        TripletFeatures::new(
            Matrix::from_rows(a).unwrap(),
            Matrix::from_rows(p).unwrap(),
            Matrix::from_rows(n).unwrap(),
        )
        .unwrap()
    }

    fn assert_close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} != {b}");
    }

    fn all_zero(m: &Matrix) -> bool {
        m.data().iter().all(|&v| v == 0.0)
    }

    #[test]
    fn triplet_coincident_features_give_half_margin() {
        let t = feats(&[&[0.3, 0.8]], &[&[0.3, 0.8]], &[&[0.3, 0.8]]);
        assert_close(triplet_loss(&t, 1.6).unwrap().value, 0.8);
    }

    #[test]
    fn triplet_inactive_hinge() {
        let t = feats(&[&[0.5]], &[&[0.5]], &[&[0.9]]);
        let r = triplet_loss(&t, 0.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(all_zero(&r.grad_a) && all_zero(&r.grad_p) && all_zero(&r.grad_n));
    }

    #[test]
    fn triplet_active_hinge() {
        let t = feats(&[&[0.5]], &[&[0.9]], &[&[0.5]]);
        let r = triplet_loss(&t, 0.1).unwrap();
        assert_close(r.value, 0.13);
        assert_close(r.grad_a[(0, 0)], 0.5 - 0.9);
        assert_close(r.grad_p[(0, 0)], 0.9 - 0.5);
        assert_close(r.grad_n[(0, 0)], 0.0);
    }

    #[test]
    fn similar_loss_examples() {
        let at_margin = feats(&[&[0.9]], &[&[0.9]], &[&[0.1]]);
        assert_close(similar_loss(&at_margin, 0.16).unwrap().value, 0.0);
        let at_threshold = feats(&[&[0.5]], &[&[0.5]], &[&[0.1]]);
        assert_close(similar_loss(&at_threshold, 0.16).unwrap().value, 0.16);
        let split = feats(&[&[0.6]], &[&[0.4]], &[&[0.1]]);
        let r = similar_loss(&split, 0.16).unwrap();
        assert_close(r.value, 0.17);
        assert_close(r.grad_a[(0, 0)], 0.5 - 0.4);
        assert_close(r.grad_p[(0, 0)], 0.5 - 0.6);
    }

    #[test]
    fn dissimilar_loss_examples() {
        let same = feats(&[&[0.7]], &[&[0.2]], &[&[0.7]]);
        assert_close(dissimilar_loss(&same, 0.5, 0.64).unwrap().value, 0.25);

        let far = feats(&[&[0.9]], &[&[0.2]], &[&[0.1]]);
        let r = dissimilar_loss(&far, 0.5, 0.64).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(all_zero(&r.grad_a) && all_zero(&r.grad_n));

        let mixed = feats(&[&[0.9, 0.9]], &[&[0.2, 0.2]], &[&[0.1, 0.9]]);
        let r = dissimilar_loss(&mixed, 1.0, 0.64).unwrap();
        assert_close(r.value, 0.18);
        assert_eq!(r.grad_a[(0, 1)], 0.0);
        assert_eq!(r.grad_n[(0, 1)], 0.0);
    }

    #[test]
    fn clamped_dimension_has_no_gradient() {
        let t = feats(&[&[0.95, 0.6]], &[&[0.9, 0.9]], &[&[0.05, 0.5]]);
        let r = dissimilar_loss(&t, 5.0, 0.64).unwrap();
        assert_eq!(r.grad_a[(0, 0)], 0.0);
        assert_eq!(r.grad_n[(0, 0)], 0.0);
        assert_close(r.grad_a[(0, 1)], -0.1);
        assert_close(r.grad_n[(0, 1)], 0.1);
    }

    #[test]
    fn tqn_zero_weights() {
        let t = feats(&[&[0.3, 0.6]], &[&[0.7, 0.4]], &[&[0.3, 0.6]]);
        let p = TqnParams {
            beta: 0.0,
            gamma: 0.0,
            alpha_s: 0.16,
            alpha_d: 2.0,
            delta: 0.64,
        };
        let r = tqn_loss(&t, &p).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(all_zero(&r.grad_a) && all_zero(&r.grad_p) && all_zero(&r.grad_n));
    }

    #[test]
    fn tqn_composes_hand_components() {
        // Dimension 0 reproduces the similar-loss split example (0.17 at N=1);
        // with N=2 the second dimension adds max(0.16 − 0.16, 0) = 0.
        // Anchor/negative reproduce the dissimilar example (0.18).
        let t = feats(&[&[0.6, 0.9]], &[&[0.4, 0.9]], &[&[0.9, 0.9]]);
        let p = TqnParams {
            beta: 8.0,
            gamma: 1.0,
            alpha_s: 0.16,
            alpha_d: 1.0,
            delta: 0.64,
        };
        let ls = similar_loss(&t, 0.16).unwrap().value;
        let ld = dissimilar_loss(&t, 1.0, 0.64).unwrap().value;
        assert_close(ls, 0.17);
        // (0.6−0.9)² = 0.09 unclamped, second dimension 0.
        assert_close(ld, (1.0 - 0.09) / 2.0);
        assert_close(tqn_loss(&t, &p).unwrap().value, 8.0 * ls + ld);
    }

    #[test]
    fn tqn_both_hinges_inactive() {
        let t = feats(&[&[0.9]], &[&[0.9]], &[&[0.1]]);
        let p = TqnParams {
            beta: 8.0,
            gamma: 1.0,
            alpha_s: 0.16,
            alpha_d: 0.5,
            delta: 0.64,
        };
        assert_close(tqn_loss(&t, &p).unwrap().value, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Matrix::from_rows(&[[0.3, 0.4]]).unwrap();
        let b = Matrix::from_rows(&[[0.3]]).unwrap();
        assert!(TripletFeatures::new(a.clone(), b, a.clone()).is_err());
        let edge = Matrix::from_rows(&[[0.0, 0.4]]).unwrap();
        assert!(TripletFeatures::new(a.clone(), edge, a.clone()).is_err());
        let t = TripletFeatures::new(a.clone(), a.clone(), a).unwrap();
        assert!(triplet_loss(&t, -1.0).is_err());
        assert!(similar_loss(&t, 0.3).is_err());
        assert!(dissimilar_loss(&t, 0.0, 0.64).is_err());
        assert!(dissimilar_loss(&t, 1.0, 0.0).is_err());
    }

    fn arb_features() -> impl Strategy<Value = TripletFeatures> {
        (1usize..=4, 1usize..=8).prop_flat_map(|(bs, n)| {
            prop::collection::vec(0.01f64..0.99, 3 * bs * n).prop_map(move |v| {
                let m = |k: usize| {
                    Matrix::from_vec(bs, n, v[k * bs * n..(k + 1) * bs * n].to_vec()).unwrap()
                };
                TripletFeatures::new(m(0), m(1), m(2)).unwrap()
            })
        })
    }

    fn reverse_rows(t: &TripletFeatures) -> TripletFeatures {
        let idx: Vec<usize> = (0..t.batch_size()).rev().collect();
        TripletFeatures::new(
            t.anchor.select_rows(&idx),
            t.positive.select_rows(&idx),
            t.negative.select_rows(&idx),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn role_gradients_vanish(t in arb_features(), alpha_s in 0.0f64..0.25, alpha_d in 0.1f64..6.0) {
            prop_assert!(all_zero(&similar_loss(&t, alpha_s).unwrap().grad_n));
            prop_assert!(all_zero(&dissimilar_loss(&t, alpha_d, 0.64).unwrap().grad_p));
        }

        #[test]
        fn values_are_bounded(t in arb_features(), alpha_s in 0.0f64..0.25, alpha_d in 0.1f64..6.0) {
            let s = similar_loss(&t, alpha_s).unwrap().value;
            prop_assert!(s >= 0.0);
            prop_assert!(s <= t.bits() as f64 * (alpha_s + 0.25) + 1e-12);
            prop_assert!(dissimilar_loss(&t, alpha_d, 0.64).unwrap().value >= 0.0);
            prop_assert!(triplet_loss(&t, 1.6).unwrap().value >= 0.0);
        }

        #[test]
        fn tqn_is_linear_in_weights(t in arb_features(), b1 in 0.0f64..10.0, b2 in 0.0f64..10.0, g in 0.0f64..10.0) {
            let base = TqnParams { beta: b1, gamma: g, alpha_s: 0.16, alpha_d: 2.73, delta: 0.64 };
            let joint = tqn_loss(&t, &TqnParams { beta: b1 + b2, ..base }).unwrap().value;
            let split = tqn_loss(&t, &base).unwrap().value
                + tqn_loss(&t, &TqnParams { beta: b2, gamma: 0.0, ..base }).unwrap().value;
            prop_assert!((joint - split).abs() <= 1e-12 * joint.abs().max(1.0));
        }

        #[test]
        fn batch_permutation_invariance(t in arb_features()) {
            let r = reverse_rows(&t);
            let p = TqnParams { beta: 8.0, gamma: 1.0, alpha_s: 0.16, alpha_d: 2.73, delta: 0.64 };
            let (x, y) = (tqn_loss(&t, &p).unwrap(), tqn_loss(&r, &p).unwrap());
            prop_assert!((x.value - y.value).abs() <= 1e-12);
            let rows: Vec<usize> = (0..t.batch_size()).rev().collect();
            prop_assert_eq!(x.grad_a.select_rows(&rows), y.grad_a);
            let (x, y) = (triplet_loss(&t, 1.6).unwrap(), triplet_loss(&r, 1.6).unwrap());
            prop_assert!((x.value - y.value).abs() <= 1e-12);
        }
    }
}
