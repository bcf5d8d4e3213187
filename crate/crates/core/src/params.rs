//! Parameter analysis for the quantization loss: minimal code length,
//! expected Hamming distance between distinct random codes, and the
//! calculators for the similar/dissimilar slacks and the distance clamp.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the dissimilar slack α_d counts the dimensions that must flip.
///
/// `Eq16` is the closed-form bound. The two table modes are the counting
/// conventions that reproduce the published parameter table: `CifarTable`
/// charges the full `M` bits plus ω at the 4Δ² rate, `InshopTable` charges
/// `⌈M/2⌉ + ω` at 4Δ² but leaves `N − M` dimensions at the ε² rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaDMode {
    #[default]
    Eq16,
    CifarTable,
    InshopTable,
}

impl FromStr for AlphaDMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "eq16" => Ok(AlphaDMode::Eq16),
            "cifar-table" => Ok(AlphaDMode::CifarTable),
            "inshop-table" => Ok(AlphaDMode::InshopTable),
            other => Err(Error::invalid(format!(
                "unknown alpha_d mode '{other}' (expected eq16, cifar-table or inshop-table)"
            ))),
        }
    }
}

impl fmt::Display for AlphaDMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaDMode::Eq16 => "eq16",
            AlphaDMode::CifarTable => "cifar-table",
            AlphaDMode::InshopTable => "inshop-table",
        })
    }
}

/// User-facing hashing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashParams {
    /// Code length N in bits.
    pub bits: u32,
    /// Number of classes C.
    pub classes: u64,
    /// Required distance Δ of every feature from the 0.5 threshold.
    pub delta_margin: f64,
    /// Slack ω in bits for nonzero Hamming distance between similar pairs.
    pub omega: f64,
    /// Residual per-dimension margin ε.
    pub epsilon: f64,
    pub mode: AlphaDMode,
}

/// Quantities derived from [`HashParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedParams {
    pub min_bits: u32,
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub delta: f64,
}

impl HashParams {
    pub fn validate(&self) -> Result<()> {
        let m = min_bits(self.classes)?;
        if self.bits < m {
            return Err(Error::invalid(format!(
                "{} bits cannot cover {} classes (need at least {m})",
                self.bits, self.classes
            )));
        }
        check_unit_half("Delta", self.delta_margin)?;
        check_unit_half("epsilon", self.epsilon)?;
        if !(self.omega >= 0.0 && self.omega <= self.bits as f64) {
            return Err(Error::invalid(format!(
                "omega must lie in [0, {}], got {}",
                self.bits, self.omega
            )));
        }
        Ok(())
    }

    pub fn derive(&self) -> Result<DerivedParams> {
        let alpha_d = compute_alpha_d(self)?;
        if alpha_d <= 0.0 {
            return Err(Error::invalid(format!(
                "derived alpha_d must be > 0, got {alpha_d}"
            )));
        }
        Ok(DerivedParams {
            min_bits: min_bits(self.classes)?,
            alpha_s: compute_alpha_s(self.delta_margin)?,
            alpha_d,
            delta: compute_delta(self.delta_margin)?,
        })
    }
}

fn check_unit_half(name: &str, v: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&v) {
        return Err(Error::invalid(format!(
            "{name} must lie in [0, 0.5], got {v}"
        )));
    }
    Ok(())
}

/// `⌈log₂ C⌉`, the fewest bits that give every class its own code.
pub fn min_bits(classes: u64) -> Result<u32> {
    if classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    Ok(u64::BITS - (classes - 1).leading_zeros())
}

/// Expected Hamming distance between two distinct uniformly random
/// `m`-bit codes: `p·m` with `p = 2^(m−1) / (2^m − 1)`.
pub fn expected_hamming(m: u32) -> Result<f64> {
    if !(1..=62).contains(&m) {
        return Err(Error::invalid(format!("code length {m} outside [1, 62]")));
    }
    let half = (1u64 << (m - 1)) as f64;
    let distinct = ((1u64 << m) - 1) as f64;
    Ok(half / distinct * m as f64)
}

pub fn compute_alpha_s(delta_margin: f64) -> Result<f64> {
    check_unit_half("Delta", delta_margin)?;
    Ok(delta_margin * delta_margin)
}

pub fn compute_delta(delta_margin: f64) -> Result<f64> {
    check_unit_half("Delta", delta_margin)?;
    Ok(4.0 * delta_margin * delta_margin)
}

/// Dissimilar slack: dimensions expected to flip are charged `4Δ²`, the
/// remaining ones `ε²`. Which dimensions count as flipped depends on `mode`.
pub fn compute_alpha_d(p: &HashParams) -> Result<f64> {
    p.validate()?;
    let m = min_bits(p.classes)? as f64;
    let k = m.div_euclid(2.0) + m.rem_euclid(2.0);
    let n = p.bits as f64;
    let (flipped, rest) = match p.mode {
        AlphaDMode::Eq16 => (k + p.omega, n - k - p.omega),
        AlphaDMode::CifarTable => (m + p.omega, n - m - p.omega),
        AlphaDMode::InshopTable => (k + p.omega, n - m),
    };
    if rest < 0.0 {
        return Err(Error::invalid(format!(
            "{} bits leave a negative count ({rest}) of unflipped dimensions in mode {}",
            p.bits, p.mode
        )));
    }
    let wide = 4.0 * p.delta_margin * p.delta_margin;
    Ok(wide * flipped + p.epsilon * p.epsilon * rest)
}

/// One column of the published parameter table.
#[derive(Debug, Clone, Copy)]
pub struct TablePreset {
    pub name: &'static str,
    pub params: HashParams,
    /// Published α_d, two decimals.
    pub alpha_d: f64,
}

const fn preset(
    name: &'static str,
    bits: u32,
    classes: u64,
    omega: f64,
    epsilon: f64,
    mode: AlphaDMode,
    alpha_d: f64,
) -> TablePreset {
    TablePreset {
        name,
        params: HashParams {
            bits,
            classes,
            delta_margin: 0.4,
            omega,
            epsilon,
            mode,
        },
        alpha_d,
    }
}

/// CIFAR-10 (C=10) at 12/24/48 bits and In-shop (C=7982) at 48/96/192 bits,
/// all with Δ = 0.4.
pub const TABLE_PRESETS: [TablePreset; 6] = [
    preset("cifar10-12", 12, 10, 1.0, 0.3, AlphaDMode::CifarTable, 3.83),
    preset("cifar10-24", 24, 10, 2.0, 0.3, AlphaDMode::CifarTable, 5.46),
    preset("cifar10-48", 48, 10, 2.0, 0.3, AlphaDMode::CifarTable, 7.62),
    preset(
        "inshop-48",
        48,
        7982,
        3.0,
        0.4,
        AlphaDMode::InshopTable,
        12.00,
    ),
    preset(
        "inshop-96",
        96,
        7982,
        3.0,
        0.4,
        AlphaDMode::InshopTable,
        19.68,
    ),
    preset(
        "inshop-192",
        192,
        7982,
        3.0,
        0.4,
        AlphaDMode::InshopTable,
        35.04,
    ),
];
