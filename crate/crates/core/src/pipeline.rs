//! Two-stage training (triplet loss, then triplet quantization loss),
//! real-valued vs binary evaluation, and the loss-curve / report writers.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::data::{LabeledDataset, TripletIndexBatch, TripletSampler};
use crate::error::{Error, Result};
use crate::hashing::{
    mean_average_precision, quantize, rank_by_euclidean, rank_by_hamming, topk_accuracy, Ranking,
};
use crate::linalg::Matrix;
use crate::losses::{tqn_loss, triplet_loss, TqnParams, TripletFeatures};
use crate::model::{init_model, EmbeddingModel, OptimizerState};
use crate::params::{AlphaDMode, DerivedParams, HashParams};

/// Mixed into the seed for the triplet sampler so that it does not share a
/// stream with weight initialization.
const SAMPLER_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Hashing parameters without the class count, which comes from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct HashSettings {
    pub bits: u32,
    pub delta_margin: f64,
    pub omega: f64,
    pub epsilon: f64,
    pub mode: AlphaDMode,
}

impl HashSettings {
    pub fn with_classes(&self, classes: u64) -> HashParams {
        HashParams {
            bits: self.bits,
            classes,
            delta_margin: self.delta_margin,
            omega: self.omega,
            epsilon: self.epsilon,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hash: HashSettings,
    /// Hidden layer widths between the input and the latent layer.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The published schedule: 40 + 40 epochs, batch 32, momentum 0.9,
    /// decay 5e-4, margin 1.6, β = 8, γ = 1, Δ = 0.4; 12 bits with the
    /// 12-bit CIFAR-10 ω and ε.
    fn default() -> Self {
        Self {
            stage1: Stage1Config {
                epochs: 40,
                lr: 0.001,
                margin: 1.6,
            },
            stage2: Stage2Config {
                epochs: 40,
                lr: 0.0001,
                beta: 8.0,
                gamma: 1.0,
            },
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0005,
            hash: HashSettings {
                bits: 12,
                delta_margin: 0.4,
                omega: 1.0,
                epsilon: 0.3,
                mode: AlphaDMode::Eq16,
            },
            hidden: vec![256, 128],
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("stage1.lr", self.stage1.lr), ("stage2.lr", self.stage2.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.stage1.margin >= 0.0 && self.stage1.margin.is_finite()) {
            return Err(Error::invalid(format!(
                "stage1.margin must be >= 0, got {}",
                self.stage1.margin
            )));
        }
        if !(self.stage2.beta >= 0.0 && self.stage2.gamma >= 0.0)
            || !(self.stage2.beta + self.stage2.gamma).is_finite()
        {
            return Err(Error::invalid("stage2.beta and stage2.gamma must be >= 0"));
        }
        for (name, v) in [
            ("hash.delta", self.hash.delta_margin),
            ("hash.eps", self.hash.epsilon),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 0.5], got {v}"
                )));
            }
        }
        if !(self.hash.omega >= 0.0 && self.hash.omega.is_finite()) {
            return Err(Error::invalid(format!(
                "hash.omega must be >= 0, got {}",
                self.hash.omega
            )));
        }
        if self.hash.bits == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be >= 1"));
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.hash.bits as usize);
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Triplet,
    Quantization,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Triplet => 1,
            Stage::Quantization => 2,
        }
    }
}

/// Batch-mean losses for one epoch. Both losses are logged in both stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub stage: Stage,
    /// 1-based within its stage.
    pub epoch: usize,
    pub triplet_loss: f64,
    pub tqn_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Map,
    TopK(usize),
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Map => "map",
            Metric::TopK(_) => "topk",
        }
    }

    pub fn score(&self, r: &Ranking, query_labels: &[u32], db_labels: &[u32]) -> Result<f64> {
        match *self {
            Metric::Map => mean_average_precision(r, query_labels, db_labels),
            Metric::TopK(k) => topk_accuracy(r, query_labels, db_labels, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Map => f.write_str("map"),
            Metric::TopK(k) => write!(f, "topk@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    /// Accepts `map`, `topk` (k = 20) or `topk@K`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "map" => Ok(Metric::Map),
            "topk" => Ok(Metric::TopK(20)),
            _ => match s.strip_prefix("topk@").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(Metric::TopK(k)),
                _ => Err(Error::invalid(format!("unknown metric '{s}'"))),
            },
        }
    }
}

/// Real-valued (Euclidean) vs binary (Hamming) retrieval scores of one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    pub rf: f64,
    pub bc: f64,
    /// `(bc − rf) / rf`; negative when binarization loses accuracy.
    pub drop_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub derived: DerivedParams,
    pub curve: Vec<EpochLoss>,
    pub eval: Option<EvalReport>,
}

impl RunReport {
    pub fn stage_curve(&self, stage: Stage) -> Vec<EpochLoss> {
        self.curve
            .iter()
            .filter(|e| e.stage == stage)
            .copied()
            .collect()
    }
}

/// Derived loss parameters for a dataset with `classes` classes.
pub fn tqn_params(cfg: &TrainConfig, classes: u64) -> Result<(DerivedParams, TqnParams)> {
    let derived = cfg.hash.with_classes(classes).derive()?;
    if derived.delta <= 0.0 {
        return Err(Error::invalid(format!(
            "Delta = {} gives a zero distance clamp",
            cfg.hash.delta_margin
        )));
    }
    let tqn = TqnParams {
        beta: cfg.stage2.beta,
        gamma: cfg.stage2.gamma,
        alpha_s: derived.alpha_s,
        alpha_d: derived.alpha_d,
        delta: derived.delta,
    };
    Ok((derived, tqn))
}

struct BatchOutcome {
    triplet: f64,
    tqn: f64,
}

/// Forward the stacked anchor/positive/negative rows once, log both losses,
/// and take one SGD step on the loss selected by `stage`.
fn train_batch(
    model: &mut EmbeddingModel,
    opt: &mut OptimizerState,
    data: &LabeledDataset,
    batch: &TripletIndexBatch,
    stage: Stage,
    margin: f64,
    tqn: &TqnParams,
) -> Result<BatchOutcome> {
    let bs = batch.len();
    let mut rows = batch.anchors();
    rows.extend(batch.positives());
    rows.extend(batch.negatives());
    let x = data.features().select_rows(&rows);
    let (features, trace) = model.forward(&x)?;
    let part = |k: usize| features.select_rows(&(k * bs..(k + 1) * bs).collect::<Vec<_>>());
    let triplet = TripletFeatures::new(part(0), part(1), part(2))?;

    let lt = triplet_loss(&triplet, margin)?;
    let lq = tqn_loss(&triplet, tqn)?;
    let chosen = match stage {
        Stage::Triplet => &lt,
        Stage::Quantization => &lq,
    };
    let mut grad = Vec::with_capacity(3 * bs * features.cols());
    grad.extend_from_slice(chosen.grad_a.data());
    grad.extend_from_slice(chosen.grad_p.data());
    grad.extend_from_slice(chosen.grad_n.data());
    let grad = Matrix::from_vec(3 * bs, features.cols(), grad)?;
    let grads = model.backward(&trace, &grad)?;
    model.sgd_step(&grads, opt)?;
    Ok(BatchOutcome {
        triplet: lt.value,
        tqn: lq.value,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut EmbeddingModel,
    sampler: &mut TripletSampler,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    stage: Stage,
    epochs: usize,
    lr: f64,
    tqn: &TqnParams,
    curve: &mut Vec<EpochLoss>,
) -> Result<()> {
    let mut opt = OptimizerState::new(model, lr, cfg.momentum, cfg.weight_decay)?;
    for epoch in 1..=epochs {
        let batches = sampler.epoch(cfg.batch_size)?;
        let (mut sum_t, mut sum_q) = (0.0, 0.0);
        for batch in &batches {
            let out = train_batch(model, &mut opt, data, batch, stage, cfg.stage1.margin, tqn)?;
            sum_t += out.triplet;
            sum_q += out.tqn;
        }
        let n = batches.len() as f64;
        curve.push(EpochLoss {
            stage,
            epoch,
            triplet_loss: sum_t / n,
            tqn_loss: sum_q / n,
        });
    }
    Ok(())
}

/// Stage 1 minimizes the triplet loss, stage 2 fine-tunes the same model on
/// the triplet quantization loss with fresh velocity buffers.
pub fn train_two_stage(
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(EmbeddingModel, RunReport)> {
    cfg.validate()?;
    let (derived, tqn) = tqn_params(cfg, data.classes() as u64)?;
    let mut model = init_model(&cfg.layer_dims(data.dim()), cfg.seed)?;
    let mut sampler = TripletSampler::new(data, cfg.seed ^ SAMPLER_SEED_SALT)?;
    let mut curve = Vec::with_capacity(cfg.stage1.epochs + cfg.stage2.epochs);
    run_stage(
        &mut model,
        &mut sampler,
        data,
        cfg,
        Stage::Triplet,
        cfg.stage1.epochs,
        cfg.stage1.lr,
        &tqn,
        &mut curve,
    )?;
    run_stage(
        &mut model,
        &mut sampler,
        data,
        cfg,
        Stage::Quantization,
        cfg.stage2.epochs,
        cfg.stage2.lr,
        &tqn,
        &mut curve,
    )?;
    Ok((
        model,
        RunReport {
            derived,
            curve,
            eval: None,
        },
    ))
}

/// Scores `queries` against `db` twice: Euclidean on latent features (RF)
/// and Hamming on their binary codes (BC).
pub fn evaluate(
    model: &EmbeddingModel,
    db: &LabeledDataset,
    queries: &LabeledDataset,
    metric: Metric,
) -> Result<EvalReport> {
    let db_feats = model.embed(db.features())?;
    let q_feats = model.embed(queries.features())?;
    let rf = metric.score(
        &rank_by_euclidean(&q_feats, &db_feats)?,
        queries.labels(),
        db.labels(),
    )?;
    let bc = metric.score(
        &rank_by_hamming(&quantize(&q_feats)?, &quantize(&db_feats)?)?,
        queries.labels(),
        db.labels(),
    )?;
    Ok(EvalReport {
        metric,
        rf,
        bc,
        drop_rel: relative_drop(rf, bc),
    })
}

/// `(bc − rf) / rf`, defined as 0 when both are 0 and +∞ when only rf is.
pub fn relative_drop(rf: f64, bc: f64) -> f64 {
    if rf == 0.0 {
        if bc == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (bc - rf) / rf
    }
}

/// Held-out evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Fraction of every class held out as queries.
    pub holdout: f64,
    pub metric: Metric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            holdout: 1.0 / 6.0,
            metric: Metric::Map,
        }
    }
}

/// Splits `data` into database and queries with the config seed.
pub fn split_for_eval(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<(LabeledDataset, LabeledDataset)> {
    data.split_holdout(eval.holdout, cfg.seed)
}

/// Split, train on the database part, and evaluate the held-out queries.
pub fn run_experiment(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<(EmbeddingModel, RunReport)> {
    let (db, queries) = split_for_eval(data, cfg, eval)?;
    let (model, mut report) = train_two_stage(&db, cfg)?;
    report.eval = Some(evaluate(&model, &db, &queries, eval.metric)?);
    Ok((model, report))
}

/// Formats with 17 significant digits, which round-trips every f64.
pub fn format_f64(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.16e}")
    }
}

pub fn curves_csv(report: &RunReport) -> String {
    let mut out = String::from("epoch,stage,triplet_loss,tqn_loss\n");
    for e in &report.curve {
        writeln!(
            out,
            "{},{},{},{}",
            e.epoch,
            e.stage.number(),
            format_f64(e.triplet_loss),
            format_f64(e.tqn_loss)
        )
        .unwrap();
    }
    out
}

/// Flat `key=value` report.
pub fn report_text(report: &RunReport, cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
    kv("seed", cfg.seed.to_string());
    kv("bits", cfg.hash.bits.to_string());
    kv("min_bits", report.derived.min_bits.to_string());
    kv("alpha_s", format_f64(report.derived.alpha_s));
    kv("alpha_d", format_f64(report.derived.alpha_d));
    kv("delta", format_f64(report.derived.delta));
    for stage in [Stage::Triplet, Stage::Quantization] {
        let curve = report.stage_curve(stage);
        let n = stage.number();
        kv(&format!("stage{n}.epochs"), curve.len().to_string());
        if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
            kv(
                &format!("stage{n}.first_triplet_loss"),
                format_f64(first.triplet_loss),
            );
            kv(
                &format!("stage{n}.last_triplet_loss"),
                format_f64(last.triplet_loss),
            );
            kv(
                &format!("stage{n}.first_tqn_loss"),
                format_f64(first.tqn_loss),
            );
            kv(
                &format!("stage{n}.last_tqn_loss"),
                format_f64(last.tqn_loss),
            );
        }
    }
    if let Some(e) = &report.eval {
        kv("metric", e.metric.to_string());
        kv("rf", format_f64(e.rf));
        kv("bc", format_f64(e.bc));
        kv("drop_rel", format_f64(e.drop_rel));
    }
    out
}
