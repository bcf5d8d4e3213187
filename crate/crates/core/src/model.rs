//! Feed-forward embedding network: rectifier hidden layers and a sigmoid
//! latent layer whose width is the code length. Includes reverse-mode
//! gradients, momentum SGD with weight decay, and the TQNM checkpoint.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{count_u32, put_f64, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, sigmoid_scalar, Matrix};

const CHECKPOINT_MAGIC: &[u8; 4] = b"TQNM";
const CHECKPOINT_VERSION: u32 = 1;

/// Largest f64 below 1; keeps latent outputs inside the open interval.
const OUTPUT_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// One affine map `x·W + b` with `W` stored fan_in × fan_out.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    layers: Vec<Layer>,
}

/// Per-layer pre-activations and activations recorded by [`EmbeddingModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn layer_count(&self) -> usize {
        self.post.len()
    }
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Velocity buffers and hyperparameters of momentum SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    vel_weights: Vec<Matrix>,
    vel_biases: Vec<Vec<f64>>,
}

/// Glorot-uniform weights, zero biases, reproducible from `seed`.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<EmbeddingModel> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least input and output widths, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::invalid(format!(
            "layer widths must be >= 1, got {layer_dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Layer {
                weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(EmbeddingModel { layers })
}

impl EmbeddingModel {
    /// Builds a model from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.fan_in() == 0 || l.fan_out() == 0 {
                return Err(Error::invalid(format!("layer {i} has a zero width")));
            }
            if l.bias.len() != l.fan_out() {
                return Err(Error::invalid(format!(
                    "layer {i}: bias length {} vs fan_out {}",
                    l.bias.len(),
                    l.fan_out()
                )));
            }
            if !l.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::invalid(format!("layer {i}: non-finite bias")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    /// Code length N.
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::fan_out))
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &post[l - 1] };
            let mut z = matmul(input, &layer.weights)?;
            z.add_row_broadcast(&layer.bias)?;
            let a = if l == last {
                z.map(|v| sigmoid_scalar(v).min(OUTPUT_CEIL))
            } else {
                z.map(|v| v.max(0.0))
            };
            pre.push(z);
            post.push(a);
        }
        let features = post[last].clone();
        Ok((
            features,
            ForwardTrace {
                input: x.clone(),
                pre,
                post,
            },
        ))
    }

    /// Latent features only.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Reverse-mode gradients of a scalar loss given its gradient with
    /// respect to the latent features.
    pub fn backward(&self, trace: &ForwardTrace, grad_features: &Matrix) -> Result<Gradients> {
        if trace.layer_count() != self.layers.len() {
            return Err(Error::invalid(format!(
                "trace has {} layers, model has {}",
                trace.layer_count(),
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if trace.pre[l].cols() != layer.fan_out() {
                return Err(Error::invalid(format!(
                    "trace layer {l} width {} does not match model width {}",
                    trace.pre[l].cols(),
                    layer.fan_out()
                )));
            }
        }
        let last = self.layers.len() - 1;
        if grad_features.shape() != trace.post[last].shape() {
            return Err(Error::invalid(format!(
                "feature gradient shape {:?} vs forward output {:?}",
                grad_features.shape(),
                trace.post[last].shape()
            )));
        }

        let mut weights = vec![Matrix::zeros(0, 0); self.layers.len()];
        let mut biases = vec![Vec::new(); self.layers.len()];
        let y = &trace.post[last];
        let mut delta = grad_features.hadamard(&y.map(|v| v * (1.0 - v)))?;
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 {
                &trace.input
            } else {
                &trace.post[l - 1]
            };
            weights[l] = matmul_tn(input, &delta)?;
            biases[l] = delta.column_sums();
            if l > 0 {
                let upstream = matmul_nt(&delta, &self.layers[l].weights)?;
                let mask = trace.pre[l - 1].map(|z| if z > 0.0 { 1.0 } else { 0.0 });
                delta = upstream.hadamard(&mask)?;
            }
        }
        Ok(Gradients { weights, biases })
    }

    /// One momentum step: `v ← μv − lr·(g + λw)`, `w ← w + v`. Decay only
    /// touches weights, never biases.
    pub fn sgd_step(&mut self, grads: &Gradients, st: &mut OptimizerState) -> Result<()> {
        st.check_shapes(self)?;
        grads.check_shapes(self)?;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let vw = st.vel_weights[l].data_mut();
            let w = layer.weights.data_mut();
            for ((v, w), g) in vw.iter_mut().zip(w.iter_mut()).zip(grads.weights[l].data()) {
                *v = st.momentum * *v - st.lr * (g + st.weight_decay * *w);
                *w += *v;
            }
            let vb = &mut st.vel_biases[l];
            for ((v, b), g) in vb
                .iter_mut()
                .zip(layer.bias.iter_mut())
                .zip(&grads.biases[l])
            {
                *v = st.momentum * *v - st.lr * g;
                *b += *v;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, count_u32("layer count", self.layers.len())?);
        for layer in &self.layers {
            put_u32(&mut out, count_u32("fan_in", layer.fan_in())?);
            put_u32(&mut out, count_u32("fan_out", layer.fan_out())?);
            for &w in layer.weights.data() {
                put_f64(&mut out, w);
            }
            for &b in &layer.bias {
                put_f64(&mut out, b);
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("checkpoint", bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(r.err("checkpoint has no layers"));
        }
        let mut layers = Vec::with_capacity(count.min(1024));
        let mut prev_out: Option<usize> = None;
        for l in 0..count {
            let fan_in = r.u32()? as usize;
            let fan_out = r.u32()? as usize;
            if fan_in == 0 || fan_out == 0 {
                return Err(r.err(format!("layer {l} has a zero width")));
            }
            if let Some(p) = prev_out {
                if p != fan_in {
                    return Err(r.err(format!(
                        "layer {l} expects {fan_in} inputs but previous layer outputs {p}"
                    )));
                }
            }
            let n = fan_in
                .checked_mul(fan_out)
                .ok_or_else(|| r.err("layer size overflows"))?;
            if n.saturating_mul(8) > bytes.len() {
                return Err(r.err(format!("layer {l} is larger than the file")));
            }
            let mut w = Vec::with_capacity(n);
            for _ in 0..n {
                w.push(r.f64()?);
            }
            let mut bias = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                bias.push(r.f64()?);
            }
            let weights = Matrix::from_vec(fan_in, fan_out, w).map_err(|e| r.err(e.to_string()))?;
            layers.push(Layer { weights, bias });
            prev_out = Some(fan_out);
        }
        r.finish()?;
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

impl Gradients {
    fn check_shapes(&self, m: &EmbeddingModel) -> Result<()> {
        let ok = self.weights.len() == m.layers.len()
            && self.biases.len() == m.layers.len()
            && m.layers.iter().enumerate().all(|(l, layer)| {
                self.weights[l].shape() == layer.weights.shape()
                    && self.biases[l].len() == layer.bias.len()
            });
        if !ok {
            return Err(Error::invalid("gradient shapes do not match the model"));
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|w| w.scale(s)).collect(),
            biases: self
                .biases
                .iter()
                .map(|b| b.iter().map(|v| v * s).collect())
                .collect(),
        }
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::invalid("gradient layer counts differ"));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, 1.0)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if a.len() != b.len() {
                return Err(Error::invalid("bias gradient lengths differ"));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.data().iter().all(|&v| v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

impl OptimizerState {
    /// Zeroed velocities shaped like `model`.
    pub fn new(model: &EmbeddingModel, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        for (name, v) in [
            ("lr", lr),
            ("momentum", momentum),
            ("weight_decay", weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            vel_weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            vel_biases: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.fan_out()])
                .collect(),
        })
    }

    pub fn velocity_weights(&self) -> &[Matrix] {
        &self.vel_weights
    }

    pub fn velocity_biases(&self) -> &[Vec<f64>] {
        &self.vel_biases
    }

    fn check_shapes(&self, m: &EmbeddingModel) -> Result<()> {
        let ok = self.vel_weights.len() == m.layers.len()
            && m.layers.iter().enumerate().all(|(l, layer)| {
                self.vel_weights[l].shape() == layer.weights.shape()
                    && self.vel_biases[l].len() == layer.bias.len()
            });
        if !ok {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, b: f64) -> EmbeddingModel {
        EmbeddingModel::from_layers(vec![Layer {
            weights: Matrix::from_vec(1, 1, vec![w]).unwrap(),
            bias: vec![b],
        }])
        .unwrap()
    }

    fn zero_grads(m: &EmbeddingModel) -> Gradients {
        Gradients {
            weights: m
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            biases: m.layers().iter().map(|l| vec![0.0; l.fan_out()]).collect(),
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_model(&[4, 3], 7).unwrap();
        assert_eq!(a, init_model(&[4, 3], 7).unwrap());
        assert_ne!(a, init_model(&[4, 3], 8).unwrap());
        let bound = (6.0f64 / 7.0).sqrt();
        let big = init_model(&[100, 100], 3).unwrap();
        for m in [&a, &big] {
            let b = (6.0 / (m.input_dim() + m.output_dim()) as f64).sqrt();
            assert!(m.layers()[0].weights.data().iter().all(|w| w.abs() <= b));
            assert!(m.layers()[0].bias.iter().all(|&v| v == 0.0));
        }
        assert!(a.layers()[0]
            .weights
            .data()
            .iter()
            .all(|w| w.abs() <= bound));
        assert!(init_model(&[4], 0).is_err());
        assert!(init_model(&[], 0).is_err());
        assert!(init_model(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn zero_model_outputs_half() {
        let mut m = init_model(&[5, 7, 3], 1).unwrap();
        for l in m.layers_mut() {
            l.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let x = Matrix::from_vec(2, 5, (0..10).map(|v| v as f64).collect()).unwrap();
        let f = m.embed(&x).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_layer_forward() {
        let f = single(2.0, 0.0)
            .embed(&Matrix::from_vec(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert!((f[(0, 0)] - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_identical_features() {
        let m = init_model(&[3, 8, 4], 2).unwrap();
        let x = Matrix::from_rows(&[[0.3, -1.0, 2.0], [0.3, -1.0, 2.0]]).unwrap();
        let f = m.embed(&x).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert!(m.embed(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn output_stays_in_open_interval() {
        let f = single(1e4, 0.0)
            .embed(&Matrix::from_vec(2, 1, vec![1.0, -1.0]).unwrap())
            .unwrap();
        assert!(f.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn backward_linearity_and_zero() {
        let m = init_model(&[3, 4, 2], 5).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, -0.3], [1.0, -0.5, 0.25]]).unwrap();
        let (_, trace) = m.forward(&x).unwrap();
        assert!(m.backward(&trace, &Matrix::zeros(2, 2)).unwrap().is_zero());
        let g = Matrix::from_rows(&[[0.5, -1.0], [0.25, 2.0]]).unwrap();
        let once = m.backward(&trace, &g).unwrap();
        let twice = m.backward(&trace, &g.scale(2.0)).unwrap();
        assert_eq!(once.scale(2.0), twice);
        assert!(m.backward(&trace, &Matrix::zeros(2, 3)).is_err());
        let other = init_model(&[3, 2], 5).unwrap();
        assert!(other.backward(&trace, &g).is_err());
    }

    #[test]
    fn sgd_plain_step() {
        let mut m = single(1.0, 0.0);
        let mut st = OptimizerState::new(&m, 0.1, 0.0, 0.0).unwrap();
        let mut g = zero_grads(&m);
        g.weights[0][(0, 0)] = 0.5;
        m.sgd_step(&g, &mut st).unwrap();
        assert!((m.layers()[0].weights[(0, 0)] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut m = single(0.0, 0.0);
        let mut st = OptimizerState::new(&m, 0.1, 0.9, 0.0).unwrap();
        let mut g = zero_grads(&m);
        g.weights[0][(0, 0)] = 1.0;
        m.sgd_step(&g, &mut st).unwrap();
        assert!((m.layers()[0].weights[(0, 0)] + 0.1).abs() < 1e-15);
        m.sgd_step(&g, &mut st).unwrap();
        assert!((st.velocity_weights()[0][(0, 0)] + 0.19).abs() < 1e-15);
        assert!((m.layers()[0].weights[(0, 0)] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_only_decays_velocity() {
        let mut m = init_model(&[2, 3], 4).unwrap();
        let mut g = zero_grads(&m);
        g.weights[0].data_mut().iter_mut().for_each(|v| *v = 1.0);
        g.biases[0].iter_mut().for_each(|v| *v = 1.0);

        let before = m.clone();
        let mut fresh = OptimizerState::new(&m, 0.0, 0.9, 0.0005).unwrap();
        m.sgd_step(&g, &mut fresh).unwrap();
        assert_eq!(m, before);

        let mut st = OptimizerState::new(&m, 0.1, 0.9, 0.0).unwrap();
        m.sgd_step(&g, &mut st).unwrap();
        let v = st.velocity_weights()[0].clone();
        st.lr = 0.0;
        m.sgd_step(&g, &mut st).unwrap();
        assert_eq!(st.velocity_weights()[0], v.scale(0.9));
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut m = single(2.0, 3.0);
        let mut st = OptimizerState::new(&m, 0.1, 0.0, 0.5).unwrap();
        m.sgd_step(&zero_grads(&m), &mut st).unwrap();
        assert!((m.layers()[0].weights[(0, 0)] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(m.layers()[0].bias[0], 3.0);
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let m = init_model(&[6, 5, 3], 9).unwrap();
        let bytes = m.to_checkpoint_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TQNM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 12 + 8 + 8 * (30 + 5) + 8 + 8 * (15 + 3));
        assert_eq!(EmbeddingModel::from_checkpoint_bytes(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingModel::from_checkpoint_bytes(&bad),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        // Second layer fan_in no longer chains.
        let off = 12 + 8 + 8 * 35;
        bad[off..off + 4].copy_from_slice(&4u32.to_le_bytes());
        assert!(EmbeddingModel::from_checkpoint_bytes(&bad).is_err());
        assert!(EmbeddingModel::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(EmbeddingModel::from_checkpoint_bytes(&long).is_err());
    }
}
