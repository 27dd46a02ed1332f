//! A small feed-forward Bayesian network with mean-field Gaussian weights and
//! hand-written reverse mode.
//!
//! Each [`GaussianLinearLayer`] stores its weights unit by unit: the
//! parameters of output unit `i` occupy one contiguous row of width
//! `in_dim` (plus one when the bias is Gaussian, in which case the input is
//! augmented with a constant 1). For a batch `X` (B×in) and unit `i` the
//! pre-activations form one Rao-Blackwellisation site with
//! `A_i = X diag(σ_i)`.
//!
//! The flat parameter vector concatenates, per layer, `[μ | log τ | bias]`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    forward_r2g2, lrt_gradient, r2g2_gradient, rt_gradient, EstimatorKind, LinearMapContext,
    LrtSite, StochasticLayerTrace, UpstreamGradient,
};
use crate::gaussian::{
    kl_diag_standard, kl_diag_standard_grad, sample_standard_normal, DiagGaussianParams,
    RngStream,
};
use crate::linalg::{CgConfig, DenseMatrix, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    #[default]
    Deterministic,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearLayer {
    in_dim: usize,
    out_dim: usize,
    theta: DiagGaussianParams,
    bias: Vec<f64>,
    bias_mode: BiasMode,
    activation: Activation,
    mode: EstimatorKind,
}

pub const INITIAL_TAU: f64 = 1e-3;

impl GaussianLinearLayer {
    /// `μ ~ N(0, 1/in_dim)`, `τ = 1e-3`, zero bias.
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        mode: EstimatorKind,
        bias_mode: BiasMode,
        stream: &RngStream,
    ) -> Result<Self> {
        let width = in_dim + usize::from(bias_mode == BiasMode::Gaussian);
        let scale = (1.0 / in_dim.max(1) as f64).sqrt();
        let mut mu = sample_standard_normal(out_dim * width, stream).scale(scale).into_vec();
        if bias_mode == BiasMode::Gaussian {
            for i in 0..out_dim {
                mu[i * width + in_dim] = 0.0;
            }
        }
        let theta = DiagGaussianParams::new(
            DenseVector::new(mu)?,
            DenseVector::from_fn(out_dim * width, |_| INITIAL_TAU.ln()),
        )?;
        let bias = match bias_mode {
            BiasMode::Deterministic => vec![0.0; out_dim],
            BiasMode::Gaussian => Vec::new(),
        };
        Self::from_parts(in_dim, out_dim, theta, bias, bias_mode, activation, mode)
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        theta: DiagGaussianParams,
        bias: Vec<f64>,
        bias_mode: BiasMode,
        activation: Activation,
        mode: EstimatorKind,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        check_mode(mode)?;
        let width = in_dim + usize::from(bias_mode == BiasMode::Gaussian);
        if theta.dim() != out_dim * width {
            return Err(Error::Dimension {
                context: "layer theta",
                expected: out_dim * width,
                got: theta.dim(),
            });
        }
        let expected_bias = if bias_mode == BiasMode::Deterministic { out_dim } else { 0 };
        if bias.len() != expected_bias {
            return Err(Error::Dimension {
                context: "layer bias",
                expected: expected_bias,
                got: bias.len(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer bias"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            theta,
            bias,
            bias_mode,
            activation,
            mode,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Width of one unit's weight row.
    pub fn row_width(&self) -> usize {
        self.in_dim + usize::from(self.bias_mode == BiasMode::Gaussian)
    }

    pub fn theta(&self) -> &DiagGaussianParams {
        &self.theta
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn mode(&self) -> EstimatorKind {
        self.mode
    }

    pub fn bias_mode(&self) -> BiasMode {
        self.bias_mode
    }

    pub fn unit_theta(&self, unit: usize) -> DiagGaussianParams {
        let w = self.row_width();
        self.theta.slice(unit * w, w)
    }

    pub fn num_params(&self) -> usize {
        2 * self.theta.dim() + self.bias.len()
    }

    /// A layer is rank-deficient for a batch of size `batch` when every
    /// unit's site `A_i` (batch × row width) has more columns than rows.
    pub fn is_rank_deficient(&self, batch: usize) -> bool {
        batch < self.row_width()
    }

    fn augment(&self, x: &DenseMatrix) -> DenseMatrix {
        match self.bias_mode {
            BiasMode::Deterministic => x.clone(),
            BiasMode::Gaussian => DenseMatrix::from_fn(x.rows(), self.in_dim + 1, |b, j| {
                if j < self.in_dim {
                    x.get(b, j)
                } else {
                    1.0
                }
            }),
        }
    }

    fn bias_at(&self, unit: usize) -> f64 {
        self.bias.get(unit).copied().unwrap_or(0.0)
    }

    /// Weight rows `μ_i + σ_i ⊙ ε_i`.
    fn realised_weights(&self, eps: &[DenseVector]) -> Vec<f64> {
        let mu = self.theta.mu();
        let sigma = self.theta.sigma();
        let w = self.row_width();
        let mut out = Vec::with_capacity(self.out_dim * w);
        for (i, e) in eps.iter().enumerate() {
            for j in 0..w {
                let k = i * w + j;
                out.push(mu[k] + sigma[k] * e[j]);
            }
        }
        out
    }
}

fn check_mode(mode: EstimatorKind) -> Result<()> {
    if mode == EstimatorKind::Score {
        return Err(Error::Config(
            "network layers support rt, lrt and r2g2 estimators only".into(),
        ));
    }
    Ok(())
}

/// Noise for one layer's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerNoise {
    /// Per-unit weight noise `ε_i` (RT and R2-G2).
    Weights(Vec<DenseVector>),
    /// Per-example, per-unit pre-activation noise `ξ` (B×out, LRT).
    Preactivation(DenseMatrix),
    /// Replays a pathwise layer with fixed noise and a fixed additive offset:
    /// `Z = X(μ + σ ⊙ ε) + bias + offset`. With `ε = ε*` and
    /// `offset = z − z*` this is the R2-G2 surrogate with the stop-gradient
    /// term frozen.
    Frozen { eps: Vec<DenseVector>, offset: DenseMatrix },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseRecord {
    Reparam { eps: Vec<DenseVector> },
    R2g2 { eps: Vec<DenseVector>, traces: Vec<StochasticLayerTrace> },
    Local { xi: DenseMatrix, mean: DenseMatrix, std: DenseMatrix },
    Frozen { eps: Vec<DenseVector>, offset: DenseMatrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// Layer input, augmented with a constant column for Gaussian biases.
    pub input: DenseMatrix,
    pub pre: DenseMatrix,
    pub output: DenseMatrix,
    pub noise: NoiseRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    records: Vec<LayerRecord>,
}

impl ForwardTape {
    pub fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    pub fn predictions(&self) -> &DenseMatrix {
        &self.records.last().expect("tape has at least one layer").output
    }

    /// Mean CG iteration count over the units of an R2-G2 layer.
    pub fn cg_iters_mean(&self, layer: usize) -> Option<f64> {
        match &self.records.get(layer)?.noise {
            NoiseRecord::R2g2 { traces, .. } if !traces.is_empty() => Some(
                traces.iter().map(|t| t.cg_iters as f64).sum::<f64>() / traces.len() as f64,
            ),
            _ => None,
        }
    }

    /// Noise that replays this tape with every R2-G2 layer frozen at its
    /// fitted noise `ε*`, for finite-difference checks of the surrogate.
    pub fn frozen_noise(&self) -> Vec<LayerNoise> {
        self.records
            .iter()
            .map(|r| match &r.noise {
                NoiseRecord::Reparam { eps } => LayerNoise::Weights(eps.clone()),
                NoiseRecord::Local { xi, .. } => LayerNoise::Preactivation(xi.clone()),
                NoiseRecord::Frozen { eps, offset } => LayerNoise::Frozen {
                    eps: eps.clone(),
                    offset: offset.clone(),
                },
                NoiseRecord::R2g2 { traces, .. } => {
                    let batch = r.pre.rows();
                    let offset = DenseMatrix::from_fn(batch, traces.len(), |b, i| {
                        traces[i].z[b] - traces[i].z_star[b]
                    });
                    LayerNoise::Frozen {
                        eps: traces.iter().map(|t| t.eps_star.clone()).collect(),
                        offset,
                    }
                }
            })
            .collect()
    }
}

/// Parameter index ranges of one layer inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRanges {
    pub mu: Range<usize>,
    pub log_tau: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub mode: EstimatorKind,
    pub bias: BiasMode,
}

impl NetworkSpec {
    /// Tanh hidden layers, identity output, deterministic biases.
    pub fn mlp(widths: &[usize], mode: EstimatorKind) -> Self {
        Self {
            widths: widths.to_vec(),
            hidden: Activation::Tanh,
            output: Activation::Identity,
            mode,
            bias: BiasMode::Deterministic,
        }
    }
}

/// CG iteration cap used by [`Network::new`]. Per-unit sites see the batch's
/// hidden activations, which are often nearly collinear (cond(AAᵀ) of 1e7
/// and worse), so `rows + 5` iterations are not always enough.
pub const DEFAULT_NETWORK_CG_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<GaussianLinearLayer>,
    cg: CgConfig,
}

impl Network {
    pub fn new(spec: &NetworkSpec, init: &RngStream) -> Result<Self> {
        if spec.widths.len() < 2 {
            return Err(Error::Config("network needs at least input and output widths".into()));
        }
        let depth = spec.widths.len() - 1;
        let layers = (0..depth)
            .map(|l| {
                let act = if l + 1 == depth { spec.output } else { spec.hidden };
                GaussianLinearLayer::init(
                    spec.widths[l],
                    spec.widths[l + 1],
                    act,
                    spec.mode,
                    spec.bias,
                    &init.derive(l as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let cg = CgConfig {
            max_iters: Some(DEFAULT_NETWORK_CG_ITERS),
            ..CgConfig::default()
        };
        Self::from_layers(layers, cg)
    }

    pub fn from_layers(layers: Vec<GaussianLinearLayer>, cg: CgConfig) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Network {
                    layer: l + 1,
                    reason: format!(
                        "input width {} does not match previous output {}",
                        pair[1].in_dim, pair[0].out_dim
                    ),
                });
            }
        }
        cg.validate()?;
        Ok(Self { layers, cg })
    }

    pub fn layers(&self) -> &[GaussianLinearLayer] {
        &self.layers
    }

    pub fn cg(&self) -> &CgConfig {
        &self.cg
    }

    pub fn set_cg(&mut self, cg: CgConfig) -> Result<()> {
        cg.validate()?;
        self.cg = cg;
        Ok(())
    }

    pub fn set_mode(&mut self, mode: EstimatorKind) -> Result<()> {
        check_mode(mode)?;
        for layer in &mut self.layers {
            layer.mode = mode;
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: EstimatorKind) -> Result<Self> {
        let mut net = self.clone();
        net.set_mode(mode)?;
        Ok(net)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(GaussianLinearLayer::num_params).sum()
    }

    pub fn layer_ranges(&self) -> Vec<LayerRanges> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|layer| {
                let d = layer.theta.dim();
                let r = LayerRanges {
                    mu: offset..offset + d,
                    log_tau: offset + d..offset + 2 * d,
                    bias: offset + 2 * d..offset + 2 * d + layer.bias.len(),
                };
                offset = r.bias.end;
                r
            })
            .collect()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.theta.mu().as_slice());
            out.extend_from_slice(layer.theta.log_tau().as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "Network::set_params",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFiniteGradient {
                index,
                value: params[index],
            });
        }
        let ranges = self.layer_ranges();
        for (layer, r) in self.layers.iter_mut().zip(ranges) {
            layer.theta.assign(&params[r.mu.clone()], &params[r.log_tau.clone()])?;
            layer.bias.copy_from_slice(&params[r.bias.clone()]);
        }
        Ok(())
    }

    /// Draws the forward noise for a batch of `batch` examples. Layer `l`
    /// uses `stream.derive(l)`, so RT and R2-G2 layers see the same `ε`.
    pub fn sample_noise(&self, batch: usize, stream: &RngStream) -> Vec<LayerNoise> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let s = stream.derive(l as u64);
                if layer.mode == EstimatorKind::Lrt {
                    let xi = sample_standard_normal(batch * layer.out_dim, &s);
                    LayerNoise::Preactivation(DenseMatrix::from_vec(batch, layer.out_dim, xi.into_vec()))
                } else {
                    let w = layer.row_width();
                    let flat = sample_standard_normal(layer.out_dim * w, &s);
                    LayerNoise::Weights(
                        flat.as_slice()
                            .chunks(w)
                            .map(|c| DenseVector::from_vec(c.to_vec()))
                            .collect(),
                    )
                }
            })
            .collect()
    }

    pub fn forward(&self, inputs: &DenseMatrix, stream: &RngStream) -> Result<ForwardTape> {
        self.forward_with_noise(inputs, &self.sample_noise(inputs.rows(), stream))
    }

    pub fn forward_with_noise(&self, inputs: &DenseMatrix, noise: &[LayerNoise]) -> Result<ForwardTape> {
        if inputs.rows() == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        if inputs.cols() != self.in_dim() {
            return Err(Error::Dimension {
                context: "network input width",
                expected: self.in_dim(),
                got: inputs.cols(),
            });
        }
        if noise.len() != self.layers.len() {
            return Err(Error::Dimension {
                context: "noise layers",
                expected: self.layers.len(),
                got: noise.len(),
            });
        }
        let mut records = Vec::with_capacity(self.layers.len());
        let mut current = inputs.clone();
        for (l, (layer, n)) in self.layers.iter().zip(noise).enumerate() {
            let record = self
                .layer_forward(layer, &current, n)
                .map_err(|e| tag_layer(l, e))?;
            current = record.output.clone();
            records.push(record);
        }
        Ok(ForwardTape { records })
    }

    fn layer_forward(&self, layer: &GaussianLinearLayer, x: &DenseMatrix, noise: &LayerNoise) -> Result<LayerRecord> {
        let xa = layer.augment(x);
        let batch = xa.rows();
        let w = layer.row_width();
        let check_eps = |eps: &[DenseVector]| -> Result<()> {
            if eps.len() != layer.out_dim || eps.iter().any(|e| e.len() != w) {
                return Err(Error::Config(format!(
                    "weight noise must be {} vectors of length {}",
                    layer.out_dim, w
                )));
            }
            Ok(())
        };
        let pathwise = |eps: &[DenseVector]| -> DenseMatrix {
            let v = layer.realised_weights(eps);
            DenseMatrix::from_fn(batch, layer.out_dim, |b, i| {
                crate::linalg::dot(xa.row(b), &v[i * w..(i + 1) * w]) + layer.bias_at(i)
            })
        };
        let (pre, record) = match (layer.mode, noise) {
            (EstimatorKind::Rt, LayerNoise::Weights(eps)) => {
                check_eps(eps)?;
                (pathwise(eps), NoiseRecord::Reparam { eps: eps.clone() })
            }
            (EstimatorKind::R2g2, LayerNoise::Weights(eps)) => {
                check_eps(eps)?;
                let traces = (0..layer.out_dim)
                    .map(|i| {
                        let ctx = LinearMapContext::new(xa.clone(), layer.unit_theta(i))?;
                        forward_r2g2(&ctx, &eps[i], &self.cg)
                    })
                    .collect::<Result<Vec<_>>>()?;
                // The propagated value is z itself, so the pre-activations are
                // exactly those of the RT pass with the same ε.
                (
                    pathwise(eps),
                    NoiseRecord::R2g2 {
                        eps: eps.clone(),
                        traces,
                    },
                )
            }
            (EstimatorKind::Rt | EstimatorKind::R2g2, LayerNoise::Frozen { eps, offset }) => {
                check_eps(eps)?;
                if offset.shape() != (batch, layer.out_dim) {
                    return Err(Error::Config("frozen offset has the wrong shape".into()));
                }
                let base = pathwise(eps);
                let pre = DenseMatrix::from_fn(batch, layer.out_dim, |b, i| base.get(b, i) + offset.get(b, i));
                (
                    pre,
                    NoiseRecord::Frozen {
                        eps: eps.clone(),
                        offset: offset.clone(),
                    },
                )
            }
            (EstimatorKind::Lrt, LayerNoise::Preactivation(xi)) => {
                if xi.shape() != (batch, layer.out_dim) {
                    return Err(Error::Config("pre-activation noise has the wrong shape".into()));
                }
                let mut mean = DenseMatrix::zeros(batch, layer.out_dim);
                let mut std = DenseMatrix::zeros(batch, layer.out_dim);
                let mut pre = DenseMatrix::zeros(batch, layer.out_dim);
                let mu = layer.theta.mu().as_slice();
                let tau = layer.theta.tau();
                for b in 0..batch {
                    let xb = xa.row(b);
                    for i in 0..layer.out_dim {
                        let r = i * w..(i + 1) * w;
                        let m = crate::linalg::dot(xb, &mu[r.clone()]);
                        let var: f64 = xb.iter().zip(&tau.as_slice()[r]).map(|(x, t)| x * x * t).sum();
                        if var == 0.0 {
                            return Err(Error::DegeneratePreactivationVariance { unit: i });
                        }
                        let s = var.sqrt();
                        mean.set(b, i, m);
                        std.set(b, i, s);
                        pre.set(b, i, m + s * xi.get(b, i) + layer.bias_at(i));
                    }
                }
                (pre, NoiseRecord::Local { xi: xi.clone(), mean, std })
            }
            (mode, _) => {
                return Err(Error::Config(format!("noise kind does not match {mode} layer")));
            }
        };
        let output = DenseMatrix::from_fn(batch, layer.out_dim, |b, i| layer.activation.apply(pre.get(b, i)));
        Ok(LayerRecord {
            input: xa,
            pre,
            output,
            noise: record,
        })
    }

    /// Forward pass with every weight at its mean.
    pub fn forward_deterministic(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        let noise: Vec<LayerNoise> = self
            .layers
            .iter()
            .map(|layer| LayerNoise::Frozen {
                eps: vec![DenseVector::zeros(layer.row_width()); layer.out_dim],
                offset: DenseMatrix::zeros(inputs.rows(), layer.out_dim),
            })
            .collect();
        let mut net = self.clone();
        for layer in &mut net.layers {
            layer.mode = EstimatorKind::Rt;
        }
        Ok(net.forward_with_noise(inputs, &noise)?.predictions().clone())
    }

    /// Gradient of a loss with respect to the flat parameter vector, given
    /// `d_preds = ∂loss/∂predictions`. Each layer's `(μ, τ)` block comes from
    /// the estimator matching its mode; `τ` gradients are converted to
    /// `log τ` by the factor `τ`.
    pub fn backward(&self, tape: &ForwardTape, d_preds: &DenseMatrix) -> Result<Vec<f64>> {
        if tape.records.len() != self.layers.len() {
            return Err(Error::Dimension {
                context: "tape layers",
                expected: self.layers.len(),
                got: tape.records.len(),
            });
        }
        if d_preds.shape() != tape.predictions().shape() {
            return Err(Error::Config(format!(
                "loss gradient shape {:?} does not match predictions {:?}",
                d_preds.shape(),
                tape.predictions().shape()
            )));
        }
        let ranges = self.layer_ranges();
        let mut grad = vec![0.0; self.num_params()];
        let mut d_out = d_preds.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let rec = &tape.records[l];
            let d_pre = DenseMatrix::from_fn(rec.pre.rows(), layer.out_dim, |b, i| {
                d_out.get(b, i) * layer.activation.derivative(rec.pre.get(b, i), rec.output.get(b, i))
            });
            let (block, d_in) = self
                .layer_backward(layer, rec, &d_pre)
                .map_err(|e| tag_layer(l, e))?;
            grad[ranges[l].mu.start..ranges[l].bias.end].copy_from_slice(&block);
            d_out = d_in;
        }
        Ok(grad)
    }

    /// Returns the layer's `[d μ | d log τ | d bias]` block and the gradient
    /// with respect to its (unaugmented) input.
    fn layer_backward(
        &self,
        layer: &GaussianLinearLayer,
        rec: &LayerRecord,
        d_pre: &DenseMatrix,
    ) -> Result<(Vec<f64>, DenseMatrix)> {
        let batch = rec.input.rows();
        let w = layer.row_width();
        let d = layer.theta.dim();
        let tau = layer.theta.tau();
        let mut block = vec![0.0; layer.num_params()];
        let mut d_xa = DenseMatrix::zeros(batch, w);

        let pathwise = |noise: &[DenseVector],
                        traces: Option<&[StochasticLayerTrace]>,
                        block: &mut [f64],
                        d_xa: &mut DenseMatrix|
         -> Result<()> {
            for i in 0..layer.out_dim {
                let ctx = LinearMapContext::new(rec.input.clone(), layer.unit_theta(i))?;
                let up = UpstreamGradient::new(d_pre.column(i));
                let est = match traces {
                    Some(t) => r2g2_gradient(&ctx, &up, &t[i])?,
                    None => rt_gradient(&ctx, &up, &noise[i])?,
                };
                for j in 0..w {
                    block[i * w + j] = est.d_mu[j];
                    block[d + i * w + j] = est.d_tau[j] * tau[i * w + j];
                }
            }
            // Lower layers see the weights that generated the routed value:
            // μ + σ ⊙ ε for RT, μ + σ ⊙ ε* for R2-G2.
            let routed: Vec<DenseVector> = match traces {
                Some(t) => t.iter().map(|t| t.eps_star.clone()).collect(),
                None => noise.to_vec(),
            };
            let v = layer.realised_weights(&routed);
            for b in 0..batch {
                for i in 0..layer.out_dim {
                    let g = d_pre.get(b, i);
                    if g != 0.0 {
                        for j in 0..w {
                            d_xa.set(b, j, d_xa.get(b, j) + g * v[i * w + j]);
                        }
                    }
                }
            }
            Ok(())
        };

        match (layer.mode, &rec.noise) {
            (EstimatorKind::Rt, NoiseRecord::Reparam { eps })
            | (EstimatorKind::Rt | EstimatorKind::R2g2, NoiseRecord::Frozen { eps, .. }) => {
                pathwise(eps, None, &mut block, &mut d_xa)?;
            }
            (EstimatorKind::R2g2, NoiseRecord::R2g2 { eps, traces }) => {
                pathwise(eps, Some(traces), &mut block, &mut d_xa)?;
            }
            (EstimatorKind::Lrt, NoiseRecord::Local { xi, std, .. }) => {
                let rows: Vec<DiagGaussianParams> = (0..layer.out_dim).map(|i| layer.unit_theta(i)).collect();
                let mu = layer.theta.mu();
                for b in 0..batch {
                    let x = DenseVector::from_vec(rec.input.row(b).to_vec());
                    let xi_b = DenseVector::from_vec((0..layer.out_dim).map(|i| xi.get(b, i)).collect());
                    let up = DenseVector::from_vec((0..layer.out_dim).map(|i| d_pre.get(b, i)).collect());
                    let site = LrtSite::new(x, rows.clone(), xi_b)?;
                    for (i, est) in lrt_gradient(&site, &UpstreamGradient::new(up))?.iter().enumerate() {
                        for j in 0..w {
                            block[i * w + j] += est.d_mu[j];
                            block[d + i * w + j] += est.d_tau[j] * tau[i * w + j];
                        }
                    }
                    let xb = rec.input.row(b);
                    for i in 0..layer.out_dim {
                        let g = d_pre.get(b, i);
                        let coef = xi.get(b, i) / std.get(b, i);
                        for j in 0..w {
                            let k = i * w + j;
                            d_xa.set(b, j, d_xa.get(b, j) + g * (mu[k] + coef * xb[j] * tau[k]));
                        }
                    }
                }
            }
            (EstimatorKind::R2g2, NoiseRecord::Reparam { .. }) => {
                return Err(Error::Config("R2-G2 layer has no forward trace on the tape".into()));
            }
            (mode, _) => {
                return Err(Error::Config(format!("tape record does not match {mode} layer")));
            }
        }

        for (i, slot) in block[2 * d..].iter_mut().enumerate() {
            *slot = (0..batch).map(|b| d_pre.get(b, i)).sum();
        }
        let d_in = DenseMatrix::from_fn(batch, layer.in_dim, |b, j| d_xa.get(b, j));
        Ok((block, d_in))
    }

    /// `Σ_layers KL(q ‖ N(0, I))` over the Gaussian parameters.
    pub fn kl(&self) -> f64 {
        self.layers.iter().map(|l| kl_diag_standard(&l.theta)).sum()
    }

    /// Analytic gradient of [`Network::kl`] in the flat parameter layout.
    pub fn kl_gradient(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        for (layer, r) in self.layers.iter().zip(self.layer_ranges()) {
            let (g_mu, g_lt) = kl_diag_standard_grad(&layer.theta);
            out[r.mu].copy_from_slice(g_mu.as_slice());
            out[r.log_tau].copy_from_slice(g_lt.as_slice());
        }
        out
    }
}

fn tag_layer(layer: usize, e: Error) -> Error {
    match e {
        Error::Config(reason) => Error::Network { layer, reason },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    SoftmaxNll,
    GaussianNll { noise_std: f64 },
    /// `½‖prediction − target‖²`.
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// `N / B`; the KL weight is fixed at 1.
    pub minibatch_scale: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, dataset_size: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset_size {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={dataset_size}"
            )));
        }
        if let LossKind::GaussianNll { noise_std } = kind {
            if !(noise_std > 0.0 && noise_std.is_finite()) {
                return Err(Error::Config("noise_std must be positive".into()));
            }
        }
        Ok(Self {
            kind,
            minibatch_scale: dataset_size as f64 / batch_size as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(DenseMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    pub loss: f64,
    /// Unscaled batch NLL.
    pub nll: f64,
    pub kl: f64,
    /// `∂loss/∂predictions`, already multiplied by the minibatch scale.
    pub d_preds: DenseMatrix,
}

/// Summed negative log-likelihood over the batch and its gradient.
pub fn nll(predictions: &DenseMatrix, targets: &Targets, kind: LossKind) -> Result<(f64, DenseMatrix)> {
    let (batch, k) = predictions.shape();
    let mut grad = DenseMatrix::zeros(batch, k);
    let mut total = 0.0;
    match (kind, targets) {
        (LossKind::SoftmaxNll, Targets::Labels(labels)) => {
            if labels.len() != batch {
                return Err(Error::Dimension {
                    context: "labels",
                    expected: batch,
                    got: labels.len(),
                });
            }
            for (b, &y) in labels.iter().enumerate() {
                if y >= k {
                    return Err(Error::Config(format!("label {y} out of range for {k} classes")));
                }
                let row = predictions.row(b);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[y];
                for c in 0..k {
                    let p = (row[c] - lse).exp();
                    grad.set(b, c, p - f64::from(u8::from(c == y)));
                }
            }
        }
        (LossKind::GaussianNll { .. } | LossKind::Quadratic, Targets::Values(y)) => {
            if y.shape() != predictions.shape() {
                return Err(Error::Config("target shape does not match predictions".into()));
            }
            let (inv_var, constant) = match kind {
                LossKind::GaussianNll { noise_std } => (
                    1.0 / (noise_std * noise_std),
                    0.5 * (2.0 * std::f64::consts::PI * noise_std * noise_std).ln(),
                ),
                _ => (1.0, 0.0),
            };
            for b in 0..batch {
                for c in 0..k {
                    let r = predictions.get(b, c) - y.get(b, c);
                    total += 0.5 * r * r * inv_var + constant;
                    grad.set(b, c, r * inv_var);
                }
            }
        }
        _ => return Err(Error::Config("loss kind does not match target type".into())),
    }
    Ok((total, grad))
}

/// Minibatch ELBO loss `(N/B) Σ NLL + KL`.
pub fn elbo_loss(net: &Network, predictions: &DenseMatrix, targets: &Targets, spec: &LossSpec) -> Result<ElboTerms> {
    let (nll_sum, g) = nll(predictions, targets, spec.kind)?;
    let kl = net.kl();
    let s = spec.minibatch_scale;
    Ok(ElboTerms {
        loss: s * nll_sum + kl,
        nll: nll_sum,
        kl,
        d_preds: DenseMatrix::from_fn(g.rows(), g.cols(), |b, c| s * g.get(b, c)),
    })
}

pub fn accuracy(predictions: &DenseMatrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| {
            let row = predictions.row(b);
            let best = (0..row.len())
                .max_by(|&i, &j| row[i].total_cmp(&row[j]))
                .unwrap_or(0);
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts the step
    /// and leaves both the parameters and the moments untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_update(params, grad, self.m.len())?;
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    state.step(params, grad)
}

pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    check_update(params, grad, params.len())?;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

fn check_update(params: &[f64], grad: &[f64], expected: usize) -> Result<()> {
    if params.len() != expected || grad.len() != expected {
        return Err(Error::Dimension {
            context: "optimiser step",
            expected,
            got: grad.len().min(params.len()),
        });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            index,
            value: grad[index],
        });
    }
    Ok(())
}
