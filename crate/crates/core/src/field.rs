//! Positional encoding and the conditioned residual field network.
//!
//! The network splits into a per-view trunk (input layer plus the first
//! `pool_after` blocks, each receiving that view's image feature as a
//! residual) and a shared head that runs after the per-view hidden states are
//! averaged.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{GraphError, Tape, Tensor, Var};
use crate::geometry::Vec3;
use crate::nn::{binder, Linear};

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("field evaluation needs at least one view")]
    EmptyViewList,
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosEncConfig {
    pub octaves: usize,
    pub omega: f64,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            octaves: 6,
            omega: 1.5,
        }
    }
}

impl PosEncConfig {
    pub fn dim(&self) -> usize {
        3 + 6 * self.octaves
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.octaves == 0 || !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(FieldError::InvalidConfig(format!(
                "positional encoding needs octaves >= 1 and omega > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `[x; sin(2⁰ωx); cos(2⁰ωx); …; sin(2^(L−1)ωx); cos(2^(L−1)ωx)]`.
pub fn gamma(x: &Vec3, cfg: &PosEncConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim());
    gamma_into(x, cfg, &mut out);
    out
}

fn gamma_into(x: &Vec3, cfg: &PosEncConfig, out: &mut Vec<f64>) {
    out.extend(x.iter());
    let mut freq = cfg.omega;
    for _ in 0..cfg.octaves {
        out.extend(x.iter().map(|v| (freq * v).sin()));
        out.extend(x.iter().map(|v| (freq * v).cos()));
        freq *= 2.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub width: usize,
    pub blocks: usize,
    /// Per-view hidden states are averaged after this many blocks.
    pub pool_after: usize,
    pub feature_dim: usize,
    pub posenc: PosEncConfig,
    /// When false the view direction is dropped from the input layer.
    pub use_dirs: bool,
}

impl FieldConfig {
    pub fn desk(feature_dim: usize) -> Self {
        Self {
            width: 64,
            blocks: 5,
            pool_after: 3,
            feature_dim,
            posenc: PosEncConfig::default(),
            use_dirs: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.posenc.dim() + if self.use_dirs { 3 } else { 0 }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        self.posenc.validate()?;
        if self.width == 0 || self.feature_dim == 0 {
            return Err(FieldError::InvalidConfig(
                "width and feature_dim must be positive".into(),
            ));
        }
        if self.pool_after == 0 || self.pool_after > self.blocks {
            return Err(FieldError::InvalidConfig(format!(
                "pool_after must lie in 1..={}, got {}",
                self.blocks, self.pool_after
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T = Tensor> {
    pub fc0: Linear<T>,
    pub fc1: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNet<T = Tensor> {
    pub config: FieldConfig,
    pub input: Linear<T>,
    pub blocks: Vec<ResBlock<T>>,
    /// One injection layer per pre-pooling block.
    pub inject: Vec<Linear<T>>,
    pub output: Linear<T>,
}

pub type FieldParams = FieldNet<Tensor>;

impl FieldNet<Tensor> {
    /// Kaiming init with the second layer of every block zeroed, so each block
    /// starts as the identity on its skip path.
    pub fn init(config: FieldConfig, rng: &mut impl Rng) -> Self {
        let w = config.width;
        let input = Linear::kaiming(config.input_dim(), w, rng);
        let blocks = (0..config.blocks)
            .map(|_| ResBlock {
                fc0: Linear::kaiming(w, w, rng),
                fc1: Linear::zeros(w, w),
            })
            .collect();
        let inject = (0..config.pool_after)
            .map(|_| Linear::kaiming(config.feature_dim, w, rng))
            .collect();
        let output = Linear::kaiming(w, 4, rng);
        Self {
            config,
            input,
            blocks,
            inject,
            output,
        }
    }

    pub fn zeros(config: FieldConfig) -> Self {
        let w = config.width;
        Self {
            config,
            input: Linear::zeros(config.input_dim(), w),
            blocks: (0..config.blocks)
                .map(|_| ResBlock {
                    fc0: Linear::zeros(w, w),
                    fc1: Linear::zeros(w, w),
                })
                .collect(),
            inject: (0..config.pool_after)
                .map(|_| Linear::zeros(config.feature_dim, w))
                .collect(),
            output: Linear::zeros(w, 4),
        }
    }

    /// The "no local features" ablation: conditioning flows only through the
    /// injection layers, so zeroing them detaches the output from the image.
    pub fn zero_injection(&mut self) {
        for layer in &mut self.inject {
            for p in layer.params_mut() {
                p.data_mut().fill(0.0);
            }
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> FieldNet<Var<'t>> {
        self.map(&mut binder(tape, trainable))
    }
}

impl<T> FieldNet<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FieldNet<U> {
        FieldNet {
            config: self.config,
            input: self.input.map(f),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    fc0: b.fc0.map(f),
                    fc1: b.fc1.map(f),
                })
                .collect(),
            inject: self.inject.iter().map(|l| l.map(f)).collect(),
            output: self.output.map(f),
        }
    }

    pub fn params(&self) -> Vec<&T> {
        let mut out: Vec<&T> = self.input.params().into();
        for b in &self.blocks {
            out.extend(b.fc0.params());
            out.extend(b.fc1.params());
        }
        for l in &self.inject {
            out.extend(l.params());
        }
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = self.input.params_mut().into();
        for b in &mut self.blocks {
            out.extend(b.fc0.params_mut());
            out.extend(b.fc1.params_mut());
        }
        for l in &mut self.inject {
            out.extend(l.params_mut());
        }
        out.extend(self.output.params_mut());
        out
    }

    /// Names aligned with `params()`.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec!["input.weight".to_string(), "input.bias".to_string()];
        for i in 0..self.blocks.len() {
            for layer in ["fc0", "fc1"] {
                out.push(format!("block{i}.{layer}.weight"));
                out.push(format!("block{i}.{layer}.bias"));
            }
        }
        for i in 0..self.inject.len() {
            out.push(format!("inject{i}.weight"));
            out.push(format!("inject{i}.bias"));
        }
        out.push("output.weight".into());
        out.push("output.bias".into());
        out
    }
}

/// Per-view inputs for a batch of `n` points: the encoded coordinates
/// `[n, input_dim]` and the image features already multiplied by the
/// stacked injection weights, `[n, pool_after · width]` (biases excluded).
///
/// Injection is linear and bilinear lookup is linear, so projecting the
/// feature grid first and gathering afterwards gives the same result as
/// gathering features and projecting per point, at a fraction of the cost.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'t> {
    pub encoded: Var<'t>,
    pub injection: Var<'t>,
}

/// Densities `[n]` and colours `[n, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct FieldBatch<'t> {
    pub sigma: Var<'t>,
    pub rgb: Var<'t>,
}

/// Encodes view-space points and directions into the `[n, input_dim]` rows
/// consumed by the input layer.
pub fn encode_inputs(config: &FieldConfig, points: &[Vec3], dirs: &[Vec3]) -> Tensor {
    debug_assert_eq!(points.len(), dirs.len());
    let mut data = Vec::with_capacity(points.len() * config.input_dim());
    for (x, d) in points.iter().zip(dirs) {
        gamma_into(x, &config.posenc, &mut data);
        if config.use_dirs {
            data.extend(d.iter());
        }
    }
    Tensor::new(vec![points.len(), config.input_dim()], data).expect("row-major encoding")
}

impl<'t> FieldNet<Var<'t>> {
    fn block(&self, b: usize, h: Var<'t>, u: Var<'t>) -> Result<Var<'t>, GraphError> {
        let blk = &self.blocks[b];
        let inner = blk.fc1.forward(blk.fc0.forward(u)?.relu())?;
        Ok(h.add(inner)?.relu())
    }

    /// Multiplies `[m, feature_dim]` features by every injection weight at
    /// once, giving `[m, pool_after · width]`.
    pub fn project_features(&self, features: Var<'t>) -> Result<Var<'t>, GraphError> {
        let weights: Vec<Var<'t>> = self.inject.iter().map(|l| l.weight).collect();
        features.matmul(features.tape().concat(&weights, 1)?)
    }

    fn trunk(&self, view: &ViewInput<'t>) -> Result<Var<'t>, GraphError> {
        let w = self.config.width;
        let mut h = self.input.forward(view.encoded)?.relu();
        for (b, layer) in self.inject.iter().enumerate() {
            let feat = view
                .injection
                .slice(1, b * w, (b + 1) * w)?
                .add(layer.bias)?;
            let u = h.add(feat)?;
            h = self.block(b, h, u)?;
        }
        Ok(h)
    }

    fn head(&self, mut h: Var<'t>) -> Result<FieldBatch<'t>, GraphError> {
        for b in self.config.pool_after..self.config.blocks {
            h = self.block(b, h, h)?;
        }
        let raw = self.output.forward(h)?;
        let n = raw.shape()[0];
        let sigma = raw.slice(1, 0, 1)?.relu().reshape(&[n])?;
        let rgb = raw.slice(1, 1, 4)?.sigmoid();
        Ok(FieldBatch { sigma, rgb })
    }

    /// Single-view evaluation without the pooling step.
    pub fn forward_single(&self, view: &ViewInput<'t>) -> Result<FieldBatch<'t>, FieldError> {
        Ok(self.head(self.trunk(view)?)?)
    }

    /// Runs the trunk per view, averages hidden states in list order, then
    /// runs the shared head.
    pub fn forward_multi(&self, views: &[ViewInput<'t>]) -> Result<FieldBatch<'t>, FieldError> {
        let first = views.first().ok_or(FieldError::EmptyViewList)?;
        let tape = first.encoded.tape();
        let hidden = views
            .iter()
            .map(|v| self.trunk(v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.head(tape.mean_of(&hidden)?)?)
    }
}

/// Density and colour at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

fn single_point_output(batch: FieldBatch<'_>) -> FieldOutput {
    let rgb = batch.rgb.value();
    FieldOutput {
        sigma: batch.sigma.value().data()[0],
        rgb: [rgb.data()[0], rgb.data()[1], rgb.data()[2]],
    }
}

fn point_view<'t>(
    tape: &'t Tape,
    net: &FieldNet<Var<'t>>,
    x_view: &Vec3,
    d_view: &Vec3,
    feat: &[f64],
) -> Result<ViewInput<'t>, FieldError> {
    let features = tape.constant(Tensor::new(vec![1, feat.len()], feat.to_vec())?);
    Ok(ViewInput {
        encoded: tape.constant(encode_inputs(&net.config, &[*x_view], &[*d_view])),
        injection: net.project_features(features)?,
    })
}

/// Evaluates the field at one view-space point.
pub fn field_forward_single(
    params: &FieldParams,
    x_view: &Vec3,
    d_view: &Vec3,
    feat: &[f64],
) -> Result<FieldOutput, FieldError> {
    let tape = Tape::new();
    let net = params.bind(&tape, false);
    let view = point_view(&tape, &net, x_view, d_view, feat)?;
    Ok(single_point_output(net.forward_single(&view)?))
}

/// Evaluates the field at one point seen from several views, given as
/// `(x_view, d_view, feature)` triples.
pub fn field_forward_multi(
    params: &FieldParams,
    per_view: &[(Vec3, Vec3, Vec<f64>)],
) -> Result<FieldOutput, FieldError> {
    let tape = Tape::new();
    let net = params.bind(&tape, false);
    let views = per_view
        .iter()
        .map(|(x, d, f)| point_view(&tape, &net, x, d, f))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(single_point_output(net.forward_multi(&views)?))
}
