//! Hierarchical ray sampling and the volume rendering quadrature.
//!
//! A ray with sorted depths `t_1..t_N` inside `[t_near, t_far]` uses
//! `δ_i = t_{i+1} − t_i` with the last interval running to `t_far`,
//! `α_i = 1 − exp(−σ_i δ_i)`, `T_i = Π_{j<i} (1 − α_j)` and `w_i = T_i α_i`.
//! Whatever transmittance is left at `t_far` picks up the background colour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{GraphError, Tape, Tensor, Var};
use crate::field::{FieldBatch, FieldError};
use crate::geometry::{GeometryError, Ray, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid sampling bounds [{0}, {1}]")]
    InvalidBounds(f64, f64),
    #[error("sample depths are not sorted ascending")]
    UnsortedDepths,
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_importance: usize,
    pub n_depth: usize,
    pub depth_sd: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_importance: 16,
            n_depth: 16,
            depth_sd: 0.01,
            background: [1.0; 3],
        }
    }
}

impl RenderConfig {
    pub fn n_fine(&self) -> usize {
        self.n_coarse + self.n_importance + self.n_depth
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidConfig(m.to_string()));
        if self.n_coarse == 0 {
            return bad("n_coarse must be at least 1");
        }
        if !(self.depth_sd > 0.0 && self.depth_sd.is_finite()) {
            return bad("depth_sd must be positive");
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Where the randomness of the samplers comes from.
///
/// `Midpoint` is the deterministic mode: stratified draws sit at bin
/// centres, inverse-CDF draws at `(j + 0.5)/n` and normal draws at 0.
#[derive(Debug, Clone)]
pub enum SampleSource {
    Midpoint,
    Random(ChaCha8Rng),
}

/// Sampling mode for whole images or batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Midpoint,
    Random { seed: u64 },
}

impl Sampling {
    /// Independent stream for ray `index`, so a ray's samples do not
    /// depend on how rays are split across workers.
    pub fn source(&self, index: u64) -> SampleSource {
        match *self {
            Sampling::Midpoint => SampleSource::Midpoint,
            Sampling::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index);
                SampleSource::Random(rng)
            }
        }
    }
}

impl SampleSource {
    fn unit(&mut self, midpoint: f64) -> f64 {
        match self {
            SampleSource::Midpoint => midpoint,
            SampleSource::Random(rng) => rng.gen::<f64>(),
        }
    }

    fn normal(&mut self) -> f64 {
        match self {
            SampleSource::Midpoint => 0.0,
            SampleSource::Random(rng) => rng.sample(StandardNormal),
        }
    }

    /// `n` sorted values in `[0, 1)`.
    fn sorted_units(&mut self, n: usize) -> Vec<f64> {
        let mut u: Vec<f64> = (0..n)
            .map(|j| self.unit((j as f64 + 0.5) / n as f64))
            .collect();
        u.sort_by(f64::total_cmp);
        u
    }
}

fn check_bounds(t_near: f64, t_far: f64) -> Result<(), RenderError> {
    if t_near < t_far && t_near.is_finite() && t_far.is_finite() {
        Ok(())
    } else {
        Err(RenderError::InvalidBounds(t_near, t_far))
    }
}

/// One draw per equal-width bin of `[t_near, t_far]`.
pub fn stratified_samples(
    t_near: f64,
    t_far: f64,
    n: usize,
    src: &mut SampleSource,
) -> Result<Vec<f64>, RenderError> {
    check_bounds(t_near, t_far)?;
    if n == 0 {
        return Err(RenderError::InvalidConfig(
            "stratified sampling needs n >= 1".into(),
        ));
    }
    let step = (t_far - t_near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let t = t_near + (i as f64 + src.unit(0.5)) * step;
            t.min(t_far)
        })
        .collect())
}

/// Bin edges around sorted sample depths: the bounds plus the midpoints
/// between consecutive samples.
pub fn bin_edges(depths: &[f64], t_near: f64, t_far: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(depths.len() + 1);
    edges.push(t_near);
    edges.extend(depths.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(t_far);
    edges
}

/// Inverse-CDF draws from the piecewise-constant PDF with mass `max(w_i, 0)`
/// on the bin around coarse sample `i`, falling back to a uniform PDF over
/// `[t_near, t_far]` when no weight is positive.
pub fn importance_samples(
    depths: &[f64],
    weights: &[f64],
    t_near: f64,
    t_far: f64,
    n: usize,
    src: &mut SampleSource,
) -> Result<Vec<f64>, RenderError> {
    check_bounds(t_near, t_far)?;
    debug_assert_eq!(depths.len(), weights.len());
    let units = src.sorted_units(n);
    let mass: Vec<f64> = weights.iter().map(|w| w.max(0.0)).collect();
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Ok(units
            .iter()
            .map(|u| t_near + u * (t_far - t_near))
            .collect());
    }
    let edges = bin_edges(depths, t_near, t_far);
    // Rounding in `u * total` must not walk into trailing empty bins.
    let last = mass.iter().rposition(|&m| m > 0.0).unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    let (mut bin, mut cdf) = (0, 0.0);
    for u in units {
        let target = u * total;
        while bin < last && cdf + mass[bin] <= target {
            cdf += mass[bin];
            bin += 1;
        }
        let frac = ((target - cdf) / mass[bin]).clamp(0.0, 1.0);
        out.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    Ok(out)
}

/// Normal draws around `expected_depth`, clamped to the bounds.
pub fn depth_samples(
    expected_depth: f64,
    sd: f64,
    n: usize,
    t_near: f64,
    t_far: f64,
    src: &mut SampleSource,
) -> Vec<f64> {
    (0..n)
        .map(|_| (expected_depth + sd * src.normal()).clamp(t_near, t_far))
        .collect()
}

/// Per-sample quantities of one composited ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleBatch {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub alphas: Vec<f64>,
    pub transmittances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance left at `t_far`.
    pub residual: f64,
    pub color: [f64; 3],
    pub expected_depth: f64,
}

pub fn deltas(depths: &[f64], t_far: f64) -> Result<Vec<f64>, RenderError> {
    if depths.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(RenderError::UnsortedDepths);
    }
    let mut out: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = depths.last() {
        out.push((t_far - last).max(0.0));
    }
    Ok(out)
}

/// Weight-averaged depth, guarded against empty rays.
pub fn expected_depth(depths: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let num: f64 = depths.iter().zip(weights).map(|(t, w)| t * w).sum();
    num / total.max(1e-8)
}

/// Plain-value compositing of one ray.
pub fn composite(
    depths: &[f64],
    sigmas: &[f64],
    colors: &[[f64; 3]],
    t_far: f64,
    background: [f64; 3],
) -> Result<RaySampleBatch, RenderError> {
    let deltas = deltas(depths, t_far)?;
    let n = depths.len();
    let mut alphas = Vec::with_capacity(n);
    let mut transmittances = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for i in 0..n {
        let alpha = 1.0 - (-sigmas[i] * deltas[i]).exp();
        let w = t * alpha;
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        alphas.push(alpha);
        transmittances.push(t);
        weights.push(w);
        t *= 1.0 - alpha;
    }
    for c in 0..3 {
        color[c] += t * background[c];
    }
    Ok(RaySampleBatch {
        expected_depth: expected_depth(depths, &weights),
        depths: depths.to_vec(),
        deltas,
        sigmas: sigmas.to_vec(),
        colors: colors.to_vec(),
        alphas,
        transmittances,
        weights,
        residual: t,
        color,
    })
}

/// Differentiable compositing of `r` rays with `s` samples each.
#[derive(Debug, Clone, Copy)]
pub struct Composited<'t> {
    /// `[r, 3]`
    pub color: Var<'t>,
    /// `[r, s]`
    pub weights: Var<'t>,
}

/// `sigma` is `[r·s]` or `[r, s]`, `rgb` is `[r·s, 3]` (ray-major), and
/// `depths` holds one sorted list of `s` depths per ray.
pub fn composite_tape<'t>(
    tape: &'t Tape,
    sigma: Var<'t>,
    rgb: Var<'t>,
    depths: &[Vec<f64>],
    t_far: &[f64],
    background: [f64; 3],
) -> Result<Composited<'t>, RenderError> {
    let r = depths.len();
    let s = depths.first().map_or(0, Vec::len);
    let mut delta = Vec::with_capacity(r * s);
    for (d, &far) in depths.iter().zip(t_far) {
        if d.len() != s {
            return Err(RenderError::InvalidConfig(
                "rays must share a sample count".into(),
            ));
        }
        delta.extend(deltas(d, far)?);
    }
    let delta = tape.constant(Tensor::new(vec![r, s], delta)?);
    let sd = sigma.reshape(&[r, s])?.mul(delta)?;
    let alpha = sd.neg().exp().neg().add_scalar(1.0);
    let trans = sd.exclusive_cumsum()?.neg().exp();
    let weights = trans.mul(alpha)?;
    let per_channel = rgb
        .transpose()?
        .reshape(&[3, r, s])?
        .mul(weights)?
        .sum_last()?;
    let residual = sd.sum_last()?.neg().exp();
    let bg = tape.constant(Tensor::new(
        vec![3, r],
        background
            .iter()
            .flat_map(|&c| std::iter::repeat(c).take(r))
            .collect(),
    )?);
    let color = per_channel
        .add(residual.broadcast(3).mul(bg)?)?
        .transpose()?;
    Ok(Composited { color, weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Coarse,
    Fine,
}

/// Anything that maps world-space sample points and unit ray directions to
/// densities `[n]` and colours `[n, 3]` on a tape.
pub trait RadianceField<'t> {
    fn query(
        &self,
        tape: &'t Tape,
        pass: Pass,
        points: &[Vec3],
        dirs: &[Vec3],
    ) -> Result<FieldBatch<'t>, RenderError>;
}

/// Output of a batch of rays: both heads on the tape plus plain diagnostics.
#[derive(Debug, Clone)]
pub struct RenderedRays<'t> {
    /// `[r, 3]`
    pub coarse: Var<'t>,
    /// `[r, 3]`
    pub fine: Var<'t>,
    /// Expected depth of the fine pass, per ray.
    pub depth: Vec<f64>,
    pub coarse_depths: Vec<Vec<f64>>,
    pub coarse_weights: Vec<Vec<f64>>,
    pub fine_depths: Vec<Vec<f64>>,
}

fn query_rays<'t, F: RadianceField<'t> + ?Sized>(
    tape: &'t Tape,
    field: &F,
    pass: Pass,
    rays: &[Ray],
    depths: &[Vec<f64>],
    cfg: &RenderConfig,
) -> Result<Composited<'t>, RenderError> {
    let total: usize = depths.iter().map(Vec::len).sum();
    let mut points = Vec::with_capacity(total);
    let mut dirs = Vec::with_capacity(total);
    for (ray, ts) in rays.iter().zip(depths) {
        for &t in ts {
            points.push(ray.at(t));
            dirs.push(ray.direction);
        }
    }
    let out = field.query(tape, pass, &points, &dirs)?;
    let far: Vec<f64> = rays.iter().map(|r| r.t_far).collect();
    composite_tape(tape, out.sigma, out.rgb, depths, &far, cfg.background)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape()[1];
    t.data().chunks(s).map(<[f64]>::to_vec).collect()
}

/// Coarse pass on stratified depths, then a fine pass on the sorted union
/// of coarse, importance and depth-centred samples.
///
/// The fine sample positions are computed from plain coarse values and
/// carry no gradient. `sources` supplies one sample stream per ray.
pub fn render_rays<'t, F: RadianceField<'t> + ?Sized>(
    tape: &'t Tape,
    field: &F,
    rays: &[Ray],
    cfg: &RenderConfig,
    sources: &mut [SampleSource],
) -> Result<RenderedRays<'t>, RenderError> {
    cfg.validate()?;
    assert_eq!(rays.len(), sources.len(), "one sample source per ray");
    let coarse_depths = rays
        .iter()
        .zip(sources.iter_mut())
        .map(|(r, src)| stratified_samples(r.t_near, r.t_far, cfg.n_coarse, src))
        .collect::<Result<Vec<_>, _>>()?;
    let coarse = query_rays(tape, field, Pass::Coarse, rays, &coarse_depths, cfg)?;
    let coarse_weights = rows(&coarse.weights.to_tensor());

    let mut fine_depths = Vec::with_capacity(rays.len());
    for ((ray, src), (ts, ws)) in rays
        .iter()
        .zip(sources.iter_mut())
        .zip(coarse_depths.iter().zip(&coarse_weights))
    {
        let mut all = ts.clone();
        all.extend(importance_samples(
            ts,
            ws,
            ray.t_near,
            ray.t_far,
            cfg.n_importance,
            src,
        )?);
        let centre = expected_depth(ts, ws);
        all.extend(depth_samples(
            centre,
            cfg.depth_sd,
            cfg.n_depth,
            ray.t_near,
            ray.t_far,
            src,
        ));
        all.sort_by(f64::total_cmp);
        fine_depths.push(all);
    }
    let fine = query_rays(tape, field, Pass::Fine, rays, &fine_depths, cfg)?;
    let fine_weights = rows(&fine.weights.to_tensor());
    let depth = fine_depths
        .iter()
        .zip(&fine_weights)
        .map(|(t, w)| expected_depth(t, w))
        .collect();
    Ok(RenderedRays {
        coarse: coarse.color,
        fine: fine.color,
        depth,
        coarse_depths,
        coarse_weights,
        fine_depths,
    })
}

/// Plain per-ray result of an inference render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayColor {
    pub coarse: [f64; 3],
    pub fine: [f64; 3],
    pub depth: f64,
}

impl RenderedRays<'_> {
    pub fn colors(&self) -> Vec<RayColor> {
        let (c, f) = (self.coarse.value(), self.fine.value());
        (0..self.depth.len())
            .map(|i| RayColor {
                coarse: [c.data()[3 * i], c.data()[3 * i + 1], c.data()[3 * i + 2]],
                fine: [f.data()[3 * i], f.data()[3 * i + 1], f.data()[3 * i + 2]],
                depth: self.depth[i],
            })
            .collect()
    }
}

/// Renders rays in parallel chunks. `render_chunk` gets a slice of rays and
/// their sample streams and usually builds a fresh tape. Streams are keyed
/// by global ray index, so the result does not depend on chunking or
/// thread count.
pub fn render_parallel<F>(
    rays: &[Ray],
    sampling: Sampling,
    chunk: usize,
    render_chunk: F,
) -> Result<Vec<RayColor>, RenderError>
where
    F: Fn(&[Ray], &mut [SampleSource]) -> Result<Vec<RayColor>, RenderError> + Sync,
{
    let chunk = chunk.max(1);
    let parts = rays
        .par_chunks(chunk)
        .enumerate()
        .map(|(k, part)| {
            let mut sources: Vec<SampleSource> = (0..part.len())
                .map(|i| sampling.source((k * chunk + i) as u64))
                .collect();
            render_chunk(part, &mut sources)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}
