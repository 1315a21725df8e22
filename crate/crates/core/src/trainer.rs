//! Photometric training: batch sampling with a bounding-box phase and a
//! view-count curriculum, the coarse+fine loss, Adam, and checkpoints.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{GraphError, Tape, Tensor, Var};
use crate::model::{ConditionedField, Model, ModelConfig, ModelError, ModelParams, SourceView};
use crate::renderer::{render_rays, RenderConfig, RenderError, Sampling};
use crate::scenes::{camera_rays, Dataset};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PXFCKPT1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch for parameter {index}: {param:?} vs {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, loss: f64 },
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_instances: usize,
    pub rays_per_instance: usize,
    pub total_iters: u64,
    /// Rays are drawn only from pixels whose ray meets the object's
    /// bounding box for this many initial iterations.
    pub bbox_phase_iters: u64,
    /// Every instance uses `max_views` inputs for this many iterations,
    /// then a uniform count in `1..=max_views`.
    pub fixed_views_iters: u64,
    pub max_views: usize,
    pub seed: u64,
    /// Rays per tape; chunks are independent work items.
    pub chunk_rays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_instances: 4,
            rays_per_instance: 128,
            total_iters: 10_000,
            bbox_phase_iters: 1_000,
            fixed_views_iters: 7_500,
            max_views: 2,
            seed: 0,
            chunk_rays: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_instances == 0
            || self.rays_per_instance == 0
            || self.max_views == 0
            || self.chunk_rays == 0
        {
            return bad(
                "batch_instances, rays_per_instance, max_views and chunk_rays must be positive"
                    .into(),
            );
        }
        if self.bbox_phase_iters > self.total_iters || self.fixed_views_iters > self.total_iters {
            return bad("curriculum phases cannot exceed total_iters".into());
        }
        Ok(())
    }
}

/// `mean_r (‖coarse_r − target_r‖² + ‖fine_r − target_r‖²)` over `denom`
/// rays; `coarse`, `fine` and `target` are `[r, 3]`.
pub fn photometric_loss<'t>(
    coarse: Var<'t>,
    fine: Var<'t>,
    target: Var<'t>,
    denom: usize,
) -> Result<Var<'t>, GraphError> {
    let c = coarse.sub(target)?.square().sum();
    let f = fine.sub(target)?.square().sum();
    Ok(c.add(f)?.scale(1.0 / denom as f64))
}

/// Adaptive-moment optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn update(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<(), TrainError> {
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[index].shape() != g.shape() {
                return Err(TrainError::ShapeMismatch {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Supervision for one scene in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub scene: usize,
    pub inputs: Vec<usize>,
    pub target: usize,
    /// Row-major pixel indices of the target view.
    pub pixels: Vec<usize>,
    pub sampling: Sampling,
}

/// Number of input views for an instance at `iteration`.
fn view_count(config: &TrainConfig, iteration: u64, available: usize, rng: &mut impl Rng) -> usize {
    let n = if iteration < config.fixed_views_iters {
        config.max_views
    } else {
        rng.gen_range(1..=config.max_views)
    };
    n.min(available.saturating_sub(1)).max(1)
}

/// Draws one training batch.
pub fn sample_batch(
    data: &Dataset,
    config: &TrainConfig,
    iteration: u64,
    rng: &mut impl Rng,
) -> Result<Vec<Instance>, TrainError> {
    let mut batch = Vec::with_capacity(config.batch_instances);
    for _ in 0..config.batch_instances {
        let scene = rng.gen_range(0..data.scenes.len());
        let sd = &data.scenes[scene];
        if sd.views.len() < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "scene {} has fewer than 2 views",
                sd.id
            )));
        }
        let n = view_count(config, iteration, sd.views.len(), rng);
        let picked = sample_indices(rng, sd.views.len(), n + 1).into_vec();
        let (inputs, target) = (picked[..n].to_vec(), picked[n]);
        let camera = &sd.views[target].camera;
        let total = camera.intrinsics.width * camera.intrinsics.height;
        let mut pool: Vec<usize> = Vec::new();
        if iteration < config.bbox_phase_iters {
            if let Some(bb) = sd.scene.bounding_box() {
                let rays = camera_rays(camera, data.bounds).map_err(ModelError::from)?;
                pool = (0..total).filter(|&i| bb.hit_by(&rays[i])).collect();
            }
        }
        let pixels = (0..config.rays_per_instance)
            .map(|_| {
                if pool.is_empty() {
                    rng.gen_range(0..total)
                } else {
                    pool[rng.gen_range(0..pool.len())]
                }
            })
            .collect();
        batch.push(Instance {
            scene,
            inputs,
            target,
            pixels,
            sampling: Sampling::Random { seed: rng.gen() },
        });
    }
    Ok(batch)
}

/// One tape's worth of work: a contiguous range of an instance's rays.
#[derive(Debug, Clone, Copy)]
struct Chunk {
    instance: usize,
    start: usize,
    end: usize,
}

/// Loss of rays `start..end` of `instance`, divided by `denom`, on `tape`.
pub fn chunk_loss<'t>(
    tape: &'t Tape,
    model: &Model<Var<'t>>,
    data: &Dataset,
    instance: &Instance,
    range: (usize, usize),
    render: &RenderConfig,
    denom: usize,
) -> Result<Var<'t>, TrainError> {
    let sd = &data.scenes[instance.scene];
    let sources: Vec<SourceView> = instance
        .inputs
        .iter()
        .map(|&i| SourceView {
            image: &sd.views[i].image,
            camera: &sd.views[i].camera,
        })
        .collect();
    let views = model.project_views(tape, &sources)?;
    let field = ConditionedField {
        coarse: &model.coarse,
        fine: &model.fine,
        views: &views,
    };
    let target = &sd.views[instance.target];
    let width = target.camera.intrinsics.width;
    let pixels = &instance.pixels[range.0..range.1];
    let rays = pixels
        .iter()
        .map(|&p| {
            target
                .camera
                .ray(((p % width) as f64, (p / width) as f64), data.bounds)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(ModelError::from)?;
    let mut sources: Vec<_> = (range.0..range.1)
        .map(|i| instance.sampling.source(i as u64))
        .collect();
    let out = render_rays(tape, &field, &rays, render, &mut sources)?;
    let colors: Vec<f64> = pixels
        .iter()
        .flat_map(|&p| target.image.pixel(p % width, p / width))
        .collect();
    let target = tape.constant(Tensor::new(vec![pixels.len(), 3], colors)?);
    Ok(photometric_loss(out.coarse, out.fine, target, denom)?)
}

/// Batch loss and its gradient for every parameter of `model`, in
/// `params()` order. Chunks run in parallel; partial results are summed in
/// a fixed order, so the output does not depend on the thread count.
pub fn loss_and_gradients(
    model: &ModelParams,
    data: &Dataset,
    batch: &[Instance],
    render: &RenderConfig,
    chunk_rays: usize,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let denom: usize = batch.iter().map(|b| b.pixels.len()).sum();
    let chunks: Vec<Chunk> = batch
        .iter()
        .enumerate()
        .flat_map(|(instance, b)| {
            (0..b.pixels.len())
                .step_by(chunk_rays.max(1))
                .map(move |start| Chunk {
                    instance,
                    start,
                    end: (start + chunk_rays).min(b.pixels.len()),
                })
        })
        .collect();
    let parts = chunks
        .par_iter()
        .map(|c| {
            let tape = Tape::new();
            let vars = model.bind(&tape, true);
            let loss = chunk_loss(
                &tape,
                &vars,
                data,
                &batch[c.instance],
                (c.start, c.end),
                render,
                denom,
            )?;
            let grads = tape.backward(loss)?;
            let value = loss.value().item();
            Ok((
                value,
                vars.params()
                    .into_iter()
                    .map(|&v| grads.wrt(v))
                    .collect::<Vec<_>>(),
            ))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    for (loss, part) in parts {
        total += loss;
        for (g, p) in grads.iter_mut().zip(&part) {
            g.add_assign(p);
        }
    }
    Ok((total, grads))
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelParams,
    pub config: TrainConfig,
    pub render: RenderConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

/// Configuration echoed into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
}

impl Trainer {
    pub fn new(
        model: ModelParams,
        config: TrainConfig,
        render: RenderConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        render.validate()?;
        model.config.validate()?;
        let shapes: Vec<&[usize]> = model.params().iter().map(|p| p.shape()).collect();
        let adam = Adam::new(&shapes);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            render,
            adam,
            iteration: 0,
        })
    }

    /// Samples a batch, takes one optimiser step and returns the batch loss
    /// measured before the update.
    pub fn step(&mut self, data: &Dataset) -> Result<f64, TrainError> {
        let batch = sample_batch(data, &self.config, self.iteration, &mut self.rng)?;
        let (loss, grads) = loss_and_gradients(
            &self.model,
            data,
            &batch,
            &self.render,
            self.config.chunk_rays,
        )?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                iteration: self.iteration,
                loss,
            });
        }
        self.adam
            .update(self.model.params_mut(), &grads, self.config.learning_rate)?;
        self.iteration += 1;
        Ok(loss)
    }

    pub fn checkpoint_config(&self) -> CheckpointConfig {
        CheckpointConfig {
            model: self.model.config,
            train: self.config,
            render: self.render,
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), TrainError> {
        out.write_all(CHECKPOINT_MAGIC)?;
        write_section(
            &mut out,
            serde_json::to_string(&self.checkpoint_config())?.as_bytes(),
        )?;

        let mut params = Vec::new();
        params.extend_from_slice(&self.iteration.to_le_bytes());
        write_tensors(
            &mut params,
            &self.model.params(),
            Some(&self.model.param_names()),
        );
        write_section(&mut out, &params)?;

        let mut moments = Vec::new();
        moments.extend_from_slice(&self.adam.step.to_le_bytes());
        write_tensors(&mut moments, &self.adam.m.iter().collect::<Vec<_>>(), None);
        write_tensors(&mut moments, &self.adam.v.iter().collect::<Vec<_>>(), None);
        write_section(&mut out, &moments)?;

        let mut rng = Vec::new();
        rng.extend_from_slice(&self.rng.get_seed());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        write_section(&mut out, &rng)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self, TrainError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::BadCheckpoint("wrong magic".into()));
        }
        let config: CheckpointConfig = serde_json::from_slice(&read_section(&mut input)?)?;
        let mut model = ModelParams::zeros(config.model)?;
        let mut trainer = Trainer::new(model.clone(), config.train, config.render)?;

        let params = read_section(&mut input)?;
        let mut cur = Cursor::new(&params);
        trainer.iteration = cur.u64()?;
        cur.tensors_into(model.params_mut(), true)?;
        cur.finish()?;
        trainer.model = model;

        let moments = read_section(&mut input)?;
        let mut cur = Cursor::new(&moments);
        trainer.adam.step = cur.u64()?;
        cur.tensors_into(trainer.adam.m.iter_mut().collect(), false)?;
        cur.tensors_into(trainer.adam.v.iter_mut().collect(), false)?;
        cur.finish()?;

        let rng = read_section(&mut input)?;
        if rng.len() != 32 + 8 + 16 {
            return Err(TrainError::BadCheckpoint(
                "rng section has wrong size".into(),
            ));
        }
        let seed: [u8; 32] = rng[..32].try_into().expect("length checked");
        let mut state = ChaCha8Rng::from_seed(seed);
        state.set_stream(u64::from_le_bytes(
            rng[32..40].try_into().expect("length checked"),
        ));
        state.set_word_pos(u128::from_le_bytes(
            rng[40..56].try_into().expect("length checked"),
        ));
        trainer.rng = state;

        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(TrainError::BadCheckpoint("trailing bytes".into()));
        }
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&bytes[..])
    }
}

fn write_section<W: Write>(out: &mut W, bytes: &[u8]) -> io::Result<()> {
    out.write_all(&(bytes.len() as u64).to_le_bytes())?;
    out.write_all(bytes)
}

fn read_section<R: Read>(input: &mut R) -> Result<Vec<u8>, TrainError> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 34) {
        return Err(TrainError::BadCheckpoint(format!("section of {len} bytes")));
    }
    let mut buf = vec![0u8; len as usize];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

/// Count, then per tensor: optional name, rank, dims, little-endian f64s.
fn write_tensors(out: &mut Vec<u8>, tensors: &[&Tensor], names: Option<&[String]>) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (i, t) in tensors.iter().enumerate() {
        if let Some(names) = names {
            let name = names[i].as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
        }
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::BadCheckpoint("truncated section".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// Reads tensors into `slots`, requiring matching count and shapes.
    fn tensors_into(&mut self, slots: Vec<&mut Tensor>, named: bool) -> Result<(), TrainError> {
        let count = self.u32()? as usize;
        if count != slots.len() {
            return Err(TrainError::BadCheckpoint(format!(
                "expected {} tensors, found {count}",
                slots.len()
            )));
        }
        for slot in slots {
            if named {
                let n = self.u32()? as usize;
                self.take(n)?;
            }
            let rank = self.u32()? as usize;
            let shape = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if shape != slot.shape() {
                return Err(TrainError::BadCheckpoint(format!(
                    "tensor shape {shape:?} does not match {:?}",
                    slot.shape()
                )));
            }
            for v in slot.data_mut() {
                *v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), TrainError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(TrainError::BadCheckpoint("unread bytes in section".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::field::FieldConfig;
    use crate::scenes::{generate_dataset, DatasetSpec};

    fn tiny_model() -> ModelParams {
        let encoder = EncoderConfig {
            channels: [2, 2, 2, 2],
        };
        let config = ModelConfig {
            encoder,
            field: FieldConfig {
                width: 8,
                ..FieldConfig::desk(encoder.feature_dim())
            },
        };
        ModelParams::init(config, 3).unwrap()
    }

    fn tiny_setup() -> (Dataset, TrainConfig, RenderConfig) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&DatasetSpec::new(2, 4, 8, 5), dir.path()).unwrap();
        let data = Dataset::from_manifest(&manifest, dir.path()).unwrap();
        let config = TrainConfig {
            batch_instances: 2,
            rays_per_instance: 6,
            total_iters: 10,
            bbox_phase_iters: 3,
            fixed_views_iters: 5,
            chunk_rays: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let render = RenderConfig {
            n_coarse: 4,
            n_importance: 2,
            n_depth: 2,
            ..RenderConfig::default()
        };
        (data, config, render)
    }

    #[test]
    fn loss_examples() {
        let tape = Tape::new();
        let t = |v: Vec<f64>| tape.constant(Tensor::new(vec![v.len() / 3, 3], v).unwrap());
        let target = t(vec![0.2, 0.4, 0.6]);
        assert_eq!(
            photometric_loss(target, target, target, 1)
                .unwrap()
                .value()
                .item(),
            0.0
        );
        let off = t(vec![0.3, 0.4, 0.6]);
        let l = photometric_loss(off, target, target, 1)
            .unwrap()
            .value()
            .item();
        assert!((l - 0.01).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_is_scaled_residual() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.9, 0.3, 0.3, 0.3]).unwrap());
        let f = tape.leaf(Tensor::new(vec![2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap());
        let target_data = vec![0.2, 0.2, 0.2, 0.7, 0.1, 0.5];
        let target = tape.constant(Tensor::new(vec![2, 3], target_data.clone()).unwrap());
        let loss = photometric_loss(c, f, target, 2).unwrap();
        let g = tape.backward(loss).unwrap();
        for (var, grad) in [(c, g.wrt(c)), (f, g.wrt(f))] {
            for i in 0..6 {
                let expected = 2.0 * (var.value().data()[i] - target_data[i]) / 2.0;
                assert!((grad.data()[i] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut adam = Adam::new(&[&[2]]);
        adam.update(vec![&mut p], &[Tensor::zeros(&[2])], 0.1)
            .unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        let mut adam = Adam::new(&[&[2]]);
        let g = Tensor::new(vec![2], vec![0.5, -3.0]).unwrap();
        adam.update(vec![&mut p], &[g.clone()], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7 && (p.data()[1] + 1.9).abs() < 1e-7);
        for _ in 0..2000 {
            let before = p.data().to_vec();
            adam.update(vec![&mut p], &[g.clone()], 0.1).unwrap();
            if adam.step > 1990 {
                assert!(((before[0] - p.data()[0]) - 0.1).abs() < 1e-6);
            }
        }
        assert!(matches!(
            adam.update(vec![&mut p], &[Tensor::zeros(&[3])], 0.1),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn batches_respect_the_curriculum() {
        let (data, config, _) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for it in 0..10 {
            for inst in sample_batch(&data, &config, it, &mut rng).unwrap() {
                assert!(!inst.inputs.contains(&inst.target));
                assert_eq!(inst.pixels.len(), 6);
                if it < config.fixed_views_iters {
                    assert_eq!(inst.inputs.len(), 2);
                } else {
                    assert!((1..=2).contains(&inst.inputs.len()));
                }
                if it < config.bbox_phase_iters {
                    let sd = &data.scenes[inst.scene];
                    let cam = &sd.views[inst.target].camera;
                    let rays = camera_rays(cam, data.bounds).unwrap();
                    let bb = sd.scene.bounding_box().unwrap();
                    assert!(inst.pixels.iter().all(|&p| bb.hit_by(&rays[p])));
                }
            }
        }
    }

    #[test]
    fn unrestricted_pixels_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let (data, mut config, _) = tiny_setup();
        config.rays_per_instance = 100;
        config.batch_instances = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 16];
        let mut n = 0;
        for _ in 0..10 {
            for inst in sample_batch(&data, &config, config.bbox_phase_iters, &mut rng).unwrap() {
                for &p in &inst.pixels {
                    let (x, y) = (p % 8, p / 8);
                    counts[(y / 2) * 4 + x / 2] += 1;
                    n += 1;
                }
            }
        }
        assert_eq!(n, 10_000);
        let expected = n as f64 / 16.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new(15.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat}, p {p}");
    }

    #[test]
    fn chunking_does_not_change_gradients() {
        let (data, config, render) = tiny_setup();
        let model = tiny_model();
        let batch = sample_batch(&data, &config, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (la, ga) = loss_and_gradients(&model, &data, &batch, &render, 6).unwrap();
        let (lb, gb) = loss_and_gradients(&model, &data, &batch, &render, 1).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (a, b) in ga.iter().zip(&gb) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (data, config, render) = tiny_setup();
        let mut straight = Trainer::new(tiny_model(), config, render).unwrap();
        let trace: Vec<f64> = (0..6).map(|_| straight.step(&data).unwrap()).collect();

        let mut first = Trainer::new(tiny_model(), config, render).unwrap();
        let mut resumed_trace: Vec<f64> = (0..3).map(|_| first.step(&data).unwrap()).collect();
        let mut bytes = Vec::new();
        first.write_checkpoint(&mut bytes).unwrap();
        let mut second = Trainer::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(second.model, first.model);
        assert_eq!(second.adam, first.adam);
        assert_eq!(second.iteration, 3);
        let mut again = Vec::new();
        second.write_checkpoint(&mut again).unwrap();
        assert_eq!(bytes, again);
        resumed_trace.extend((0..3).map(|_| second.step(&data).unwrap()));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&trace), bits(&resumed_trace));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (_, config, render) = tiny_setup();
        let trainer = Trainer::new(tiny_model(), config, render).unwrap();
        let mut bytes = Vec::new();
        trainer.write_checkpoint(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"PXFCKPT1"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Trainer::read_checkpoint(&bad[..]),
            Err(TrainError::BadCheckpoint(_))
        ));
        assert!(Trainer::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Trainer::read_checkpoint(&long[..]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let d = TrainConfig::default();
        assert_eq!(
            (d.learning_rate, d.batch_instances, d.rays_per_instance),
            (1e-4, 4, 128)
        );
        assert!(TrainConfig {
            batch_instances: 0,
            ..d
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            bbox_phase_iters: d.total_iters + 1,
            ..d
        }
        .validate()
        .is_err());
        let parsed: TrainConfig = serde_json::from_str(
            r#"{"total_iters": 50, "bbox_phase_iters": 5, "fixed_views_iters": 10}"#,
        )
        .unwrap();
        assert_eq!(parsed.total_iters, 50);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
