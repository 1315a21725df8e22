//! Self-contained numerical checks behind `pixelfield verify`.
//!
//! Each `measure_*` function returns the raw quantity so callers can apply
//! their own tolerance; [`run_all`] applies the built-in ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::diffgraph::{relative_error, GraphError, Tape};
use crate::encoder::EncoderConfig;
use crate::field::{
    field_forward_multi, field_forward_single, FieldConfig, FieldError, FieldParams,
};
use crate::geometry::{GeometryError, Intrinsics, Vec3};
use crate::model::{render_view, ModelConfig, ModelError, ModelParams, SourceView};
use crate::renderer::{
    bin_edges, composite, importance_samples, render_rays, stratified_samples, RenderConfig,
    RenderError, SampleSource, Sampling,
};
use crate::scenes::{
    oracle_render, random_camera, AnalyticField, Dataset, DatasetSpec, SceneError, SceneSampler,
    DEFAULT_BOUNDS,
};
use crate::trainer::{chunk_loss, loss_and_gradients, Instance, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Adds `N(0, sd)` noise to every parameter so that zero-initialised
/// layers carry gradient and every branch of the network is exercised.
pub fn perturb(model: &mut ModelParams, sd: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sd).expect("positive sd");
    for p in model.params_mut() {
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    }
}

/// Smallest model in the gradient-check configuration: C = 8 features and
/// a width-8 field.
pub fn tiny_model_config() -> ModelConfig {
    let encoder = EncoderConfig {
        channels: [2, 2, 2, 2],
    };
    ModelConfig {
        encoder,
        field: FieldConfig {
            width: 8,
            ..FieldConfig::desk(encoder.feature_dim())
        },
    }
}

/// Four deterministic midpoint samples with no importance or depth samples.
pub fn tiny_render_config() -> RenderConfig {
    RenderConfig {
        n_coarse: 4,
        n_importance: 0,
        n_depth: 0,
        ..RenderConfig::default()
    }
}

/// Worst per-channel difference between the renderer driven by the
/// analytic scene query and the closed-form oracle, over `n_rays` rays that
/// hit the primitives' bounding box.
pub fn measure_analytic_quadrature(
    n_rays: usize,
    n_coarse: usize,
    sigma_range: (f64, f64),
    seed: u64,
) -> Result<f64, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = SceneSampler {
        sigma_range,
        ..SceneSampler::default()
    };
    let cfg = RenderConfig {
        n_coarse,
        ..RenderConfig::default()
    };
    let intr = Intrinsics::centered(64.0, 64, 64)?;
    let mut worst: f64 = 0.0;
    for _ in 0..n_rays {
        let scene = sampler.sample(&mut rng)?;
        let camera = random_camera(&mut rng, 2.0, intr)?;
        let bb = scene.bounding_box().expect("sampled scenes are non-empty");
        let ray = loop {
            let px = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
            let r = camera.ray(px, DEFAULT_BOUNDS)?;
            if bb.hit_by(&r) {
                break r;
            }
        };
        let tape = Tape::new();
        let field = AnalyticField { scene: &scene };
        let out = render_rays(&tape, &field, &[ray], &cfg, &mut [SampleSource::Midpoint])?;
        let got = out.colors()[0].fine;
        let want = oracle_render(&scene, &ray);
        for k in 0..3 {
            worst = worst.max((got[k] - want[k]).abs());
        }
    }
    Ok(worst)
}

/// Colour of a ray through a Gaussian density bump with a smoothly varying
/// emitted colour, by midpoint quadrature with `n` samples on `[2, 6]`.
pub fn bump_render(n: usize) -> Result<[f64; 3], VerifyError> {
    let (near, far) = (2.0, 6.0);
    let depths = stratified_samples(near, far, n, &mut SampleSource::Midpoint)?;
    let sigmas: Vec<f64> = depths
        .iter()
        .map(|t| 3.0 * (-(t - 4.0) * (t - 4.0) / (2.0 * 0.3 * 0.3)).exp())
        .collect();
    let colors: Vec<[f64; 3]> = depths
        .iter()
        .map(|t| [0.5 + 0.4 * (3.0 * t).sin(), 0.3, 0.5 + 0.2 * t.cos()])
        .collect();
    Ok(composite(&depths, &sigmas, &colors, far, [1.0; 3])?.color)
}

/// Absolute error of [`bump_render`] against a 10⁶-sample reference for
/// each sample count.
pub fn measure_bump_convergence(counts: &[usize]) -> Result<Vec<f64>, VerifyError> {
    let reference = bump_render(1_000_000)?;
    counts
        .iter()
        .map(|&n| {
            let c = bump_render(n)?;
            Ok((0..3)
                .map(|k| (c[k] - reference[k]).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

/// Relative gradient error for one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub rel_error: f64,
}

/// Backward gradients of the full photometric loss against central
/// differences on the tiny configuration: one 8×8 scene, `n_views` input
/// views, every pixel of one target view as a ray.
pub fn measure_end_to_end_gradients(
    n_views: usize,
    eps: f64,
) -> Result<Vec<GroupError>, VerifyError> {
    let data = Dataset::synthesize(&DatasetSpec::new(1, n_views + 1, 8, 11))?;
    let mut model = ModelParams::init(tiny_model_config(), 5)?;
    perturb(&mut model, 0.1, 6);
    let render = tiny_render_config();
    let instance = Instance {
        scene: 0,
        inputs: (0..n_views).collect(),
        target: n_views,
        pixels: (0..64).collect(),
        sampling: Sampling::Midpoint,
    };
    let batch = [instance];
    let (_, analytic) = loss_and_gradients(&model, &data, &batch, &render, 64)?;
    let loss_at = |m: &ModelParams| -> Result<f64, VerifyError> {
        let tape = Tape::new();
        let vars = m.bind(&tape, false);
        let loss = chunk_loss(&tape, &vars, &data, &batch[0], (0, 64), &render, 64)?;
        let value = loss.value().item();
        Ok(value)
    };
    let names = model.param_names();
    let mut work = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (g, name) in names.into_iter().enumerate() {
        let len = analytic[g].len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = work.params()[g].data()[i];
            work.params_mut()[g].data_mut()[i] = x + eps;
            let plus = loss_at(&work)?;
            work.params_mut()[g].data_mut()[i] = x - eps;
            let minus = loss_at(&work)?;
            work.params_mut()[g].data_mut()[i] = x;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.push(GroupError {
            name,
            rel_error: relative_error(&numeric, analytic[g].data()),
        });
    }
    Ok(out)
}

/// Maximum per-pixel change of the rendered target (coarse and fine
/// colours) over all orderings of `n_views` source views.
pub fn measure_view_permutation(n_views: usize) -> Result<f64, VerifyError> {
    let data = Dataset::synthesize(&DatasetSpec::new(1, n_views + 1, 16, 21))?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            channels: [4, 4, 4, 4],
        },
        field: FieldConfig {
            width: 16,
            ..FieldConfig::desk(16)
        },
    };
    let mut model = ModelParams::init(config, 8)?;
    perturb(&mut model, 0.1, 9);
    let views = &data.scenes[0].views;
    let render = RenderConfig {
        n_coarse: 16,
        n_importance: 8,
        n_depth: 8,
        ..RenderConfig::default()
    };
    let render_order = |order: &[usize]| -> Result<Vec<f64>, VerifyError> {
        let sources: Vec<SourceView> = order
            .iter()
            .map(|&i| SourceView {
                image: &views[i].image,
                camera: &views[i].camera,
            })
            .collect();
        let colors = render_view(
            &model,
            &sources,
            &views[n_views].camera,
            data.bounds,
            &render,
            Sampling::Random { seed: 4 },
        )?;
        Ok(colors
            .iter()
            .flat_map(|c| c.coarse.into_iter().chain(c.fine))
            .collect())
    };
    let identity: Vec<usize> = (0..n_views).collect();
    let reference = render_order(&identity)?;
    let mut worst: f64 = 0.0;
    for order in permutations(&identity) {
        let img = render_order(&order)?;
        for (a, b) in img.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Number of random inputs on which the one-view multi-view field differs
/// bitwise from the single-view field.
pub fn measure_single_view_mismatches(trials: usize) -> Result<usize, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let config = FieldConfig::desk(16);
    let mut params = FieldParams::init(config, &mut rng);
    let normal = Normal::new(0.0, 0.1).expect("positive sd");
    for p in params.params_mut() {
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    }
    let mut mismatches = 0;
    for _ in 0..trials {
        let mut v = || {
            Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..3.0),
            )
        };
        let (x, d) = (v(), v().normalize());
        let feat: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let single = field_forward_single(&params, &x, &d, &feat)?;
        let multi = field_forward_multi(&params, &[(x, d, feat)])?;
        let same = single.sigma.to_bits() == multi.sigma.to_bits()
            && single
                .rgb
                .iter()
                .zip(multi.rgb)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        mismatches += usize::from(!same);
    }
    Ok(mismatches)
}

/// Worst `|Σw + T_residual − 1|` over random compositing inputs, and whether
/// every weight lay in `[0, 1]`.
pub fn measure_transmittance(trials: usize, seed: u64) -> Result<(f64, bool), VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut in_range = true;
    for _ in 0..trials {
        let n = rng.gen_range(1..=96);
        let near = rng.gen_range(0.0..2.0);
        let far = near + rng.gen_range(0.1..4.0);
        let mut depths: Vec<f64> = (0..n).map(|_| rng.gen_range(near..far)).collect();
        depths.sort_by(f64::total_cmp);
        // Densities span empty space to effectively opaque.
        let sigmas: Vec<f64> = (0..n)
            .map(|_| 10f64.powf(rng.gen_range(-3.0..3.0)) * rng.gen_range(0.0..1.0))
            .collect();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let out = composite(&depths, &sigmas, &colors, far, [1.0; 3])?;
        let total: f64 = out.weights.iter().sum::<f64>() + out.residual;
        worst = worst.max((total - 1.0).abs());
        in_range &= out.weights.iter().all(|w| (0.0..=1.0).contains(w));
    }
    Ok((worst, in_range))
}

/// Fraction of importance samples that land in the bin holding all of the
/// weight, over every bin of a 64-bin ray.
pub fn measure_delta_mass_fraction(n_samples: usize) -> Result<f64, VerifyError> {
    let depths = stratified_samples(2.0, 6.0, 64, &mut SampleSource::Midpoint)?;
    let edges = bin_edges(&depths, 2.0, 6.0);
    let (mut inside, mut total) = (0usize, 0usize);
    for k in 0..64 {
        let mut w = vec![0.0; 64];
        w[k] = 1.0;
        let s = importance_samples(
            &depths,
            &w,
            2.0,
            6.0,
            n_samples,
            &mut SampleSource::Midpoint,
        )?;
        inside += s
            .iter()
            .filter(|t| (edges[k]..=edges[k + 1]).contains(*t))
            .count();
        total += s.len();
    }
    Ok(inside as f64 / total as f64)
}

/// Kolmogorov distance between `n` random importance samples drawn from
/// uniform weights over equal bins and the uniform distribution.
pub fn measure_uniform_ks(n: usize, seed: u64) -> Result<f64, VerifyError> {
    let depths = stratified_samples(0.0, 1.0, 64, &mut SampleSource::Midpoint)?;
    let mut src = Sampling::Random { seed }.source(0);
    let s = importance_samples(&depths, &[0.25; 64], 0.0, 1.0, n, &mut src)?;
    let nf = n as f64;
    Ok(s.iter()
        .enumerate()
        .map(|(i, &t)| (t - i as f64 / nf).max((i + 1) as f64 / nf - t))
        .fold(0.0, f64::max))
}

/// Small training setup shared by the determinism checks.
pub fn tiny_training() -> Result<(Dataset, TrainConfig, RenderConfig), VerifyError> {
    let data = Dataset::synthesize(&DatasetSpec::new(2, 4, 8, 13))?;
    let config = TrainConfig {
        batch_instances: 2,
        rays_per_instance: 8,
        total_iters: 8,
        bbox_phase_iters: 3,
        fixed_views_iters: 4,
        chunk_rays: 4,
        learning_rate: 1e-3,
        seed: 17,
        ..TrainConfig::default()
    };
    let render = RenderConfig {
        n_coarse: 4,
        n_importance: 2,
        n_depth: 2,
        ..RenderConfig::default()
    };
    Ok((data, config, render))
}

/// Outcome of the determinism and checkpoint checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeReport {
    /// Two fresh runs with one seed gave identical loss bits.
    pub repeatable: bool,
    /// Serialising a loaded checkpoint reproduces its bytes.
    pub round_trip: bool,
    /// Save at the midpoint, load, and finish: same loss bits as one run.
    pub resume_matches: bool,
}

pub fn measure_resume(iters: usize) -> Result<ResumeReport, VerifyError> {
    let (data, config, render) = tiny_training()?;
    let fresh = || -> Result<Trainer, VerifyError> {
        Ok(Trainer::new(
            ModelParams::init(tiny_model_config(), 2)?,
            config,
            render,
        )?)
    };
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut a = fresh()?;
    let mut b = fresh()?;
    let trace_a = (0..iters)
        .map(|_| a.step(&data))
        .collect::<Result<Vec<_>, _>>()?;
    let trace_b = (0..iters)
        .map(|_| b.step(&data))
        .collect::<Result<Vec<_>, _>>()?;

    let mut first = fresh()?;
    let mut resumed = (0..iters / 2)
        .map(|_| first.step(&data))
        .collect::<Result<Vec<_>, _>>()?;
    let mut bytes = Vec::new();
    first.write_checkpoint(&mut bytes)?;
    let mut second = Trainer::read_checkpoint(&bytes[..])?;
    let mut again = Vec::new();
    second.write_checkpoint(&mut again)?;
    for _ in iters / 2..iters {
        resumed.push(second.step(&data)?);
    }
    Ok(ResumeReport {
        repeatable: bits(&trace_a) == bits(&trace_b),
        round_trip: bytes == again,
        resume_matches: bits(&trace_a) == bits(&resumed),
    })
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String), VerifyError>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every built-in check. Needs no dataset on disk.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(check(
        "gradients, 1 view",
        (|| {
            let groups = measure_end_to_end_gradients(1, 1e-6)?;
            let worst = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
            Ok((
                worst < 1e-4,
                format!("{} groups, max rel error {worst:.2e}", groups.len()),
            ))
        })(),
    ));
    out.push(check(
        "gradients, 2 views",
        (|| {
            let groups = measure_end_to_end_gradients(2, 1e-6)?;
            let worst = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
            Ok((
                worst < 1e-4,
                format!("{} groups, max rel error {worst:.2e}", groups.len()),
            ))
        })(),
    ));
    out.push(check(
        "quadrature vs analytic",
        (|| {
            let err = measure_analytic_quadrature(100, 512, (0.25, 0.75), 1)?;
            Ok((err < 2e-3, format!("max channel error {err:.2e}")))
        })(),
    ));
    out.push(check(
        "quadrature convergence",
        (|| {
            let errs = measure_bump_convergence(&[32, 64, 128, 256])?;
            let ok = errs.windows(2).all(|w| w[1] <= w[0]);
            Ok((ok, format!("errors {errs:?}")))
        })(),
    ));
    out.push(check(
        "pooling permutation invariance",
        (|| {
            let worst = (2..=4)
                .map(measure_view_permutation)
                .collect::<Result<Vec<_>, _>>()?;
            let max = worst.iter().copied().fold(0.0, f64::max);
            Ok((max < 1e-6, format!("max pixel change {max:.2e}")))
        })(),
    ));
    out.push(check(
        "single-view consistency",
        (|| {
            let bad = measure_single_view_mismatches(200)?;
            Ok((bad == 0, format!("{bad} of 200 differ")))
        })(),
    ));
    out.push(check(
        "transmittance conservation",
        (|| {
            let (err, in_range) = measure_transmittance(10_000, 3)?;
            Ok((
                err < 1e-12 && in_range,
                format!("max error {err:.2e}, weights in [0,1]: {in_range}"),
            ))
        })(),
    ));
    out.push(check(
        "importance sampling",
        (|| {
            let frac = measure_delta_mass_fraction(16)?;
            let ks = measure_uniform_ks(10_000, 5)?;
            Ok((
                frac == 1.0 && ks < 0.1,
                format!("delta fraction {frac}, KS distance {ks:.4}"),
            ))
        })(),
    ));
    out.push(check(
        "checkpoint round trip",
        (|| {
            let r = measure_resume(6)?;
            Ok((
                r.repeatable && r.round_trip && r.resume_matches,
                format!("{r:?}"),
            ))
        })(),
    ));
    out
}
