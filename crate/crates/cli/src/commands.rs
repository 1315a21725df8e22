use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pixelfield::eval::evaluate;
use pixelfield::geometry::Camera;
use pixelfield::image::Image;
use pixelfield::model::{render_image, ModelParams, SourceView};
use pixelfield::renderer::Sampling;
use pixelfield::scenes::{generate_dataset, Dataset, DatasetSpec, MANIFEST_FILE};
use pixelfield::trainer::{TrainError, Trainer};
use pixelfield::verify;

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, GenDataArgs, InitArgs, RenderArgs, TrainArgs};

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let spec = DatasetSpec::new(a.scenes, a.views, a.size, a.seed);
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    generate_dataset(&spec, &a.out).map_err(CliError::pipeline)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn init(a: &InitArgs) -> Result<(), CliError> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.init_seed = seed;
    }
    config.validate()?;
    let model = if a.zero {
        ModelParams::zeros(config.model)
    } else {
        ModelParams::init(config.model, config.init_seed)
    }
    .map_err(CliError::pipeline)?;
    let trainer = Trainer::new(model, config.train, config.render).map_err(CliError::pipeline)?;
    save_checkpoint(&trainer, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    trainer.save(path).map_err(|e| match e {
        TrainError::Io(io) => CliError::io(path, io),
        other => CliError::pipeline(other),
    })
}

fn load_checkpoint(path: &Path) -> Result<Trainer, CliError> {
    Trainer::load(path).map_err(|e| match e {
        TrainError::Io(io) => CliError::io(path, io),
        other => CliError::Pipeline(format!("{}: {other}", path.display())),
    })
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::load(dir).map_err(|e| CliError::Pipeline(format!("{}: {e}", dir.display())))
}

/// Accepts a scene id or a numeric index.
fn resolve_scene(data: &Dataset, key: &str) -> Result<usize, CliError> {
    data.scene_index(key)
        .or_else(|| key.parse::<usize>().ok().filter(|&i| i < data.scenes.len()))
        .ok_or_else(|| CliError::Usage(format!("no scene {key:?}")))
}

fn parse_indices(list: &str) -> Result<Vec<usize>, CliError> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad index {s:?} in {list:?}")))
        })
        .collect()
}

fn sampling(seed: Option<u64>) -> Sampling {
    seed.map_or(Sampling::Midpoint, |seed| Sampling::Random { seed })
}

const LOSS_LOG: &str = "loss.csv";

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(lr) = a.lr {
        config.train.learning_rate = lr;
    }
    if let Some(every) = a.checkpoint_every {
        config.checkpoint_every = every;
    }
    if let Some(iters) = a.iters {
        config.train.total_iters = iters;
        config.train.bbox_phase_iters = config.train.bbox_phase_iters.min(iters);
        config.train.fixed_views_iters = config.train.fixed_views_iters.min(iters);
    }
    config.validate()?;
    let dir = a
        .data
        .clone()
        .or_else(|| config.data.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set \"data\"".into()))?;
    let mut data = load_dataset(&dir)?;
    if let Some(ids) = &config.scenes {
        let idx = ids
            .iter()
            .map(|id| resolve_scene(&data, id))
            .collect::<Result<Vec<_>, _>>()?;
        data = data.subset(&idx);
    }

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = load_checkpoint(path)?;
            if let Some(iters) = a.iters {
                t.config.total_iters = iters;
                t.config
                    .validate()
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            t
        }
        None => {
            let model =
                ModelParams::init(config.model, config.init_seed).map_err(CliError::pipeline)?;
            Trainer::new(model, config.train, config.render)
                .map_err(|e| CliError::Config(e.to_string()))?
        }
    };

    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let echo = a.out.join("config.json");
    let text = serde_json::to_string_pretty(&config).expect("config serialises");
    fs::write(&echo, text).map_err(|e| CliError::io(&echo, e))?;

    let log_path = a.out.join(LOSS_LOG);
    let appending = a.resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    let csv_err = |e: csv::Error| CliError::Pipeline(format!("{}: {e}", log_path.display()));
    if !appending {
        log.write_record(["iter", "loss", "wall_ms"])
            .map_err(csv_err)?;
    }

    let start = Instant::now();
    let total = trainer.config.total_iters;
    while trainer.iteration < total {
        let iter = trainer.iteration;
        let loss = match trainer.step(&data) {
            Ok(l) => l,
            Err(TrainError::NonFiniteLoss { iteration, loss }) => {
                log.flush().map_err(|e| CliError::io(&log_path, e))?;
                return Err(CliError::Numerical(format!(
                    "loss {loss} at iteration {iteration}; parameters left at iteration {iteration}, \
                     last checkpoint in {}",
                    a.out.display()
                )));
            }
            Err(e) => return Err(CliError::pipeline(e)),
        };
        let wall_ms = start.elapsed().as_millis();
        log.write_record([iter.to_string(), format!("{loss:e}"), wall_ms.to_string()])
            .map_err(csv_err)?;
        let done = trainer.iteration == total;
        if trainer.iteration % config.checkpoint_every == 0 || done {
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            save_checkpoint(&trainer, &checkpoint_path(&a.out, trainer.iteration))?;
            save_checkpoint(&trainer, &a.out.join("latest.pxf"))?;
        }
        if (iter + 1) % 100 == 0 || done {
            eprintln!(
                "iter {:>6}/{total}  loss {loss:.5}  {:.1}s",
                iter + 1,
                wall_ms as f64 / 1e3
            );
        }
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.pxf"))
}

fn parse_camera(arg: &str) -> Result<Camera, CliError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| CliError::io(Path::new(arg), e))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad target pose: {e}")))
}

pub fn render(a: &RenderArgs) -> Result<(), CliError> {
    let trainer = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let scene = &data.scenes[resolve_scene(&data, &a.scene)?];
    let indices = parse_indices(&a.views)?;
    let sources = indices
        .iter()
        .map(|&i| {
            scene
                .views
                .get(i)
                .map(|v| SourceView {
                    image: &v.image,
                    camera: &v.camera,
                })
                .ok_or_else(|| CliError::Usage(format!("scene {} has no view {i}", scene.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let target = match (&a.target_pose, a.target_view) {
        (Some(json), _) => parse_camera(json)?,
        (None, Some(v)) => {
            scene
                .views
                .get(v)
                .ok_or_else(|| CliError::Usage(format!("scene {} has no view {v}", scene.id)))?
                .camera
        }
        (None, None) => {
            return Err(CliError::Usage(
                "need --target-pose or --target-view".into(),
            ))
        }
    };
    let image = render_image(
        &trainer.model,
        &sources,
        &target,
        data.bounds,
        &trainer.render,
        sampling(a.seed),
    )
    .map_err(CliError::pipeline)?;
    let (raw, preview) = output_paths(&a.out);
    image.save_rf32(&raw).map_err(|e| CliError::io(&raw, e))?;
    write_png(&image, &preview)?;
    println!("{}", raw.display());
    Ok(())
}

/// Raw output at `out` (or `out` with `.rf32` when a `.png` was named) and
/// the preview beside it.
fn output_paths(out: &Path) -> (PathBuf, PathBuf) {
    if out.extension().is_some_and(|e| e == "png") {
        (out.with_extension("rf32"), out.to_path_buf())
    } else {
        (out.to_path_buf(), out.with_extension("png"))
    }
}

fn write_png(image: &Image, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        image.width() as u32,
        image.height() as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| CliError::Pipeline(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&image.to_rgb8()).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let trainer = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let inputs = parse_indices(&a.inputs)?;
    let scenes = match &a.scenes {
        Some(list) => list
            .split(',')
            .map(|s| resolve_scene(&data, s.trim()))
            .collect::<Result<Vec<_>, _>>()?,
        None => (0..data.scenes.len()).collect(),
    };
    for &s in &scenes {
        let n = data.scenes[s].views.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= n) {
            return Err(CliError::Usage(format!(
                "scene {} has no view {bad}",
                data.scenes[s].id
            )));
        }
    }
    let mut model = trainer.model.clone();
    if a.zero_injection {
        model.zero_injection();
    }
    let result = evaluate(
        &model,
        &data,
        &scenes,
        &inputs,
        &trainer.render,
        sampling(a.seed),
    )
    .map_err(CliError::pipeline)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&result.model).expect("report serialises");
    fs::write(&a.out, text).map_err(|e| CliError::io(&a.out, e))?;
    println!(
        "mean PSNR {:.2} dB, mean SSIM {:.3} over {} views (best constant colour: {:.2} dB)",
        result.model.mean_psnr,
        result.model.mean_ssim,
        result.model.per_view.len(),
        result.baseline.mean_psnr
    );
    Ok(())
}

pub fn verify() -> Result<(), CliError> {
    let results = verify::run_all();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if failed > 0 {
        return Err(CliError::VerifyFailed(failed));
    }
    Ok(())
}
