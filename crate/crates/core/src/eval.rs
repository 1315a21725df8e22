//! Held-out evaluation: render every non-input view of a scene and score it.

use thiserror::Error;

use crate::metrics::{best_constant, psnr, ssim, MetricError, MetricReport, ViewMetrics};
use crate::model::{render_image, ModelError, ModelParams, SourceView};
use crate::renderer::{RenderConfig, Sampling};
use crate::scenes::Dataset;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scene index {0} out of range")]
    NoSuchScene(usize),
    #[error("view {view} out of range for scene {scene} with {count} views")]
    NoSuchView {
        scene: String,
        view: usize,
        count: usize,
    },
    #[error("no target views remain after removing the inputs")]
    NoTargets,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Scores of the model and of the best constant colour on the same views.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub model: MetricReport,
    pub baseline: MetricReport,
}

/// Renders each view of each listed scene that is not in `inputs`, using
/// `inputs` as source views, and compares against the ground truth.
pub fn evaluate(
    model: &ModelParams,
    data: &Dataset,
    scenes: &[usize],
    inputs: &[usize],
    render: &RenderConfig,
    sampling: Sampling,
) -> Result<Evaluation, EvalError> {
    let mut rows = Vec::new();
    let mut base = Vec::new();
    for &s in scenes {
        let sd = data.scenes.get(s).ok_or(EvalError::NoSuchScene(s))?;
        let sources = inputs
            .iter()
            .map(|&i| {
                sd.views
                    .get(i)
                    .map(|v| SourceView {
                        image: &v.image,
                        camera: &v.camera,
                    })
                    .ok_or(EvalError::NoSuchView {
                        scene: sd.id.clone(),
                        view: i,
                        count: sd.views.len(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (v, view) in sd
            .views
            .iter()
            .enumerate()
            .filter(|(v, _)| !inputs.contains(v))
        {
            let img = render_image(model, &sources, &view.camera, data.bounds, render, sampling)?;
            rows.push(ViewMetrics {
                scene: sd.id.clone(),
                view: v,
                psnr: psnr(&img, &view.image)?,
                ssim: ssim(&img, &view.image)?,
            });
            let flat = best_constant(&view.image);
            base.push(ViewMetrics {
                scene: sd.id.clone(),
                view: v,
                psnr: psnr(&flat, &view.image)?,
                ssim: ssim(&flat, &view.image)?,
            });
        }
    }
    if rows.is_empty() {
        return Err(EvalError::NoTargets);
    }
    Ok(Evaluation {
        model: MetricReport::from_views(rows)?,
        baseline: MetricReport::from_views(base)?,
    })
}
