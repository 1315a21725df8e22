//! Smoke test: the desk model fits a single scene.

use pixelfield::model::{ModelConfig, ModelParams};
use pixelfield::renderer::RenderConfig;
use pixelfield::scenes::{Dataset, DatasetSpec};
use pixelfield::trainer::{TrainConfig, Trainer};

const ITERS: u64 = 500;
const WINDOW: usize = 50;

#[test]
fn single_scene_loss_halves_within_500_iterations() {
    let data = Dataset::synthesize(&DatasetSpec::new(1, 8, 32, 21)).unwrap();
    let config = TrainConfig {
        learning_rate: 5e-4,
        batch_instances: 2,
        rays_per_instance: 32,
        chunk_rays: 32,
        total_iters: ITERS,
        bbox_phase_iters: ITERS / 5,
        fixed_views_iters: ITERS / 2,
        seed: 2,
        ..TrainConfig::default()
    };
    let render = RenderConfig {
        n_coarse: 32,
        n_importance: 8,
        n_depth: 8,
        ..RenderConfig::default()
    };
    let model = ModelParams::init(ModelConfig::default(), 1).unwrap();
    let mut trainer = Trainer::new(model, config, render).unwrap();
    let losses: Vec<f64> = (0..ITERS).map(|_| trainer.step(&data).unwrap()).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first = mean(&losses[..WINDOW]);
    let last = mean(&losses[losses.len() - WINDOW..]);
    println!(
        "overfit: first {WINDOW} mean {first:.5}, last {WINDOW} mean {last:.5}, ratio {:.3}",
        last / first
    );
    assert!(last <= 0.5 * first, "loss went from {first} to {last}");
}
