//! The full model: a shared image encoder and coarse/fine field networks,
//! plus the glue that turns posed source images into a radiance field.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{GraphError, Tape, Tensor, Var};
use crate::encoder::{encode, feature_pixel, lookup_taps, EncoderConfig, EncoderError, EncoderNet};
use crate::field::{encode_inputs, FieldBatch, FieldConfig, FieldError, FieldNet, ViewInput};
use crate::geometry::{Camera, Ray, Vec3};
use crate::image::Image;
use crate::nn::binder;
use crate::renderer::{
    render_parallel, render_rays, Pass, RadianceField, RayColor, RenderConfig, RenderError,
    Sampling,
};
use crate::scenes::camera_rays;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model needs at least one source view")]
    NoViews,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub field: FieldConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            encoder,
            field: FieldConfig::desk(encoder.feature_dim()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.field.validate()?;
        if self.encoder.channels.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "encoder channels must be positive".into(),
            ));
        }
        if self.field.feature_dim != self.encoder.feature_dim() {
            return Err(ModelError::InvalidConfig(format!(
                "field feature_dim {} differs from encoder output {}",
                self.field.feature_dim,
                self.encoder.feature_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = Tensor> {
    pub config: ModelConfig,
    pub encoder: EncoderNet<T>,
    pub coarse: FieldNet<T>,
    pub fine: FieldNet<T>,
}

pub type ModelParams = Model<Tensor>;

impl Model<Tensor> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config,
            encoder: EncoderNet::init(config.encoder, &mut rng),
            coarse: FieldNet::init(config.field, &mut rng),
            fine: FieldNet::init(config.field, &mut rng),
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            config,
            encoder: EncoderNet::zeros(config.encoder),
            coarse: FieldNet::zeros(config.field),
            fine: FieldNet::zeros(config.field),
        })
    }

    pub fn zero_injection(&mut self) {
        self.coarse.zero_injection();
        self.fine.zero_injection();
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Model<Var<'t>> {
        self.map(&mut binder(tape, trainable))
    }
}

impl<T> Model<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Model<U> {
        Model {
            config: self.config,
            encoder: self.encoder.map(f),
            coarse: self.coarse.map(f),
            fine: self.fine.map(f),
        }
    }

    pub fn params(&self) -> Vec<&T> {
        let mut out = self.encoder.params();
        out.extend(self.coarse.params());
        out.extend(self.fine.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.encoder.params_mut();
        out.extend(self.coarse.params_mut());
        out.extend(self.fine.params_mut());
        out
    }

    /// Names aligned with `params()`, prefixed by sub-network.
    pub fn param_names(&self) -> Vec<String> {
        fn prefixed(p: &'static str, names: Vec<String>) -> impl Iterator<Item = String> {
            names.into_iter().map(move |n| format!("{p}.{n}"))
        }
        prefixed("encoder", self.encoder.param_names())
            .chain(prefixed("coarse", self.coarse.param_names()))
            .chain(prefixed("fine", self.fine.param_names()))
            .collect()
    }
}

/// A posed source image.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub image: &'a Image,
    pub camera: &'a Camera,
}

/// A source view after encoding: its camera and the feature grid already
/// multiplied by the coarse and fine injection weights.
#[derive(Debug, Clone)]
pub struct ProjectedView<T = Tensor> {
    pub camera: Camera,
    pub grid: (usize, usize),
    pub source: (usize, usize),
    /// `[grid cells, pool_after · width]`
    pub coarse: T,
    pub fine: T,
}

impl ProjectedView<Tensor> {
    pub fn bind<'t>(&self, tape: &'t Tape) -> ProjectedView<Var<'t>> {
        ProjectedView {
            camera: self.camera,
            grid: self.grid,
            source: self.source,
            coarse: tape.constant(self.coarse.clone()),
            fine: tape.constant(self.fine.clone()),
        }
    }
}

impl<'t> Model<Var<'t>> {
    /// Encodes each source image and projects its features for both
    /// networks. Gradients reach the encoder when it is bound trainable.
    pub fn project_views(
        &self,
        tape: &'t Tape,
        views: &[SourceView<'_>],
    ) -> Result<Vec<ProjectedView<Var<'t>>>, ModelError> {
        if views.is_empty() {
            return Err(ModelError::NoViews);
        }
        views
            .iter()
            .map(|v| {
                let vol = encode(tape, &self.encoder, v.image)?;
                Ok(ProjectedView {
                    camera: *v.camera,
                    grid: (vol.height, vol.width),
                    source: vol.source,
                    coarse: self.coarse.project_features(vol.features)?,
                    fine: self.fine.project_features(vol.features)?,
                })
            })
            .collect()
    }
}

/// The image-conditioned field: world points are moved into each source
/// view's frame, looked up in that view's features and pooled.
pub struct ConditionedField<'m, 't> {
    pub coarse: &'m FieldNet<Var<'t>>,
    pub fine: &'m FieldNet<Var<'t>>,
    pub views: &'m [ProjectedView<Var<'t>>],
}

impl<'t> RadianceField<'t> for ConditionedField<'_, 't> {
    fn query(
        &self,
        tape: &'t Tape,
        pass: Pass,
        points: &[Vec3],
        dirs: &[Vec3],
    ) -> Result<FieldBatch<'t>, RenderError> {
        let net = match pass {
            Pass::Coarse => self.coarse,
            Pass::Fine => self.fine,
        };
        let mut inputs = Vec::with_capacity(self.views.len());
        let mut xs = Vec::with_capacity(points.len());
        let mut ds = Vec::with_capacity(points.len());
        let mut pixels = Vec::with_capacity(points.len());
        for view in self.views {
            xs.clear();
            ds.clear();
            pixels.clear();
            let pose = &view.camera.pose;
            for (x, d) in points.iter().zip(dirs) {
                let xv = pose.world_to_view(x);
                pixels.push(feature_pixel(&view.camera.intrinsics, &xv));
                xs.push(xv);
                ds.push(pose.rotate_direction(d));
            }
            let grid = match pass {
                Pass::Coarse => view.coarse,
                Pass::Fine => view.fine,
            };
            let taps = lookup_taps(view.grid, view.source, &pixels);
            inputs.push(ViewInput {
                encoded: tape.constant(encode_inputs(&net.config, &xs, &ds)),
                injection: grid.gather_rows(Rc::new(taps))?,
            });
        }
        Ok(net.forward_multi(&inputs)?)
    }
}

/// Number of rays rendered per tape during inference.
pub const RENDER_CHUNK: usize = 64;

/// Renders the rays of `target` from the given source views with frozen
/// weights. Results are independent of the worker count.
pub fn render_view(
    model: &ModelParams,
    sources: &[SourceView<'_>],
    target: &Camera,
    bounds: (f64, f64),
    cfg: &RenderConfig,
    sampling: Sampling,
) -> Result<Vec<RayColor>, ModelError> {
    let rays = camera_rays(target, bounds)?;
    render_rays_with(model, sources, &rays, cfg, sampling)
}

/// Inference over arbitrary rays.
pub fn render_rays_with(
    model: &ModelParams,
    sources: &[SourceView<'_>],
    rays: &[Ray],
    cfg: &RenderConfig,
    sampling: Sampling,
) -> Result<Vec<RayColor>, ModelError> {
    let projected: Vec<ProjectedView> = {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        bound
            .project_views(&tape, sources)?
            .into_iter()
            .map(|v| ProjectedView {
                camera: v.camera,
                grid: v.grid,
                source: v.source,
                coarse: v.coarse.to_tensor(),
                fine: v.fine.to_tensor(),
            })
            .collect()
    };
    Ok(render_parallel(
        rays,
        sampling,
        RENDER_CHUNK,
        |part, streams| {
            let tape = Tape::new();
            let coarse = model.coarse.bind(&tape, false);
            let fine = model.fine.bind(&tape, false);
            let views: Vec<_> = projected.iter().map(|v| v.bind(&tape)).collect();
            let field = ConditionedField {
                coarse: &coarse,
                fine: &fine,
                views: &views,
            };
            Ok(render_rays(&tape, &field, part, cfg, streams)?.colors())
        },
    )?)
}

/// Fine-pass image of `target`.
pub fn render_image(
    model: &ModelParams,
    sources: &[SourceView<'_>],
    target: &Camera,
    bounds: (f64, f64),
    cfg: &RenderConfig,
    sampling: Sampling,
) -> Result<Image, ModelError> {
    let colors = render_view(model, sources, target, bounds, cfg, sampling)?;
    let data = colors
        .iter()
        .flat_map(|c| c.fine)
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(
        Image::new(target.intrinsics.width, target.intrinsics.height, data)
            .expect("pixel count matches camera"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode_values;
    use crate::field::field_forward_multi;
    use crate::geometry::Intrinsics;
    use crate::scenes::{oracle_image, orbit_camera, Scene, SceneSampler};

    fn tiny_config() -> ModelConfig {
        let encoder = EncoderConfig {
            channels: [2, 2, 2, 2],
        };
        ModelConfig {
            encoder,
            field: FieldConfig {
                width: 8,
                blocks: 3,
                pool_after: 2,
                ..FieldConfig::desk(encoder.feature_dim())
            },
        }
    }

    fn randomize(model: &mut ModelParams, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }

    fn fixture(n_views: usize) -> (Scene, Vec<Camera>, Vec<Image>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = SceneSampler::default().sample(&mut rng).unwrap();
        let intr = Intrinsics::centered(16.0, 16, 16).unwrap();
        let cams: Vec<Camera> = (0..n_views)
            .map(|i| orbit_camera(0.4 + 1.3 * i as f64, 0.2 * i as f64, 2.0, intr).unwrap())
            .collect();
        let imgs = cams
            .iter()
            .map(|c| oracle_image(&scene, c, (1.25, 2.75)).unwrap())
            .collect();
        (scene, cams, imgs)
    }

    #[test]
    fn config_consistency() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.field.feature_dim = 7;
        assert!(bad.validate().is_err());
        let m = ModelParams::init(tiny_config(), 0).unwrap();
        assert_eq!(m.params().len(), m.param_names().len());
        assert!(m.param_names().iter().any(|n| n == "fine.inject1.weight"));
    }

    #[test]
    fn projected_lookup_matches_per_point_field() {
        let mut model = ModelParams::init(tiny_config(), 1).unwrap();
        randomize(&mut model, 2);
        let (_, cams, imgs) = fixture(2);
        let sources: Vec<SourceView> = imgs
            .iter()
            .zip(&cams)
            .map(|(image, camera)| SourceView { image, camera })
            .collect();
        let points = [
            Vec3::new(0.1, -0.2, 0.3),
            Vec3::new(-0.4, 0.0, 0.05),
            Vec3::new(3.0, 0.0, 0.0),
        ];
        let dir = Vec3::new(0.3, -0.1, 1.0).normalize();

        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let views = bound.project_views(&tape, &sources).unwrap();
        let field = ConditionedField {
            coarse: &bound.coarse,
            fine: &bound.fine,
            views: &views,
        };
        let out = field.query(&tape, Pass::Fine, &points, &[dir; 3]).unwrap();

        let volumes: Vec<_> = imgs
            .iter()
            .map(|i| encode_values(&model.encoder, i).unwrap())
            .collect();
        for (k, x) in points.iter().enumerate() {
            let per_view: Vec<_> = cams
                .iter()
                .zip(&volumes)
                .map(|(c, vol)| {
                    let xv = c.pose.world_to_view(x);
                    let feat = vol.sample(feature_pixel(&c.intrinsics, &xv));
                    (xv, c.pose.rotate_direction(&dir), feat)
                })
                .collect();
            let expect = field_forward_multi(&model.fine, &per_view).unwrap();
            assert!((out.sigma.value().data()[k] - expect.sigma).abs() < 1e-12);
            for c in 0..3 {
                assert!((out.rgb.value().data()[3 * k + c] - expect.rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_renders_grey_over_background() {
        let model = ModelParams::zeros(tiny_config()).unwrap();
        let (_, cams, imgs) = fixture(1);
        let src = [SourceView {
            image: &imgs[0],
            camera: &cams[0],
        }];
        let img = render_image(
            &model,
            &src,
            &cams[0],
            (1.25, 2.75),
            &RenderConfig::default(),
            Sampling::Midpoint,
        )
        .unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn chunking_does_not_change_results() {
        let mut model = ModelParams::init(tiny_config(), 4).unwrap();
        randomize(&mut model, 5);
        let (_, cams, imgs) = fixture(2);
        let src = [SourceView {
            image: &imgs[0],
            camera: &cams[0],
        }];
        let cfg = RenderConfig {
            n_coarse: 8,
            n_importance: 4,
            n_depth: 4,
            ..RenderConfig::default()
        };
        let sampling = Sampling::Random { seed: 11 };
        let all = render_view(&model, &src, &cams[1], (1.25, 2.75), &cfg, sampling).unwrap();
        let rays = camera_rays(&cams[1], (1.25, 2.75)).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let views = bound.project_views(&tape, &src).unwrap();
        let field = ConditionedField {
            coarse: &bound.coarse,
            fine: &bound.fine,
            views: &views,
        };
        for k in [0usize, 77, 255] {
            let mut s = [sampling.source(k as u64)];
            let one = render_rays(&tape, &field, &rays[k..k + 1], &cfg, &mut s)
                .unwrap()
                .colors()[0];
            assert_eq!(one, all[k]);
        }
    }
}
