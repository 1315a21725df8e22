//! Procedural scenes of constant-density primitives, their exact renderer,
//! and on-disk datasets.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{Tape, Tensor};
use crate::field::FieldBatch;
use crate::geometry::{Camera, GeometryError, Intrinsics, Pose, Ray, Vec3};
use crate::image::{Image, ImageError};
use crate::renderer::{Pass, RadianceField, RenderError};

pub const DEFAULT_BOUNDS: (f64, f64) = (1.25, 2.75);
pub const WHITE: [f64; 3] = [1.0; 3];
const MAX_PLACEMENT_TRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("primitives {0} and {1} overlap")]
    Overlap(usize, usize),
    #[error("could not place {0} disjoint primitives in {MAX_PLACEMENT_TRIES} attempts")]
    PlacementFailed(usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

/// Axis-aligned box, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|i| self.min[i] <= x[i] && x[i] <= self.max[i])
    }

    /// Parameter interval where the infinite line `o + t·d` is inside.
    fn slab(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            if d[i] == 0.0 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((self.min[i] - o[i]) / d[i], (self.max[i] - o[i]) / d[i]);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Whether the ray segment `[t_near, t_far]` touches the box.
    pub fn hit_by(&self, ray: &Ray) -> bool {
        clip(self.slab(&ray.origin, &ray.direction), ray).is_some()
    }
}

fn clip(interval: Option<(f64, f64)>, ray: &Ray) -> Option<(f64, f64)> {
    let (a, b) = interval?;
    let (a, b) = (a.max(ray.t_near), b.min(ray.t_far));
    (a <= b).then_some((a, b))
}

impl Shape {
    pub fn validate(&self) -> Result<(), SceneError> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Shape::Sphere { center, radius } => {
                finite(center) && radius.is_finite() && *radius > 0.0
            }
            Shape::Box { min, max } => {
                finite(min) && finite(max) && (0..3).all(|i| min[i] < max[i])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SceneError::InvalidPrimitive(format!("{self:?}")))
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        match self {
            Shape::Sphere { center, radius } => {
                (x - Vec3::from(*center)).norm_squared() <= radius * radius
            }
            Shape::Box { .. } => self.bounds().contains(x),
        }
    }

    pub fn bounds(&self) -> Aabb {
        match *self {
            Shape::Sphere { center, radius } => {
                let c = Vec3::from(center);
                Aabb {
                    min: c.add_scalar(-radius),
                    max: c.add_scalar(radius),
                }
            }
            Shape::Box { min, max } => Aabb {
                min: Vec3::from(min),
                max: Vec3::from(max),
            },
        }
    }

    /// Parameter interval of the infinite line inside the shape.
    fn line_interval(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = o - Vec3::from(center);
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Box { .. } => self.bounds().slab(o, d),
        }
    }

    /// Strict separation: shapes that touch count as overlapping.
    pub fn disjoint(&self, other: &Shape) -> bool {
        match (*self, *other) {
            (
                Shape::Sphere {
                    center: a,
                    radius: ra,
                },
                Shape::Sphere {
                    center: b,
                    radius: rb,
                },
            ) => (Vec3::from(a) - Vec3::from(b)).norm() > ra + rb,
            (Shape::Box { .. }, Shape::Box { .. }) => {
                let (p, q) = (self.bounds(), other.bounds());
                (0..3).any(|i| p.max[i] < q.min[i] || q.max[i] < p.min[i])
            }
            (Shape::Sphere { center, radius }, b @ Shape::Box { .. })
            | (b @ Shape::Box { .. }, Shape::Sphere { center, radius }) => {
                let bb = b.bounds();
                let c = Vec3::from(center);
                let nearest = c.sup(&bb.min).inf(&bb.max);
                (c - nearest).norm() > radius
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub sigma: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl Scene {
    /// Validates densities, colours, shapes and pairwise disjointness.
    pub fn new(primitives: Vec<Primitive>, background: [f64; 3]) -> Result<Self, SceneError> {
        let scene = Self {
            primitives,
            background,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !unit(&self.background) {
            return Err(SceneError::InvalidPrimitive(
                "background outside [0, 1]".into(),
            ));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.shape.validate()?;
            if !(p.sigma >= 0.0 && p.sigma.is_finite()) || !unit(&p.albedo) {
                return Err(SceneError::InvalidPrimitive(format!(
                    "primitive {i}: {p:?}"
                )));
            }
            for (j, q) in self.primitives[..i].iter().enumerate() {
                if !p.shape.disjoint(&q.shape) {
                    return Err(SceneError::Overlap(j, i));
                }
            }
        }
        Ok(())
    }

    /// Density and albedo at `x`; boundaries belong to the primitive.
    pub fn query(&self, x: &Vec3) -> (f64, [f64; 3]) {
        self.primitives
            .iter()
            .find(|p| p.shape.contains(x))
            .map_or((0.0, [0.0; 3]), |p| (p.sigma, p.albedo))
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        self.primitives
            .iter()
            .map(|p| p.shape.bounds())
            .reduce(|a, b| a.union(&b))
    }

    /// Sorted constant-density segments `(a, b, primitive)` along the ray.
    pub fn segments(&self, ray: &Ray) -> Vec<(f64, f64, &Primitive)> {
        let mut segs: Vec<_> = self
            .primitives
            .iter()
            .filter_map(|p| {
                clip(p.shape.line_interval(&ray.origin, &ray.direction), ray)
                    .map(|(a, b)| (a, b, p))
            })
            .collect();
        segs.sort_by(|x, y| x.0.total_cmp(&y.0));
        segs
    }
}

/// Exact rendering integral over `[t_near, t_far]` for piecewise-constant
/// density and colour.
pub fn oracle_render(scene: &Scene, ray: &Ray) -> [f64; 3] {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for (a, b, p) in scene.segments(ray) {
        let pass = (-p.sigma * (b - a)).exp();
        for c in 0..3 {
            color[c] += t * (1.0 - pass) * p.albedo[c];
        }
        t *= pass;
    }
    for c in 0..3 {
        color[c] += t * scene.background[c];
    }
    color
}

/// Ground-truth scene exposed through the renderer's field interface.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticField<'a> {
    pub scene: &'a Scene,
}

impl<'t> RadianceField<'t> for AnalyticField<'_> {
    fn query(
        &self,
        tape: &'t Tape,
        _pass: Pass,
        points: &[Vec3],
        _dirs: &[Vec3],
    ) -> Result<FieldBatch<'t>, RenderError> {
        let mut sigma = Vec::with_capacity(points.len());
        let mut rgb = Vec::with_capacity(points.len() * 3);
        for x in points {
            let (s, c) = self.scene.query(x);
            sigma.push(s);
            rgb.extend(c);
        }
        Ok(FieldBatch {
            sigma: tape.constant(Tensor::new(vec![points.len()], sigma)?),
            rgb: tape.constant(Tensor::new(vec![points.len(), 3], rgb)?),
        })
    }
}

/// Distribution of random scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSampler {
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Primitive centres lie within this distance of the origin.
    pub center_radius: f64,
    /// Sphere radius or box half-extent range.
    pub size_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub background: [f64; 3],
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            min_primitives: 1,
            max_primitives: 3,
            center_radius: 0.4,
            size_range: (0.12, 0.3),
            sigma_range: (8.0, 24.0),
            background: WHITE,
        }
    }
}

impl SceneSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Scene, SceneError> {
        let n = rng.gen_range(self.min_primitives..=self.max_primitives);
        let mut prims: Vec<Primitive> = Vec::with_capacity(n);
        let mut tries = 0;
        while prims.len() < n {
            tries += 1;
            if tries > MAX_PLACEMENT_TRIES {
                return Err(SceneError::PlacementFailed(n));
            }
            let p = self.primitive(rng);
            if prims.iter().all(|q| q.shape.disjoint(&p.shape)) {
                prims.push(p);
            }
        }
        Scene::new(prims, self.background)
    }

    fn primitive(&self, rng: &mut impl Rng) -> Primitive {
        let c = loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() <= 1.0 {
                break v * self.center_radius;
            }
        };
        let (lo, hi) = self.size_range;
        let shape = if rng.gen_bool(0.5) {
            Shape::Sphere {
                center: c.into(),
                radius: rng.gen_range(lo..=hi),
            }
        } else {
            let half = Vec3::new(
                rng.gen_range(lo..=hi),
                rng.gen_range(lo..=hi),
                rng.gen_range(lo..=hi),
            );
            Shape::Box {
                min: (c - half).into(),
                max: (c + half).into(),
            }
        };
        let (s0, s1) = self.sigma_range;
        Primitive {
            shape,
            sigma: if s0 < s1 { rng.gen_range(s0..s1) } else { s0 },
            albedo: [rng.gen(), rng.gen(), rng.gen()],
        }
    }
}

/// Camera on a sphere of `radius` around the origin, looking at it with
/// world up `(0, 1, 0)`.
pub fn orbit_camera(
    azimuth: f64,
    elevation: f64,
    radius: f64,
    intrinsics: Intrinsics,
) -> Result<Camera, GeometryError> {
    let eye = Vec3::new(
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
        radius * elevation.cos() * azimuth.cos(),
    );
    let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::y())?;
    Ok(Camera { intrinsics, pose })
}

/// Random orbit camera: uniform azimuth, elevation in ±60°.
pub fn random_camera(
    rng: &mut impl Rng,
    radius: f64,
    intrinsics: Intrinsics,
) -> Result<Camera, GeometryError> {
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let elevation = rng.gen_range(-60f64..=60.0).to_radians();
    orbit_camera(azimuth, elevation, radius, intrinsics)
}

/// Rays through every pixel, row-major from the top-left.
pub fn camera_rays(camera: &Camera, bounds: (f64, f64)) -> Result<Vec<Ray>, GeometryError> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x as f64, y as f64)))
        .map(|p| camera.ray(p, bounds))
        .collect()
}

/// Exact image of `scene` seen by `camera`.
pub fn oracle_image(
    scene: &Scene,
    camera: &Camera,
    bounds: (f64, f64),
) -> Result<Image, SceneError> {
    let rays = camera_rays(camera, bounds)?;
    let data: Vec<f64> = rays
        .par_iter()
        .flat_map_iter(|r| oracle_render(scene, r))
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Image::new(
        camera.intrinsics.width,
        camera.intrinsics.height,
        data,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub views_per_scene: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub bounds: (f64, f64),
    pub camera_radius: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub sampler: SceneSampler,
}

impl DatasetSpec {
    pub fn new(n_scenes: usize, views_per_scene: usize, size: usize, seed: u64) -> Self {
        Self {
            n_scenes,
            views_per_scene,
            width: size,
            height: size,
            seed,
            bounds: DEFAULT_BOUNDS,
            camera_radius: 2.0,
            focal_factor: 1.0,
            sampler: SceneSampler::default(),
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, GeometryError> {
        Intrinsics::centered(
            self.focal_factor * self.width as f64,
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageFormat {
    pub encoding: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub camera: Camera,
    /// Relative to the dataset directory.
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub scene: Scene,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: ImageFormat,
    pub bounds: (f64, f64),
    pub spec: DatasetSpec,
    pub scenes: Vec<SceneRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Samples scenes and cameras, renders every view exactly and writes images
/// plus `manifest.json` under `dir`. Identical specs give identical files.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest, SceneError> {
    let data = Dataset::synthesize(spec)?;
    let mut scenes = Vec::with_capacity(data.scenes.len());
    for sd in data.scenes {
        std::fs::create_dir_all(dir.join(&sd.id)).map_err(io_err(dir))?;
        let mut views = Vec::with_capacity(sd.views.len());
        for (v, view) in sd.views.into_iter().enumerate() {
            let rel = format!("{}/view_{v:03}.rf32", sd.id);
            let path = dir.join(&rel);
            view.image.save_rf32(&path).map_err(io_err(&path))?;
            views.push(ViewRecord {
                camera: view.camera,
                image: rel,
            });
        }
        scenes.push(SceneRecord {
            id: sd.id,
            scene: sd.scene,
            views,
        });
    }
    let manifest = DatasetManifest {
        format: ImageFormat {
            encoding: "rf32".into(),
            width: spec.width,
            height: spec.height,
            channels: 3,
        },
        bounds: spec.bounds,
        spec: *spec,
        scenes,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

/// A posed image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub id: String,
    pub scene: Scene,
    pub views: Vec<View>,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bounds: (f64, f64),
    pub scenes: Vec<SceneData>,
}

impl Dataset {
    /// Loads the manifest and every image, checking declared sizes.
    pub fn load(dir: &Path) -> Result<Self, SceneError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        Self::from_manifest(&manifest, dir)
    }

    pub fn from_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<Self, SceneError> {
        let fmt = &manifest.format;
        if fmt.encoding != "rf32" || fmt.channels != 3 {
            return Err(SceneError::InvalidDataset(format!(
                "unsupported image format {fmt:?}"
            )));
        }
        let mut scenes = Vec::with_capacity(manifest.scenes.len());
        for rec in &manifest.scenes {
            rec.scene.validate()?;
            let mut views = Vec::with_capacity(rec.views.len());
            for v in &rec.views {
                let path = dir.join(&v.image);
                let image = Image::load_rf32(&path).map_err(|e| match e {
                    ImageError::Io(source) => SceneError::Io { path, source },
                    other => other.into(),
                })?;
                let intr = &v.camera.intrinsics;
                if (image.width(), image.height()) != (fmt.width, fmt.height)
                    || (intr.width, intr.height) != (fmt.width, fmt.height)
                {
                    return Err(SceneError::InvalidDataset(format!(
                        "{} does not match the declared {}x{}",
                        v.image, fmt.width, fmt.height
                    )));
                }
                views.push(View {
                    camera: v.camera,
                    image,
                });
            }
            scenes.push(SceneData {
                id: rec.id.clone(),
                scene: rec.scene.clone(),
                views,
            });
        }
        if scenes.is_empty() {
            return Err(SceneError::InvalidDataset("no scenes".into()));
        }
        Ok(Self {
            bounds: manifest.bounds,
            scenes,
        })
    }

    /// Keeps the scenes at the given indices, in order.
    /// Renders `spec` in memory. Pixels are rounded through `f32`, so the
    /// result equals what [`generate_dataset`] writes and [`Dataset::load`]
    /// reads back.
    pub fn synthesize(spec: &DatasetSpec) -> Result<Self, SceneError> {
        if spec.n_scenes == 0 || spec.views_per_scene == 0 {
            return Err(SceneError::InvalidDataset(
                "need at least one scene and view".into(),
            ));
        }
        let intrinsics = spec.intrinsics()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut scenes = Vec::with_capacity(spec.n_scenes);
        for s in 0..spec.n_scenes {
            let scene = spec.sampler.sample(&mut rng)?;
            let mut views = Vec::with_capacity(spec.views_per_scene);
            for _ in 0..spec.views_per_scene {
                let camera = random_camera(&mut rng, spec.camera_radius, intrinsics)?;
                let exact = oracle_image(&scene, &camera, spec.bounds)?;
                let rounded = exact.data().iter().map(|&v| v as f32 as f64).collect();
                let image = Image::new(spec.width, spec.height, rounded)?;
                views.push(View { camera, image });
            }
            scenes.push(SceneData {
                id: format!("scene_{s:03}"),
                scene,
                views,
            });
        }
        Ok(Self {
            bounds: spec.bounds,
            scenes,
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            bounds: self.bounds,
            scenes: indices.iter().map(|&i| self.scenes[i].clone()).collect(),
        }
    }

    pub fn scene_index(&self, id: &str) -> Option<usize> {
        self.scenes.iter().position(|s| s.id == id)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sphere(center: [f64; 3], radius: f64, sigma: f64, albedo: [f64; 3]) -> Primitive {
        Primitive {
            shape: Shape::Sphere { center, radius },
            sigma,
            albedo,
        }
    }

    fn cube(min: [f64; 3], max: [f64; 3], sigma: f64, albedo: [f64; 3]) -> Primitive {
        Primitive {
            shape: Shape::Box { min, max },
            sigma,
            albedo,
        }
    }

    fn ray(o: [f64; 3], d: [f64; 3], near: f64, far: f64) -> Ray {
        Ray::new(Vec3::from(o), Vec3::from(d).normalize(), near, far).unwrap()
    }

    /// Midpoint rule with `n` samples of the piecewise-constant field.
    fn dense_quadrature(scene: &Scene, r: &Ray, n: usize) -> [f64; 3] {
        let dt = (r.t_far - r.t_near) / n as f64;
        let mut color = [0.0; 3];
        let mut t = 1.0;
        for i in 0..n {
            let (s, c) = scene.query(&r.at(r.t_near + (i as f64 + 0.5) * dt));
            let a = 1.0 - (-s * dt).exp();
            for k in 0..3 {
                color[k] += t * a * c[k];
            }
            t *= 1.0 - a;
        }
        for k in 0..3 {
            color[k] += t * scene.background[k];
        }
        color
    }

    #[test]
    fn query_examples() {
        let scene = Scene::new(vec![sphere([0.0; 3], 1.0, 5.0, [0.2, 0.4, 0.6])], WHITE).unwrap();
        assert_eq!(
            scene.query(&Vec3::new(0.5, 0.0, 0.0)),
            (5.0, [0.2, 0.4, 0.6])
        );
        assert_eq!(scene.query(&Vec3::new(1.0, 0.0, 0.0)).0, 5.0);
        assert_eq!(scene.query(&Vec3::new(1.5, 0.0, 0.0)).0, 0.0);
    }

    #[test]
    fn validation_rejects_bad_scenes() {
        let a = sphere([0.0; 3], 0.5, 1.0, [0.5; 3]);
        let touching = sphere([1.0, 0.0, 0.0], 0.5, 1.0, [0.5; 3]);
        assert!(matches!(
            Scene::new(vec![a, touching], WHITE),
            Err(SceneError::Overlap(0, 1))
        ));
        let b = cube([0.5, -0.1, -0.1], [0.9, 0.1, 0.1], 1.0, [0.5; 3]);
        assert!(Scene::new(vec![a, b], WHITE).is_err());
        let c = cube([0.6, -0.1, -0.1], [0.9, 0.1, 0.1], 1.0, [0.5; 3]);
        assert!(Scene::new(vec![a, c], WHITE).is_ok());
        assert!(Scene::new(vec![sphere([0.0; 3], 0.5, -1.0, [0.5; 3])], WHITE).is_err());
        assert!(Scene::new(vec![sphere([0.0; 3], 0.0, 1.0, [0.5; 3])], WHITE).is_err());
        assert!(Scene::new(vec![sphere([0.0; 3], 0.5, 1.0, [1.5; 3])], WHITE).is_err());
    }

    #[test]
    fn oracle_miss_and_half_absorption() {
        let albedo = [0.8, 0.2, 0.4];
        let chord = 1.2;
        let scene = Scene::new(
            vec![sphere(
                [0.0; 3],
                0.6,
                std::f64::consts::LN_2 / chord,
                albedo,
            )],
            [0.0, 1.0, 1.0],
        )
        .unwrap();
        let miss = oracle_render(&scene, &ray([5.0, 0.0, -3.0], [0.0, 0.0, 1.0], 0.0, 6.0));
        assert_eq!(miss, [0.0, 1.0, 1.0]);
        let hit = oracle_render(&scene, &ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 0.0, 6.0));
        for c in 0..3 {
            let expected = 0.5 * albedo[c] + 0.5 * scene.background[c];
            assert!((hit[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_two_boxes_matches_dense_quadrature() {
        let scene = Scene::new(
            vec![
                cube([-0.5, -0.5, -0.9], [0.5, 0.5, -0.3], 3.0, [1.0, 0.0, 0.0]),
                cube([-0.2, -0.3, 0.1], [0.4, 0.3, 0.8], 7.0, [0.0, 0.5, 1.0]),
            ],
            WHITE,
        )
        .unwrap();
        let r = ray([0.05, 0.02, -2.0], [0.01, 0.0, 1.0], 0.5, 3.5);
        let exact = oracle_render(&scene, &r);
        let dense = dense_quadrature(&scene, &r, 100_000);
        for c in 0..3 {
            assert!((exact[c] - dense[c]).abs() < 1e-4, "{exact:?} {dense:?}");
        }
    }

    #[test]
    fn ray_bounds_clip_segments() {
        let scene = Scene::new(vec![cube([-1.0; 3], [1.0; 3], 1.0, [0.0; 3])], WHITE).unwrap();
        let r = ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 2.5, 3.5);
        let segs = scene.segments(&r);
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].0, segs[0].1), (2.5, 3.5));
        let far = ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 0.0, 1.5);
        assert_eq!(oracle_render(&scene, &far), WHITE);
    }

    #[test]
    fn bounding_box_and_ray_hits() {
        let scene = Scene::new(
            vec![
                sphere([0.5, 0.0, 0.0], 0.2, 1.0, [0.5; 3]),
                cube([-0.6, -0.1, -0.1], [-0.4, 0.3, 0.1], 1.0, [0.5; 3]),
            ],
            WHITE,
        )
        .unwrap();
        let bb = scene.bounding_box().unwrap();
        assert_eq!(bb.min, Vec3::new(-0.6, -0.2, -0.2));
        assert_eq!(bb.max, Vec3::new(0.7, 0.3, 0.2));
        assert!(bb.hit_by(&ray([0.0, 0.0, -2.0], [0.0, 0.0, 1.0], 0.0, 4.0)));
        assert!(!bb.hit_by(&ray([0.0, 1.0, -2.0], [0.0, 0.0, 1.0], 0.0, 4.0)));
        assert!(!bb.hit_by(&ray([0.0, 0.0, -2.0], [0.0, 0.0, 1.0], 0.0, 1.0)));
    }

    #[test]
    fn sampler_places_disjoint_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = SceneSampler::default().sample(&mut rng).unwrap();
            assert!((1..=3).contains(&s.primitives.len()));
            s.validate().unwrap();
        }
        let crowded = SceneSampler {
            min_primitives: 3,
            max_primitives: 3,
            center_radius: 0.0,
            ..SceneSampler::default()
        };
        assert!(matches!(
            crowded.sample(&mut rng),
            Err(SceneError::PlacementFailed(3))
        ));
    }

    #[test]
    fn orbit_cameras_look_at_the_origin() {
        let intr = Intrinsics::centered(64.0, 64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let cam = random_camera(&mut rng, 2.0, intr).unwrap();
            assert!((cam.pose.camera_center().norm() - 2.0).abs() < 1e-12);
            let p = cam.project_world(&Vec3::zeros()).unwrap();
            assert!((p.x - 32.0).abs() < 1e-9 && (p.y - 32.0).abs() < 1e-9);
            let elev = (cam.pose.camera_center().y / 2.0).asin().to_degrees();
            assert!(elev.abs() <= 60.0 + 1e-9);
            // World up points up in the image (negative y).
            let up = cam.project_world(&Vec3::new(0.0, 0.1, 0.0)).unwrap();
            assert!(up.y < 32.0);
        }
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let spec = DatasetSpec::new(2, 3, 16, 7);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_dataset(&spec, a.path()).unwrap();
        let mb = generate_dataset(&spec, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.bounds, (1.25, 2.75));
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
        assert_eq!(
            read(a.path(), "scene_001/view_002.rf32"),
            read(b.path(), "scene_001/view_002.rf32")
        );

        let ds = Dataset::load(a.path()).unwrap();
        assert_eq!(ds.scenes.len(), 2);
        assert_eq!(ds.scenes[1].views.len(), 3);
        let v = &ds.scenes[0].views[0];
        let again = oracle_image(&ds.scenes[0].scene, &v.camera, ds.bounds).unwrap();
        for (x, y) in v.image.data().iter().zip(again.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(Dataset::synthesize(&spec).unwrap(), ds);
        assert_eq!(ds.subset(&[1]).scenes[0].id, "scene_001");
        assert_eq!(ds.scene_index("scene_001"), Some(1));
    }

    #[test]
    fn loading_rejects_mismatched_images() {
        let spec = DatasetSpec::new(1, 1, 16, 3);
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&spec, dir.path()).unwrap();
        Image::filled(8, 8, [0.0; 3])
            .save_rf32(&dir.path().join("scene_000/view_000.rf32"))
            .unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(SceneError::InvalidDataset(_))
        ));
        std::fs::remove_file(dir.path().join("scene_000/view_000.rf32")).unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(SceneError::Io { .. })
        ));
    }

    fn scene_and_ray() -> impl Strategy<Value = (Scene, Ray)> {
        (any::<u64>(), -0.3f64..0.3, -0.3f64..0.3).prop_map(|(seed, dx, dy)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = SceneSampler {
                sigma_range: (0.5, 12.0),
                ..SceneSampler::default()
            }
            .sample(&mut rng)
            .unwrap();
            let intr = Intrinsics::centered(32.0, 32, 32).unwrap();
            let cam = random_camera(&mut rng, 2.0, intr).unwrap();
            let r = cam
                .ray((16.0 + 32.0 * dx, 16.0 + 32.0 * dy), DEFAULT_BOUNDS)
                .unwrap();
            (scene, r)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn oracle_matches_dense_quadrature((scene, r) in scene_and_ray()) {
            let exact = oracle_render(&scene, &r);
            let dense = dense_quadrature(&scene, &r, 100_000);
            for c in 0..3 {
                prop_assert!((exact[c] - dense[c]).abs() < 1e-4);
            }
        }

        #[test]
        fn oracle_ignores_primitive_order((scene, r) in scene_and_ray()) {
            let mut rev = scene.clone();
            rev.primitives.reverse();
            let (a, b) = (oracle_render(&scene, &r), oracle_render(&rev, &r));
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() < 1e-15);
                prop_assert!((0.0..=1.0).contains(&a[c]));
            }
        }
    }
}
