//! Pinhole cameras, rigid world-to-view poses and ray generation.
//!
//! Conventions: a pose maps world points into view space as
//! `x_view = R·x_world + t`; the camera looks along +z with the image
//! x-axis to the right and y-axis pointing down. Pixel `(u, v)` is the
//! continuous image-plane coordinate `(fx·x/z + cx, fy·y/z + cy)`; rays are
//! cast through that coordinate directly, with no half-pixel offset.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Points with view-space depth at or below this are not projectable.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at view-space depth {0} is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix")]
    InvalidRotation,
    #[error("invalid ray: {0}")]
    InvalidRay(String),
    #[error("pixel ({0}, {1}) lies outside the image")]
    PixelOutOfBounds(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square pixels with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            (width / 2) as f64,
            (height / 2) as f64,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidIntrinsics(msg.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return bad("principal point outside the image");
        }
        Ok(())
    }
}

/// Rigid world-to-view transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let ortho = (gram - Matrix3::identity()).amax() <= ORTHONORMAL_TOL;
        let proper = (rotation.determinant() - 1.0).abs() <= ORTHONORMAL_TOL;
        if !(ortho && proper) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with `up` roughly the world
    /// direction that appears upward in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 || !forward.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn world_to_view(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn rotate_direction(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    /// The view-to-world transform, itself expressed as a pose.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera centre in world coordinates, `−Rᵀt`.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(
        origin: Vec3,
        direction: Vec3,
        t_near: f64,
        t_far: f64,
    ) -> Result<Self, GeometryError> {
        if ((direction.norm() - 1.0).abs()) > 1e-9 {
            return Err(GeometryError::InvalidRay(
                "direction is not unit length".into(),
            ));
        }
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(GeometryError::InvalidRay(format!(
                "bounds [{t_near}, {t_far}] are not ordered"
            )));
        }
        Ok(Self {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole projection π of a view-space point to pixel coordinates.
pub fn project(intr: &Intrinsics, x_view: &Vec3) -> Result<Vector2<f64>, GeometryError> {
    if x_view.z <= MIN_DEPTH {
        return Err(GeometryError::NonPositiveDepth(x_view.z));
    }
    Ok(Vector2::new(
        intr.fx * x_view.x / x_view.z + intr.cx,
        intr.fy * x_view.y / x_view.z + intr.cy,
    ))
}

/// Ray from the camera centre through `pixel`, in world coordinates.
pub fn generate_ray(
    intr: &Intrinsics,
    pose: &Pose,
    pixel: (f64, f64),
    bounds: (f64, f64),
) -> Result<Ray, GeometryError> {
    let (u, v) = pixel;
    if !(0.0..intr.width as f64).contains(&u) || !(0.0..intr.height as f64).contains(&v) {
        return Err(GeometryError::PixelOutOfBounds(u, v));
    }
    let view_dir = Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    let direction = (pose.rotation.transpose() * view_dir).normalize();
    Ray::new(pose.camera_center(), direction, bounds.0, bounds.1)
}

/// A posed pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn ray(&self, pixel: (f64, f64), bounds: (f64, f64)) -> Result<Ray, GeometryError> {
        generate_ray(&self.intrinsics, &self.pose, pixel, bounds)
    }

    /// Full projection of a world point.
    pub fn project_world(&self, x: &Vec3) -> Result<Vector2<f64>, GeometryError> {
        project(&self.intrinsics, &self.pose.world_to_view(x))
    }
}

/// On-disk camera record: intrinsics plus row-major rotation and translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TryFrom<CameraJson> for Camera {
    type Error = GeometryError;

    fn try_from(j: CameraJson) -> Result<Self, Self::Error> {
        let intrinsics = Intrinsics::new(j.fx, j.fy, j.cx, j.cy, j.width, j.height)?;
        let rotation = Matrix3::from_row_slice(&j.rotation);
        let pose = Pose::new(rotation, Vec3::from(j.translation))?;
        Ok(Self { intrinsics, pose })
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let i = c.intrinsics;
        let r = c.pose.rotation;
        let mut rotation = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                rotation[row * 3 + col] = r[(row, col)];
            }
        }
        let t = c.pose.translation;
        Self {
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }
}
