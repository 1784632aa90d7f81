//! Spherical camera poses, pinhole rays and pose sampling.
//!
//! World frame is right-handed with +Y up. A pose at polar angle θ (from +Y)
//! and azimuth φ (in the XZ plane, from +Z) sits at
//! `(r·sinθ·sinφ, r·cosθ, r·sinθ·cosφ)` and looks at the origin. Camera axes
//! follow the OpenGL convention: +x right, +y up, looking down −z.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Vec3 = [f64; 3];

/// Half-width of the cube that bounds all generated content.
pub const DEFAULT_BOX_EXTENT: f64 = 0.7;
pub const DEFAULT_RADIUS: f64 = 2.0;
pub const DEFAULT_FOV_DEG: f64 = 49.1;
/// Azimuth of the reference (conditioning) view.
pub const REFERENCE_AZIMUTH_DEG: f64 = 180.0;
/// Angular distance kept from the poles.
pub const POLE_EPSILON_DEG: f64 = 1.0;

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[inline]
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// On-disk pose record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub azimuth_deg: f64,
    pub polar_deg: f64,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct CameraPose {
    azimuth_deg: f64,
    polar_deg: f64,
    radius: f64,
    /// Row-major world-from-camera transform.
    extrinsic: [[f64; 4]; 4],
}

impl TryFrom<PoseRecord> for CameraPose {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        pose_from_spherical(r.azimuth_deg, r.polar_deg, r.radius)
    }
}

impl From<CameraPose> for PoseRecord {
    fn from(p: CameraPose) -> Self {
        PoseRecord {
            azimuth_deg: p.azimuth_deg,
            polar_deg: p.polar_deg,
            radius: p.radius,
        }
    }
}

/// Build a look-at pose from spherical coordinates (degrees, world units).
pub fn pose_from_spherical(azimuth_deg: f64, polar_deg: f64, radius: f64) -> Result<CameraPose> {
    if !(polar_deg > 0.0 && polar_deg < 180.0) {
        return Err(Error::DegenerateUp { polar_deg });
    }
    if !(radius > 0.0 && radius.is_finite()) || !azimuth_deg.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "pose needs finite azimuth and positive radius, got ({azimuth_deg}, {radius})"
        )));
    }
    let azimuth_deg = azimuth_deg.rem_euclid(360.0);
    let (theta, phi) = (polar_deg.to_radians(), azimuth_deg.to_radians());
    let position = [
        radius * theta.sin() * phi.sin(),
        radius * theta.cos(),
        radius * theta.sin() * phi.cos(),
    ];
    let forward = normalize3(scale3(position, -1.0));
    let right = normalize3(cross3(forward, [0.0, 1.0, 0.0]));
    let up = cross3(right, forward);
    let back = scale3(forward, -1.0);
    let mut extrinsic = [[0.0; 4]; 4];
    for r in 0..3 {
        extrinsic[r] = [right[r], up[r], back[r], position[r]];
    }
    extrinsic[3] = [0.0, 0.0, 0.0, 1.0];
    Ok(CameraPose {
        azimuth_deg,
        polar_deg,
        radius,
        extrinsic,
    })
}

impl CameraPose {
    pub fn azimuth_deg(&self) -> f64 {
        self.azimuth_deg
    }

    pub fn polar_deg(&self) -> f64 {
        self.polar_deg
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn extrinsic(&self) -> &[[f64; 4]; 4] {
        &self.extrinsic
    }

    pub fn position(&self) -> Vec3 {
        [self.extrinsic[0][3], self.extrinsic[1][3], self.extrinsic[2][3]]
    }

    /// Camera-to-world rotation applied to a camera-space direction.
    pub fn rotate(&self, d: Vec3) -> Vec3 {
        let m = &self.extrinsic;
        [
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
        ]
    }

    /// Flattened extrinsic, the discriminator's pose-conditioning input.
    pub fn flat_extrinsic(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            out[r * 4..r * 4 + 4].copy_from_slice(&self.extrinsic[r]);
        }
        out
    }

    pub fn record(&self) -> PoseRecord {
        (*self).into()
    }
}

/// Recover `(azimuth, polar, radius)` from a world-from-camera matrix.
pub fn spherical_from_extrinsic(m: &[[f64; 4]; 4]) -> (f64, f64, f64) {
    let t = [m[0][3], m[1][3], m[2][3]];
    let r = norm3(t);
    let polar = (t[1] / r).clamp(-1.0, 1.0).acos().to_degrees();
    let azimuth = t[0].atan2(t[2]).to_degrees().rem_euclid(360.0);
    (azimuth, polar, r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fov_deg: f64,
    /// Pixels per side.
    pub resolution: usize,
}

impl Intrinsics {
    pub fn new(fov_deg: f64, resolution: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::InvalidArgument(format!("fov {fov_deg} outside (0, 180)")));
        }
        if resolution == 0 {
            return Err(Error::InvalidArgument("resolution must be ≥ 1".into()));
        }
        Ok(Self { fov_deg, resolution })
    }

    pub fn with_resolution(&self, resolution: usize) -> Self {
        Self {
            fov_deg: self.fov_deg,
            resolution,
        }
    }

    pub fn tan_half_fov(&self) -> f64 {
        (self.fov_deg.to_radians() * 0.5).tan()
    }

    /// Unit camera-space direction through the center of pixel `(row, col)`.
    pub fn camera_direction(&self, row: usize, col: usize) -> Vec3 {
        let n = self.resolution as f64;
        let t = self.tan_half_fov();
        let x = ((col as f64 + 0.5) / n * 2.0 - 1.0) * t;
        let y = (1.0 - (row as f64 + 0.5) / n * 2.0) * t;
        normalize3([x, y, -1.0])
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fov_deg: DEFAULT_FOV_DEG,
            resolution: 64,
        }
    }
}

/// `[near, far]` bracketing the content box for a camera at `radius`.
pub fn default_bounds(radius: f64, extent: f64) -> (f64, f64) {
    let half_diag = extent * 3f64.sqrt();
    ((radius - half_diag).max(1e-3), radius + half_diag)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub resolution: usize,
    /// `resolution² × 3`, row-major pixels.
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: f64,
    pub far: f64,
}

pub fn generate_rays(pose: &CameraPose, intr: &Intrinsics) -> RayBundle {
    let n = intr.resolution;
    let origin = pose.position();
    let mut directions = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            directions.push(normalize3(pose.rotate(intr.camera_direction(row, col))));
        }
    }
    let (near, far) = default_bounds(pose.radius(), DEFAULT_BOX_EXTENT);
    RayBundle {
        resolution: n,
        origins: vec![origin; n * n],
        directions,
        near,
        far,
    }
}

/// Uniform pose on the sphere of the given radius, poles clipped by
/// [`POLE_EPSILON_DEG`].
pub fn sample_pose_uniform(seed: u64, radius: f64) -> Result<CameraPose> {
    let mut r = rng::rng_for(seed, "pose-uniform", &[]);
    let azimuth = r.random_range(0.0..360.0);
    let cos_polar: f64 = r.random_range(-1.0..1.0);
    let polar = cos_polar
        .acos()
        .to_degrees()
        .clamp(POLE_EPSILON_DEG, 180.0 - POLE_EPSILON_DEG);
    pose_from_spherical(azimuth, polar, radius)
}

pub fn relative_pose(reference: &CameraPose, d_azimuth: f64, d_polar: f64) -> Result<CameraPose> {
    pose_from_spherical(
        reference.azimuth_deg() + d_azimuth,
        reference.polar_deg() + d_polar,
        reference.radius(),
    )
}

/// Orbit at fixed polar angle and radius, starting at `start`.
pub fn turntable(start: &CameraPose, n_frames: usize) -> Result<Vec<CameraPose>> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("turntable needs at least one frame".into()));
    }
    let step = 360.0 / n_frames as f64;
    (0..n_frames)
        .map(|k| relative_pose(start, k as f64 * step, 0.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn positions_follow_the_convention() {
        let p = pose_from_spherical(180.0, 90.0, 2.0).unwrap();
        assert!(close(p.position(), [0.0, 0.0, -2.0], 1e-12));
        let p = pose_from_spherical(0.0, 90.0, 2.0).unwrap();
        assert!(close(p.position(), [0.0, 0.0, 2.0], 1e-12));
        // Hand evaluation: (2·sin60°·sin90°, 2·cos60°, 2·sin60°·cos90°).
        let p = pose_from_spherical(90.0, 60.0, 2.0).unwrap();
        assert!(close(p.position(), [1.7320508075688772, 1.0, 0.0], 1e-12));
    }

    #[test]
    fn poles_are_rejected() {
        for polar in [0.0, 180.0, -5.0, 200.0] {
            assert!(matches!(
                pose_from_spherical(0.0, polar, 2.0),
                Err(Error::DegenerateUp { .. })
            ));
        }
    }

    #[test]
    fn rotation_is_orthonormal_and_looks_at_origin() {
        let p = pose_from_spherical(33.0, 71.0, 2.5).unwrap();
        let m = p.extrinsic();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
        let fwd = p.rotate([0.0, 0.0, -1.0]);
        assert!(close(fwd, normalize3(scale3(p.position(), -1.0)), 1e-12));
    }

    #[test]
    fn center_and_edge_rays() {
        let pose = pose_from_spherical(12.0, 80.0, 2.0).unwrap();
        let intr = Intrinsics::new(49.1, 65).unwrap();
        let rays = generate_rays(&pose, &intr);
        assert_eq!(rays.directions.len(), 65 * 65);
        let center = rays.directions[32 * 65 + 32];
        assert!(close(center, normalize3(sub3([0.0; 3], pose.position())), 1e-12));
        for d in &rays.directions {
            assert!((norm3(*d) - 1.0).abs() < 1e-12);
        }
        // Edge-center pixel sits half a pixel inside the frustum boundary.
        let edge = rays.directions[32 * 65 + 64];
        let angle = dot3(edge, center).clamp(-1.0, 1.0).acos().to_degrees();
        let step = 49.1 / 65.0;
        assert!((angle - 24.55).abs() <= 0.5 * step, "edge angle {angle}");
        assert!(rays.near < rays.far);
        assert!((rays.near - (2.0 - 1.2124355652982142)).abs() < 1e-12);
    }

    #[test]
    fn generate_rays_is_pure() {
        let pose = pose_from_spherical(200.0, 45.0, 2.0).unwrap();
        let intr = Intrinsics::new(49.1, 16).unwrap();
        assert_eq!(generate_rays(&pose, &intr), generate_rays(&pose, &intr));
    }

    #[test]
    fn uniform_sampling_properties() {
        assert_eq!(sample_pose_uniform(5, 2.0).unwrap(), sample_pose_uniform(5, 2.0).unwrap());
        let mut mean = [0.0; 3];
        let n = 10_000;
        for s in 0..n {
            let p = sample_pose_uniform(s, 2.0).unwrap();
            assert!((norm3(p.position()) - 2.0).abs() < 1e-6);
            mean = add3(mean, p.position());
        }
        assert!(norm3(scale3(mean, 1.0 / n as f64)) < 0.1 * 2.0);
    }

    #[test]
    fn relative_and_turntable() {
        let r = pose_from_spherical(180.0, 90.0, 2.0).unwrap();
        assert_eq!(relative_pose(&r, 0.0, 0.0).unwrap(), r);
        assert_eq!(relative_pose(&r, 270.0, 0.0).unwrap().azimuth_deg(), 90.0);
        let q = relative_pose(&r, 90.0, -30.0).unwrap();
        assert_eq!((q.azimuth_deg(), q.polar_deg(), q.radius()), (270.0, 60.0, 2.0));
        assert!(relative_pose(&r, 0.0, 95.0).is_err());

        let frames = turntable(&r, 120).unwrap();
        assert_eq!(frames[0], r);
        for k in 1..120 {
            let step = (frames[k].azimuth_deg() - frames[k - 1].azimuth_deg()).rem_euclid(360.0);
            assert!((step - 3.0).abs() < 1e-9);
        }
        let wrap = (frames[0].azimuth_deg() - frames[119].azimuth_deg()).rem_euclid(360.0);
        assert!((wrap - 3.0).abs() < 1e-9);
    }

    #[test]
    fn pose_serializes_as_three_fields() {
        let p = pose_from_spherical(270.0, 60.0, 2.0).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"azimuth_deg":270.0,"polar_deg":60.0,"radius":2.0}"#);
        let back: CameraPose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<CameraPose>(
            r#"{"azimuth_deg":0.0,"polar_deg":0.0,"radius":2.0}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn extrinsic_round_trip(az in 0.0f64..360.0, polar in 0.5f64..179.5, r in 0.1f64..10.0) {
            let p = pose_from_spherical(az, polar, r).unwrap();
            let (a2, p2, r2) = spherical_from_extrinsic(p.extrinsic());
            let daz = (a2 - az).rem_euclid(360.0);
            prop_assert!(daz.min(360.0 - daz) < 1e-5);
            prop_assert!((p2 - polar).abs() < 1e-5);
            prop_assert!((r2 - r).abs() < 1e-5);
        }
    }
}
