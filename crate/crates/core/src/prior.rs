//! The prior sampler interface and a synthetic multi-view oracle.
//!
//! The oracle ray-casts a scene of colored primitives with Lambert shading
//! on a white background. It can inject the failure modes of a real
//! view-conditioned diffusion model (wrong pose, warped geometry, wrong
//! object) with configurable probabilities, and it provides the two
//! refinement modes (geometry-locked and geometry-free) with ground truth.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camera::{
    add3, dot3, normalize3, pose_from_spherical, scale3, sub3, CameraPose, Intrinsics, Vec3, DEFAULT_BOX_EXTENT,
    DEFAULT_RADIUS, REFERENCE_AZIMUTH_DEG,
};
use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::rng::{derive, rng_for};

pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
pub const ALBEDO_RANGE: (f64, f64) = (0.05, 0.85);
const AMBIENT: f64 = 0.35;
const LIGHT: Vec3 = [0.3939, 0.7878, 0.4737];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Cuboid { center: Vec3, half: Vec3 },
    /// Cylinder with its axis along world Y.
    Cylinder { center: Vec3, radius: f64, half_height: f64 },
}

impl Primitive {
    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let (c, h) = match *self {
            Primitive::Sphere { center, radius } => (center, [radius; 3]),
            Primitive::Cuboid { center, half } => (center, half),
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => (center, [radius, half_height, radius]),
        };
        (sub3(c, h), add3(c, h))
    }

    /// Nearest hit `(t, normal)` with `t > 0`.
    fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Primitive::Sphere { center, radius } => {
                let oc = sub3(o, center);
                let b = dot3(oc, d);
                let c = dot3(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 0.0).then(|| (t, normalize3(sub3(add3(o, scale3(d, t)), center))))
            }
            Primitive::Cuboid { center, half } => {
                let (mut t0, mut t1, mut axis, mut sign) = (f64::NEG_INFINITY, f64::INFINITY, 0, 0.0);
                for a in 0..3 {
                    let (lo, hi) = (center[a] - half[a] - o[a], center[a] + half[a] - o[a]);
                    if d[a].abs() < 1e-15 {
                        if lo > 0.0 || hi < 0.0 {
                            return None;
                        }
                        continue;
                    }
                    let (ta, tb) = (lo / d[a], hi / d[a]);
                    let (near, s) = if ta < tb { (ta, -1.0) } else { (tb, 1.0) };
                    if near > t0 {
                        t0 = near;
                        axis = a;
                        sign = s;
                    }
                    t1 = t1.min(ta.max(tb));
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some((t0, n))
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let oc = sub3(o, center);
                let mut best: Option<(f64, Vec3)> = None;
                let a = d[0] * d[0] + d[2] * d[2];
                if a > 1e-15 {
                    let b = oc[0] * d[0] + oc[2] * d[2];
                    let c = oc[0] * oc[0] + oc[2] * oc[2] - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let y = oc[1] + t * d[1];
                        if t > 0.0 && y.abs() <= half_height {
                            let p = add3(oc, scale3(d, t));
                            best = Some((t, normalize3([p[0], 0.0, p[2]])));
                        }
                    }
                }
                if d[1].abs() > 1e-15 {
                    for s in [-1.0, 1.0] {
                        let t = (s * half_height - oc[1]) / d[1];
                        let p = add3(oc, scale3(d, t));
                        if t > 0.0 && p[0] * p[0] + p[2] * p[2] <= radius * radius && best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, [0.0, s, 0.0]));
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub primitive: Primitive,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleScene {
    pub seed: u64,
    pub shapes: Vec<Shape>,
}

/// Deterministic scene of 2–6 primitives inside the default box.
pub fn oracle_scene(condition_seed: u64) -> OracleScene {
    let mut r = rng_for(condition_seed, "scene", &[]);
    let n = r.random_range(2..=6);
    let margin = DEFAULT_BOX_EXTENT - 1e-9;
    let shapes = (0..n)
        .map(|_| {
            let kind = r.random_range(0..3);
            let (size, hh) = (r.random_range(0.15..0.35), r.random_range(0.15..0.35));
            let half = match kind {
                0 => [size; 3],
                1 => [size, hh, r.random_range(0.15..0.35)],
                _ => [size, hh, size],
            };
            let center = [0, 1, 2].map(|a| {
                let lim = (margin - half[a]) * 0.75;
                r.random_range(-lim..lim)
            });
            let primitive = match kind {
                0 => Primitive::Sphere { center, radius: size },
                1 => Primitive::Cuboid { center, half },
                _ => Primitive::Cylinder {
                    center,
                    radius: size,
                    half_height: hh,
                },
            };
            let albedo = [0; 3].map(|_| r.random_range(ALBEDO_RANGE.0..ALBEDO_RANGE.1));
            Shape { primitive, albedo }
        })
        .collect();
    OracleScene {
        seed: condition_seed,
        shapes,
    }
}

impl OracleScene {
    /// Ray-cast render: Lambert shading under a fixed directional light,
    /// white background.
    pub fn render(&self, pose: &CameraPose, intr: &Intrinsics) -> FeatureMap {
        let n = intr.resolution;
        let o = pose.position();
        let mut img = FeatureMap::solid(n, n, BACKGROUND);
        for row in 0..n {
            for col in 0..n {
                let d = pose.rotate(intr.camera_direction(row, col));
                let hit = self
                    .shapes
                    .iter()
                    .filter_map(|s| s.primitive.intersect(o, d).map(|h| (h, s.albedo)))
                    .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0));
                if let Some(((_, normal), albedo)) = hit {
                    let shade = AMBIENT + (1.0 - AMBIENT) * dot3(normal, LIGHT).max(0.0);
                    img.set_pixel(row, col, albedo.map(|a| a * shade));
                }
            }
        }
        img
    }

    /// Same geometry, albedos shifted by up to `amplitude` per channel.
    pub fn jitter_albedo(&self, amplitude: f64, seed: u64) -> OracleScene {
        let mut r = rng_for(seed, "albedo-jitter", &[]);
        let mut out = self.clone();
        for s in &mut out.shapes {
            for a in &mut s.albedo {
                let delta = if amplitude > 0.0 { r.random_range(-amplitude..=amplitude) } else { 0.0 };
                *a = (*a + delta).clamp(ALBEDO_RANGE.0, ALBEDO_RANGE.1);
            }
        }
        out
    }
}

/// The conditioning input: which object, seen from where.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSpec {
    pub condition_seed: u64,
    pub reference_pose: CameraPose,
    pub reference_image: FeatureMap,
}

impl ConditionSpec {
    /// Oracle condition: the reference is a clean render at azimuth 180°.
    pub fn oracle(condition_seed: u64, polar_deg: f64, resolution: usize) -> Result<Self> {
        let reference_pose = pose_from_spherical(REFERENCE_AZIMUTH_DEG, polar_deg, DEFAULT_RADIUS)?;
        let intr = Intrinsics::new(crate::camera::DEFAULT_FOV_DEG, resolution)?;
        let reference_image = oracle_scene(condition_seed).render(&reference_pose, &intr);
        Ok(Self {
            condition_seed,
            reference_pose,
            reference_image,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub pose_error: f64,
    pub geometry_warp: f64,
    pub semantic_swap: f64,
    /// Smallest and largest azimuth error of a pose corruption, degrees.
    pub pose_error_deg: (f64, f64),
    /// Peak displacement of a warp as a fraction of the side.
    pub warp_amplitude: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            pose_error: 0.0,
            geometry_warp: 0.0,
            semantic_swap: 0.0,
            pose_error_deg: (30.0, 180.0),
            warp_amplitude: 0.15,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for p in [self.pose_error, self.geometry_warp, self.semantic_swap] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("corruption probability {p} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.pose_error_deg;
        if !(lo >= 30.0 && hi >= lo && hi <= 180.0) {
            return Err(Error::Config("pose_error_deg must satisfy 30 ≤ lo ≤ hi ≤ 180".into()));
        }
        if !(self.warp_amplitude >= 0.0) {
            return Err(Error::Config("warp_amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    PoseError,
    GeometryWarp,
    SemanticSwap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Appearance changes and pose drift (high-noise, unconditioned).
    GeometryFree,
    /// Appearance changes only; the silhouette is preserved.
    GeometryLocked,
}

/// A source of multi-view images for one condition.
///
/// The oracle below is the reference implementation; a real diffusion
/// backend plugs in by implementing this trait.
pub trait PriorSampler: Send + Sync {
    fn condition(&self) -> &ConditionSpec;

    fn intrinsics(&self) -> &Intrinsics;

    /// `n_parallel` independent images at `pose`, with the corruption that
    /// was applied to each (if any).
    fn sample(&self, pose: &CameraPose, n_parallel: usize, seed: u64) -> Result<Vec<(FeatureMap, Option<Corruption>)>>;

    /// Re-synthesize an image at `strength ∈ [0, 1]`.
    fn refine(&self, image: &FeatureMap, pose: &CameraPose, mode: RefineMode, strength: f64, seed: u64) -> Result<FeatureMap>;
}

#[derive(Clone, Debug)]
pub struct OracleSampler {
    pub scene: OracleScene,
    pub condition: ConditionSpec,
    pub intr: Intrinsics,
    pub corruption: CorruptionConfig,
}

impl OracleSampler {
    pub fn new(condition: ConditionSpec, corruption: CorruptionConfig) -> Result<Self> {
        corruption.validate()?;
        let intr = Intrinsics::new(crate::camera::DEFAULT_FOV_DEG, condition.reference_image.width)?;
        Ok(Self {
            scene: oracle_scene(condition.condition_seed),
            condition,
            intr,
            corruption,
        })
    }

    pub fn clean(&self, pose: &CameraPose) -> FeatureMap {
        self.scene.render(pose, &self.intr)
    }

    /// One image with a specific corruption forced.
    pub fn corrupted(&self, pose: &CameraPose, kind: Corruption, seed: u64) -> Result<FeatureMap> {
        let mut r = rng_for(seed, "corrupt", &[]);
        Ok(match kind {
            Corruption::PoseError => {
                let (lo, hi) = self.corruption.pose_error_deg;
                let mag = if hi > lo { r.random_range(lo..=hi) } else { lo };
                let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
                let wrong = pose_from_spherical(pose.azimuth_deg() + sign * mag, pose.polar_deg(), pose.radius())?;
                self.scene.render(&wrong, &self.intr)
            }
            Corruption::GeometryWarp => {
                let amp = self.corruption.warp_amplitude * self.intr.resolution as f64;
                warp(&self.clean(pose), amp, r.random(), r.random(), r.random_range(1.0..2.0))
            }
            Corruption::SemanticSwap => {
                // A different object seen from the same pose.
                let other = oracle_scene(derive(self.condition.condition_seed, &[r.random::<u64>() | 1]));
                other.render(pose, &self.intr)
            }
        })
    }
}

/// Smooth sinusoidal displacement of an image, bilinear resampling with a
/// background fill. `freq` is in cycles per image side.
pub fn warp(img: &FeatureMap, amplitude: f64, phase_x: f64, phase_y: f64, freq: f64) -> FeatureMap {
    let (h, w) = (img.height, img.width);
    let mut out = FeatureMap::solid(h, w, BACKGROUND);
    let tau = std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            let sx = x as f64 + amplitude * (tau * (freq * fy + phase_x)).sin();
            let sy = y as f64 + amplitude * (tau * (freq * fx + phase_y)).sin();
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let v = (1.0 - ay) * ((1.0 - ax) * img.at(c, y0, x0) + ax * img.at(c, y0, x1))
                    + ay * ((1.0 - ax) * img.at(c, y1, x0) + ax * img.at(c, y1, x1));
                let i = out.idx(c, y, x);
                out.data[i] = v;
            }
        }
    }
    out
}

impl PriorSampler for OracleSampler {
    fn condition(&self) -> &ConditionSpec {
        &self.condition
    }

    fn intrinsics(&self) -> &Intrinsics {
        &self.intr
    }

    fn sample(&self, pose: &CameraPose, n_parallel: usize, seed: u64) -> Result<Vec<(FeatureMap, Option<Corruption>)>> {
        if n_parallel == 0 {
            return Err(Error::InvalidArgument("n_parallel must be ≥ 1".into()));
        }
        let clean = self.clean(pose);
        let c = &self.corruption;
        (0..n_parallel as u64)
            .map(|i| {
                let mut r = rng_for(seed, "sample", &[i]);
                let draws = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
                let kind = [
                    (draws[0] < c.pose_error).then_some(Corruption::PoseError),
                    (draws[1] < c.geometry_warp).then_some(Corruption::GeometryWarp),
                    (draws[2] < c.semantic_swap).then_some(Corruption::SemanticSwap),
                ]
                .into_iter()
                .flatten()
                .next();
                match kind {
                    Some(k) => Ok((self.corrupted(pose, k, derive(seed, &[i]))?, Some(k))),
                    None => Ok((clean.clone(), None)),
                }
            })
            .collect()
    }

    fn refine(&self, image: &FeatureMap, pose: &CameraPose, mode: RefineMode, strength: f64, seed: u64) -> Result<FeatureMap> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::InvalidArgument(format!("refinement strength {strength} outside [0, 1]")));
        }
        if strength == 0.0 {
            return Ok(image.clone());
        }
        let scene = self.scene.jitter_albedo(0.15 * strength, seed);
        let pose = match mode {
            RefineMode::GeometryLocked => *pose,
            RefineMode::GeometryFree => {
                let amp = (strength - 0.5).max(0.0) * 20.0;
                let mut r = rng_for(seed, "refine-pose", &[]);
                let (da, dp) = if amp > 0.0 {
                    (r.random_range(-amp..=amp), r.random_range(-amp..=amp))
                } else {
                    (0.0, 0.0)
                };
                let polar = (pose.polar_deg() + dp).clamp(1.0, 179.0);
                pose_from_spherical(pose.azimuth_deg() + da, polar, pose.radius())?
            }
        };
        Ok(scene.render(&pose, &self.intr))
    }
}
