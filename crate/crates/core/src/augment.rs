//! Adaptive discriminator augmentation.
//!
//! Each op is drawn independently per image with probability `p`. All ops
//! are affine in the pixel values, so the generator receives gradients
//! through augmented fakes via [`augment_backward`].

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaState {
    pub p: f64,
    pub target_rt: f64,
    pub adjustment_step: f64,
}

impl Default for AdaState {
    fn default() -> Self {
        Self {
            p: 0.0,
            target_rt: 0.6,
            adjustment_step: 1.0 / 500.0,
        }
    }
}

/// `rt = fraction of positive real scores`; `p` moves one step toward
/// keeping `rt` at the target. A disabled state pins `p` to 0.
pub fn ada_update(state: &AdaState, real_scores: &[f64], enabled: bool) -> Result<AdaState> {
    if real_scores.is_empty() {
        return Err(Error::Contract("ADA update needs at least one score".into()));
    }
    let mut next = state.clone();
    if !enabled {
        next.p = 0.0;
        return Ok(next);
    }
    let rt = real_scores.iter().filter(|s| **s > 0.0).count() as f64 / real_scores.len() as f64;
    let dir = if rt > state.target_rt {
        1.0
    } else if rt < state.target_rt {
        -1.0
    } else {
        0.0
    };
    next.p = (state.p + dir * state.adjustment_step).clamp(0.0, 1.0);
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub translate: bool,
    pub brightness: bool,
    pub contrast: bool,
    /// Largest shift as a fraction of the side.
    pub max_translate: f64,
    pub brightness_std: f64,
    pub contrast_log2_std: f64,
    /// Value written into pixels uncovered by a shift.
    pub fill: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            translate: true,
            brightness: true,
            contrast: true,
            max_translate: 0.125,
            brightness_std: 0.2,
            contrast_log2_std: 0.5,
            fill: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn flip_only() -> Self {
        Self {
            translate: false,
            brightness: false,
            contrast: false,
            ..Self::default()
        }
    }
}

/// The ops drawn for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub shift: Option<(isize, isize)>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
}

impl AugmentPlan {
    pub fn is_identity(&self) -> bool {
        *self == AugmentPlan::default()
    }
}

fn draw_plan(cfg: &AugmentConfig, p: f64, seed: u64, index: u64, side: usize) -> AugmentPlan {
    let mut r = rng_for(seed, "augment", &[index]);
    let mut plan = AugmentPlan::default();
    // Every decision consumes the same draws whether or not it fires, so
    // plans for different `p` share their random parameters.
    let (u_flip, u_shift, u_b, u_c) = (r.random::<f64>(), r.random::<f64>(), r.random::<f64>(), r.random::<f64>());
    let max = (cfg.max_translate * side as f64).floor() as i64;
    let (dy, dx) = (r.random_range(-max..=max) as isize, r.random_range(-max..=max) as isize);
    let nb: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut r);
    let nc: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut r);
    if cfg.flip && u_flip < p {
        plan.flip = true;
    }
    if cfg.translate && u_shift < p && (dx, dy) != (0, 0) {
        plan.shift = Some((dy, dx));
    }
    if cfg.brightness && u_b < p {
        plan.brightness = Some(nb * cfg.brightness_std);
    }
    if cfg.contrast && u_c < p {
        plan.contrast = Some((nc * cfg.contrast_log2_std).exp2());
    }
    plan
}

fn shift(img: &FeatureMap, dy: isize, dx: isize, fill: f64) -> FeatureMap {
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = FeatureMap::filled(img.channels, img.height, img.width, fill);
    for c in 0..img.channels {
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if sx >= 0 && sx < w {
                    let v = img.at(c, sy as usize, sx as usize);
                    let i = out.idx(c, y as usize, x as usize);
                    out.data[i] = v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`shift`] with respect to the image. Source pixels shifted off the canvas receive zero gradient.
fn shift_backward(g: &FeatureMap, dy: isize, dx: isize) -> FeatureMap {
    shift(g, -dy, -dx, 0.0)
}

pub fn apply_plan(img: &FeatureMap, plan: &AugmentPlan, fill: f64) -> FeatureMap {
    let mut x = if plan.flip { img.flip_horizontal() } else { img.clone() };
    if let Some((dy, dx)) = plan.shift {
        x = shift(&x, dy, dx, fill);
    }
    if let Some(b) = plan.brightness {
        x.data.iter_mut().for_each(|v| *v += b);
    }
    if let Some(c) = plan.contrast {
        let m = x.mean();
        x.data.iter_mut().for_each(|v| *v = (*v - m) * c + m);
    }
    x
}

/// `∂L/∂input` from `∂L/∂output` of [`apply_plan`].
pub fn augment_backward(g: &FeatureMap, plan: &AugmentPlan) -> FeatureMap {
    let mut g = g.clone();
    if let Some(c) = plan.contrast {
        let gm = g.mean();
        g.data.iter_mut().for_each(|v| *v = c * *v + (1.0 - c) * gm);
    }
    if let Some((dy, dx)) = plan.shift {
        g = shift_backward(&g, dy, dx);
    }
    if plan.flip {
        g = g.flip_horizontal();
    }
    g
}

/// Augment a batch; image `i` uses plan `hash(seed, i)`.
pub fn augment(
    images: &[FeatureMap],
    p: f64,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Vec<FeatureMap>, Vec<AugmentPlan>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("augmentation probability {p} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(images.len());
    let mut plans = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let plan = draw_plan(cfg, p, seed, i as u64, img.width.min(img.height));
        out.push(if plan.is_identity() { img.clone() } else { apply_plan(img, &plan, cfg.fill) });
        plans.push(plan);
    }
    Ok((out, plans))
}
