//! Turntable metrics and latent inversion of a trained generator.

use serde::{Deserialize, Serialize};

use crate::camera::{turntable, CameraPose};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::FeatureMap;
use crate::optim::{Adam, AdamConfig};
use crate::perceptual::PerceptualDistance;
use crate::pipeline::{
    image_resolution, render_2d, render_2d_backward, render_2d_traced, render_3d, render_3d_backward,
    render_3d_window_traced, Branch, GradSinks,
};
use crate::prune::{semantic_score, Embedder};
use crate::render::{RenderConfig, Window};
use crate::rng::{derive, stream};

pub const TURNTABLE_FRAMES: usize = 120;
/// Latents averaged for the mean latent that starts an inversion.
pub const MEAN_W_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub frames: usize,
    /// Latents whose turntables enter the image score and consistency gap.
    pub turntable_latents: usize,
    pub diversity_latents: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frames: TURNTABLE_FRAMES,
            turntable_latents: 4,
            diversity_latents: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub turntable_image_score: f64,
    pub consistency_gap: f64,
    pub diversity: f64,
}

/// Mean embedder cosine similarity of `frames` to `reference`.
pub fn turntable_image_score(frames: &[FeatureMap], reference: &FeatureMap, embedder: &dyn Embedder) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    frames.iter().map(|f| semantic_score(f, reference, embedder)).sum::<f64>() / frames.len() as f64
}

/// Mean perceptual distance over all unordered pairs; zero for fewer than
/// two images.
pub fn pairwise_diversity(images: &[FeatureMap], perceptual: &dyn PerceptualDistance) -> Result<f64> {
    let n = images.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += perceptual.distance(&images[i], &images[j])?;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

fn eval_latent(gen: &Generator, seed: u64, j: usize) -> Result<Vec<f64>> {
    gen.map_latent(&gen.sample_z(derive(seed, &[stream("eval.z"), j as u64])))
}

/// Volumetric-branch turntables from `reference_pose` scored against the
/// reference image, the 2D/3D gap along the same orbits and diversity at
/// the reference pose.
pub fn evaluate(
    gen: &Generator,
    render: &RenderConfig,
    reference_image: &FeatureMap,
    reference_pose: &CameraPose,
    embedder: &dyn Embedder,
    perceptual: &dyn PerceptualDistance,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.turntable_latents == 0 || cfg.diversity_latents == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one latent".into()));
    }
    let res = image_resolution(gen, render);
    let poses = turntable(reference_pose, cfg.frames)?;
    let (mut score, mut gap) = (0.0, 0.0);
    for j in 0..cfg.turntable_latents {
        let w = eval_latent(gen, cfg.seed, j)?;
        let mut frames = Vec::with_capacity(poses.len());
        for (f, pose) in poses.iter().enumerate() {
            let seed = derive(cfg.seed, &[stream("eval.render"), j as u64, f as u64]);
            let i3d = render_3d(gen, &w, pose, render, res, seed)?;
            let i2d = render_2d(gen, &w, pose, render, seed)?;
            gap += perceptual.distance(&i2d, &i3d)?;
            frames.push(i3d);
        }
        score += turntable_image_score(&frames, reference_image, embedder);
    }
    let renders = (0..cfg.diversity_latents)
        .map(|j| {
            let w = eval_latent(gen, cfg.seed, j)?;
            render_3d(gen, &w, reference_pose, render, res, derive(cfg.seed, &[stream("eval.diversity")]))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.turntable_latents as f64;
    Ok(EvalReport {
        turntable_image_score: score / n,
        consistency_gap: gap / (n * poses.len() as f64),
        diversity: pairwise_diversity(&renders, perceptual)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertConfig {
    pub steps: usize,
    pub lr: f64,
    /// `λ` in `MSE + λ·perceptual`.
    pub perceptual_weight: f64,
    pub branch: Branch,
    /// Render seed held fixed across steps.
    pub seed: u64,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            perceptual_weight: 0.1,
            branch: Branch::Image2d,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    /// Latent of the best render seen.
    pub w: Vec<f64>,
    pub image: FeatureMap,
    pub psnr: f64,
    pub loss: f64,
    /// Step at which `w` was reached; 0 is the mean latent.
    pub best_step: usize,
}

/// Render and `∂L/∂w` of one branch under `L = MSE + λ·perceptual`.
fn loss_and_grad(
    gen: &Generator,
    w: &[f64],
    target: &FeatureMap,
    pose: &CameraPose,
    render: &RenderConfig,
    cfg: &InvertConfig,
    perceptual: &dyn PerceptualDistance,
) -> Result<(FeatureMap, f64, Vec<f64>)> {
    let sinks = || GradSinks {
        generator: None,
        decoder: None,
    };
    let head = |img: &FeatureMap| -> Result<(f64, FeatureMap)> {
        let n = img.data.len() as f64;
        let (p, mut g) = perceptual.distance_grad(img, target)?;
        for ((gv, a), b) in g.data.iter_mut().zip(&img.data).zip(&target.data) {
            *gv = cfg.perceptual_weight * *gv + 2.0 * (a - b) / n;
        }
        Ok((img.mse(target) + cfg.perceptual_weight * p, g))
    };
    match cfg.branch {
        Branch::Image2d => {
            let (img, t) = render_2d_traced(gen, w, pose, render, cfg.seed)?;
            let (loss, g) = head(&img)?;
            let gw = render_2d_backward(gen, w, &t, &g, sinks());
            Ok((img, loss, gw))
        }
        Branch::Volume3d => {
            let res = image_resolution(gen, render);
            let (tp, synth) = gen.synthesize_traced(w)?;
            let (img, t) = render_3d_window_traced(gen, w, &tp, pose, render, res, Window::full(res), cfg.seed)?;
            let (loss, g) = head(&img)?;
            let (g_base, mut gw) = render_3d_backward(gen, w, &t, &g, sinks());
            let mut scratch = gen.params.zeros_like();
            for (a, b) in gw.iter_mut().zip(gen.synthesize_backward(&synth, w, &g_base, &mut scratch)) {
                *a += b;
            }
            Ok((img, loss, gw))
        }
    }
}

/// Optimizes `w` from the mean latent so the render at `pose` matches
/// `target`; returns the best step seen.
pub fn invert(
    gen: &Generator,
    render: &RenderConfig,
    target: &FeatureMap,
    pose: &CameraPose,
    cfg: &InvertConfig,
    perceptual: &dyn PerceptualDistance,
) -> Result<Inversion> {
    let res = image_resolution(gen, render);
    if target.shape() != (3, res, res) {
        return Err(Error::Contract(format!("target is {:?}, the model renders (3, {res}, {res})", target.shape())));
    }
    if !(cfg.lr > 0.0) || !(cfg.perceptual_weight >= 0.0) {
        return Err(Error::InvalidArgument("inversion needs lr > 0 and a non-negative perceptual weight".into()));
    }
    let mut w = gen.mean_w(MEAN_W_SAMPLES, derive(cfg.seed, &[stream("invert.mean")]));
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        w.len(),
    );
    let mut best: Option<Inversion> = None;
    for step in 0..=cfg.steps {
        let (img, loss, gw) = loss_and_grad(gen, &w, target, pose, render, cfg, perceptual)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: step as u64,
                what: "inversion loss".into(),
            });
        }
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(Inversion {
                w: w.clone(),
                psnr: img.psnr(target),
                image: img,
                loss,
                best_step: step,
            });
        }
        if step < cfg.steps {
            adam.step(&mut w, &gw, None);
        }
    }
    Ok(best.expect("at least one step is evaluated"))
}
