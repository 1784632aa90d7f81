//! Acceptance checks, one per criterion. Every check prints one `PASS` or
//! `FAIL` line and the process exits non-zero if any fails.
//!
//! Criteria 5 and 6 read a finished reference run from
//! `$TRIDISTILL_REFERENCE_ROOT` (default: `runs/reference` under the
//! workspace root). Missing steps of that run are computed first, which
//! takes hours from a cold start; `tridistill reference --root <dir>`
//! produces the same directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use statrs::distribution::{ChiSquared, ContinuousCDF};

use tridistill_core::cache::{build_cache, CacheRecipe, Refinement, SampleCache, MANIFEST_FILE};
use tridistill_core::camera::{
    add3, pose_from_spherical, sample_pose_uniform, scale3, turntable, CameraPose, Intrinsics, Vec3, DEFAULT_FOV_DEG,
    REFERENCE_AZIMUTH_DEG,
};
use tridistill_core::discriminator::{Critic, Discriminator, DiscriminatorConfig, LinearCritic};
use tridistill_core::eval::{invert, InvertConfig};
use tridistill_core::field::{sample_features, DecoderConfig, FieldDecoder, FieldSample, Triplane};
use tridistill_core::generator::{Generator, GeneratorConfig, GROUP_UPSAMPLER3D};
use tridistill_core::image::{write_png, FeatureMap};
use tridistill_core::losses::{consistency_loss, d_loss, f_logistic, g_loss, r1_penalty, LossConvention};
use tridistill_core::perceptual::RandomPyramid;
use tridistill_core::pipeline::{
    render_2d, render_2d_traced, render_2d_backward, render_3d, render_3d_backward, render_3d_window_traced, GradSinks,
};
use tridistill_core::prior::{ConditionSpec, CorruptionConfig, OracleSampler};
use tridistill_core::prune::{calibrate, pruning_benchmark, PruneThresholds, RandomProjectionEmbedder};
use tridistill_core::reference::{reference_checkpoint, run_reference, ReferencePlan, ReferenceSummary, RUN_DIR};
use tridistill_core::render::{composite, render_backward, render_window, RadianceField, RenderConfig, RenderGrad, TriplaneField, Window};
use tridistill_core::rng::rng_for;
use tridistill_core::trainer::{load_checkpoint, read_metrics, train_stage1, train_stage2, MetricsRecord, RunDir, TrainConfig};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure!(elapsed.as_secs_f64() < limit_s, "{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64());
    Ok(())
}

/// `|fd − an| ≤ tol·max(|fd|, |an|, floor)`; the floor keeps vanishing
/// gradients from turning rounding noise into a relative error.
fn grad_ok(fd: f64, an: f64, floor: f64) -> bool {
    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(floor)
}

fn central<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn pattern(n: usize, a: f64, b: f64) -> Vec<f64> {
    (0..n).map(|i| a * ((i as f64) * b + 0.3).sin()).collect()
}

// ---------------------------------------------------------------------------
// 1. Renderer analytic oracle

struct Homogeneous {
    sigma: f64,
    rgb: [f64; 3],
}

impl RadianceField for Homogeneous {
    type Scratch = ();
    fn scratch(&self) {}
    fn sample(&self, _: Vec3, _: &mut ()) -> FieldSample {
        FieldSample { rgb: self.rgb, sigma: self.sigma }
    }
    fn extent(&self) -> f64 {
        0.7
    }
}

/// Opaque everywhere, with a color that varies along the ray.
struct OpaqueGradient;

impl OpaqueGradient {
    fn color(p: Vec3) -> [f64; 3] {
        [0.5 + 0.3 * p[0], 0.5 + 0.3 * p[1], 0.5 + 0.3 * p[2]]
    }
}

impl RadianceField for OpaqueGradient {
    type Scratch = ();
    fn scratch(&self) {}
    fn sample(&self, p: Vec3, _: &mut ()) -> FieldSample {
        FieldSample { rgb: Self::color(p), sigma: 1e12 }
    }
    fn extent(&self) -> f64 {
        0.7
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let pose = pose_from_spherical(30.0, 70.0, 2.0).map_err(|e| e.to_string())?;
    let res = 17;
    let intr = Intrinsics::new(DEFAULT_FOV_DEG, res).map_err(|e| e.to_string())?;
    let marched = RenderConfig {
        n_coarse: 256,
        n_fine: 0,
        background: [0.0; 3],
        ..RenderConfig::default()
    };
    let mut worst: f64 = 0.0;
    for sigma in [0.05, 0.3, 0.5, 1.0, 2.0, 5.0] {
        let field = Homogeneous { sigma, rgb: [1.0, 0.5, 0.25] };
        let (out, trace) = render_window(&field, &pose, &intr, &marched, 3, Window::full(res)).map_err(|e| e.to_string())?;
        let expect = 1.0 - (-sigma * (trace.far - trace.near)).exp();
        let mut rays = 0;
        for pix in 0..res * res {
            if trace.ts[pix].is_empty() {
                continue;
            }
            ensure!(trace.ts[pix].len() == 256, "ray {pix} has {} samples", trace.ts[pix].len());
            rays += 1;
            let err = (out.alpha[pix] - expect).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-3, "sigma {sigma}: alpha {} vs {expect}", out.alpha[pix]);
            let r = out.rgb.at(0, pix / res, pix % res);
            ensure!((r - out.alpha[pix]).abs() < 1e-12, "unit radiance over black must equal alpha");
        }
        ensure!(rays > 0, "no ray crossed the medium");
        // The compositing rule alone, on 256 equal segments of a path of length L.
        let (l, k) = (1.3, 256);
        let d = l / k as f64;
        let ts: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) * d).collect();
        let c = composite(&vec![[1.0; 3]; k], &vec![sigma; k], &vec![d; k], &ts, [0.0; 3]).map_err(|e| e.to_string())?;
        let err = (c.alpha - (1.0 - (-sigma * l).exp())).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-3, "composite sigma {sigma}: alpha {} ", c.alpha);
    }

    let bg = [0.9, 0.8, 0.7];
    let default_cfg = RenderConfig { background: bg, ..RenderConfig::default() };
    let empty = Homogeneous { sigma: 0.0, rgb: [0.1, 0.2, 0.3] };
    let (out, _) = render_window(&empty, &pose, &intr, &default_cfg, 5, Window::full(res)).map_err(|e| e.to_string())?;
    for y in 0..res {
        for x in 0..res {
            ensure!(out.rgb.pixel(y, x) == bg, "empty field pixel ({y}, {x}) is {:?}", out.rgb.pixel(y, x));
        }
    }
    ensure!(out.alpha.iter().all(|a| *a == 0.0), "empty field has non-zero opacity");

    let (out, trace) = render_window(&OpaqueGradient, &pose, &intr, &default_cfg, 6, Window::full(res)).map_err(|e| e.to_string())?;
    let origin = pose.position();
    let mut opaque_rays = 0;
    for pix in 0..res * res {
        let Some(&t0) = trace.ts[pix].first() else { continue };
        opaque_rays += 1;
        let dir = pose.rotate(intr.camera_direction(pix / res, pix % res));
        let expect = OpaqueGradient::color(add3(origin, scale3(dir, t0)));
        let got = out.rgb.pixel(pix / res, pix % res);
        ensure!((0..3).all(|k| (got[k] - expect[k]).abs() < 1e-12), "opaque ray {pix}: {got:?} vs first sample {expect:?}");
        ensure!(out.alpha[pix] == 1.0, "opaque ray {pix} has alpha {}", out.alpha[pix]);
    }
    ensure!(opaque_rays > 0, "no ray reached the opaque field");
    within(start.elapsed(), 10.0, "renderer oracle")?;
    Ok(format!("worst homogeneous alpha error {worst:.1e} at 256 samples/ray"))
}

// ---------------------------------------------------------------------------
// 2. Gradient suite

fn small_generator() -> (Generator, RenderConfig) {
    let cfg = GeneratorConfig {
        z_dim: 8,
        w_dim: 8,
        mapping_layers: 2,
        base_resolution: 8,
        triplane_channels: 4,
        synthesis_channels: 8,
        upsampler2d_channels: 4,
        upsampler2d_factor: 2,
        upsampler3d_channels: 4,
        decoder: DecoderConfig { features: 4, hidden: vec![8] },
        ..GeneratorConfig::default()
    };
    let mut g = Generator::new(cfg, 21).unwrap();
    // Away from initialization so no block sits at an identity or a zero.
    let shift = pattern(g.params.len(), 0.2, 0.7);
    for (v, p) in g.params.values.iter_mut().zip(shift) {
        *v += p;
    }
    let shift = pattern(g.decoder.params.len(), 0.3, 1.3);
    for (v, p) in g.decoder.params.values.iter_mut().zip(shift) {
        *v += p;
    }
    // Fine depths follow the field and are held fixed by the backward pass,
    // so finite differences use the stratified pass alone.
    let render = RenderConfig {
        n_coarse: 8,
        n_fine: 0,
        raw_resolution: 8,
        ..RenderConfig::default()
    };
    (g, render)
}

fn critic() -> Discriminator {
    let cfg = DiscriminatorConfig {
        resolution: 8,
        base_channels: 2,
        max_channels: 4,
        hidden: 4,
        pose_embedding: Some(3),
    };
    Discriminator::new(cfg, 5).unwrap()
}

fn image(seed: u64, r: usize) -> FeatureMap {
    FeatureMap::from_vec(3, r, r, pattern(3 * r * r, 0.5, 0.37 + seed as f64 * 0.11).iter().map(|v| v + 0.5).collect())
}

fn poses(n: usize) -> Vec<CameraPose> {
    (0..n).map(|i| pose_from_spherical(40.0 + 70.0 * i as f64, 65.0 + 10.0 * i as f64, 2.0).unwrap()).collect()
}

fn gradient_decoder() -> Result<usize, String> {
    let mut rng = rng_for(1, "acceptance.decoder", &[]);
    let mut dec = FieldDecoder::new(DecoderConfig { features: 6, hidden: vec![8, 8] }, &mut rng);
    let shift = pattern(dec.params.len(), 0.3, 0.9);
    for (v, p) in dec.params.values.iter_mut().zip(shift) {
        *v += p;
    }
    let feats = pattern(6, 0.8, 1.7);
    let (gr, gs) = ([0.3, -0.7, 0.5], 0.4);
    let loss = |d: &FieldDecoder, f: &[f64]| {
        let s = d.forward(f);
        (0..3).map(|k| gr[k] * s.rgb[k]).sum::<f64>() + gs * s.sigma
    };
    let mut trace = dec.new_trace();
    dec.forward_traced(&feats, &mut trace);
    let mut gp = dec.params.zeros_like();
    let gf = dec.backward(&mut trace, gr, gs, Some(&mut gp)).to_vec();
    let mut n = 0;
    for i in 0..dec.params.len() {
        let fd = central(
            |h| {
                let mut d = dec.clone();
                d.params.values[i] += h;
                loss(&d, &feats)
            },
            1e-6,
        );
        ensure!(grad_ok(fd, gp[i], 1e-6), "decoder parameter {i}: {fd} vs {}", gp[i]);
        n += 1;
    }
    for j in 0..feats.len() {
        let fd = central(
            |h| {
                let mut f = feats.clone();
                f[j] += h;
                loss(&dec, &f)
            },
            1e-6,
        );
        ensure!(grad_ok(fd, gf[j], 1e-6), "decoder feature {j}: {fd} vs {}", gf[j]);
        n += 1;
    }
    Ok(n)
}

fn gradient_triplane_sampling() -> Result<usize, String> {
    let mut tp = Triplane::zeros(6, 4, 0.7).map_err(|e| e.to_string())?;
    tp.data = pattern(tp.data.len(), 1.0, 0.53);
    let points: Vec<Vec3> = (0..12)
        .map(|i| {
            let t = i as f64;
            [0.6 * (t * 0.7).sin(), 0.6 * (t * 1.1).cos(), 0.6 * (t * 0.4 + 1.0).sin()]
        })
        .collect();
    let v = pattern(points.len() * tp.c, 1.0, 0.29);
    let loss = |tp: &Triplane| -> f64 {
        sample_features(tp, &points)
            .unwrap()
            .iter()
            .flatten()
            .zip(&v)
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut grad = vec![0.0; tp.data.len()];
    for (i, p) in points.iter().enumerate() {
        let fp = tp.footprint(*p).ok_or("sample point outside the box")?;
        tp.scatter(&fp, &v[i * tp.c..(i + 1) * tp.c], &mut grad);
    }
    let mut n = 0;
    for i in 0..tp.data.len() {
        let fd = central(
            |h| {
                let mut t = tp.clone();
                t.data[i] += h;
                loss(&t)
            },
            1e-5,
        );
        ensure!(grad_ok(fd, grad[i], 1e-6), "triplane entry {i}: {fd} vs {}", grad[i]);
        n += 1;
    }
    Ok(n)
}

fn gradient_render() -> Result<usize, String> {
    let mut rng = rng_for(4, "acceptance.render", &[]);
    let dec = FieldDecoder::new(DecoderConfig { features: 4, hidden: vec![6] }, &mut rng);
    let mut tp = Triplane::zeros(6, 4, 0.7).map_err(|e| e.to_string())?;
    tp.data = pattern(tp.data.len(), 1.0, 0.81);
    let pose = pose_from_spherical(40.0, 80.0, 2.0).unwrap();
    let res = 6;
    let intr = Intrinsics::new(DEFAULT_FOV_DEG, res).unwrap();
    let cfg = RenderConfig { n_coarse: 12, n_fine: 0, ..RenderConfig::default() };
    let wr = FeatureMap::from_vec(3, res, res, pattern(3 * res * res, 1.0, 0.61));
    let wa = pattern(res * res, 0.5, 0.43);
    let loss = |tp: &Triplane, dec: &FieldDecoder| {
        let field = TriplaneField { triplane: tp, decoder: dec };
        let (out, _) = render_window(&field, &pose, &intr, &cfg, 9, Window::full(res)).unwrap();
        out.rgb.data.iter().zip(&wr.data).map(|(a, b)| a * b).sum::<f64>() + out.alpha.iter().zip(&wa).map(|(a, b)| a * b).sum::<f64>()
    };
    let field = TriplaneField { triplane: &tp, decoder: &dec };
    let (_, trace) = render_window(&field, &pose, &intr, &cfg, 9, Window::full(res)).map_err(|e| e.to_string())?;
    let mut g_tp = vec![0.0; tp.data.len()];
    let mut g_dec = dec.params.zeros_like();
    render_backward(&tp, &dec, &trace, RenderGrad { rgb: &wr, alpha: Some(&wa), depth: None }, &mut g_tp, Some(&mut g_dec));
    let mut n = 0;
    let mut nonzero = 0;
    for i in 0..tp.data.len() {
        let fd = central(
            |h| {
                let mut t = tp.clone();
                t.data[i] += h;
                loss(&t, &dec)
            },
            1e-5,
        );
        ensure!(grad_ok(fd, g_tp[i], 1e-5), "render w.r.t. triplane entry {i}: {fd} vs {}", g_tp[i]);
        nonzero += usize::from(g_tp[i] != 0.0);
        n += 1;
    }
    ensure!(nonzero > tp.data.len() / 4, "only {nonzero} triplane entries receive gradient");
    for i in 0..dec.params.len() {
        let fd = central(
            |h| {
                let mut d = dec.clone();
                d.params.values[i] += h;
                loss(&tp, &d)
            },
            1e-5,
        );
        ensure!(grad_ok(fd, g_dec[i], 1e-5), "render w.r.t. decoder parameter {i}: {fd} vs {}", g_dec[i]);
        n += 1;
    }
    Ok(n)
}

fn gradient_critic_losses() -> Result<usize, String> {
    let d = critic();
    let ps = poses(2);
    let fakes: Vec<_> = (0..2).map(|i| (image(i, 8), ps[i as usize])).collect();
    let reals: Vec<_> = (0..2).map(|i| (image(10 + i, 8), ps[1 - i as usize])).collect();
    let h = 1e-6;
    let mut n = 0;
    for convention in [LossConvention::Softplus, LossConvention::Literal] {
        let mut grads = d.params.zeros_like();
        d_loss(&d, &fakes, &reals, 3.0, convention, Some(&mut grads)).map_err(|e| e.to_string())?;
        for i in 0..d.params.len() {
            let fd = central(
                |e| {
                    let mut p = d.clone();
                    p.params.values[i] += e;
                    d_loss(&p, &fakes, &reals, 3.0, convention, None).unwrap().total
                },
                h,
            );
            ensure!(grad_ok(fd, grads[i], 1e-7), "d_loss ({convention:?}) parameter {i}: {fd} vs {}", grads[i]);
            n += 1;
        }
    }
    // R1 w.r.t. critic parameters: ∇θ mean‖∂D/∂I‖² = (2/n)·Σ ∇θ⟨∂D/∂I, v⟩ at v = ∂D/∂I.
    let mut g_r1 = d.params.zeros_like();
    for (img, pose) in &reals {
        let gi = d.input_gradient(img, pose).ok_or("critic has no input gradient")?;
        d.input_gradient_param_grad(img, pose, &gi, 2.0 / reals.len() as f64, &mut g_r1).map_err(|e| e.to_string())?;
    }
    for i in 0..d.params.len() {
        let fd = central(
            |e| {
                let mut p = d.clone();
                p.params.values[i] += e;
                r1_penalty(&p, &reals).unwrap()
            },
            h,
        );
        ensure!(grad_ok(fd, g_r1[i], 1e-7), "r1 parameter {i}: {fd} vs {}", g_r1[i]);
        n += 1;
    }
    // The input gradient that R1 penalizes, against differences of the score.
    for (b, (img, pose)) in reals.iter().enumerate() {
        let gi = d.input_gradient(img, pose).ok_or("critic has no input gradient")?;
        for i in (0..img.data.len()).step_by(5) {
            let fd = central(
                |e| {
                    let mut x = img.clone();
                    x.data[i] += e;
                    d.score(&x, pose).unwrap()
                },
                h,
            );
            ensure!(grad_ok(fd, gi.data[i], 1e-7), "input gradient of real {b}, entry {i}: {fd} vs {}", gi.data[i]);
            n += 1;
        }
    }
    Ok(n)
}

/// `g_loss` through the image-space branch into generator parameters.
fn gradient_generator_loss() -> Result<usize, String> {
    let (g, render) = small_generator();
    let d = {
        let mut cfg = critic().config;
        cfg.resolution = 16;
        Discriminator::new(cfg, 6).map_err(|e| e.to_string())?
    };
    let ps = poses(2);
    let ws: Vec<Vec<f64>> = (0..2).map(|i| g.map_latent(&g.sample_z(30 + i)).unwrap()).collect();
    let loss = |g: &Generator| {
        let fakes: Vec<_> = (0..2).map(|i| (render_2d(g, &ws[i], &ps[i], &render, 40 + i as u64).unwrap(), ps[i])).collect();
        g_loss(&d, &fakes).unwrap().loss
    };
    let mut traces = Vec::new();
    let mut fakes = Vec::new();
    for i in 0..2 {
        let (img, t) = render_2d_traced(&g, &ws[i], &ps[i], &render, 40 + i as u64).map_err(|e| e.to_string())?;
        fakes.push((img, ps[i]));
        traces.push(t);
    }
    let gl = g_loss(&d, &fakes).map_err(|e| e.to_string())?;
    let mut g_gen = g.params.zeros_like();
    let mut g_dec = g.decoder.params.zeros_like();
    for i in 0..2 {
        render_2d_backward(
            &g,
            &ws[i],
            &traces[i],
            &gl.image_grads[i],
            GradSinks {
                generator: Some(&mut g_gen),
                decoder: Some(&mut g_dec),
            },
        );
    }
    let mut n = 0;
    let mapping = g.group_mask(&["mapping."]);
    for i in (0..g.params.len()).step_by(13) {
        if mapping[i] {
            // Latents are fixed inputs here; mapping weights do not enter.
            continue;
        }
        let fd = central(
            |e| {
                let mut p = g.clone();
                p.params.values[i] += e;
                loss(&p)
            },
            1e-6,
        );
        ensure!(grad_ok(fd, g_gen[i], 1e-7), "g_loss generator parameter {i}: {fd} vs {}", g_gen[i]);
        n += 1;
    }
    for i in 0..g.decoder.params.len() {
        let fd = central(
            |e| {
                let mut p = g.clone();
                p.decoder.params.values[i] += e;
                loss(&p)
            },
            1e-6,
        );
        ensure!(grad_ok(fd, g_dec[i], 1e-7), "g_loss decoder parameter {i}: {fd} vs {}", g_dec[i]);
        n += 1;
    }
    Ok(n)
}

/// Consistency of the volumetric branch against a fixed image-space
/// target, into the 3D upsampler and decoder parameters.
fn gradient_consistency() -> Result<usize, String> {
    let (g, render) = small_generator();
    let perceptual = RandomPyramid::default();
    let pose = pose_from_spherical(120.0, 70.0, 2.0).unwrap();
    let w = g.map_latent(&g.sample_z(7)).unwrap();
    let res = 16;
    let target = render_2d(&g, &w, &pose, &render, 2).map_err(|e| e.to_string())?;
    let tp = g.synthesize_triplane(&w).map_err(|e| e.to_string())?;
    let loss = |g: &Generator| {
        let img = render_3d(g, &w, &pose, &render, res, 2).unwrap();
        consistency_loss(&img, &target, &perceptual).unwrap().value
    };
    let (img, trace) = render_3d_window_traced(&g, &w, &tp, &pose, &render, res, Window::full(res), 2).map_err(|e| e.to_string())?;
    let c = consistency_loss(&img, &target, &perceptual).map_err(|e| e.to_string())?;
    ensure!(c.value > 0.0, "branches already agree; the check would be vacuous");
    let mut g_gen = g.params.zeros_like();
    let mut g_dec = g.decoder.params.zeros_like();
    render_3d_backward(
        &g,
        &w,
        &trace,
        &c.grad_3d,
        GradSinks {
            generator: Some(&mut g_gen),
            decoder: Some(&mut g_dec),
        },
    );
    let up3d = g.group_mask(&[GROUP_UPSAMPLER3D]);
    let mut n = 0;
    for i in (0..g.params.len()).filter(|i| up3d[*i]) {
        let fd = central(
            |e| {
                let mut p = g.clone();
                p.params.values[i] += e;
                loss(&p)
            },
            1e-6,
        );
        ensure!(grad_ok(fd, g_gen[i], 1e-7), "consistency 3D-upsampler parameter {i}: {fd} vs {}", g_gen[i]);
        n += 1;
    }
    for i in 0..g.decoder.params.len() {
        let fd = central(
            |e| {
                let mut p = g.clone();
                p.decoder.params.values[i] += e;
                loss(&p)
            },
            1e-6,
        );
        ensure!(grad_ok(fd, g_dec[i], 1e-7), "consistency decoder parameter {i}: {fd} vs {}", g_dec[i]);
        n += 1;
    }
    ensure!(n > 0, "no parameters checked");
    Ok(n)
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut parts = Vec::new();
    let suite: [(&str, fn() -> Result<usize, String>); 6] = [
        ("decoder", gradient_decoder),
        ("triplane sampling", gradient_triplane_sampling),
        ("render", gradient_render),
        ("d_loss/r1", gradient_critic_losses),
        ("g_loss", gradient_generator_loss),
        ("consistency", gradient_consistency),
    ];
    for (name, check) in suite {
        let n = check()?;
        parts.push(format!("{name} {n}"));
    }
    within(start.elapsed(), 300.0, "gradient suite")?;
    Ok(format!("checked entries: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Loss identities

fn criterion_3() -> Check {
    use std::f64::consts::LN_2;
    ensure!((f_logistic(0.0) + LN_2).abs() < 1e-15, "f(0) = {}", f_logistic(0.0));
    let ps = poses(3);
    let fakes: Vec<_> = (0..3).map(|i| (image(i, 4), ps[i as usize])).collect();
    let reals: Vec<_> = (0..2).map(|i| (image(5 + i, 4), ps[i as usize])).collect();
    let zero = LinearCritic::constant(3, 4, 4, 0.0);
    let dl = d_loss(&zero, &fakes, &reals, 3.0, LossConvention::Softplus, None).map_err(|e| e.to_string())?;
    ensure!((dl.total - 2.0 * LN_2).abs() < 1e-15, "constant-zero critic d_loss {}", dl.total);
    ensure!(dl.r1 == 0.0, "constant-zero critic r1 {}", dl.r1);
    let gl = g_loss(&zero, &fakes).map_err(|e| e.to_string())?.loss;
    ensure!((gl - LN_2).abs() < 1e-15, "constant-zero critic g_loss {gl}");
    ensure!(r1_penalty(&zero, &reals).map_err(|e| e.to_string())? == 0.0, "constant-zero critic penalty");

    let a = image(9, 4);
    let norm2: f64 = a.data.iter().map(|v| v * v).sum();
    let linear = LinearCritic { a, b: -0.4 };
    let r1 = r1_penalty(&linear, &reals).map_err(|e| e.to_string())?;
    ensure!(r1 == norm2, "linear critic R1 {r1} vs ‖a‖² {norm2}");
    let dl = d_loss(&linear, &fakes, &reals, 3.0, LossConvention::Softplus, None).map_err(|e| e.to_string())?;
    ensure!(dl.r1 == norm2, "linear critic d_loss penalty {} vs {norm2}", dl.r1);

    let mut worst: f64 = 0.0;
    for i in 0..=2000 {
        let u = -100.0 + 0.1 * i as f64;
        let sp = (-u).max(0.0) + (-(u.abs())).exp().ln_1p();
        worst = worst.max((-f_logistic(u) - sp).abs());
    }
    ensure!(worst <= 1e-9, "−f(u) and softplus(−u) differ by {worst}");
    Ok(format!("max |−f(u) − softplus(−u)| on [−100, 100] is {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. Pruning benchmark

fn criterion_4() -> Check {
    let start = Instant::now();
    let recipe = CacheRecipe::reference();
    let embedder = RandomProjectionEmbedder::default();
    let mut lines = Vec::new();
    // The reference condition at its cache resolution, then more conditions
    // at a lower resolution.
    let setups = [(recipe.condition_seed, recipe.resolution), (1, 64), (2, 64), (3, 64)];
    for (condition, res) in setups {
        let spec = ConditionSpec::oracle(condition, recipe.reference_polar_deg, res).map_err(|e| e.to_string())?;
        let sampler = OracleSampler::new(spec, CorruptionConfig::default()).map_err(|e| e.to_string())?;
        let cal = calibrate(&sampler, &embedder, 200, 99).map_err(|e| e.to_string())?;
        let report = pruning_benchmark(&sampler, &cal.thresholds, &embedder, 500, 0.3, 7).map_err(|e| e.to_string())?;
        ensure!(report.views == 500, "benchmark has {} views", report.views);
        let rate = report.corrupted_views as f64 / 500.0;
        ensure!((rate - 0.3).abs() < 0.05, "injected corruption rate {rate}");
        ensure!(
            report.recall() >= 0.9,
            "condition {condition} at {res}²: recall {:.3} (by kind {:?})",
            report.recall(),
            report.recall_by_kind
        );
        ensure!(
            report.false_discard_rate() <= 0.1,
            "condition {condition} at {res}²: false-discard {:.3}",
            report.false_discard_rate()
        );
        lines.push(format!(
            "condition {condition} at {res}²: recall {:.3}, false-discard {:.3}",
            report.recall(),
            report.false_discard_rate()
        ));
    }
    within(start.elapsed(), 120.0, "pruning benchmark")?;
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------
// 5 and 6. Reference run

fn reference_root() -> PathBuf {
    std::env::var_os("TRIDISTILL_REFERENCE_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../runs/reference"))
}

fn reference_summary() -> Result<&'static ReferenceSummary, String> {
    static SUMMARY: OnceLock<Result<ReferenceSummary, String>> = OnceLock::new();
    SUMMARY
        .get_or_init(|| {
            let root = reference_root();
            eprintln!("reference run at {}", root.display());
            run_reference(&root, &ReferencePlan::default(), &mut |m| eprintln!("  {m}")).map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn criterion_5() -> Check {
    let s = reference_summary()?;
    let gain = s.after_stage2.turntable_image_score - s.untrained.turntable_image_score;
    let ratio = s.probe_consistency_end / s.probe_consistency_start;
    let detail = format!(
        "turntable score {:.3} -> {:.3} (gain {gain:.3}); consistency {:.4} -> {:.4} (ratio {ratio:.3}); gap {:.4} -> {:.4}; diversity {:.4}",
        s.untrained.turntable_image_score,
        s.after_stage2.turntable_image_score,
        s.probe_consistency_start,
        s.probe_consistency_end,
        s.after_stage1.consistency_gap,
        s.after_stage2.consistency_gap,
        s.after_stage2.diversity
    );
    let mut failures = Vec::new();
    if !(gain >= 0.15) {
        failures.push("(a) turntable gain below 0.15");
    }
    if !(ratio <= 0.5) {
        failures.push("(b) consistency above 50% of its stage-2 start");
    }
    if !(s.after_stage2.consistency_gap < s.after_stage1.consistency_gap) {
        failures.push("(c) cross-view gap did not decrease");
    }
    if !(s.after_stage2.diversity > 0.0) {
        failures.push("(d) no diversity");
    }
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}: {detail}", failures.join(", ")))
    }
}

fn criterion_6() -> Check {
    reference_summary()?;
    let root = reference_root();
    let ckpt = reference_checkpoint(&root).ok_or_else(|| format!("no finished checkpoint under {}", root.join(RUN_DIR).display()))?;
    let (cfg, st) = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let g = &st.generator;
    let perceptual = RandomPyramid::default();
    let mut psnrs = Vec::new();
    for (k, (az, polar)) in [(150.0, 75.0), (250.0, 85.0)].into_iter().enumerate() {
        let seed = 600 + k as u64;
        let w0 = g.map_latent(&g.sample_z(seed)).map_err(|e| e.to_string())?;
        let pose = pose_from_spherical(az, polar, 2.0).map_err(|e| e.to_string())?;
        let target = render_2d(g, &w0, &pose, &cfg.render, seed).map_err(|e| e.to_string())?;
        let inv = invert(g, &cfg.render, &target, &pose, &InvertConfig { steps: 500, seed, ..InvertConfig::default() }, &perceptual)
            .map_err(|e| e.to_string())?;
        ensure!(inv.psnr > 30.0, "latent {seed}: PSNR {:.2} dB after 500 steps", inv.psnr);
        psnrs.push(format!("{:.2} dB", inv.psnr));
    }
    Ok(format!("self-reconstruction PSNR {} after 500 steps", psnrs.join(", ")))
}

/// Training-dynamics probe on the reference run: held-out critic accuracy
/// peaks early and ends below 0.75.
fn probe_critic_accuracy() -> Check {
    reference_summary()?;
    let run = RunDir { root: reference_root().join(RUN_DIR) };
    let records = read_metrics(&run.metrics_path(1)).map_err(|e| e.to_string())?;
    let acc: Vec<f64> = records.iter().filter_map(|r| r.d_accuracy).collect();
    ensure!(acc.len() >= 20, "only {} accuracy records", acc.len());
    let early = &acc[..acc.len() / 4];
    let peak = early.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail = &acc[acc.len() - 10..];
    let late = tail.iter().sum::<f64>() / tail.len() as f64;
    ensure!(peak >= 0.75 && late < 0.75, "early peak {peak:.3}, mean of the last ten records {late:.3}");
    Ok(format!("early peak {peak:.3}, mean of the last ten records {late:.3}"))
}

// ---------------------------------------------------------------------------
// 7. Determinism

fn tiny(stage: u8, iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::reference(stage);
    cfg.iterations = iterations;
    cfg.batch_size = 2;
    cfg.checkpoint_interval = 2;
    cfg.log_interval = 1;
    cfg.ada.interval = 1;
    cfg.image_resolution = 16;
    cfg.generator = small_generator().0.config;
    cfg.render = RenderConfig { n_coarse: 6, n_fine: 6, raw_resolution: 8, ..RenderConfig::default() };
    cfg.discriminator = DiscriminatorConfig {
        base_channels: 4,
        max_channels: 8,
        hidden: 8,
        pose_embedding: Some(8),
        ..DiscriminatorConfig::main(16)
    };
    cfg.patch_discriminator = DiscriminatorConfig {
        resolution: 8,
        base_channels: 4,
        max_channels: 8,
        hidden: 8,
        pose_embedding: None,
    };
    cfg.stage2.patch_size = 8;
    cfg.stage2.probe_latents = 2;
    cfg
}

fn tiny_cache(dir: &Path) -> Result<SampleCache, String> {
    let corruption = CorruptionConfig {
        pose_error: 0.1,
        geometry_warp: 0.1,
        semantic_swap: 0.1,
        ..CorruptionConfig::default()
    };
    let sampler = OracleSampler::new(ConditionSpec::oracle(2, 75.0, 16).map_err(|e| e.to_string())?, corruption).map_err(|e| e.to_string())?;
    build_cache(
        &sampler,
        &RandomProjectionEmbedder::default(),
        24,
        &PruneThresholds::for_resolution(16, 0.05),
        &Refinement::default(),
        dir,
        11,
        1,
    )
    .map_err(|e| e.to_string())
}

fn bytes(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn criterion_7() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let quiet = |_: &MetricsRecord| {};

    let cache = tiny_cache(&dir.join("cache-a"))?;
    tiny_cache(&dir.join("cache-b"))?;
    ensure!(
        bytes(&dir.join("cache-a").join(MANIFEST_FILE))? == bytes(&dir.join("cache-b").join(MANIFEST_FILE))?,
        "cache manifests differ across reruns"
    );

    let cfg1 = tiny(1, 4);
    let cfg2 = tiny(2, 4);
    let mut finals = Vec::new();
    for name in ["run-a", "run-b"] {
        let run = RunDir::create(&dir.join(name)).map_err(|e| e.to_string())?;
        let s1 = train_stage1(&cfg1, &cache, None, Some(&run), &mut quiet.clone()).map_err(|e| e.to_string())?;
        let s2 = train_stage2(&cfg2, &s1, &cache, None, Some(&run), &mut quiet.clone()).map_err(|e| e.to_string())?;
        finals.push((run, s1, s2));
    }
    for stage in [1, 2] {
        ensure!(
            bytes(&finals[0].0.metrics_path(stage))? == bytes(&finals[1].0.metrics_path(stage))?,
            "stage-{stage} metric streams differ across reruns"
        );
    }

    let g = &finals[0].2.generator;
    let w = g.map_latent(&g.sample_z(3)).map_err(|e| e.to_string())?;
    let start = pose_from_spherical(REFERENCE_AZIMUTH_DEG, 75.0, 2.0).map_err(|e| e.to_string())?;
    for (k, pose) in turntable(&start, 6).map_err(|e| e.to_string())?.iter().enumerate() {
        let mut frames = Vec::new();
        for rerun in 0..2 {
            let img = render_3d(g, &w, pose, &cfg2.render, 16, 8).map_err(|e| e.to_string())?;
            let path = dir.join(format!("frame-{k}-{rerun}.png"));
            write_png(&path, &img).map_err(|e| e.to_string())?;
            frames.push(bytes(&path)?);
        }
        ensure!(frames[0] == frames[1], "frame {k} differs across reruns");
    }

    // Resume both stages from their iteration-2 checkpoints.
    let (run_a, s1_a, s2_a) = &finals[0];
    let resumed = RunDir::create(&dir.join("resumed")).map_err(|e| e.to_string())?;
    let (_, mid1) = load_checkpoint(&run_a.checkpoint_path(1, 2)).map_err(|e| e.to_string())?;
    let r1 = train_stage1(&cfg1, &cache, Some(mid1), Some(&resumed), &mut quiet.clone()).map_err(|e| e.to_string())?;
    ensure!(r1.generator.params.values == s1_a.generator.params.values, "resumed stage-1 generator differs");
    ensure!(r1.discriminator.params.values == s1_a.discriminator.params.values, "resumed stage-1 critic differs");
    ensure!(r1.opt_generator == s1_a.opt_generator && r1.ada == s1_a.ada, "resumed stage-1 optimizer or ADA state differs");
    ensure!(bytes(&resumed.metrics_path(1))? == bytes(&run_a.metrics_path(1))?, "resumed stage-1 metric stream differs");
    let (_, mid2) = load_checkpoint(&run_a.checkpoint_path(2, 2)).map_err(|e| e.to_string())?;
    let r2 = train_stage2(&cfg2, &r1, &cache, Some(mid2), Some(&resumed), &mut quiet.clone()).map_err(|e| e.to_string())?;
    ensure!(r2.generator.params.values == s2_a.generator.params.values, "resumed stage-2 generator differs");
    ensure!(r2.generator.decoder.params.values == s2_a.generator.decoder.params.values, "resumed stage-2 decoder differs");
    ensure!(bytes(&resumed.metrics_path(2))? == bytes(&run_a.metrics_path(2))?, "resumed stage-2 metric stream differs");
    Ok("manifests, metric streams, frames and resumed runs are bit-identical".into())
}

// ---------------------------------------------------------------------------
// 8. Pose statistics

fn criterion_8() -> Check {
    const DRAWS: u64 = 10_000;
    // Four equal-area polar bands (uniform in cos θ) times twelve sectors.
    let mut counts = [0u64; 48];
    for s in 0..DRAWS {
        let p = sample_pose_uniform(s, 2.0).map_err(|e| e.to_string())?;
        let band = (((p.polar_deg().to_radians().cos() + 1.0) / 2.0 * 4.0) as usize).min(3);
        let sector = ((p.azimuth_deg() / 30.0) as usize).min(11);
        counts[band * 12 + sector] += 1;
    }
    let expected = DRAWS as f64 / 48.0;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new(47.0).map_err(|e| e.to_string())?.cdf(chi2);
    ensure!(p_value > 0.01, "chi-square {chi2:.2} on 47 degrees of freedom, p = {p_value:.4}");

    for start_az in [REFERENCE_AZIMUTH_DEG, 37.5, 359.0] {
        let start = pose_from_spherical(start_az, 75.0, 2.0).map_err(|e| e.to_string())?;
        let frames = turntable(&start, 120).map_err(|e| e.to_string())?;
        ensure!(frames.len() == 120, "turntable has {} frames", frames.len());
        ensure!(frames[0] == start, "turntable does not start at the given pose");
        for k in 0..120 {
            let (a, b) = (&frames[k], &frames[(k + 1) % 120]);
            let step = (b.azimuth_deg() - a.azimuth_deg()).rem_euclid(360.0);
            ensure!(step == 3.0, "start {start_az}: step {k} is {step}°");
            ensure!(b.polar_deg() == a.polar_deg() && b.radius() == a.radius(), "turntable left its orbit");
        }
    }
    Ok(format!("chi-square {chi2:.2} (47 dof), p = {p_value:.3}; turntable steps exactly 3°"))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, &str, fn() -> Check); 9] = [
        ("1", "renderer analytic oracle", criterion_1),
        ("2", "gradient suite", criterion_2),
        ("3", "loss identities", criterion_3),
        ("4", "pruning benchmark", criterion_4),
        ("5", "desk-scale distillation", criterion_5),
        ("6", "inversion oracle", criterion_6),
        ("7", "determinism", criterion_7),
        ("8", "pose statistics", criterion_8),
        ("probe", "held-out critic accuracy", probe_critic_accuracy),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| f == id || name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} PASS  {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} FAIL  {name} [{secs:.1}s]: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
