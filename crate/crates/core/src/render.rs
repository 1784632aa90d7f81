//! Differentiable volume rendering with two-pass hierarchical sampling.
//!
//! Each pixel gets stratified coarse samples between the near/far bounds,
//! fine samples drawn from the coarse weights, and is composited over the
//! merged, sorted union. All randomness for a pixel is keyed by
//! `(seed, row · resolution + col)`, so a patch render is bit-identical to
//! the matching crop of a full render.
//!
//! The backward pass recomputes each ray's field samples instead of storing
//! them; only the sample depths are kept in the [`RenderTrace`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camera::{default_bounds, CameraPose, Intrinsics, Vec3};
use crate::error::{Error, Result};
use crate::field::{DecoderTrace, FieldDecoder, FieldSample, Triplane, EMPTY_SAMPLE};
use crate::image::FeatureMap;
use crate::rng;

/// Guard for expected depth on nearly empty pixels.
pub const DEPTH_EPS: f64 = 1e-8;
/// Probability floor added to every coarse bin before resampling.
pub const RESAMPLE_FLOOR: f64 = 1e-5;
pub const DEFAULT_PATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: [f64; 3],
    pub raw_resolution: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 48,
            n_fine: 48,
            background: [1.0, 1.0, 1.0],
            raw_resolution: 64,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::Config("n_coarse must be ≥ 2".into()));
        }
        if self.raw_resolution == 0 {
            return Err(Error::Config("raw_resolution must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: FeatureMap,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderOutput {
    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }
}

/// Pixel window `[row0, row0+height) × [col0, col0+width)` of a square image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn full(resolution: usize) -> Self {
        Self {
            row0: 0,
            col0: 0,
            height: resolution,
            width: resolution,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Sample depths of every pixel of a window, for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderTrace {
    pub window: Window,
    pub pose: CameraPose,
    pub intr: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Merged sample depths per pixel.
    pub ts: Vec<Vec<f64>>,
}

/// Anything that can be queried for radiance and density.
pub trait RadianceField {
    type Scratch;
    fn scratch(&self) -> Self::Scratch;
    fn sample(&self, point: Vec3, scratch: &mut Self::Scratch) -> FieldSample;
    /// Half-width of the region with non-zero density, used to skip rays.
    fn extent(&self) -> f64;
}

/// A generator output: triplane plus decoder.
#[derive(Clone, Copy)]
pub struct TriplaneField<'a> {
    pub triplane: &'a Triplane,
    pub decoder: &'a FieldDecoder,
}

pub struct TriplaneScratch {
    features: Vec<f64>,
    trace: DecoderTrace,
}

impl RadianceField for TriplaneField<'_> {
    type Scratch = TriplaneScratch;

    fn scratch(&self) -> TriplaneScratch {
        TriplaneScratch {
            features: vec![0.0; self.triplane.c],
            trace: self.decoder.new_trace(),
        }
    }

    fn sample(&self, point: Vec3, s: &mut TriplaneScratch) -> FieldSample {
        match self.triplane.footprint(point) {
            Some(fp) => {
                self.triplane.gather(&fp, &mut s.features);
                self.decoder.forward_traced(&s.features, &mut s.trace)
            }
            None => EMPTY_SAMPLE,
        }
    }

    fn extent(&self) -> f64 {
        self.triplane.extent
    }
}

/// Composited color, opacity and expected depth of one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
}

/// Classical emission-absorption compositing over `K` segments.
pub fn composite(
    rgbs: &[[f64; 3]],
    sigmas: &[f64],
    deltas: &[f64],
    ts: &[f64],
    background: [f64; 3],
) -> Result<Composite> {
    let k = sigmas.len();
    if rgbs.len() != k || deltas.len() != k || ts.len() != k {
        return Err(Error::Contract("composite inputs must have equal length".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Contract(format!("negative density {s}")));
    }
    if deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::Contract("segment lengths must be non-negative".into()));
    }
    Ok(composite_unchecked(rgbs, sigmas, deltas, ts, background))
}

fn composite_unchecked(
    rgbs: &[[f64; 3]],
    sigmas: &[f64],
    deltas: &[f64],
    ts: &[f64],
    background: [f64; 3],
) -> Composite {
    let mut transmittance = 1.0;
    let mut rgb = [0.0; 3];
    let mut depth_num = 0.0;
    for i in 0..sigmas.len() {
        let a = segment_alpha(sigmas[i], deltas[i]);
        let w = transmittance * a;
        for c in 0..3 {
            rgb[c] += w * rgbs[i][c];
        }
        depth_num += w * ts[i];
        transmittance *= 1.0 - a;
    }
    for c in 0..3 {
        rgb[c] += transmittance * background[c];
    }
    let alpha = 1.0 - transmittance;
    Composite {
        rgb,
        alpha,
        depth: depth_num / alpha.max(DEPTH_EPS),
    }
}

#[inline]
fn segment_alpha(sigma: f64, delta: f64) -> f64 {
    let tau = sigma * delta;
    if tau.is_infinite() {
        1.0
    } else {
        -(-tau).exp_m1()
    }
}

/// Gradients of a composite w.r.t. per-sample colors and densities.
fn composite_backward(
    rgbs: &[[f64; 3]],
    sigmas: &[f64],
    deltas: &[f64],
    ts: &[f64],
    background: [f64; 3],
    g_rgb: [f64; 3],
    g_alpha: f64,
    g_depth: f64,
    out_g_rgb: &mut [[f64; 3]],
    out_g_sigma: &mut [f64],
) {
    let k = sigmas.len();
    // Forward quantities: T_i before each segment and weights w_i.
    let mut t_before = vec![0.0; k + 1];
    let mut weights = vec![0.0; k];
    t_before[0] = 1.0;
    let mut depth_num = 0.0;
    for i in 0..k {
        let a = segment_alpha(sigmas[i], deltas[i]);
        weights[i] = t_before[i] * a;
        depth_num += weights[i] * ts[i];
        t_before[i + 1] = t_before[i] * (1.0 - a);
    }
    let t_final = t_before[k];
    let alpha = 1.0 - t_final;
    let (depth_den, den_active) = if alpha > DEPTH_EPS {
        (alpha, true)
    } else {
        (DEPTH_EPS, false)
    };
    // dL/dτ_i = Σ_c g_c (T_{i+1} c_i − Σ_{j>i} w_j c_j − T_K bg_c)
    //         + g_α T_K + g_D (T_{i+1} t_i − Σ_{j>i} w_j t_j)/den − [den=α] g_D N T_K/α².
    let mut suffix_rgb = [0.0; 3];
    let mut suffix_t = 0.0;
    let bg_term: f64 = (0..3).map(|c| g_rgb[c] * t_final * background[c]).sum();
    let depth_tail = if den_active {
        g_depth * depth_num * t_final / (alpha * alpha)
    } else {
        0.0
    };
    for i in (0..k).rev() {
        let mut g_tau = 0.0;
        for c in 0..3 {
            g_tau += g_rgb[c] * (t_before[i + 1] * rgbs[i][c] - suffix_rgb[c]);
            out_g_rgb[i][c] = g_rgb[c] * weights[i];
        }
        g_tau -= bg_term;
        g_tau += g_alpha * t_final;
        g_tau += g_depth * (t_before[i + 1] * ts[i] - suffix_t) / depth_den - depth_tail;
        out_g_sigma[i] = if sigmas[i].is_finite() { g_tau * deltas[i] } else { 0.0 };
        for c in 0..3 {
            suffix_rgb[c] += weights[i] * rgbs[i][c];
        }
        suffix_t += weights[i] * ts[i];
    }
}

/// Inverse-CDF sampling of `n_fine` depths from the piecewise-constant
/// density proportional to the coarse weights (plus a small floor). Bins are
/// centered on the coarse depths. Output is sorted ascending.
pub fn hierarchical_resample(
    coarse_ts: &[f64],
    coarse_weights: &[f64],
    n_fine: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let k = coarse_ts.len();
    if k < 2 || coarse_weights.len() != k {
        return Err(Error::Contract("resampling needs ≥ 2 coarse depths with matching weights".into()));
    }
    if coarse_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Contract("coarse weights must be non-negative".into()));
    }
    let mut edges = Vec::with_capacity(k + 1);
    edges.push(coarse_ts[0] - 0.5 * (coarse_ts[1] - coarse_ts[0]));
    for i in 1..k {
        edges.push(0.5 * (coarse_ts[i - 1] + coarse_ts[i]));
    }
    edges.push(coarse_ts[k - 1] + 0.5 * (coarse_ts[k - 1] - coarse_ts[k - 2]));
    Ok(sample_bins(&edges, coarse_weights, n_fine, seed))
}

fn sample_bins(edges: &[f64], weights: &[f64], n: usize, seed: u64) -> Vec<f64> {
    let k = weights.len();
    let total: f64 = weights.iter().sum();
    // All-zero weights fall back to uniform stratified sampling.
    let probs: Vec<f64> = if total > 0.0 {
        let floored: Vec<f64> = weights.iter().map(|w| w + RESAMPLE_FLOOR).collect();
        let s: f64 = floored.iter().sum();
        floored.into_iter().map(|w| w / s).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    let mut cdf = Vec::with_capacity(k + 1);
    cdf.push(0.0);
    for p in &probs {
        cdf.push(cdf.last().unwrap() + p);
    }
    *cdf.last_mut().unwrap() = 1.0;
    let mut r = rng::rng_for(seed, "fine", &[]);
    let mut out = Vec::with_capacity(n);
    let mut bin = 0;
    for j in 0..n {
        let u = (j as f64 + r.random::<f64>()) / n as f64;
        while bin + 1 < k && cdf[bin + 1] <= u {
            bin += 1;
        }
        let span = cdf[bin + 1] - cdf[bin];
        let frac = if span > 0.0 { ((u - cdf[bin]) / span).clamp(0.0, 1.0) } else { 0.5 };
        out.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    out
}

/// Stratified coarse depths between `near` and `far`.
fn coarse_depths(near: f64, far: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng_for(seed, "coarse", &[]);
    let step = (far - near) / n as f64;
    (0..n)
        .map(|i| near + (i as f64 + r.random::<f64>()) * step)
        .collect()
}

/// Segment lengths of sorted depths. Each sample owns the span between the
/// midpoints to its neighbours, so the spans tile `[near, far]`.
fn segment_lengths(ts: &[f64], near: f64, far: f64) -> Vec<f64> {
    let n = ts.len();
    (0..n)
        .map(|i| {
            let lo = if i == 0 { near } else { 0.5 * (ts[i - 1] + ts[i]) };
            let hi = if i + 1 == n { far } else { 0.5 * (ts[i] + ts[i + 1]) };
            (hi - lo).max(0.0)
        })
        .collect()
}

/// Does the ray hit the cube `[-extent, extent]³` within `[near, far]`?
fn hits_box(o: Vec3, d: Vec3, extent: f64, near: f64, far: f64) -> bool {
    let (mut t0, mut t1) = (near, far);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > extent {
                return false;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((-extent - o[a]) * inv, (extent - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    t0 <= t1
}

#[inline]
fn ray_point(o: Vec3, d: Vec3, t: f64) -> Vec3 {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

fn pixel_seed(seed: u64, resolution: usize, row: usize, col: usize) -> u64 {
    rng::derive(seed, &[(row * resolution + col) as u64])
}

fn check_window(intr: &Intrinsics, window: &Window) -> Result<()> {
    if window.height == 0
        || window.width == 0
        || window.row0 + window.height > intr.resolution
        || window.col0 + window.width > intr.resolution
    {
        return Err(Error::Contract(format!(
            "window {window:?} outside a {r}x{r} image",
            r = intr.resolution
        )));
    }
    Ok(())
}

/// Render a window of pixels of any radiance field.
pub fn render_window<F: RadianceField>(
    field: &F,
    pose: &CameraPose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    seed: u64,
    window: Window,
) -> Result<(RenderOutput, RenderTrace)> {
    cfg.validate()?;
    check_window(intr, &window)?;
    let (near, far) = default_bounds(pose.radius(), field.extent());
    let origin = pose.position();
    let mut scratch = field.scratch();
    let mut rgb = FeatureMap::zeros(3, window.height, window.width);
    let mut alpha = vec![0.0; window.pixels()];
    let mut depth = vec![0.0; window.pixels()];
    let mut all_ts = Vec::with_capacity(window.pixels());
    let mut samples = Vec::new();
    for r in 0..window.height {
        for c in 0..window.width {
            let (row, col) = (window.row0 + r, window.col0 + c);
            let dir = pose.rotate(intr.camera_direction(row, col));
            let pix = r * window.width + c;
            if !hits_box(origin, dir, field.extent(), near, far) {
                rgb.set_pixel(r, c, cfg.background);
                all_ts.push(Vec::new());
                continue;
            }
            let pseed = pixel_seed(seed, intr.resolution, row, col);
            let coarse = coarse_depths(near, far, cfg.n_coarse, pseed);
            samples.clear();
            samples.extend(coarse.iter().map(|t| field.sample(ray_point(origin, dir, *t), &mut scratch)));
            let mut ts = coarse.clone();
            if cfg.n_fine > 0 {
                let deltas = segment_lengths(&coarse, near, far);
                let mut weights = Vec::with_capacity(coarse.len());
                let mut trans = 1.0;
                for (s, d) in samples.iter().zip(&deltas) {
                    let a = segment_alpha(s.sigma, *d);
                    weights.push(trans * a);
                    trans *= 1.0 - a;
                }
                let fine = hierarchical_resample(&coarse, &weights, cfg.n_fine, pseed)?;
                for t in fine {
                    let t = t.clamp(near, far);
                    ts.push(t);
                    samples.push(field.sample(ray_point(origin, dir, t), &mut scratch));
                }
                sort_samples(&mut ts, &mut samples);
            }
            let comp = composite_samples(&samples, &ts, near, far, cfg.background);
            rgb.set_pixel(r, c, comp.rgb);
            alpha[pix] = comp.alpha;
            depth[pix] = comp.depth;
            all_ts.push(ts);
        }
    }
    Ok((
        RenderOutput { rgb, alpha, depth },
        RenderTrace {
            window,
            pose: *pose,
            intr: *intr,
            near,
            far,
            background: cfg.background,
            ts: all_ts,
        },
    ))
}

fn sort_samples(ts: &mut Vec<f64>, samples: &mut Vec<FieldSample>) {
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by(|&a, &b| ts[a].total_cmp(&ts[b]).then(a.cmp(&b)));
    *ts = order.iter().map(|&i| ts[i]).collect();
    *samples = order.iter().map(|&i| samples[i]).collect();
}

fn composite_samples(samples: &[FieldSample], ts: &[f64], near: f64, far: f64, bg: [f64; 3]) -> Composite {
    let rgbs: Vec<[f64; 3]> = samples.iter().map(|s| s.rgb).collect();
    let sigmas: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    composite_unchecked(&rgbs, &sigmas, &segment_lengths(ts, near, far), ts, bg)
}

/// Full-frame render at `intr.resolution`.
pub fn render(
    tp: &Triplane,
    dec: &FieldDecoder,
    pose: &CameraPose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RenderOutput> {
    let field = TriplaneField {
        triplane: tp,
        decoder: dec,
    };
    Ok(render_window(&field, pose, intr, cfg, seed, Window::full(intr.resolution))?.0)
}

/// Square patch of a full-frame render, bit-identical to the matching crop.
pub fn render_patch(
    tp: &Triplane,
    dec: &FieldDecoder,
    pose: &CameraPose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    patch_origin: (usize, usize),
    patch_size: usize,
    seed: u64,
) -> Result<RenderOutput> {
    let field = TriplaneField {
        triplane: tp,
        decoder: dec,
    };
    let window = Window {
        row0: patch_origin.0,
        col0: patch_origin.1,
        height: patch_size,
        width: patch_size,
    };
    Ok(render_window(&field, pose, intr, cfg, seed, window)?.0)
}

/// Upstream gradients for a rendered window.
pub struct RenderGrad<'a> {
    pub rgb: &'a FeatureMap,
    pub alpha: Option<&'a [f64]>,
    pub depth: Option<&'a [f64]>,
}

/// Back-propagate window gradients into triplane values (`grad_triplane`,
/// laid out like `Triplane::data`) and, optionally, decoder parameters.
pub fn render_backward(
    tp: &Triplane,
    dec: &FieldDecoder,
    trace: &RenderTrace,
    grad: RenderGrad,
    grad_triplane: &mut [f64],
    mut grad_decoder: Option<&mut [f64]>,
) {
    let w = trace.window;
    let origin = trace.pose.position();
    let mut traces: Vec<DecoderTrace> = Vec::new();
    let mut features = vec![0.0; tp.c];
    let mut fps = Vec::new();
    let mut samples = Vec::new();
    let mut g_rgbs = Vec::new();
    let mut g_sigmas = Vec::new();
    for r in 0..w.height {
        for c in 0..w.width {
            let pix = r * w.width + c;
            let ts = &trace.ts[pix];
            if ts.is_empty() {
                continue;
            }
            let g_rgb = grad.rgb.pixel(r, c);
            let g_alpha = grad.alpha.map_or(0.0, |a| a[pix]);
            let g_depth = grad.depth.map_or(0.0, |d| d[pix]);
            if g_rgb == [0.0; 3] && g_alpha == 0.0 && g_depth == 0.0 {
                continue;
            }
            let dir = trace
                .pose
                .rotate(trace.intr.camera_direction(w.row0 + r, w.col0 + c));
            fps.clear();
            samples.clear();
            for (i, t) in ts.iter().enumerate() {
                if traces.len() <= i {
                    traces.push(dec.new_trace());
                }
                let fp = tp.footprint(ray_point(origin, dir, *t));
                samples.push(match &fp {
                    Some(fp) => {
                        tp.gather(fp, &mut features);
                        dec.forward_traced(&features, &mut traces[i])
                    }
                    None => EMPTY_SAMPLE,
                });
                fps.push(fp);
            }
            let rgbs: Vec<[f64; 3]> = samples.iter().map(|s| s.rgb).collect();
            let sigmas: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
            let deltas = segment_lengths(ts, trace.near, trace.far);
            g_rgbs.resize(ts.len(), [0.0; 3]);
            g_sigmas.resize(ts.len(), 0.0);
            composite_backward(
                &rgbs,
                &sigmas,
                &deltas,
                ts,
                trace.background,
                g_rgb,
                g_alpha,
                g_depth,
                &mut g_rgbs,
                &mut g_sigmas,
            );
            for (i, fp) in fps.iter().enumerate() {
                let Some(fp) = fp else { continue };
                let gf = dec.backward(&mut traces[i], g_rgbs[i], g_sigmas[i], grad_decoder.as_deref_mut());
                tp.scatter(fp, gf, grad_triplane);
            }
        }
    }
}
