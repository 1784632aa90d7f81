//! Differentiable building blocks with hand-written backward passes.
//!
//! Layers hold [`Slot`]s into a network's flat parameter vector. Every
//! `backward` returns the gradient w.r.t. the layer input and, when a
//! gradient buffer is supplied, accumulates parameter gradients into it.
//! Weights use the equalized-learning-rate convention: stored values are
//! unit-variance and scaled by `1/sqrt(fan_in)` at run time.

use crate::image::FeatureMap;
use crate::params::{ParamBuilder, Slot};

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[inline]
pub fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x * LRELU_GAIN
    } else {
        x * LRELU_SLOPE * LRELU_GAIN
    }
}

#[inline]
pub fn lrelu_slope(pre: f64) -> f64 {
    if pre > 0.0 {
        LRELU_GAIN
    } else {
        LRELU_SLOPE * LRELU_GAIN
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(softplus(x), sigmoid(x))` from a single exponential.
#[inline]
pub fn softplus_and_slope(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sig)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn lrelu_inplace(v: &mut [f64]) {
    for x in v {
        *x = lrelu(*x);
    }
}

/// `g ← g ⊙ lrelu'(pre)`.
pub fn lrelu_backward(pre: &[f64], g: &mut [f64]) {
    for (gi, p) in g.iter_mut().zip(pre) {
        *gi *= lrelu_slope(*p);
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Slot,
    pub b: Option<Slot>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub gain: f64,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: Option<f64>,
    ) -> Self {
        Self::with_gain(pb, name, fan_in, fan_out, bias, 1.0)
    }

    /// `lr_mul` scales both the run-time weight multiplier and the stored
    /// initialization (StyleGAN mapping-network convention).
    pub fn with_gain(
        pb: &mut ParamBuilder,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: Option<f64>,
        lr_mul: f64,
    ) -> Self {
        let w = pb.normal(&format!("{name}.weight"), &[fan_out, fan_in], 1.0 / lr_mul);
        let b = bias.map(|v| pb.constant(&format!("{name}.bias"), &[fan_out], v));
        Self {
            w,
            b,
            fan_in,
            fan_out,
            gain: lr_mul / (fan_in as f64).sqrt(),
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], with_bias: bool) -> Vec<f64> {
        let mut y = vec![0.0; self.fan_out];
        self.forward_into(p, x, &mut y, with_bias);
        y
    }

    pub fn forward_into(&self, p: &[f64], x: &[f64], y: &mut [f64], with_bias: bool) {
        debug_assert_eq!(x.len(), self.fan_in);
        let w = self.w.of(p);
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = self.gain * dot(&w[o * self.fan_in..(o + 1) * self.fan_in], x);
        }
        if with_bias {
            if let Some(b) = self.b {
                for (yi, bi) in y.iter_mut().zip(b.of(p)) {
                    *yi += bi;
                }
            }
        }
    }

    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        gout: &[f64],
        grads: Option<&mut [f64]>,
        with_bias: bool,
    ) -> Vec<f64> {
        let mut gin = vec![0.0; self.fan_in];
        self.backward_into(p, x, gout, &mut gin, grads, with_bias);
        gin
    }

    /// Overwrites `gin` with `∂L/∂x`.
    pub fn backward_into(
        &self,
        p: &[f64],
        x: &[f64],
        gout: &[f64],
        gin: &mut [f64],
        grads: Option<&mut [f64]>,
        with_bias: bool,
    ) {
        let w = self.w.of(p);
        gin.fill(0.0);
        for (o, g) in gout.iter().enumerate() {
            if *g != 0.0 {
                axpy(self.gain * g, &w[o * self.fan_in..(o + 1) * self.fan_in], gin);
            }
        }
        if let Some(grads) = grads {
            {
                let gw = self.w.of_mut(grads);
                for (o, g) in gout.iter().enumerate() {
                    if *g != 0.0 {
                        axpy(self.gain * g, x, &mut gw[o * self.fan_in..(o + 1) * self.fan_in]);
                    }
                }
            }
            if with_bias {
                if let Some(b) = self.b {
                    for (gb, g) in b.of_mut(grads).iter_mut().zip(gout) {
                        *gb += g;
                    }
                }
            }
        }
    }
}

/// Square-kernel, stride-1, zero-padded ("same") convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Slot,
    pub b: Option<Slot>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub gain: f64,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let w = pb.normal(&format!("{name}.weight"), &[cout, cin, k, k], 1.0);
        let b = bias.then(|| pb.constant(&format!("{name}.bias"), &[cout], 0.0));
        Self {
            w,
            b,
            cin,
            cout,
            k,
            gain: 1.0 / ((cin * k * k) as f64).sqrt(),
        }
    }

    /// Same as [`new`](Self::new) but with all weights zero, so the layer
    /// starts as the zero map.
    pub fn zeroed(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let w = pb.constant(&format!("{name}.weight"), &[cout, cin, k, k], 0.0);
        let b = bias.then(|| pb.constant(&format!("{name}.bias"), &[cout], 0.0));
        Self {
            w,
            b,
            cin,
            cout,
            k,
            gain: 1.0 / ((cin * k * k) as f64).sqrt(),
        }
    }

    #[inline]
    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let pad = (self.k / 2) as isize;
        (0..self.k * self.k).map(move |t| {
            (
                t,
                (t / self.k) as isize - pad,
                (t % self.k) as isize - pad,
            )
        })
    }

    pub fn forward(&self, p: &[f64], x: &FeatureMap, with_bias: bool) -> FeatureMap {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let (h, wd) = (x.height, x.width);
        let hw = h * wd;
        let w = self.w.of(p);
        let kk = self.k * self.k;
        let mut out = FeatureMap::zeros(self.cout, h, wd);
        for oc in 0..self.cout {
            let plane = &mut out.data[oc * hw..(oc + 1) * hw];
            if with_bias {
                if let Some(b) = self.b {
                    plane.fill(b.of(p)[oc]);
                }
            }
            for ic in 0..self.cin {
                let inp = &x.data[ic * hw..(ic + 1) * hw];
                let wbase = (oc * self.cin + ic) * kk;
                for (t, dy, dx) in self.taps() {
                    let wv = w[wbase + t] * self.gain;
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(wd, dx);
                    let (y0, y1) = valid_range(h, dy);
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut plane[y * wd + x0..y * wd + x1];
                        let irow = &inp[iy * wd + (x0 as isize + dx) as usize
                            ..iy * wd + (x1 as isize + dx) as usize];
                        axpy(wv, irow, orow);
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        p: &[f64],
        x: &FeatureMap,
        gout: &FeatureMap,
        mut grads: Option<&mut [f64]>,
        with_bias: bool,
        need_input_grad: bool,
    ) -> FeatureMap {
        let (h, wd) = (x.height, x.width);
        let hw = h * wd;
        let w = self.w.of(p);
        let kk = self.k * self.k;
        let mut gin = FeatureMap::zeros(if need_input_grad { self.cin } else { 0 }, h, wd);
        for oc in 0..self.cout {
            let gplane = &gout.data[oc * hw..(oc + 1) * hw];
            if let Some(grads) = grads.as_deref_mut() {
                if with_bias {
                    if let Some(b) = self.b {
                        b.of_mut(grads)[oc] += gplane.iter().sum::<f64>();
                    }
                }
            }
            for ic in 0..self.cin {
                let inp = &x.data[ic * hw..(ic + 1) * hw];
                let wbase = (oc * self.cin + ic) * kk;
                for (t, dy, dx) in self.taps() {
                    let (x0, x1) = valid_range(wd, dx);
                    let (y0, y1) = valid_range(h, dy);
                    if need_input_grad {
                        let wv = w[wbase + t] * self.gain;
                        if wv != 0.0 {
                            let gplane_in = &mut gin.data[ic * hw..(ic + 1) * hw];
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let grow = &gplane[y * wd + x0..y * wd + x1];
                                let irow = &mut gplane_in[iy * wd + (x0 as isize + dx) as usize
                                    ..iy * wd + (x1 as isize + dx) as usize];
                                axpy(wv, grow, irow);
                            }
                        }
                    }
                    if let Some(grads) = grads.as_deref_mut() {
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &gplane[y * wd + x0..y * wd + x1];
                            let irow = &inp[iy * wd + (x0 as isize + dx) as usize
                                ..iy * wd + (x1 as isize + dx) as usize];
                            acc += dot(grow, irow);
                        }
                        self.w.of_mut(grads)[wbase + t] += acc * self.gain;
                    }
                }
            }
        }
        gin
    }
}

/// Output index range `[lo, hi)` whose shifted input index `i + d` is in bounds.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Adaptive instance normalization: per-channel normalization over space,
/// then a scale `1 + s_γ(w)` and shift `s_β(w)` predicted from the latent.
#[derive(Clone, Debug)]
pub struct AdaIn {
    pub style: Linear,
    pub channels: usize,
}

pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct AdaInTrace {
    pub xhat: FeatureMap,
    pub inv_std: Vec<f64>,
    pub style: Vec<f64>,
}

impl AdaIn {
    pub fn new(pb: &mut ParamBuilder, name: &str, w_dim: usize, channels: usize) -> Self {
        Self {
            style: Linear::new(pb, &format!("{name}.style"), w_dim, 2 * channels, Some(0.0)),
            channels,
        }
    }

    pub fn forward(&self, p: &[f64], x: &FeatureMap, w: &[f64]) -> (FeatureMap, AdaInTrace) {
        let c = self.channels;
        let style = self.style.forward(p, w, true);
        let n = x.plane() as f64;
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0; c];
        let mut y = x.clone();
        for ch in 0..c {
            let plane = xhat.channel_mut(ch);
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + ADAIN_EPS).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std[ch] = is;
            let (gamma, beta) = (1.0 + style[ch], style[c + ch]);
            for (yo, xh) in y.channel_mut(ch).iter_mut().zip(xhat.channel(ch)) {
                *yo = gamma * xh + beta;
            }
        }
        (
            y,
            AdaInTrace {
                xhat,
                inv_std,
                style,
            },
        )
    }

    /// Returns `(∂L/∂x, ∂L/∂w)`.
    pub fn backward(
        &self,
        p: &[f64],
        trace: &AdaInTrace,
        w: &[f64],
        gout: &FeatureMap,
        grads: Option<&mut [f64]>,
    ) -> (FeatureMap, Vec<f64>) {
        let c = self.channels;
        let n = gout.plane() as f64;
        let mut gstyle = vec![0.0; 2 * c];
        let mut gx = FeatureMap::zeros(c, gout.height, gout.width);
        for ch in 0..c {
            let g = gout.channel(ch);
            let xh = trace.xhat.channel(ch);
            gstyle[ch] = dot(g, xh);
            gstyle[c + ch] = g.iter().sum();
            let gamma = 1.0 + trace.style[ch];
            let sum_g = gamma * gstyle[c + ch];
            let sum_gx = gamma * gstyle[ch];
            let k = trace.inv_std[ch] / n;
            for ((o, gi), xi) in gx.channel_mut(ch).iter_mut().zip(g).zip(xh) {
                *o = k * (n * gamma * gi - sum_g - xi * sum_gx);
            }
        }
        let gw = self.style.backward(p, w, &gstyle, grads, true);
        (gx, gw)
    }
}

/// Separable bilinear resampling table for one axis.
#[derive(Clone, Debug)]
struct AxisTable {
    i0: Vec<usize>,
    i1: Vec<usize>,
    t: Vec<f64>,
}

impl AxisTable {
    fn new(n_in: usize, n_out: usize, align_corners: bool) -> Self {
        let mut tab = AxisTable {
            i0: Vec::with_capacity(n_out),
            i1: Vec::with_capacity(n_out),
            t: Vec::with_capacity(n_out),
        };
        for o in 0..n_out {
            let src = if align_corners {
                if n_out == 1 {
                    0.0
                } else {
                    o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                }
            } else {
                ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            tab.i0.push(i0);
            tab.i1.push(i1);
            tab.t.push(src - i0 as f64);
        }
        tab
    }
}

/// Bilinear resize of every channel to `out_h × out_w`.
pub fn resize_bilinear(x: &FeatureMap, out_h: usize, out_w: usize, align_corners: bool) -> FeatureMap {
    let ty = AxisTable::new(x.height, out_h, align_corners);
    let tx = AxisTable::new(x.width, out_w, align_corners);
    let mut out = FeatureMap::zeros(x.channels, out_h, out_w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for oy in 0..out_h {
            let (r0, r1, wy) = (ty.i0[oy] * x.width, ty.i1[oy] * x.width, ty.t[oy]);
            for ox in 0..out_w {
                let (c0, c1, wx) = (tx.i0[ox], tx.i1[ox], tx.t[ox]);
                let top = src[r0 + c0] * (1.0 - wx) + src[r0 + c1] * wx;
                let bot = src[r1 + c0] * (1.0 - wx) + src[r1 + c1] * wx;
                dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(
    gout: &FeatureMap,
    in_h: usize,
    in_w: usize,
    align_corners: bool,
) -> FeatureMap {
    let ty = AxisTable::new(in_h, gout.height, align_corners);
    let tx = AxisTable::new(in_w, gout.width, align_corners);
    let mut gin = FeatureMap::zeros(gout.channels, in_h, in_w);
    for c in 0..gout.channels {
        let g = gout.channel(c);
        let dst = gin.channel_mut(c);
        for oy in 0..gout.height {
            let (r0, r1, wy) = (ty.i0[oy] * in_w, ty.i1[oy] * in_w, ty.t[oy]);
            for ox in 0..gout.width {
                let (c0, c1, wx) = (tx.i0[ox], tx.i1[ox], tx.t[ox]);
                let gv = g[oy * gout.width + ox];
                dst[r0 + c0] += gv * (1.0 - wy) * (1.0 - wx);
                dst[r0 + c1] += gv * (1.0 - wy) * wx;
                dst[r1 + c0] += gv * wy * (1.0 - wx);
                dst[r1 + c1] += gv * wy * wx;
            }
        }
    }
    gin
}

/// 2×2 average pooling (odd trailing rows/columns are dropped).
pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            let r0 = 2 * y * x.width;
            let r1 = r0 + x.width;
            for xx in 0..w {
                dst[y * w + xx] =
                    0.25 * (src[r0 + 2 * xx] + src[r0 + 2 * xx + 1] + src[r1 + 2 * xx] + src[r1 + 2 * xx + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(gout: &FeatureMap, in_h: usize, in_w: usize) -> FeatureMap {
    let mut gin = FeatureMap::zeros(gout.channels, in_h, in_w);
    for c in 0..gout.channels {
        let g = gout.channel(c);
        let dst = gin.channel_mut(c);
        for y in 0..gout.height {
            for x in 0..gout.width {
                let v = 0.25 * g[y * gout.width + x];
                let r0 = 2 * y * in_w;
                dst[r0 + 2 * x] += v;
                dst[r0 + 2 * x + 1] += v;
                dst[r0 + in_w + 2 * x] += v;
                dst[r0 + in_w + 2 * x + 1] += v;
            }
        }
    }
    gin
}

/// Unit-normalize the channel vector at every pixel.
pub fn normalize_channels(x: &FeatureMap) -> (FeatureMap, Vec<f64>) {
    const EPS: f64 = 1e-10;
    let p = x.plane();
    let mut norms = vec![0.0; p];
    for c in 0..x.channels {
        for (n, v) in norms.iter_mut().zip(x.channel(c)) {
            *n += v * v;
        }
    }
    for n in norms.iter_mut() {
        *n = (*n + EPS).sqrt();
    }
    let mut y = x.clone();
    for c in 0..x.channels {
        for (v, n) in y.channel_mut(c).iter_mut().zip(&norms) {
            *v /= n;
        }
    }
    (y, norms)
}

pub fn normalize_channels_backward(y: &FeatureMap, norms: &[f64], gout: &FeatureMap) -> FeatureMap {
    let p = y.plane();
    let mut proj = vec![0.0; p];
    for c in 0..y.channels {
        for ((a, g), yv) in proj.iter_mut().zip(gout.channel(c)).zip(y.channel(c)) {
            *a += g * yv;
        }
    }
    let mut gin = FeatureMap::zeros(y.channels, y.height, y.width);
    for c in 0..y.channels {
        let (yc, gc) = (y.channel(c), gout.channel(c));
        for (i, o) in gin.channel_mut(c).iter_mut().enumerate() {
            *o = (gc[i] - yc[i] * proj[i]) / norms[i];
        }
    }
    gin
}
