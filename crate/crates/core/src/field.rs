//! Triplane feature volumes and the radiance/density decoder.

use serde::{Deserialize, Serialize};

use crate::camera::{Vec3, DEFAULT_BOX_EXTENT};
use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::nn::{sigmoid, softplus, softplus_and_slope, Linear};
use crate::params::{ParamBuilder, Params};
use crate::rng::Rng;

/// Three axis-aligned `N×N` grids of `C`-dimensional features.
/// Plane 0 is indexed by (x, y), plane 1 by (x, z), plane 2 by (y, z); the
/// first coordinate selects the column. Grid nodes span the closed box
/// `[-extent, extent]` on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane {
    pub n: usize,
    pub c: usize,
    pub extent: f64,
    /// `3 × N × N × C`, channel-last.
    pub data: Vec<f64>,
}

impl Triplane {
    pub fn zeros(n: usize, c: usize, extent: f64) -> Result<Self> {
        if n < 4 || c < 4 || !(extent > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "triplane needs N ≥ 4, C ≥ 4, extent > 0 (got {n}, {c}, {extent})"
            )));
        }
        Ok(Self {
            n,
            c,
            extent,
            data: vec![0.0; 3 * n * n * c],
        })
    }

    #[inline]
    pub fn node(&self, plane: usize, row: usize, col: usize) -> usize {
        ((plane * self.n + row) * self.n + col) * self.c
    }

    pub fn node_vec(&self, plane: usize, row: usize, col: usize) -> &[f64] {
        let i = self.node(plane, row, col);
        &self.data[i..i + self.c]
    }

    pub fn node_vec_mut(&mut self, plane: usize, row: usize, col: usize) -> &mut [f64] {
        let i = self.node(plane, row, col);
        let c = self.c;
        &mut self.data[i..i + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret a `(3C, N, N)` feature map as planes (channel `p·C + k`
    /// is feature `k` of plane `p`).
    pub fn from_feature_map(map: &FeatureMap, extent: f64) -> Result<Self> {
        if map.channels % 3 != 0 || map.height != map.width {
            return Err(Error::Contract(format!(
                "triplane map must be (3C, N, N), got {:?}",
                map.shape()
            )));
        }
        let (n, c) = (map.height, map.channels / 3);
        let mut tp = Triplane::zeros(n, c, extent)?;
        for p in 0..3 {
            for k in 0..c {
                let src = map.channel(p * c + k);
                for (pix, v) in src.iter().enumerate() {
                    let i = tp.node(p, pix / n, pix % n) + k;
                    tp.data[i] = *v;
                }
            }
        }
        Ok(tp)
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        let (n, c) = (self.n, self.c);
        let mut map = FeatureMap::zeros(3 * c, n, n);
        for p in 0..3 {
            for k in 0..c {
                let dst = map.channel_mut(p * c + k);
                for (pix, v) in dst.iter_mut().enumerate() {
                    *v = self.data[((p * n + pix / n) * n + pix % n) * c + k];
                }
            }
        }
        map
    }

    /// Bilinear footprint of a world point, or `None` outside the box.
    pub fn footprint(&self, point: Vec3) -> Option<Footprint> {
        let q = [
            point[0] / self.extent,
            point[1] / self.extent,
            point[2] / self.extent,
        ];
        if q.iter().any(|v| !(v.abs() <= 1.0)) {
            return None;
        }
        let mut fp = Footprint {
            index: [[0; 4]; 3],
            weight: [[0.0; 4]; 3],
        };
        let pairs = [(q[0], q[1]), (q[0], q[2]), (q[1], q[2])];
        let last = (self.n - 1) as f64;
        for (p, (u, v)) in pairs.into_iter().enumerate() {
            let fx = (u + 1.0) * 0.5 * last;
            let fy = (v + 1.0) * 0.5 * last;
            let j0 = (fx.floor() as usize).min(self.n - 2);
            let i0 = (fy.floor() as usize).min(self.n - 2);
            let (tx, ty) = (fx - j0 as f64, fy - i0 as f64);
            fp.index[p] = [
                self.node(p, i0, j0),
                self.node(p, i0, j0 + 1),
                self.node(p, i0 + 1, j0),
                self.node(p, i0 + 1, j0 + 1),
            ];
            fp.weight[p] = [
                (1.0 - ty) * (1.0 - tx),
                (1.0 - ty) * tx,
                ty * (1.0 - tx),
                ty * tx,
            ];
        }
        Some(fp)
    }

    /// Summed features of a footprint, written into `out` (length C).
    #[inline]
    pub fn gather(&self, fp: &Footprint, out: &mut [f64]) {
        out.fill(0.0);
        for p in 0..3 {
            for k in 0..4 {
                let w = fp.weight[p][k];
                if w == 0.0 {
                    continue;
                }
                let base = fp.index[p][k];
                for (o, v) in out.iter_mut().zip(&self.data[base..base + self.c]) {
                    *o += w * v;
                }
            }
        }
    }

    /// Adjoint of [`gather`](Self::gather): add `g` into a gradient buffer
    /// laid out like `data`.
    #[inline]
    pub fn scatter(&self, fp: &Footprint, g: &[f64], grad: &mut [f64]) {
        for p in 0..3 {
            for k in 0..4 {
                let w = fp.weight[p][k];
                if w == 0.0 {
                    continue;
                }
                let base = fp.index[p][k];
                for (o, v) in grad[base..base + self.c].iter_mut().zip(g) {
                    *o += w * v;
                }
            }
        }
    }
}

/// Four bilinear taps on each of the three planes.
#[derive(Clone, Copy, Debug)]
pub struct Footprint {
    pub index: [[usize; 4]; 3],
    pub weight: [[f64; 4]; 3],
}

/// Sum of the bilinearly interpolated plane features at each point; points
/// outside the box get the zero vector.
pub fn sample_features(tp: &Triplane, points: &[Vec3]) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|p| {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite sample point".into()));
            }
            let mut f = vec![0.0; tp.c];
            if let Some(fp) = tp.footprint(*p) {
                tp.gather(&fp, &mut f);
            }
            Ok(f)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub rgb: [f64; 3],
    pub sigma: f64,
}

/// Value returned for points outside the content box.
pub const EMPTY_SAMPLE: FieldSample = FieldSample {
    rgb: [0.5, 0.5, 0.5],
    sigma: 0.0,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub features: usize,
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            features: 16,
            hidden: vec![64, 64],
        }
    }
}

/// Small MLP: softplus hidden layers, sigmoid color head, softplus density.
#[derive(Clone, Debug)]
pub struct FieldDecoder {
    pub config: DecoderConfig,
    pub layers: Vec<Linear>,
    pub params: Params,
}

/// Per-point activations kept for the backward pass; reusable across points.
#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    /// Inputs to each layer (features, then hidden activations).
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer (the last one is the raw output).
    pre: Vec<Vec<f64>>,
    /// Softplus derivative at each hidden pre-activation.
    slope: Vec<Vec<f64>>,
    /// Gradient buffers, one per layer input.
    grad: Vec<Vec<f64>>,
}

impl FieldDecoder {
    pub fn new(config: DecoderConfig, rng: &mut Rng) -> Self {
        let mut pb = ParamBuilder::new(rng);
        let mut layers = Vec::new();
        let mut width = config.features;
        for (i, &h) in config.hidden.iter().enumerate() {
            layers.push(Linear::new(&mut pb, &format!("decoder.fc{i}"), width, h, Some(0.0)));
            width = h;
        }
        layers.push(Linear::new(&mut pb, "decoder.out", width, 4, Some(0.0)));
        Self {
            config,
            layers,
            params: pb.finish(),
        }
    }

    pub fn new_trace(&self) -> DecoderTrace {
        DecoderTrace {
            acts: self.layers.iter().map(|l| vec![0.0; l.fan_in]).collect(),
            pre: self.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            slope: self.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            grad: self
                .layers
                .iter()
                .map(|l| vec![0.0; l.fan_in])
                .chain(std::iter::once(vec![0.0; 4]))
                .collect(),
        }
    }

    /// Decode one feature vector, recording what backward needs.
    pub fn forward_traced(&self, features: &[f64], trace: &mut DecoderTrace) -> FieldSample {
        let p = &self.params.values;
        trace.acts[0].copy_from_slice(features);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward_into(p, &trace.acts[l], &mut trace.pre[l], true);
            if l < last {
                let (pre, next, slope) = (&trace.pre[l], &mut trace.acts[l + 1], &mut trace.slope[l]);
                for ((a, d), v) in next.iter_mut().zip(slope.iter_mut()).zip(pre) {
                    (*a, *d) = softplus_and_slope(*v);
                }
            }
        }
        let o = &trace.pre[last];
        FieldSample {
            rgb: [sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2])],
            sigma: softplus(o[3]),
        }
    }

    pub fn forward(&self, features: &[f64]) -> FieldSample {
        let mut trace = self.new_trace();
        self.forward_traced(features, &mut trace)
    }

    /// Back-propagate output gradients through the last traced point;
    /// returns `∂L/∂features` (borrowed from the trace).
    pub fn backward<'t>(
        &self,
        trace: &'t mut DecoderTrace,
        g_rgb: [f64; 3],
        g_sigma: f64,
        mut grads: Option<&mut [f64]>,
    ) -> &'t [f64] {
        let p = &self.params.values;
        let last = self.layers.len() - 1;
        {
            let o = &trace.pre[last];
            let g = &mut trace.grad[last + 1];
            for k in 0..3 {
                let s = sigmoid(o[k]);
                g[k] = g_rgb[k] * s * (1.0 - s);
            }
            g[3] = g_sigma * sigmoid(o[3]);
        }
        for l in (0..=last).rev() {
            let (lo, hi) = trace.grad.split_at_mut(l + 1);
            let (gin, gout) = (&mut lo[l], &hi[0]);
            self.layers[l].backward_into(p, &trace.acts[l], gout, gin, grads.as_deref_mut(), true);
            if l > 0 {
                for (gi, d) in gin.iter_mut().zip(&trace.slope[l - 1]) {
                    *gi *= d;
                }
            }
        }
        &trace.grad[0]
    }
}

pub fn decode(dec: &FieldDecoder, features: &[Vec<f64>]) -> Vec<FieldSample> {
    let mut trace = dec.new_trace();
    features
        .iter()
        .map(|f| dec.forward_traced(f, &mut trace))
        .collect()
}

pub fn query_field(tp: &Triplane, dec: &FieldDecoder, points: &[Vec3]) -> Result<Vec<FieldSample>> {
    let mut trace = dec.new_trace();
    let mut f = vec![0.0; tp.c];
    points
        .iter()
        .map(|p| {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite sample point".into()));
            }
            Ok(match tp.footprint(*p) {
                Some(fp) => {
                    tp.gather(&fp, &mut f);
                    dec.forward_traced(&f, &mut trace)
                }
                None => EMPTY_SAMPLE,
            })
        })
        .collect()
}

impl Default for Triplane {
    fn default() -> Self {
        Triplane::zeros(64, 16, DEFAULT_BOX_EXTENT).expect("valid default")
    }
}
