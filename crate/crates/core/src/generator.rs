//! Latent → triplane generator with a 2D image-space upsampler and a 3D
//! triplane upsampler.
//!
//! The mapping network turns a Gaussian `z` into `w`. Synthesis grows a
//! learned 4×4 constant through AdaIN-modulated conv blocks to an `N×N`,
//! `3C`-channel map that is reshaped into a triplane. Both upsamplers are
//! modulated by the same `w`. All parameters except the field decoder live in
//! one flat [`Params`] block; the decoder keeps its own.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DecoderConfig, FieldDecoder, Triplane};
use crate::image::FeatureMap;
use crate::nn::{lrelu_backward, lrelu_inplace, resize_bilinear, resize_bilinear_backward, AdaIn, AdaInTrace, Conv2d, Linear};
use crate::params::{ParamBuilder, Params, Slot};
use crate::rng::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    /// Plane resolution of the synthesized triplane; `4·2^k`.
    pub base_resolution: usize,
    pub triplane_channels: usize,
    pub synthesis_channels: usize,
    pub upsampler2d_channels: usize,
    /// Output side of the 2D upsampler over the raw render side.
    pub upsampler2d_factor: usize,
    pub upsampler3d_channels: usize,
    pub extent: f64,
    pub decoder: DecoderConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            w_dim: 64,
            mapping_layers: 4,
            mapping_lr_mul: 0.01,
            base_resolution: 32,
            triplane_channels: 16,
            synthesis_channels: 32,
            upsampler2d_channels: 16,
            upsampler2d_factor: 2,
            upsampler3d_channels: 16,
            extent: crate::camera::DEFAULT_BOX_EXTENT,
            decoder: DecoderConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.base_resolution;
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::Config(format!("base_resolution must be a power of two ≥ 4, got {n}")));
        }
        if self.upsampler2d_factor < 2 || !self.upsampler2d_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "upsampler2d_factor must be a power of two ≥ 2, got {}",
                self.upsampler2d_factor
            )));
        }
        if self.decoder.features != self.triplane_channels {
            return Err(Error::Config("decoder.features must equal triplane_channels".into()));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::Config("latent sizes and mapping depth must be positive".into()));
        }
        if self.triplane_channels < 4 || !(self.extent > 0.0) || !(self.mapping_lr_mul > 0.0) {
            return Err(Error::Config("triplane_channels ≥ 4, extent > 0 and mapping_lr_mul > 0 required".into()));
        }
        Ok(())
    }
}

/// Conv → AdaIN → leaky ReLU.
#[derive(Clone, Debug)]
struct ModBlock {
    conv: Conv2d,
    adain: AdaIn,
}

struct ModBlockTrace {
    input: FeatureMap,
    adain: AdaInTrace,
    pre: FeatureMap,
}

impl ModBlock {
    fn new(pb: &mut ParamBuilder, name: &str, w_dim: usize, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::new(pb, &format!("{name}.conv"), cin, cout, 3, false),
            adain: AdaIn::new(pb, &format!("{name}.adain"), w_dim, cout),
        }
    }

    fn forward(&self, p: &[f64], x: FeatureMap, w: &[f64]) -> (FeatureMap, ModBlockTrace) {
        let h = self.conv.forward(p, &x, false);
        let (pre, adain) = self.adain.forward(p, &h, w);
        let mut y = pre.clone();
        lrelu_inplace(&mut y.data);
        (y, ModBlockTrace { input: x, adain, pre })
    }

    /// Accumulates `∂L/∂w` into `gw`; returns `∂L/∂x`.
    fn backward(
        &self,
        p: &[f64],
        t: &ModBlockTrace,
        w: &[f64],
        mut gout: FeatureMap,
        mut grads: Option<&mut [f64]>,
        gw: &mut [f64],
    ) -> FeatureMap {
        lrelu_backward(&t.pre.data, &mut gout.data);
        let (gh, gw_local) = self.adain.backward(p, &t.adain, w, &gout, grads.as_deref_mut());
        for (a, b) in gw.iter_mut().zip(&gw_local) {
            *a += b;
        }
        self.conv.backward(p, &t.input, &gh, grads, false, true)
    }
}

pub struct MappingTrace {
    /// Normalized `z`, then every hidden activation.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

pub struct SynthesisTrace {
    blocks: Vec<ModBlockTrace>,
    /// Spatial size before each block's resize (0 for the first block).
    sizes: Vec<usize>,
    last: FeatureMap,
}

pub struct Upsample2dTrace {
    raw_size: usize,
    blocks: Vec<ModBlockTrace>,
    last: FeatureMap,
}

pub struct Upsample3dTrace {
    n: usize,
    planes: Vec<(ModBlockTrace, FeatureMap)>,
}

/// Everything learnable in the generator.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    mapping: Vec<Linear>,
    constant: Slot,
    synthesis: Vec<ModBlock>,
    to_planes: Conv2d,
    up2d: Vec<ModBlock>,
    to_rgb: Conv2d,
    up3d: ModBlock,
    up3d_out: Conv2d,
    pub params: Params,
    pub decoder: FieldDecoder,
}

/// Parameter groups addressed by prefix, used to freeze parts of the model.
pub const GROUP_MAPPING: &str = "mapping.";
pub const GROUP_SYNTHESIS: &str = "synthesis.";
pub const GROUP_UPSAMPLER2D: &str = "up2d.";
pub const GROUP_UPSAMPLER3D: &str = "up3d.";

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "generator", &[]);
        let mut pb = ParamBuilder::new(&mut rng);
        let cfg = &config;
        pb.set_prefix(GROUP_MAPPING);
        let mapping = (0..cfg.mapping_layers)
            .map(|i| {
                let fan_in = if i == 0 { cfg.z_dim } else { cfg.w_dim };
                Linear::with_gain(&mut pb, &format!("fc{i}"), fan_in, cfg.w_dim, Some(0.0), cfg.mapping_lr_mul)
            })
            .collect();
        pb.set_prefix(GROUP_SYNTHESIS);
        let cs = cfg.synthesis_channels;
        let constant = pb.normal("const", &[cs, 4, 4], 1.0);
        let n_blocks = 1 + cfg.base_resolution.trailing_zeros() as usize - 2;
        let synthesis = (0..n_blocks)
            .map(|i| ModBlock::new(&mut pb, &format!("b{i}"), cfg.w_dim, cs, cs))
            .collect();
        let to_planes = Conv2d::new(&mut pb, "to_planes", cs, 3 * cfg.triplane_channels, 1, true);
        pb.set_prefix(GROUP_UPSAMPLER2D);
        let c2 = cfg.upsampler2d_channels;
        let up2d = vec![
            ModBlock::new(&mut pb, "b0", cfg.w_dim, 3, c2),
            ModBlock::new(&mut pb, "b1", cfg.w_dim, c2, c2),
        ];
        let to_rgb = Conv2d::zeroed(&mut pb, "to_rgb", c2, 3, 1, true);
        pb.set_prefix(GROUP_UPSAMPLER3D);
        let c3 = cfg.upsampler3d_channels;
        let up3d = ModBlock::new(&mut pb, "b0", cfg.w_dim, cfg.triplane_channels, c3);
        let up3d_out = Conv2d::zeroed(&mut pb, "out", c3, cfg.triplane_channels, 3, true);
        let params = pb.finish();
        let mut drng: Rng = rng_for(seed, "decoder", &[]);
        let decoder = FieldDecoder::new(cfg.decoder.clone(), &mut drng);
        Ok(Self {
            config,
            mapping,
            constant,
            synthesis,
            to_planes,
            up2d,
            to_rgb,
            up3d,
            up3d_out,
            params,
            decoder,
        })
    }

    /// Standard-normal latent for a seed.
    pub fn sample_z(&self, seed: u64) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng_for(seed, "z", &[]);
        (0..self.config.z_dim).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    pub fn map_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.map_latent_traced(z)?.0)
    }

    pub fn map_latent_traced(&self, z: &[f64]) -> Result<(Vec<f64>, MappingTrace)> {
        if z.len() != self.config.z_dim {
            return Err(Error::Contract(format!("z has {} entries, expected {}", z.len(), self.config.z_dim)));
        }
        let p = &self.params.values;
        let rms = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64 + 1e-8).sqrt();
        let mut x: Vec<f64> = z.iter().map(|v| v / rms).collect();
        let mut acts = Vec::with_capacity(self.mapping.len());
        let mut pre = Vec::with_capacity(self.mapping.len());
        for layer in &self.mapping {
            let h = layer.forward(p, &x, true);
            acts.push(x);
            x = h.clone();
            lrelu_inplace(&mut x);
            pre.push(h);
        }
        Ok((x, MappingTrace { acts, pre }))
    }

    /// Back-propagate `∂L/∂w` into mapping parameters.
    pub fn map_latent_backward(&self, t: &MappingTrace, gw: &[f64], grads: &mut [f64]) {
        let p = &self.params.values;
        let mut g = gw.to_vec();
        for (l, layer) in self.mapping.iter().enumerate().rev() {
            lrelu_backward(&t.pre[l], &mut g);
            g = layer.backward(p, &t.acts[l], &g, Some(grads), true);
        }
    }

    /// Mean `w` over `n` latents drawn from a dedicated stream.
    pub fn mean_w(&self, n: usize, seed: u64) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut acc = vec![0.0; self.config.w_dim];
        let mut r = rng_for(seed, "mean-w", &[]);
        for _ in 0..n {
            let z: Vec<f64> = (0..self.config.z_dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let w = self.map_latent(&z).expect("z has the configured width");
            for (a, v) in acc.iter_mut().zip(&w) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
        acc
    }

    fn check_w(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.config.w_dim {
            return Err(Error::Contract(format!("w has {} entries, expected {}", w.len(), self.config.w_dim)));
        }
        Ok(())
    }

    pub fn synthesize_triplane(&self, w: &[f64]) -> Result<Triplane> {
        Ok(self.synthesize_traced(w)?.0)
    }

    pub fn synthesize_traced(&self, w: &[f64]) -> Result<(Triplane, SynthesisTrace)> {
        self.check_w(w)?;
        let p = &self.params.values;
        let cs = self.config.synthesis_channels;
        let mut x = FeatureMap::from_vec(cs, 4, 4, self.constant.of(p).to_vec());
        let mut blocks = Vec::with_capacity(self.synthesis.len());
        let mut sizes = Vec::with_capacity(self.synthesis.len());
        for (i, block) in self.synthesis.iter().enumerate() {
            if i > 0 {
                sizes.push(x.height);
                x = resize_bilinear(&x, 2 * x.height, 2 * x.width, false);
            } else {
                sizes.push(0);
            }
            let (y, t) = block.forward(p, x, w);
            blocks.push(t);
            x = y;
        }
        let planes = self.to_planes.forward(p, &x, true);
        let tp = Triplane::from_feature_map(&planes, self.config.extent)?;
        Ok((tp, SynthesisTrace { blocks, sizes, last: x }))
    }

    /// `g_triplane` is laid out like `Triplane::data`. Returns `∂L/∂w`.
    pub fn synthesize_backward(&self, t: &SynthesisTrace, w: &[f64], g_triplane: &Triplane, grads: &mut [f64]) -> Vec<f64> {
        let p = &self.params.values;
        let gmap = g_triplane.to_feature_map();
        let mut gw = vec![0.0; self.config.w_dim];
        let mut g = self.to_planes.backward(p, &t.last, &gmap, Some(grads), true, true);
        for (i, block) in self.synthesis.iter().enumerate().rev() {
            g = block.backward(p, &t.blocks[i], w, g, Some(grads), &mut gw);
            if i > 0 {
                g = resize_bilinear_backward(&g, t.sizes[i], t.sizes[i], false);
            }
        }
        for (gc, v) in self.constant.of_mut(grads).iter_mut().zip(&g.data) {
            *gc += v;
        }
        gw
    }

    /// Image-space super-resolution of a raw RGB render by
    /// `upsampler2d_factor`: bilinear upsampling plus a modulated residual
    /// (zero at init).
    pub fn upsample_2d(&self, raw: &FeatureMap, w: &[f64]) -> Result<FeatureMap> {
        Ok(self.upsample_2d_traced(raw, w)?.0)
    }

    pub fn upsample_2d_traced(&self, raw: &FeatureMap, w: &[f64]) -> Result<(FeatureMap, Upsample2dTrace)> {
        self.check_w(w)?;
        if raw.channels != 3 || raw.height != raw.width {
            return Err(Error::Contract(format!("raw render must be square RGB, got {:?}", raw.shape())));
        }
        let p = &self.params.values;
        let f = self.config.upsampler2d_factor;
        let base = resize_bilinear(raw, f * raw.height, f * raw.width, false);
        let mut x = base.clone();
        let mut blocks = Vec::with_capacity(self.up2d.len());
        for block in &self.up2d {
            let (y, t) = block.forward(p, x, w);
            blocks.push(t);
            x = y;
        }
        let mut out = self.to_rgb.forward(p, &x, true);
        for (o, b) in out.data.iter_mut().zip(&base.data) {
            *o += b;
        }
        Ok((
            out,
            Upsample2dTrace {
                raw_size: raw.height,
                blocks,
                last: x,
            },
        ))
    }

    /// Returns `(∂L/∂raw, ∂L/∂w)`.
    pub fn upsample_2d_backward(
        &self,
        t: &Upsample2dTrace,
        w: &[f64],
        gout: &FeatureMap,
        mut grads: Option<&mut [f64]>,
    ) -> (FeatureMap, Vec<f64>) {
        let p = &self.params.values;
        let mut gw = vec![0.0; self.config.w_dim];
        let mut g = self.to_rgb.backward(p, &t.last, gout, grads.as_deref_mut(), true, true);
        for (i, block) in self.up2d.iter().enumerate().rev() {
            g = block.backward(p, &t.blocks[i], w, g, grads.as_deref_mut(), &mut gw);
        }
        for (a, b) in g.data.iter_mut().zip(&gout.data) {
            *a += b;
        }
        let graw = resize_bilinear_backward(&g, t.raw_size, t.raw_size, false);
        (graw, gw)
    }

    /// Triplane super-resolution to twice the plane resolution: bilinear
    /// (corner-aligned, so the box extent is preserved) plus a modulated
    /// residual applied to each plane with shared weights (zero at init).
    pub fn upsample_3d(&self, tp: &Triplane, w: &[f64]) -> Result<Triplane> {
        Ok(self.upsample_3d_traced(tp, w)?.0)
    }

    pub fn upsample_3d_traced(&self, tp: &Triplane, w: &[f64]) -> Result<(Triplane, Upsample3dTrace)> {
        self.check_w(w)?;
        if tp.c != self.config.triplane_channels {
            return Err(Error::Contract(format!("triplane has {} channels, expected {}", tp.c, self.config.triplane_channels)));
        }
        let p = &self.params.values;
        let (n, c) = (tp.n, tp.c);
        let map = tp.to_feature_map();
        let mut out = FeatureMap::zeros(3 * c, 2 * n, 2 * n);
        let mut planes = Vec::with_capacity(3);
        for k in 0..3 {
            let plane = FeatureMap::from_vec(c, n, n, map.data[k * c * n * n..(k + 1) * c * n * n].to_vec());
            let base = resize_bilinear(&plane, 2 * n, 2 * n, true);
            let (h, t) = self.up3d.forward(p, base.clone(), w);
            let res = self.up3d_out.forward(p, &h, true);
            let dst = &mut out.data[k * c * 4 * n * n..(k + 1) * c * 4 * n * n];
            for ((o, b), r) in dst.iter_mut().zip(&base.data).zip(&res.data) {
                *o = b + r;
            }
            planes.push((t, h));
        }
        Ok((Triplane::from_feature_map(&out, tp.extent)?, Upsample3dTrace { n, planes }))
    }

    /// Returns `(∂L/∂triplane, ∂L/∂w)` for a gradient w.r.t. the upsampled
    /// triplane (both laid out like `Triplane::data`).
    pub fn upsample_3d_backward(
        &self,
        t: &Upsample3dTrace,
        w: &[f64],
        gout: &Triplane,
        mut grads: Option<&mut [f64]>,
    ) -> (Triplane, Vec<f64>) {
        let p = &self.params.values;
        let (n, c) = (t.n, gout.c);
        let gmap = gout.to_feature_map();
        let mut gw = vec![0.0; self.config.w_dim];
        let mut gin = FeatureMap::zeros(3 * c, n, n);
        let big = c * 4 * n * n;
        for (k, (bt, h)) in t.planes.iter().enumerate() {
            let g = FeatureMap::from_vec(c, 2 * n, 2 * n, gmap.data[k * big..(k + 1) * big].to_vec());
            let gh = self.up3d_out.backward(p, h, &g, grads.as_deref_mut(), true, true);
            let mut gb = self.up3d.backward(p, bt, w, gh, grads.as_deref_mut(), &mut gw);
            for (a, b) in gb.data.iter_mut().zip(&g.data) {
                *a += b;
            }
            let gp = resize_bilinear_backward(&gb, n, n, true);
            gin.data[k * c * n * n..(k + 1) * c * n * n].copy_from_slice(&gp.data);
        }
        let tp = Triplane::from_feature_map(&gin, gout.extent).expect("gradient map has triplane shape");
        (tp, gw)
    }

    /// Indices of parameters whose name starts with any of `prefixes`.
    pub fn group_mask(&self, prefixes: &[&str]) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for e in &self.params.entries {
            if prefixes.iter().any(|p| e.name.starts_with(p)) {
                let len: usize = e.shape.iter().product();
                mask[e.offset..e.offset + len].fill(true);
            }
        }
        mask
    }
}

/// `(1 − t)·w1 + t·w2`.
pub fn interpolate(w1: &[f64], w2: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if w1.len() != w2.len() {
        return Err(Error::Contract("latents differ in length".into()));
    }
    Ok(w1
        .iter()
        .zip(w2)
        .map(|(a, b)| if t == 0.0 { *a } else if t == 1.0 { *b } else { (1.0 - t) * a + t * b })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng as _;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            z_dim: 6,
            w_dim: 5,
            mapping_layers: 2,
            mapping_lr_mul: 0.5,
            base_resolution: 8,
            triplane_channels: 4,
            synthesis_channels: 4,
            upsampler2d_channels: 3,
            upsampler2d_factor: 2,
            upsampler3d_channels: 3,
            extent: 0.7,
            decoder: DecoderConfig { features: 4, hidden: vec![6] },
        }
    }

    fn perturb(g: &mut Generator, seed: u64) {
        // Non-zero residual branches so every parameter gets a gradient.
        let mut r = rng_for(seed, "perturb", &[]);
        for v in g.params.values.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }

    fn rel_ok(fd: f64, an: f64) -> bool {
        (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6)
    }

    fn probe(len: usize, seed: u64) -> Vec<f64> {
        let mut r = rng_for(seed, "probe", &[]);
        (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mapping_is_deterministic_and_differentiable() {
        let g = Generator::new(tiny(), 1).unwrap();
        let z = g.sample_z(3);
        assert_eq!(g.map_latent(&z).unwrap(), g.map_latent(&z).unwrap());
        assert!(g.map_latent(&z[..3]).is_err());
        let dir = probe(5, 4);
        let loss = |g: &Generator| g.map_latent(&z).unwrap().iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
        let (_, t) = g.map_latent_traced(&z).unwrap();
        let mut grads = g.params.zeros_like();
        g.map_latent_backward(&t, &dir, &mut grads);
        let mask = g.group_mask(&[GROUP_MAPPING]);
        let h = 1e-6;
        for i in (0..g.params.len()).filter(|i| mask[*i]) {
            let mut gp = g.clone();
            gp.params.values[i] += h;
            let mut gm = g.clone();
            gm.params.values[i] -= h;
            let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
            assert!(rel_ok(fd, grads[i]), "param {i}: {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn synthesis_shape_and_injectivity() {
        let g = Generator::new(GeneratorConfig::default(), 2).unwrap();
        let w1 = g.map_latent(&g.sample_z(1)).unwrap();
        let w2 = g.map_latent(&g.sample_z(2)).unwrap();
        let a = g.synthesize_triplane(&w1).unwrap();
        let b = g.synthesize_triplane(&w2).unwrap();
        assert_eq!((a.n, a.c, a.data.len()), (32, 16, 3 * 32 * 32 * 16));
        let diff: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        assert!(diff > 0.0);
    }

    #[test]
    fn synthesis_gradients_match_finite_differences() {
        let mut g = Generator::new(tiny(), 3).unwrap();
        perturb(&mut g, 3);
        let w = probe(5, 5);
        let dir = probe(3 * 8 * 8 * 4, 6);
        let loss = |g: &Generator, w: &[f64]| {
            g.synthesize_triplane(w).unwrap().data.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>()
        };
        let (tp, t) = g.synthesize_traced(&w).unwrap();
        let gtp = Triplane { data: dir.clone(), ..tp };
        let mut grads = g.params.zeros_like();
        let gw = g.synthesize_backward(&t, &w, &gtp, &mut grads);
        let mask = g.group_mask(&[GROUP_SYNTHESIS]);
        let h = 1e-6;
        for i in (0..g.params.len()).filter(|i| mask[*i]).step_by(3) {
            let mut gp = g.clone();
            gp.params.values[i] += h;
            let mut gm = g.clone();
            gm.params.values[i] -= h;
            let fd = (loss(&gp, &w) - loss(&gm, &w)) / (2.0 * h);
            assert!(rel_ok(fd, grads[i]), "param {i}: {fd} vs {}", grads[i]);
        }
        for j in 0..w.len() {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (loss(&g, &wp) - loss(&g, &wm)) / (2.0 * h);
            assert!(rel_ok(fd, gw[j]), "w {j}: {fd} vs {}", gw[j]);
        }
    }

    #[test]
    fn upsample_2d_factor_four() {
        let mut g = Generator::new(GeneratorConfig { upsampler2d_factor: 4, ..tiny() }, 4).unwrap();
        let w = probe(5, 7);
        let raw = FeatureMap::from_vec(3, 4, 4, probe(48, 8).iter().map(|v| 0.5 + 0.4 * v).collect());
        assert_eq!(g.upsample_2d(&raw, &w).unwrap(), resize_bilinear(&raw, 16, 16, false));
        perturb(&mut g, 5);
        let dir = probe(3 * 256, 9);
        let loss = |raw: &FeatureMap| g.upsample_2d(raw, &w).unwrap().data.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
        let (_, t) = g.upsample_2d_traced(&raw, &w).unwrap();
        let (graw, _) = g.upsample_2d_backward(&t, &w, &FeatureMap::from_vec(3, 16, 16, dir.clone()), None);
        for i in 0..raw.data.len() {
            let (mut rp, mut rm) = (raw.clone(), raw.clone());
            rp.data[i] += 1e-6;
            rm.data[i] -= 1e-6;
            let fd = (loss(&rp) - loss(&rm)) / 2e-6;
            assert!(rel_ok(fd, graw.data[i]), "raw {i}: {fd} vs {}", graw.data[i]);
        }
        assert!(Generator::new(GeneratorConfig { upsampler2d_factor: 3, ..tiny() }, 4).is_err());
    }

    #[test]
    fn upsample_2d_doubles_resolution_and_differentiates() {
        let mut g = Generator::new(tiny(), 4).unwrap();
        let w = probe(5, 7);
        let raw = FeatureMap::from_vec(3, 4, 4, probe(48, 8).iter().map(|v| 0.5 + 0.4 * v).collect());
        let init = g.upsample_2d(&raw, &w).unwrap();
        assert_eq!(init.shape(), (3, 8, 8));
        assert_eq!(init, resize_bilinear(&raw, 8, 8, false));
        perturb(&mut g, 4);
        let dir = probe(3 * 64, 9);
        let loss = |g: &Generator, raw: &FeatureMap, w: &[f64]| {
            g.upsample_2d(raw, w).unwrap().data.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, t) = g.upsample_2d_traced(&raw, &w).unwrap();
        let mut grads = g.params.zeros_like();
        let (graw, gw) = g.upsample_2d_backward(&t, &w, &FeatureMap::from_vec(3, 8, 8, dir.clone()), Some(&mut grads));
        let h = 1e-6;
        let mask = g.group_mask(&[GROUP_UPSAMPLER2D]);
        for i in (0..g.params.len()).filter(|i| mask[*i]).step_by(2) {
            let mut gp = g.clone();
            gp.params.values[i] += h;
            let mut gm = g.clone();
            gm.params.values[i] -= h;
            let fd = (loss(&gp, &raw, &w) - loss(&gm, &raw, &w)) / (2.0 * h);
            assert!(rel_ok(fd, grads[i]), "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..raw.data.len() {
            let mut rp = raw.clone();
            rp.data[i] += h;
            let mut rm = raw.clone();
            rm.data[i] -= h;
            let fd = (loss(&g, &rp, &w) - loss(&g, &rm, &w)) / (2.0 * h);
            assert!(rel_ok(fd, graw.data[i]), "raw {i}: {fd} vs {}", graw.data[i]);
        }
        for j in 0..w.len() {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (loss(&g, &raw, &wp) - loss(&g, &raw, &wm)) / (2.0 * h);
            assert!(rel_ok(fd, gw[j]), "w {j}: {fd} vs {}", gw[j]);
        }
    }

    #[test]
    fn upsample_3d_starts_as_bilinear_and_differentiates() {
        let mut g = Generator::new(tiny(), 5).unwrap();
        let w = probe(5, 10);
        let tp = Triplane { data: probe(3 * 8 * 8 * 4, 11), ..Triplane::zeros(8, 4, 0.7).unwrap() };
        let up = g.upsample_3d(&tp, &w).unwrap();
        assert_eq!(up.n, 16);
        let map = tp.to_feature_map();
        for k in 0..3 {
            let plane = FeatureMap::from_vec(4, 8, 8, map.data[k * 256..(k + 1) * 256].to_vec());
            let expect = resize_bilinear(&plane, 16, 16, true);
            assert_eq!(&up.to_feature_map().data[k * 1024..(k + 1) * 1024], &expect.data[..]);
        }
        perturb(&mut g, 5);
        let dir = probe(3 * 16 * 16 * 4, 12);
        let loss = |g: &Generator, tp: &Triplane, w: &[f64]| {
            g.upsample_3d(tp, w).unwrap().data.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>()
        };
        let (up, t) = g.upsample_3d_traced(&tp, &w).unwrap();
        let mut grads = g.params.zeros_like();
        let (gtp, gw) = g.upsample_3d_backward(&t, &w, &Triplane { data: dir.clone(), ..up }, Some(&mut grads));
        let h = 1e-6;
        let mask = g.group_mask(&[GROUP_UPSAMPLER3D]);
        for i in (0..g.params.len()).filter(|i| mask[*i]).step_by(2) {
            let mut gp = g.clone();
            gp.params.values[i] += h;
            let mut gm = g.clone();
            gm.params.values[i] -= h;
            let fd = (loss(&gp, &tp, &w) - loss(&gm, &tp, &w)) / (2.0 * h);
            assert!(rel_ok(fd, grads[i]), "param {i}: {fd} vs {}", grads[i]);
        }
        for i in (0..tp.data.len()).step_by(7) {
            let mut p = tp.clone();
            p.data[i] += h;
            let mut m = tp.clone();
            m.data[i] -= h;
            let fd = (loss(&g, &p, &w) - loss(&g, &m, &w)) / (2.0 * h);
            assert!(rel_ok(fd, gtp.data[i]), "triplane {i}: {fd} vs {}", gtp.data[i]);
        }
        for j in 0..w.len() {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (loss(&g, &tp, &wp) - loss(&g, &tp, &wm)) / (2.0 * h);
            assert!(rel_ok(fd, gw[j]), "w {j}: {fd} vs {}", gw[j]);
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let (a, b) = (vec![0.1, -2.0, 3.3], vec![1.7, 0.4, -0.9]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let m = interpolate(&a, &b, 0.5).unwrap();
        for i in 0..3 {
            assert!((m[i] - (a[i] + b[i]) / 2.0).abs() < 1e-15);
        }
        assert!(interpolate(&a, &b, 1.5).is_err());
        assert!(interpolate(&a, &b, -0.1).is_err());
    }
}
