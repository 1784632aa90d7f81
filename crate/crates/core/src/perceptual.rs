//! Perceptual image distance.
//!
//! The default scorer is a frozen convolutional pyramid with seed-fixed
//! random weights. Features from each scale are unit-normalized per pixel,
//! compared by squared difference, averaged over space and summed over
//! scales. Any other scorer (for example a pretrained network) can be
//! plugged in through [`PerceptualDistance`].

use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::nn::{
    avg_pool2, avg_pool2_backward, lrelu_backward, lrelu_inplace, normalize_channels,
    normalize_channels_backward, Conv2d,
};
use crate::params::{ParamBuilder, Params};
use crate::rng::rng_for;

pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, a: &FeatureMap, b: &FeatureMap) -> Result<f64>;

    /// Distance and its gradient with respect to `a`; `b` is a constant.
    fn distance_grad(&self, a: &FeatureMap, b: &FeatureMap) -> Result<(f64, FeatureMap)>;
}

pub const PYRAMID_SEED: u64 = 0x5eed_1a7e;

/// Frozen three-scale random conv pyramid.
#[derive(Clone, Debug)]
pub struct RandomPyramid {
    convs: Vec<Conv2d>,
    params: Params,
}

struct Level {
    input: FeatureMap,
    pre: FeatureMap,
    normed: FeatureMap,
    norms: Vec<f64>,
}

impl Default for RandomPyramid {
    fn default() -> Self {
        Self::new(PYRAMID_SEED)
    }
}

impl RandomPyramid {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, "perceptual", &[]);
        let mut pb = ParamBuilder::new(&mut rng);
        let widths = [3, 8, 16, 16];
        let convs = (0..3)
            .map(|i| Conv2d::new(&mut pb, &format!("pyramid.{i}"), widths[i], widths[i + 1], 3, false))
            .collect();
        Self {
            convs,
            params: pb.finish(),
        }
    }

    fn levels(&self, img: &FeatureMap) -> Vec<Level> {
        let p = &self.params.values;
        let mut x = img.clone();
        for v in x.data.iter_mut() {
            *v = 2.0 * *v - 1.0;
        }
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&out.last().map(|l: &Level| l.post()).unwrap());
            }
            let pre = conv.forward(p, &x, false);
            let mut post = pre.clone();
            lrelu_inplace(&mut post.data);
            let (normed, norms) = normalize_channels(&post);
            out.push(Level {
                input: x.clone(),
                pre,
                normed,
                norms,
            });
        }
        out
    }

    fn check(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
        if !a.same_shape(b) || a.channels != 3 {
            return Err(Error::Contract(format!(
                "perceptual distance needs two RGB images of equal size, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if a.height % 4 != 0 || a.width % 4 != 0 {
            return Err(Error::Contract("perceptual distance needs sides divisible by 4".into()));
        }
        Ok(())
    }
}

impl Level {
    fn post(&self) -> FeatureMap {
        let mut post = self.pre.clone();
        lrelu_inplace(&mut post.data);
        post
    }
}

impl PerceptualDistance for RandomPyramid {
    fn distance(&self, a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
        Self::check(a, b)?;
        let (la, lb) = (self.levels(a), self.levels(b));
        Ok(la
            .iter()
            .zip(&lb)
            .map(|(x, y)| {
                let d: f64 = x.normed.data.iter().zip(&y.normed.data).map(|(u, v)| (u - v) * (u - v)).sum();
                d / x.normed.plane() as f64
            })
            .sum())
    }

    fn distance_grad(&self, a: &FeatureMap, b: &FeatureMap) -> Result<(f64, FeatureMap)> {
        Self::check(a, b)?;
        let p = &self.params.values;
        let (la, lb) = (self.levels(a), self.levels(b));
        let mut total = 0.0;
        // Gradient flowing into the post-activation of the current level
        // from the level above.
        let mut carry: Option<FeatureMap> = None;
        for i in (0..la.len()).rev() {
            let (x, y) = (&la[i], &lb[i]);
            let scale = 1.0 / x.normed.plane() as f64;
            let mut g_norm = x.normed.clone();
            let mut d = 0.0;
            for (g, v) in g_norm.data.iter_mut().zip(&y.normed.data) {
                let diff = *g - v;
                d += diff * diff;
                *g = 2.0 * diff * scale;
            }
            total += d * scale;
            let mut g_post = normalize_channels_backward(&x.normed, &x.norms, &g_norm);
            if let Some(c) = carry.take() {
                for (g, v) in g_post.data.iter_mut().zip(&c.data) {
                    *g += v;
                }
            }
            lrelu_backward(&x.pre.data, &mut g_post.data);
            let g_in = self.convs[i].backward(p, &x.input, &g_post, None, false, true);
            carry = Some(if i > 0 {
                avg_pool2_backward(&g_in, la[i - 1].pre.height, la[i - 1].pre.width)
            } else {
                g_in
            });
        }
        let mut g = carry.unwrap();
        for v in g.data.iter_mut() {
            *v *= 2.0;
        }
        Ok((total, g))
    }
}
