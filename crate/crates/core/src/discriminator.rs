//! Convolutional critics.
//!
//! Every critic exposes its score, parameter gradients, the input gradient
//! `∂D/∂I`, and the parameter gradient of `⟨∂D/∂I, v⟩` for a fixed `v`. The
//! last one is what the gradient penalty needs: `∇θ‖∂D/∂I‖² = 2∇θ⟨∂D/∂I, v⟩`
//! at `v = ∂D/∂I`.
//!
//! The conv critic contains only piecewise-linear layers, so `⟨∂D/∂I, v⟩` is
//! the output of a *tangent pass*: the same network run on `v` without
//! biases, with every leaky-ReLU slope frozen to the value it had on `I`.
//! Back-propagating through the tangent pass gives the penalty's parameter
//! gradient exactly (almost everywhere).

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::nn::{avg_pool2, avg_pool2_backward, lrelu_slope, Conv2d, Linear};
use crate::params::{ParamBuilder, Params};
use crate::rng::rng_for;

/// Anything that scores images.
pub trait Critic {
    fn num_params(&self) -> usize;

    fn score(&self, image: &FeatureMap, pose: &CameraPose) -> Result<f64>;

    /// Score, plus `g·∂D/∂θ` accumulated into `grads` and, when asked,
    /// `g·∂D/∂I`.
    fn score_backward(
        &self,
        image: &FeatureMap,
        pose: &CameraPose,
        g: f64,
        grads: Option<&mut [f64]>,
        need_input_grad: bool,
    ) -> Result<(f64, Option<FeatureMap>)>;

    /// `∂D/∂I`, or `None` for critics that cannot differentiate their input.
    fn input_gradient(&self, image: &FeatureMap, pose: &CameraPose) -> Option<FeatureMap>;

    /// Accumulate `scale·∇θ⟨∂D/∂I, v⟩` into `grads`.
    fn input_gradient_param_grad(
        &self,
        image: &FeatureMap,
        pose: &CameraPose,
        v: &FeatureMap,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// Channel cap; stage `i` has `min(base·2^i, max)` channels.
    pub base_channels: usize,
    pub max_channels: usize,
    pub hidden: usize,
    /// Width of the camera-pose embedding; `None` disables pose input.
    pub pose_embedding: Option<usize>,
}

impl DiscriminatorConfig {
    pub fn main(resolution: usize) -> Self {
        Self {
            resolution,
            base_channels: 8,
            max_channels: 32,
            hidden: 64,
            pose_embedding: Some(64),
        }
    }

    /// Pose-free critic over 64² patches.
    pub fn patch() -> Self {
        Self {
            resolution: 64,
            base_channels: 8,
            max_channels: 32,
            hidden: 64,
            pose_embedding: None,
        }
    }

    fn stages(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 4 || !r.is_power_of_two() {
            return Err(Error::Config(format!("critic resolution must be a power of two ≥ 4, got {r}")));
        }
        if self.base_channels == 0 || self.max_channels == 0 || self.hidden == 0 || self.pose_embedding == Some(0) {
            return Err(Error::Config("critic widths must be positive".into()));
        }
        Ok(())
    }
}

/// Conv tower (average-pooled down to 4×4), a fully-connected image head,
/// an optional pose embedding of the flattened extrinsic concatenated with
/// it, and a scalar output.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    convs: Vec<Conv2d>,
    fc_image: Linear,
    fc_pose: Option<Linear>,
    fc_joint: Linear,
    fc_out: Linear,
    pub params: Params,
}

#[derive(Clone, Debug)]
struct Trace {
    conv_in: Vec<FeatureMap>,
    /// Leaky-ReLU slopes per conv stage (from the value pass).
    conv_slope: Vec<Vec<f64>>,
    flat: Vec<f64>,
    image_slope: Vec<f64>,
    pose_in: Vec<f64>,
    pose_slope: Vec<f64>,
    joint_in: Vec<f64>,
    joint_slope: Vec<f64>,
    out_in: Vec<f64>,
    score: f64,
}

fn apply_slopes(pre: &mut [f64], slopes: &[f64]) {
    for (v, s) in pre.iter_mut().zip(slopes) {
        *v *= s;
    }
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "critic", &[]);
        let mut pb = ParamBuilder::new(&mut rng);
        let widths: Vec<usize> = (0..config.stages())
            .map(|i| (config.base_channels << i).min(config.max_channels))
            .collect();
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let cin = if i == 0 { 3 } else { widths[i - 1] };
                Conv2d::new(&mut pb, &format!("critic.conv{i}"), cin, c, 3, true)
            })
            .collect();
        let last = *widths.last().unwrap();
        let h = config.hidden;
        let fc_image = Linear::new(&mut pb, "critic.fc_image", last * 16, h, Some(0.0));
        let fc_pose = config
            .pose_embedding
            .map(|e| Linear::new(&mut pb, "critic.fc_pose", 16, e, Some(0.0)));
        let joint_in = h + config.pose_embedding.unwrap_or(0);
        let fc_joint = Linear::new(&mut pb, "critic.fc_joint", joint_in, h, Some(0.0));
        let fc_out = Linear::new(&mut pb, "critic.fc_out", h, 1, Some(0.0));
        Ok(Self {
            config,
            convs,
            fc_image,
            fc_pose,
            fc_joint,
            fc_out,
            params: pb.finish(),
        })
    }

    fn check(&self, image: &FeatureMap) -> Result<()> {
        let r = self.config.resolution;
        if image.shape() != (3, r, r) {
            return Err(Error::Contract(format!("critic expects 3×{r}×{r}, got {:?}", image.shape())));
        }
        Ok(())
    }

    /// Value pass when `slopes_from` is `None`; otherwise the tangent pass
    /// (no biases, slopes frozen from the given value trace, zero pose
    /// tangent).
    fn run(&self, image: &FeatureMap, pose: &CameraPose, slopes_from: Option<&Trace>) -> Trace {
        let p = &self.params.values;
        let tangent = slopes_from.is_some();
        let bias = !tangent;
        let mut x = image.clone();
        for v in x.data.iter_mut() {
            // Images live in [0, 1]; the tower sees [-1, 1].
            *v = if tangent { 2.0 * *v } else { 2.0 * *v - 1.0 };
        }
        let mut conv_in = Vec::with_capacity(self.convs.len());
        let mut conv_slope = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&x);
            }
            let mut pre = conv.forward(p, &x, bias);
            let slopes = match slopes_from {
                Some(t) => t.conv_slope[i].clone(),
                None => pre.data.iter().map(|v| lrelu_slope(*v)).collect(),
            };
            apply_slopes(&mut pre.data, &slopes);
            conv_in.push(x);
            conv_slope.push(slopes);
            x = pre;
        }
        let flat = x.data;
        let mut img = self.fc_image.forward(p, &flat, bias);
        let image_slope = match slopes_from {
            Some(t) => t.image_slope.clone(),
            None => img.iter().map(|v| lrelu_slope(*v)).collect(),
        };
        apply_slopes(&mut img, &image_slope);
        let pose_in: Vec<f64> = pose.flat_extrinsic().to_vec();
        let (mut joint_in, mut pose_slope) = (img, Vec::new());
        if let Some(fc) = &self.fc_pose {
            let emb = match slopes_from {
                Some(t) => {
                    pose_slope = t.pose_slope.clone();
                    vec![0.0; fc.fan_out]
                }
                None => {
                    let mut e = fc.forward(p, &pose_in, true);
                    pose_slope = e.iter().map(|v| lrelu_slope(*v)).collect();
                    apply_slopes(&mut e, &pose_slope);
                    e
                }
            };
            joint_in.extend(emb);
        }
        let mut out_in = self.fc_joint.forward(p, &joint_in, bias);
        let joint_slope = match slopes_from {
            Some(t) => t.joint_slope.clone(),
            None => out_in.iter().map(|v| lrelu_slope(*v)).collect(),
        };
        apply_slopes(&mut out_in, &joint_slope);
        let score = self.fc_out.forward(p, &out_in, bias)[0];
        Trace {
            conv_in,
            conv_slope,
            flat,
            image_slope,
            pose_in,
            pose_slope,
            joint_in,
            joint_slope,
            out_in,
            score,
        }
    }

    /// Reverse pass through a value or tangent trace.
    fn back(&self, t: &Trace, g: f64, mut grads: Option<&mut [f64]>, need_input_grad: bool, tangent: bool) -> Option<FeatureMap> {
        let p = &self.params.values;
        let bias = !tangent;
        let mut g_out_in = self.fc_out.backward(p, &t.out_in, &[g], grads.as_deref_mut(), bias);
        apply_slopes(&mut g_out_in, &t.joint_slope);
        let g_joint = self.fc_joint.backward(p, &t.joint_in, &g_out_in, grads.as_deref_mut(), bias);
        let h = self.config.hidden;
        if let (Some(fc), false) = (&self.fc_pose, tangent) {
            let mut ge = g_joint[h..].to_vec();
            apply_slopes(&mut ge, &t.pose_slope);
            fc.backward(p, &t.pose_in, &ge, grads.as_deref_mut(), true);
        }
        let mut g_img = g_joint[..h].to_vec();
        apply_slopes(&mut g_img, &t.image_slope);
        let g_flat = self.fc_image.backward(p, &t.flat, &g_img, grads.as_deref_mut(), bias);
        let last = self.convs.len() - 1;
        let lc = self.convs[last].cout;
        let mut g = FeatureMap::from_vec(lc, 4, 4, g_flat);
        for i in (0..self.convs.len()).rev() {
            apply_slopes(&mut g.data, &t.conv_slope[i]);
            let need = i > 0 || need_input_grad;
            let gin = self.convs[i].backward(p, &t.conv_in[i], &g, grads.as_deref_mut(), bias, need);
            if i > 0 {
                let (ih, iw) = (t.conv_in[i - 1].height, t.conv_in[i - 1].width);
                g = avg_pool2_backward(&gin, ih, iw);
            } else if need_input_grad {
                g = gin;
            }
        }
        need_input_grad.then(|| {
            for v in g.data.iter_mut() {
                *v *= 2.0;
            }
            g
        })
    }
}

impl Critic for Discriminator {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn score(&self, image: &FeatureMap, pose: &CameraPose) -> Result<f64> {
        self.check(image)?;
        Ok(self.run(image, pose, None).score)
    }

    fn score_backward(
        &self,
        image: &FeatureMap,
        pose: &CameraPose,
        g: f64,
        grads: Option<&mut [f64]>,
        need_input_grad: bool,
    ) -> Result<(f64, Option<FeatureMap>)> {
        self.check(image)?;
        let t = self.run(image, pose, None);
        let gi = self.back(&t, g, grads, need_input_grad, false);
        Ok((t.score, gi))
    }

    fn input_gradient(&self, image: &FeatureMap, pose: &CameraPose) -> Option<FeatureMap> {
        self.score_backward(image, pose, 1.0, None, true).ok()?.1
    }

    fn input_gradient_param_grad(
        &self,
        image: &FeatureMap,
        pose: &CameraPose,
        v: &FeatureMap,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        self.check(image)?;
        self.check(v)?;
        let value = self.run(image, pose, None);
        let tangent = self.run(v, pose, Some(&value));
        self.back(&tangent, scale, Some(grads), false, true);
        Ok(())
    }
}

/// `D(I) = ⟨a, I⟩ + b`, pose ignored. With `a = 0` it is a constant critic.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic {
    pub a: FeatureMap,
    pub b: f64,
}

impl LinearCritic {
    pub fn constant(channels: usize, height: usize, width: usize, b: f64) -> Self {
        Self {
            a: FeatureMap::zeros(channels, height, width),
            b,
        }
    }

    fn check(&self, image: &FeatureMap) -> Result<()> {
        if !image.same_shape(&self.a) {
            return Err(Error::Contract(format!(
                "linear critic expects {:?}, got {:?}",
                self.a.shape(),
                image.shape()
            )));
        }
        Ok(())
    }
}

/// Parameters are `a` (flattened) followed by `b`.
impl Critic for LinearCritic {
    fn num_params(&self) -> usize {
        self.a.data.len() + 1
    }

    fn score(&self, image: &FeatureMap, _: &CameraPose) -> Result<f64> {
        self.check(image)?;
        Ok(self.a.data.iter().zip(&image.data).map(|(a, x)| a * x).sum::<f64>() + self.b)
    }

    fn score_backward(
        &self,
        image: &FeatureMap,
        pose: &CameraPose,
        g: f64,
        grads: Option<&mut [f64]>,
        need_input_grad: bool,
    ) -> Result<(f64, Option<FeatureMap>)> {
        let s = self.score(image, pose)?;
        if let Some(grads) = grads {
            let n = self.a.data.len();
            for (o, x) in grads[..n].iter_mut().zip(&image.data) {
                *o += g * x;
            }
            grads[n] += g;
        }
        let gi = need_input_grad.then(|| {
            let mut a = self.a.clone();
            a.data.iter_mut().for_each(|v| *v *= g);
            a
        });
        Ok((s, gi))
    }

    fn input_gradient(&self, _: &FeatureMap, _: &CameraPose) -> Option<FeatureMap> {
        Some(self.a.clone())
    }

    fn input_gradient_param_grad(
        &self,
        image: &FeatureMap,
        _: &CameraPose,
        v: &FeatureMap,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        self.check(image)?;
        for (o, x) in grads.iter_mut().zip(&v.data) {
            *o += scale * x;
        }
        Ok(())
    }
}
