//! Adversarial objectives, the gradient penalty and the branch-consistency
//! loss.

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::discriminator::Critic;
use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::nn::{sigmoid, softplus};
use crate::perceptual::PerceptualDistance;

/// `f(u) = −log(1 + e^{−u}) = −softplus(−u)`.
pub fn f_logistic(u: f64) -> f64 {
    -softplus(-u)
}

/// Which form of the critic objective to minimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConvention {
    /// `mean softplus(D(fake)) + mean softplus(−D(real)) + (γ/2)·R1`.
    #[default]
    Softplus,
    /// `mean f(D(fake)) + mean f(−D(real)) + (γ/2)·R1`, with `f` as written
    /// in [`f_logistic`].
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// `γ`; the penalty enters the critic loss as `(γ/2)·mean‖∂D/∂I‖²`.
    pub r1_weight: f64,
    pub consistency_weight: f64,
    pub patch_gan_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            r1_weight: 3.0,
            consistency_weight: 1.0,
            patch_gan_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.r1_weight, self.consistency_weight, self.patch_gan_weight]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub type Batch = [(FeatureMap, CameraPose)];

#[derive(Clone, Debug, PartialEq)]
pub struct DLoss {
    pub total: f64,
    pub adversarial: f64,
    /// Mean squared input-gradient norm on reals (before the `γ/2` factor).
    pub r1: f64,
    pub real_scores: Vec<f64>,
    pub fake_scores: Vec<f64>,
}

fn nonempty(batch: &Batch, what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract(format!("{what} batch is empty")));
    }
    Ok(())
}

/// Critic loss; parameter gradients are accumulated into `grads` when given.
pub fn d_loss<C: Critic + ?Sized>(
    d: &C,
    fakes: &Batch,
    reals: &Batch,
    gamma: f64,
    convention: LossConvention,
    mut grads: Option<&mut [f64]>,
) -> Result<DLoss> {
    nonempty(fakes, "fake")?;
    nonempty(reals, "real")?;
    let (nf, nr) = (fakes.len() as f64, reals.len() as f64);
    let mut adversarial = 0.0;
    let mut fake_scores = Vec::with_capacity(fakes.len());
    for (img, pose) in fakes {
        let s = d.score(img, pose)?;
        let (term, slope) = match convention {
            LossConvention::Softplus => (softplus(s), sigmoid(s)),
            LossConvention::Literal => (f_logistic(s), sigmoid(-s)),
        };
        adversarial += term / nf;
        if let Some(g) = grads.as_deref_mut() {
            d.score_backward(img, pose, slope / nf, Some(g), false)?;
        }
        fake_scores.push(s);
    }
    let mut r1 = 0.0;
    let mut real_scores = Vec::with_capacity(reals.len());
    for (img, pose) in reals {
        let s = d.score(img, pose)?;
        let (term, slope) = match convention {
            LossConvention::Softplus => (softplus(-s), -sigmoid(-s)),
            LossConvention::Literal => (f_logistic(-s), -sigmoid(s)),
        };
        adversarial += term / nr;
        let gi = d
            .input_gradient(img, pose)
            .ok_or_else(|| Error::Contract("critic cannot differentiate its input".into()))?;
        r1 += gi.data.iter().map(|v| v * v).sum::<f64>() / nr;
        if let Some(g) = grads.as_deref_mut() {
            d.score_backward(img, pose, slope / nr, Some(g), false)?;
            if gamma > 0.0 {
                // ∇θ (γ/2)‖v‖² = γ·∇θ⟨∂D/∂I, v⟩ at v = ∂D/∂I.
                d.input_gradient_param_grad(img, pose, &gi, gamma / nr, g)?;
            }
        }
        real_scores.push(s);
    }
    Ok(DLoss {
        total: adversarial + 0.5 * gamma * r1,
        adversarial,
        r1,
        real_scores,
        fake_scores,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GLoss {
    pub loss: f64,
    pub scores: Vec<f64>,
    /// `∂L_G/∂image` per fake.
    pub image_grads: Vec<FeatureMap>,
}

/// Non-saturating generator loss `mean softplus(−D(fake))`.
pub fn g_loss<C: Critic + ?Sized>(d: &C, fakes: &Batch) -> Result<GLoss> {
    nonempty(fakes, "fake")?;
    let n = fakes.len() as f64;
    let mut out = GLoss {
        loss: 0.0,
        scores: Vec::with_capacity(fakes.len()),
        image_grads: Vec::with_capacity(fakes.len()),
    };
    for (img, pose) in fakes {
        let s = d.score(img, pose)?;
        out.loss += softplus(-s) / n;
        let (_, gi) = d.score_backward(img, pose, -sigmoid(-s) / n, None, true)?;
        out.scores.push(s);
        out.image_grads.push(gi.ok_or_else(|| Error::Contract("critic cannot differentiate its input".into()))?);
    }
    Ok(out)
}

/// `mean ‖∂D/∂I‖²` over a batch of reals.
pub fn r1_penalty<C: Critic + ?Sized>(d: &C, reals: &Batch) -> Result<f64> {
    nonempty(reals, "real")?;
    let mut total = 0.0;
    for (img, pose) in reals {
        let gi = d
            .input_gradient(img, pose)
            .ok_or_else(|| Error::Contract("critic cannot differentiate its input".into()))?;
        total += gi.data.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / reals.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Consistency {
    pub value: f64,
    pub grad_3d: FeatureMap,
    /// Always zero: the image-space branch is a fixed target.
    pub grad_2d: FeatureMap,
}

/// Perceptual distance from the volumetric render to the image-space render,
/// with the latter treated as a constant.
pub fn consistency_loss(i3d: &FeatureMap, i2d: &FeatureMap, perceptual: &dyn PerceptualDistance) -> Result<Consistency> {
    if !i3d.same_shape(i2d) {
        return Err(Error::Contract(format!(
            "consistency needs equal sizes, got {:?} and {:?}",
            i3d.shape(),
            i2d.shape()
        )));
    }
    let (value, grad_3d) = perceptual.distance_grad(i3d, i2d)?;
    Ok(Consistency {
        value,
        grad_3d,
        grad_2d: FeatureMap::zeros(i2d.channels, i2d.height, i2d.width),
    })
}
