//! The two image branches of a generator.
//!
//! The image-space branch volume-renders the base triplane at the raw
//! resolution and super-resolves it with the 2D upsampler. The volumetric
//! branch renders the 3D-upsampled triplane directly at the output
//! resolution; it is view-consistent by construction.

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics, DEFAULT_FOV_DEG};
use crate::error::{Error, Result};
use crate::field::Triplane;
use crate::generator::{Generator, SynthesisTrace, Upsample2dTrace, Upsample3dTrace};
use crate::image::FeatureMap;
use crate::render::{render_backward, render_window, RenderConfig, RenderGrad, RenderTrace, TriplaneField, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Image2d,
    Volume3d,
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" | "image2d" => Ok(Branch::Image2d),
            "3d" | "volume3d" => Ok(Branch::Volume3d),
            _ => Err(Error::InvalidArgument(format!("unknown branch {s:?} (expected 2d or 3d)"))),
        }
    }
}

/// Output side of the image-space branch.
pub fn image_resolution(gen: &Generator, render: &RenderConfig) -> usize {
    render.raw_resolution * gen.config.upsampler2d_factor
}

pub fn intrinsics(resolution: usize) -> Result<Intrinsics> {
    Intrinsics::new(DEFAULT_FOV_DEG, resolution)
}

/// Everything needed to back-propagate through the image-space branch.
pub struct Image2dTrace {
    pub triplane: Triplane,
    pub synthesis: SynthesisTrace,
    pub render: RenderTrace,
    pub upsample: Upsample2dTrace,
}

pub fn render_2d_traced(
    gen: &Generator,
    w: &[f64],
    pose: &CameraPose,
    render: &RenderConfig,
    seed: u64,
) -> Result<(FeatureMap, Image2dTrace)> {
    let (triplane, synthesis) = gen.synthesize_traced(w)?;
    let intr = intrinsics(render.raw_resolution)?;
    let field = TriplaneField {
        triplane: &triplane,
        decoder: &gen.decoder,
    };
    let (raw, rtrace) = render_window(&field, pose, &intr, render, seed, Window::full(render.raw_resolution))?;
    let (img, upsample) = gen.upsample_2d_traced(&raw.rgb, w)?;
    Ok((
        img,
        Image2dTrace {
            triplane,
            synthesis,
            render: rtrace,
            upsample,
        },
    ))
}

pub fn render_2d(gen: &Generator, w: &[f64], pose: &CameraPose, render: &RenderConfig, seed: u64) -> Result<FeatureMap> {
    Ok(render_2d_traced(gen, w, pose, render, seed)?.0)
}

/// Image-space branch from an already synthesized base triplane.
pub fn render_2d_from_triplane(
    gen: &Generator,
    w: &[f64],
    triplane: &Triplane,
    pose: &CameraPose,
    render: &RenderConfig,
    seed: u64,
) -> Result<FeatureMap> {
    let intr = intrinsics(render.raw_resolution)?;
    let field = TriplaneField {
        triplane,
        decoder: &gen.decoder,
    };
    let (raw, _) = render_window(&field, pose, &intr, render, seed, Window::full(render.raw_resolution))?;
    gen.upsample_2d(&raw.rgb, w)
}

/// Gradient sinks for a backward pass; `None` skips that parameter block.
pub struct GradSinks<'a> {
    pub generator: Option<&'a mut [f64]>,
    pub decoder: Option<&'a mut [f64]>,
}

/// Back-propagates `∂L/∂image` of the image-space branch; returns `∂L/∂w`.
pub fn render_2d_backward(gen: &Generator, w: &[f64], t: &Image2dTrace, g_image: &FeatureMap, sinks: GradSinks) -> Vec<f64> {
    let GradSinks { mut generator, decoder } = sinks;
    let (g_raw, mut gw) = gen.upsample_2d_backward(&t.upsample, w, g_image, generator.as_deref_mut());
    let mut g_tp = vec![0.0; t.triplane.data.len()];
    render_backward(
        &t.triplane,
        &gen.decoder,
        &t.render,
        RenderGrad {
            rgb: &g_raw,
            alpha: None,
            depth: None,
        },
        &mut g_tp,
        decoder,
    );
    let g_tp = Triplane {
        data: g_tp,
        ..t.triplane.clone()
    };
    let mut scratch;
    let sink = match generator {
        Some(g) => g,
        None => {
            scratch = gen.params.zeros_like();
            &mut scratch[..]
        }
    };
    for (a, b) in gw.iter_mut().zip(gen.synthesize_backward(&t.synthesis, w, &g_tp, sink)) {
        *a += b;
    }
    gw
}

pub struct Volume3dTrace {
    pub upsampled: Triplane,
    pub upsample: Upsample3dTrace,
    pub render: RenderTrace,
}

/// Renders `window` of the volumetric branch at `resolution`. The base
/// triplane is passed in so callers can share it with the other branch.
pub fn render_3d_window_traced(
    gen: &Generator,
    w: &[f64],
    triplane: &Triplane,
    pose: &CameraPose,
    render: &RenderConfig,
    resolution: usize,
    window: Window,
    seed: u64,
) -> Result<(FeatureMap, Volume3dTrace)> {
    let (upsampled, upsample) = gen.upsample_3d_traced(triplane, w)?;
    let intr = intrinsics(resolution)?;
    let field = TriplaneField {
        triplane: &upsampled,
        decoder: &gen.decoder,
    };
    let (out, rtrace) = render_window(&field, pose, &intr, render, seed, window)?;
    Ok((
        out.rgb,
        Volume3dTrace {
            upsampled,
            upsample,
            render: rtrace,
        },
    ))
}

pub fn render_3d(gen: &Generator, w: &[f64], pose: &CameraPose, render: &RenderConfig, resolution: usize, seed: u64) -> Result<FeatureMap> {
    let tp = gen.synthesize_triplane(w)?;
    Ok(render_3d_window_traced(gen, w, &tp, pose, render, resolution, Window::full(resolution), seed)?.0)
}

/// Back-propagates into the 3D upsampler and decoder only; returns
/// `(∂L/∂base triplane, ∂L/∂w)`.
pub fn render_3d_backward(
    gen: &Generator,
    w: &[f64],
    t: &Volume3dTrace,
    g_image: &FeatureMap,
    sinks: GradSinks,
) -> (Triplane, Vec<f64>) {
    let GradSinks { generator, decoder } = sinks;
    let mut g_up = vec![0.0; t.upsampled.data.len()];
    render_backward(
        &t.upsampled,
        &gen.decoder,
        &t.render,
        RenderGrad {
            rgb: g_image,
            alpha: None,
            depth: None,
        },
        &mut g_up,
        decoder,
    );
    let g_up = Triplane {
        data: g_up,
        ..t.upsampled.clone()
    };
    gen.upsample_3d_backward(&t.upsample, w, &g_up, generator)
}

/// Renders one branch at the model's output resolution.
pub fn render_branch(gen: &Generator, branch: Branch, w: &[f64], pose: &CameraPose, render: &RenderConfig, seed: u64) -> Result<FeatureMap> {
    match branch {
        Branch::Image2d => render_2d(gen, w, pose, render, seed),
        Branch::Volume3d => render_3d(gen, w, pose, render, image_resolution(gen, render), seed),
    }
}
