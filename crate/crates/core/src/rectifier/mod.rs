//! The degradation-aware generative prior as a pluggable interface, with
//! identity, oracle, and learned implementations. The learned variant is a
//! small from-scratch network preserving the mechanisms that matter:
//! single-step operation, frozen base plus low-rank residual adaptation,
//! projected skip injection, a subtractive residual bridge, and
//! spatio-temporal coordinated attention.

pub mod net;
pub mod nn;
pub mod train;

pub use net::{
    residual_bridge, stc_attention, LatentTensor, RectifierArch, RectifierNet, ReferenceSet,
    DOWNSAMPLE_FACTOR,
};
pub use nn::{AttentionParams, LowRankAdapter};
pub use train::{
    make_degradation_pairs, perceptual_proxy, train_rectifier, DegradationPair,
    RectifierTrainConfig, TrainTrace,
};

use crate::camera::ViewSample;
use crate::error::Result;
use crate::image::ImageRgb;
use crate::render::{render_no_tape, RenderOptions};
use crate::scene::SceneModel;

/// Everything a rectifier may want to know about the view being rectified.
pub struct RectifyContext<'a> {
    pub view: &'a ViewSample,
    pub timestamp: f64,
    /// Renders of other views at the same timestamp.
    pub spatial_images: &'a [ImageRgb],
    /// Renders of a short frame window around the timestamp.
    pub temporal_images: &'a [ImageRgb],
}

/// Maps a degraded rendering to a cleaned image in one forward pass.
pub trait Rectifier: Send + Sync {
    fn rectify(&self, render: &ImageRgb, ctx: &RectifyContext) -> Result<ImageRgb>;

    /// True when rectification is exactly the identity, letting callers skip
    /// the pseudo-supervision term (its loss and gradient are identically 0).
    fn is_identity(&self) -> bool {
        false
    }

    fn name(&self) -> &'static str;
}

/// Returns the render unchanged.
pub struct IdentityRectifier;

impl Rectifier for IdentityRectifier {
    fn rectify(&self, render: &ImageRgb, _ctx: &RectifyContext) -> Result<ImageRgb> {
        Ok(render.clone())
    }

    fn is_identity(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

/// Ignores the render and returns the ground-truth image for the requested
/// view and time, rendered from a reference scene.
pub struct OracleRectifier {
    pub scene: SceneModel,
    pub opts: RenderOptions,
}

impl Rectifier for OracleRectifier {
    fn rectify(&self, _render: &ImageRgb, ctx: &RectifyContext) -> Result<ImageRgb> {
        let assembled = self.scene.assemble(ctx.timestamp)?;
        let frame = render_no_tape(&assembled.primitives, ctx.view, &self.opts)?;
        Ok(frame.color)
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}

/// Runs the learned network: encodes the reference images provided in the
/// context, attends, bridges, decodes.
pub struct LearnedRectifier {
    pub net: RectifierNet,
    pub lambda_res: f64,
}

impl Rectifier for LearnedRectifier {
    fn rectify(&self, render: &ImageRgb, ctx: &RectifyContext) -> Result<ImageRgb> {
        let refs = ReferenceSet::from_images(&self.net, ctx.spatial_images, ctx.temporal_images)?;
        rectify(render, &refs, &self.net, self.lambda_res)
    }

    fn name(&self) -> &'static str {
        "learned"
    }
}

/// Single forward pass: encode → STC attention over the target and its
/// references → residual bridge → decode with projected skips → clamp.
pub fn rectify(
    input: &ImageRgb,
    refs: &ReferenceSet,
    net: &RectifierNet,
    lambda_res: f64,
) -> Result<ImageRgb> {
    net.rectify_image(input, refs, lambda_res)
}
