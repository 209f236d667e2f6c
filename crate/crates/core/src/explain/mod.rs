//! Visual explanations: Grad-CAM, contrastive maps and their rendering.

mod cam;
mod render;

pub use cam::{contrastive_cam, contrastive_maps, gradcam, CamMode, ContrastLoss, ExplanationMap};
pub use render::{
    colormap, overlay, quantize, read_pnm, render, upsample_bilinear, write_pgm, write_ppm,
    OverlayImage, RenderedPaths,
};
