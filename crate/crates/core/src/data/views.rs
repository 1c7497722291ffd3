use super::raster::{resize_bilinear, resize_nearest, split_grid, Mask, Raster};
use super::scene::Sample;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::text::{tokenize, TokenSeq};

/// Network-ready inputs of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    /// Whole image resized to `H x W`.
    pub remote: Raster,
    /// Row-major `n_view x n_view` patches of the `n_view*H` resize, each `H x W`.
    pub close: Vec<Raster>,
    /// Ground truth at the supervision resolution `n_view*H`.
    pub mask_full: Mask,
    pub tokens: TokenSeq,
}

/// Remote view and close-view patches of an arbitrary image.
pub fn prepare_image_views(image: &Raster, cfg: &ModelConfig) -> Result<(Raster, Vec<Raster>)> {
    if image.channels != 3 {
        return Err(Error::Dimension("image must have 3 channels".into()));
    }
    let h = cfg.input_side;
    let remote = resize_bilinear(image, h, h);
    let close = if cfg.n_view == 1 {
        vec![remote.clone()]
    } else {
        let full = resize_bilinear(image, cfg.full_side(), cfg.full_side());
        split_grid(&full, cfg.n_view)?
    };
    Ok((remote, close))
}

pub fn prepare_views(
    sample: &Sample,
    cfg: &ModelConfig,
    vocab: &crate::text::Vocab,
) -> Result<ViewBundle> {
    let (remote, close) = prepare_image_views(&sample.image, cfg)?;
    let side = cfg.full_side();
    let mask_full = resize_nearest(&sample.mask, side, side);
    let tokens = tokenize(&sample.expression, cfg.lang_len, vocab)?;
    Ok(ViewBundle {
        remote,
        close,
        mask_full,
        tokens,
    })
}
