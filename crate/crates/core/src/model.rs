//! The full network: text encoder, shared backbone, CVWin after every stage,
//! and the CDAD decoder.

use candle_core::{DType, Device, Tensor};

use crate::backbone::Backbone;
use crate::cdad::{Cdad, DecoderState};
use crate::config::{DecoderKind, ModelConfig};
use crate::cvwin::{CvwinOutput, CvwinStage};
use crate::data::{Raster, ViewBundle};
use crate::error::{Error, Result};
use crate::nn::{join_views, take_views, Mode, ParamStore};
use crate::text::{LanguageFeature, TextEncoder, TokenSeq};

/// Pixel normalization applied to `[0, 1]` images.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Network inputs of a batch.
pub struct Batch {
    /// `(B * (1 + n_view^2), H, H, 3)`, per sample `[remote, patch_0, ..]`.
    pub images: Tensor,
    pub ids: Tensor,
    pub token_mask: Tensor,
    /// `(B, N^view H, N^view H)` binary ground truth, when known.
    pub target: Option<Tensor>,
    pub size: usize,
}

#[derive(Clone)]
pub struct CsiNet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    text: TextEncoder,
    backbone: Backbone,
    cvwin: Vec<CvwinStage>,
    decoder: Cdad,
}

fn push_raster(out: &mut Vec<f64>, r: &Raster) {
    out.extend(r.data.iter().map(|&v| (v as f64 - PIXEL_MEAN) / PIXEL_STD));
}

impl CsiNet {
    pub fn new(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        if cfg.switches.decoder == DecoderKind::Arc {
            return Err(Error::NotImplemented("decoder=arc".into()));
        }
        let violations = cfg.validate();
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let params = ParamStore::new(dtype, cfg.seed);
        let text = TextEncoder::new(&params, cfg)?;
        let backbone = Backbone::new(&params, cfg)?;
        let cvwin = (1..=4)
            .map(|i| CvwinStage::new(&params, cfg, i))
            .collect::<Result<_>>()?;
        let decoder = Cdad::new(&params, cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            text,
            backbone,
            cvwin,
            decoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.count_trainable()
    }

    /// Stack view bundles into tensors.
    pub fn batch(&self, bundles: &[&ViewBundle]) -> Result<Batch> {
        if bundles.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let cfg = &self.cfg;
        let h = cfg.input_side;
        let per = cfg.views_per_sample();
        let mut pixels = Vec::with_capacity(bundles.len() * per * h * h * 3);
        for b in bundles {
            if b.close.len() != cfg.n_view * cfg.n_view {
                return Err(Error::Dimension(format!(
                    "{} close patches, expected {}",
                    b.close.len(),
                    cfg.n_view * cfg.n_view
                )));
            }
            for r in std::iter::once(&b.remote).chain(&b.close) {
                if r.shape() != (h, h, 3) {
                    return Err(Error::Dimension(format!(
                        "view of shape {:?}, expected ({h}, {h}, 3)",
                        r.shape()
                    )));
                }
                push_raster(&mut pixels, r);
            }
        }
        let n = bundles.len();
        let images =
            Tensor::from_vec(pixels, (n * per, h, h, 3), &Device::Cpu)?.to_dtype(self.dtype())?;
        let seqs: Vec<&TokenSeq> = bundles.iter().map(|b| &b.tokens).collect();
        let (ids, token_mask) = self.text.batch_tensors(&seqs, self.dtype())?;
        let side = cfg.full_side();
        let mut gt = Vec::with_capacity(n * side * side);
        for b in bundles {
            if b.mask_full.shape() != (side, side, 1) {
                return Err(Error::Dimension(format!(
                    "mask of shape {:?}, expected ({side}, {side}, 1)",
                    b.mask_full.shape()
                )));
            }
            gt.extend(
                b.mask_full
                    .data
                    .iter()
                    .map(|&v| f64::from(u8::from(v != 0))),
            );
        }
        let target = Tensor::from_vec(gt, (n, side, side), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(Batch {
            images,
            ids,
            token_mask,
            target: Some(target),
            size: n,
        })
    }

    pub fn encode_text(&self, batch: &Batch) -> Result<LanguageFeature> {
        self.text.forward(&batch.ids, &batch.token_mask)
    }

    /// CVWin-enhanced features of all four stages.
    pub fn forward_pyramid(&self, batch: &Batch) -> Result<Vec<CvwinOutput>> {
        let sw = self.cfg.switches;
        let k = self.cfg.n_view * self.cfg.n_view;
        let per = 1 + k;
        let lang = self.encode_text(batch)?;
        let mut input = match (sw.has_remote(), sw.has_close()) {
            (true, true) => batch.images.clone(),
            (true, false) => take_views(&batch.images, per, 0, 1)?,
            (false, true) => take_views(&batch.images, per, 1, k)?,
            (false, false) => unreachable!("view mode keeps at least one view"),
        };
        let mut out = Vec::with_capacity(4);
        for (i, stage) in self.cvwin.iter().enumerate() {
            let feat = self.backbone.encode_stage(&input, i + 1)?;
            let (remote, close) = match (sw.has_remote(), sw.has_close()) {
                (true, true) => (
                    Some(take_views(&feat, per, 0, 1)?),
                    Some(take_views(&feat, per, 1, k)?),
                ),
                (true, false) => (Some(feat), None),
                _ => (None, Some(feat)),
            };
            let o = stage.forward(remote.as_ref(), close.as_ref(), &lang)?;
            input = match (&o.remote, &o.close) {
                (Some(r), Some(c)) => join_views(r, c)?,
                (Some(r), None) => r.clone(),
                (None, Some(c)) => c.clone(),
                (None, None) => unreachable!("stage keeps its views"),
            };
            out.push(o);
        }
        Ok(out)
    }

    pub fn forward_state(&self, batch: &Batch, mode: Mode) -> Result<DecoderState> {
        let pyramid = self.forward_pyramid(batch)?;
        self.decoder.forward(&pyramid, mode)
    }

    /// `(B, N^view H, N^view H, 2)` probabilities; channel 1 is foreground.
    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_state(batch, mode)?.pred)
    }
}
