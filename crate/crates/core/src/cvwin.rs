//! Cross-view window attention.
//!
//! Per stage and per view branch, language is first aligned to every pixel by
//! cross-attention (pixels query words) and gate-fused into the vision feature.
//! The two branches are then resized so both split into the same number of
//! windows; the remote window `(w1, w2)` and the close window `(w1, w2)` cover
//! the same image content, with the close window holding `n_view^2` times the
//! tokens. Attention runs only between paired windows, in both directions, and
//! the exchanged features are folded back into each branch by a residual 1x1
//! map over the channel concatenation.

use candle_core::{Tensor, D};

use crate::config::{AblationSwitches, CvwinVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    assemble_grid, attention, key_mask_bias, resize_bilinear, split_grid, Linear, ParamStore,
};
use crate::text::LanguageFeature;

/// Pixels query words: `softmax(q(V) k(T)^T / sqrt(C)) v(T)`, padded words masked.
#[derive(Clone)]
pub struct LanguageAlign {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl LanguageAlign {
    pub fn new(ps: &ParamStore, name: &str, c: usize, lang_dim: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            q: Linear::new(&ps, "q", c, c, true)?,
            k: Linear::new(&ps, "k", lang_dim, c, true)?,
            v: Linear::new(&ps, "v", lang_dim, c, true)?,
        })
    }

    /// `vision: (B, h, w, C)`, language batch `B`.
    pub fn forward(&self, vision: &Tensor, lang: &LanguageFeature) -> Result<Tensor> {
        let (b, h, w, c) = vision.dims4()?;
        if lang.features.dim(0)? != b {
            return Err(Error::Dimension(format!(
                "{b} feature maps but {} language features",
                lang.features.dim(0)?
            )));
        }
        let q = self.q.forward(vision)?.reshape((b, h * w, c))?;
        let k = self.k.forward(&lang.features)?;
        let v = self.v.forward(&lang.features)?;
        let bias = key_mask_bias(&lang.mask)?;
        Ok(attention(&q, &k, &v, c, Some(&bias))?.reshape((b, h, w, c))?)
    }
}

/// `out = V + r(tanh(g([F, V])) * f([F, V]))`.
#[derive(Clone)]
pub struct GateFuse {
    pub g: Linear,
    pub f: Linear,
    pub r: Linear,
}

impl GateFuse {
    pub fn new(ps: &ParamStore, name: &str, c: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            g: Linear::new(&ps, "gate", 2 * c, c, true)?,
            f: Linear::new(&ps, "value", 2 * c, c, true)?,
            r: Linear::new(&ps, "residual", c, c, true)?,
        })
    }

    pub fn gate(&self, aligned: &Tensor, vision: &Tensor) -> Result<Tensor> {
        let cat = Tensor::cat(&[aligned, vision], D::Minus1)?;
        Ok(self.g.forward(&cat)?.tanh()?)
    }

    pub fn forward(&self, aligned: &Tensor, vision: &Tensor) -> Result<Tensor> {
        if aligned.dims() != vision.dims() {
            return Err(Error::Dimension(format!(
                "gate inputs differ: {:?} vs {:?}",
                aligned.dims(),
                vision.dims()
            )));
        }
        let cat = Tensor::cat(&[aligned, vision], D::Minus1)?;
        let gate = self.g.forward(&cat)?.tanh()?;
        let gated = (gate * self.f.forward(&cat)?)?;
        Ok((vision + self.r.forward(&gated)?)?)
    }
}

/// Window layout shared by the two branches at one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    /// Windows per side, identical for both branches.
    pub n_win: usize,
    pub remote_window: usize,
    pub close_window: usize,
    /// Side the remote feature is resized to before splitting.
    pub remote_side: usize,
    pub close_side: usize,
}

impl WindowGrid {
    /// Layout for stage side `h`, window `s_win`, close grid factor `n_view`.
    pub fn new(h: usize, s_win: usize, n_view: usize) -> Self {
        let n_win = h.div_ceil(s_win);
        Self {
            n_win,
            remote_window: s_win,
            close_window: n_view * s_win,
            remote_side: n_win * s_win,
            close_side: n_win * n_view * s_win,
        }
    }
}

/// Resize `(B, h, w, C)` to `n_win * window` per side and cut it into
/// `(B * n_win^2, window^2, C)` token sets, windows row-major.
pub fn partition_windows(x: &Tensor, n_win: usize, window: usize) -> Result<Tensor> {
    let side = n_win * window;
    let c = x.dim(D::Minus1)?;
    let resized = resize_bilinear(x, side, side)?;
    let tiles = split_grid(&resized, n_win)?;
    Ok(tiles.reshape((tiles.dim(0)?, window * window, c))?)
}

/// Inverse grouping of [`partition_windows`] (without undoing the resize).
pub fn merge_windows(windows: &Tensor, n_win: usize, window: usize) -> Result<Tensor> {
    let (bw, t, c) = windows.dims3()?;
    if t != window * window {
        return Err(Error::Dimension(format!(
            "{t} tokens per window, expected {}",
            window * window
        )));
    }
    assemble_grid(&windows.reshape((bw, window, window, c))?, n_win)
}

/// Optional learned projections applied before the exchange.
#[derive(Clone)]
pub struct ExchangeProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl ExchangeProjections {
    pub fn new(ps: &ParamStore, name: &str, c: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            q: Linear::new(&ps, "q", c, c, false)?,
            k: Linear::new(&ps, "k", c, c, false)?,
            v: Linear::new(&ps, "v", c, c, false)?,
        })
    }
}

/// Paired-window cross-attention: each query window attends only to the key
/// window with the same index. Returns `(B * n_win^2, Tq, C)`.
pub fn window_cross_attention(
    query_windows: &Tensor,
    kv_windows: &Tensor,
    proj: Option<&ExchangeProjections>,
) -> Result<Tensor> {
    let (nq, _, c) = query_windows.dims3()?;
    let (nk, _, ck) = kv_windows.dims3()?;
    if nq != nk || c != ck {
        return Err(Error::Dimension(format!(
            "window grids differ: {nq} windows of {c} channels vs {nk} of {ck}"
        )));
    }
    match proj {
        None => attention(query_windows, kv_windows, kv_windows, c, None),
        Some(p) => attention(
            &p.q.forward(query_windows)?,
            &p.k.forward(kv_windows)?,
            &p.v.forward(kv_windows)?,
            c,
            None,
        ),
    }
}

/// Detail flows from close windows into remote tokens. Output is the merged
/// feature at the remote window-padded side.
pub fn exchange_close_to_remote(
    remote_windows: &Tensor,
    close_windows: &Tensor,
    grid: &WindowGrid,
    proj: Option<&ExchangeProjections>,
) -> Result<Tensor> {
    let out = window_cross_attention(remote_windows, close_windows, proj)?;
    merge_windows(&out, grid.n_win, grid.remote_window)
}

/// Global semantics flow from remote windows into close tokens. Output is the
/// merged feature at the close window-padded side.
pub fn exchange_remote_to_close(
    close_windows: &Tensor,
    remote_windows: &Tensor,
    grid: &WindowGrid,
    proj: Option<&ExchangeProjections>,
) -> Result<Tensor> {
    let out = window_cross_attention(close_windows, remote_windows, proj)?;
    merge_windows(&out, grid.n_win, grid.close_window)
}

/// Language fusion for one view branch.
#[derive(Clone)]
enum BranchFusion {
    Gate(LanguageAlign, GateFuse),
    /// Aligned language added directly to the vision feature.
    Sum(LanguageAlign),
    /// Vision modulated by a projected sentence vector, then mapped back residually.
    Pwam {
        sentence: Linear,
        out: Linear,
    },
    /// Concatenation of vision and a broadcast sentence vector.
    Iim {
        sentence: Linear,
        out: Linear,
    },
}

/// Masked mean over real tokens: `(B, C_lang)`.
fn sentence_vector(lang: &LanguageFeature) -> Result<Tensor> {
    let summed = lang.features.sum(1)?;
    let count = lang.mask.sum_keepdim(1)?;
    Ok(summed.broadcast_div(&count)?)
}

impl BranchFusion {
    fn new(
        ps: &ParamStore,
        variant: CvwinVariant,
        c: usize,
        lang_dim: usize,
    ) -> Result<Option<Self>> {
        Ok(Some(match variant {
            CvwinVariant::Cvwin => BranchFusion::Gate(
                LanguageAlign::new(ps, "align", c, lang_dim)?,
                GateFuse::new(ps, "gate", c)?,
            ),
            CvwinVariant::NoGate => {
                BranchFusion::Sum(LanguageAlign::new(ps, "align", c, lang_dim)?)
            }
            CvwinVariant::PwamStub => BranchFusion::Pwam {
                sentence: Linear::new(ps, "sentence", lang_dim, c, true)?,
                out: Linear::new(ps, "out", c, c, true)?,
            },
            CvwinVariant::IimStub => BranchFusion::Iim {
                sentence: Linear::new(ps, "sentence", lang_dim, c, true)?,
                out: Linear::new(ps, "out", 2 * c, c, true)?,
            },
            CvwinVariant::DirectSum => return Ok(None),
        }))
    }

    fn forward(&self, vision: &Tensor, lang: &LanguageFeature) -> Result<Tensor> {
        match self {
            BranchFusion::Gate(align, gate) => gate.forward(&align.forward(vision, lang)?, vision),
            BranchFusion::Sum(align) => Ok((vision + align.forward(vision, lang)?)?),
            BranchFusion::Pwam { sentence, out } => {
                let (b, _, _, c) = vision.dims4()?;
                let s = sentence
                    .forward(&sentence_vector(lang)?)?
                    .reshape((b, 1, 1, c))?;
                Ok((vision + out.forward(&vision.broadcast_mul(&s)?)?)?)
            }
            BranchFusion::Iim { sentence, out } => {
                let (b, h, w, c) = vision.dims4()?;
                let s = sentence
                    .forward(&sentence_vector(lang)?)?
                    .reshape((b, 1, 1, c))?
                    .broadcast_as((b, h, w, c))?;
                let cat = Tensor::cat(&[vision, &s], D::Minus1)?;
                Ok((vision + out.forward(&cat)?)?)
            }
        }
    }
}

/// Outputs of one CVWin stage.
pub struct CvwinOutput {
    /// `(B, h, w, C)` when the remote branch is active.
    pub remote: Option<Tensor>,
    /// `(B * n_view^2, h, w, C)` patches when the close branch is active.
    pub close: Option<Tensor>,
}

/// CVWin for one backbone stage.
#[derive(Clone)]
pub struct CvwinStage {
    remote_fusion: Option<BranchFusion>,
    close_fusion: Option<BranchFusion>,
    remote_proj: Option<ExchangeProjections>,
    close_proj: Option<ExchangeProjections>,
    integrate_remote: Option<Linear>,
    integrate_close: Option<Linear>,
    n_view: usize,
    win: usize,
    exchange: bool,
}

impl CvwinStage {
    /// `stage` is 1-based.
    pub fn new(ps: &ParamStore, cfg: &ModelConfig, stage: usize) -> Result<Self> {
        let ps = ps.pp(format!("cvwin{stage}"));
        let c = cfg.stage_channels[stage - 1];
        let sw: AblationSwitches = cfg.switches;
        let variant = sw.cvwin_variant;
        let exchange = matches!(variant, CvwinVariant::Cvwin | CvwinVariant::NoGate);
        let c2r = exchange && sw.close_to_remote();
        let r2c = exchange && sw.remote_to_close();
        let remote_fusion = if sw.has_remote() {
            BranchFusion::new(&ps.pp("remote"), variant, c, cfg.lang_dim)?
        } else {
            None
        };
        let close_fusion = if sw.has_close() {
            BranchFusion::new(&ps.pp("close"), variant, c, cfg.lang_dim)?
        } else {
            None
        };
        // Queries of the close-to-remote direction come from the remote branch.
        let (remote_proj, close_proj) = if (c2r || r2c) && !cfg.raw_qkv {
            (
                Some(ExchangeProjections::new(&ps, "exchange_remote_query", c)?),
                Some(ExchangeProjections::new(&ps, "exchange_close_query", c)?),
            )
        } else {
            (None, None)
        };
        let integrate_remote = if c2r {
            Some(Linear::new(&ps, "integrate_remote", 2 * c, c, true)?)
        } else {
            None
        };
        let integrate_close = if r2c {
            Some(Linear::new(&ps, "integrate_close", 2 * c, c, true)?)
        } else {
            None
        };
        Ok(Self {
            remote_fusion,
            close_fusion,
            remote_proj,
            close_proj,
            integrate_remote,
            integrate_close,
            n_view: cfg.n_view,
            win: cfg.win_size[stage - 1],
            exchange: c2r || r2c,
        })
    }

    /// `remote: (B, h, w, C)`, `close: (B * n_view^2, h, w, C)`.
    pub fn forward(
        &self,
        remote: Option<&Tensor>,
        close: Option<&Tensor>,
        lang: &LanguageFeature,
    ) -> Result<CvwinOutput> {
        let n = self.n_view;
        let remote_f = match (remote, &self.remote_fusion) {
            (Some(v), Some(f)) => Some(f.forward(v, lang)?),
            (Some(v), None) => Some(v.clone()),
            (None, _) => None,
        };
        let close_full = close.map(|c| assemble_grid(c, n)).transpose()?;
        let close_f = match (&close_full, &self.close_fusion) {
            (Some(v), Some(f)) => Some(f.forward(v, lang)?),
            (Some(v), None) => Some(v.clone()),
            (None, _) => None,
        };

        let (remote_out, close_out) = match (&remote_f, &close_f) {
            (Some(r), Some(cl)) if self.exchange => {
                let (_, h, _, _) = r.dims4()?;
                let grid = WindowGrid::new(h, self.win, n);
                let rw = partition_windows(r, grid.n_win, grid.remote_window)?;
                let cw = partition_windows(cl, grid.n_win, grid.close_window)?;
                let remote_out = match &self.integrate_remote {
                    Some(ffn) => {
                        let detail =
                            exchange_close_to_remote(&rw, &cw, &grid, self.remote_proj.as_ref())?;
                        let detail = resize_bilinear(&detail, h, h)?;
                        (r + ffn.forward(&Tensor::cat(&[r, &detail], D::Minus1)?)?)?
                    }
                    None => r.clone(),
                };
                let close_out = match &self.integrate_close {
                    Some(ffn) => {
                        let global =
                            exchange_remote_to_close(&cw, &rw, &grid, self.close_proj.as_ref())?;
                        let side = n * h;
                        let global = resize_bilinear(&global, side, side)?;
                        (cl + ffn.forward(&Tensor::cat(&[cl, &global], D::Minus1)?)?)?
                    }
                    None => cl.clone(),
                };
                (Some(remote_out), Some(close_out))
            }
            _ => (remote_f, close_f),
        };
        Ok(CvwinOutput {
            remote: remote_out,
            close: close_out.map(|c| split_grid(&c, n)).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{from_f64, to_f64_vec};
    use candle_core::{DType, Device};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = crate::rng::stream(seed, "cvwin-test");
        let n: usize = shape.iter().product();
        from_f64(
            (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
            shape,
            DType::F64,
        )
        .unwrap()
    }

    fn lang(b: usize, l: usize, c: usize, real: usize, seed: u64) -> LanguageFeature {
        let mut mask = vec![0.0; b * l];
        for bi in 0..b {
            for t in 0..real {
                mask[bi * l + t] = 1.0;
            }
        }
        let mask = from_f64(mask, &[b, l], DType::F64).unwrap();
        let features = random(&[b, l, c], seed)
            .broadcast_mul(&mask.unsqueeze(2).unwrap())
            .unwrap();
        LanguageFeature { features, mask }
    }

    fn zero(ps: &ParamStore, name: &str) {
        let v = ps.get(name).unwrap_or_else(|| panic!("{name}"));
        v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
    }

    #[test]
    fn window_geometry() {
        let g = WindowGrid::new(12, 4, 2);
        assert_eq!((g.n_win, g.remote_window, g.close_window), (3, 4, 8));
        assert_eq!((g.remote_side, g.close_side), (12, 24));
        let g = WindowGrid::new(10, 4, 2);
        assert_eq!((g.n_win, g.remote_side, g.close_side), (3, 12, 24));
        // Close windows hold n_view^2 times the tokens of remote windows.
        assert_eq!(g.close_window.pow(2), 4 * g.remote_window.pow(2));
    }

    #[test]
    fn partition_shapes_and_merge_round_trip() {
        let x = random(&[2, 12, 12, 3], 1);
        let w = partition_windows(&x, 3, 4).unwrap();
        assert_eq!(w.dims(), &[18, 16, 3]);
        let back = merge_windows(&w, 3, 4).unwrap();
        assert_eq!(to_f64_vec(&back).unwrap(), to_f64_vec(&x).unwrap());

        let y = random(&[1, 10, 10, 2], 2);
        let w = partition_windows(&y, 3, 4).unwrap();
        let back = merge_windows(&w, 3, 4).unwrap();
        let resized = resize_bilinear(&y, 12, 12).unwrap();
        assert_eq!(to_f64_vec(&back).unwrap(), to_f64_vec(&resized).unwrap());
    }

    #[test]
    fn single_token_language_broadcasts_its_value() {
        let ps = ParamStore::new(DType::F64, 0);
        let align = LanguageAlign::new(&ps, "a", 4, 3).unwrap();
        let v = random(&[1, 2, 2, 4], 3);
        let l = lang(1, 5, 3, 1, 4);
        let out = to_f64_vec(&align.forward(&v, &l).unwrap()).unwrap();
        let value = to_f64_vec(
            &align
                .v
                .forward(&l.features.narrow(1, 0, 1).unwrap())
                .unwrap(),
        )
        .unwrap();
        for px in 0..4 {
            for c in 0..4 {
                assert!((out[px * 4 + c] - value[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_gate_and_residual_return_vision() {
        let ps = ParamStore::new(DType::F64, 0);
        let gate = GateFuse::new(&ps, "g", 4).unwrap();
        for n in [
            "g.gate.weight",
            "g.gate.bias",
            "g.residual.weight",
            "g.residual.bias",
        ] {
            zero(&ps, n);
        }
        let f = random(&[1, 2, 2, 4], 5);
        let v = random(&[1, 2, 2, 4], 6);
        let out = gate.forward(&f, &v).unwrap();
        assert_eq!(to_f64_vec(&out).unwrap(), to_f64_vec(&v).unwrap());
    }

    #[test]
    fn gate_is_bounded() {
        let ps = ParamStore::new(DType::F64, 1);
        let gate = GateFuse::new(&ps, "g", 4).unwrap();
        let f = (random(&[2, 3, 3, 4], 7) * 50.0).unwrap();
        let v = random(&[2, 3, 3, 4], 8);
        let g = to_f64_vec(&gate.gate(&f, &v).unwrap()).unwrap();
        assert!(g.iter().all(|&x| x > -1.0 && x < 1.0 || x.abs() == 1.0));
        assert!(g.iter().all(|&x| x.abs() <= 1.0));
    }

    #[test]
    fn cvwin_preserves_shapes() {
        let cfg = ModelConfig {
            raw_qkv: false,
            ..ModelConfig::tiny()
        };
        let ps = ParamStore::new(DType::F64, 0);
        for stage in 1..=4 {
            let st = CvwinStage::new(&ps, &cfg, stage).unwrap();
            let (h, c) = (cfg.stage_side(stage), cfg.stage_channels[stage - 1]);
            let r = random(&[2, h, h, c], 9);
            let cl = random(&[8, h, h, c], 10);
            let out = st
                .forward(Some(&r), Some(&cl), &lang(2, 6, cfg.lang_dim, 3, 11))
                .unwrap();
            assert_eq!(out.remote.unwrap().dims(), r.dims());
            assert_eq!(out.close.unwrap().dims(), cl.dims());
        }
    }

    #[test]
    fn zeroed_cvwin_is_identity() {
        let cfg = ModelConfig::tiny();
        let ps = ParamStore::new(DType::F64, 0);
        let st = CvwinStage::new(&ps, &cfg, 2).unwrap();
        for (name, _, _) in ps.all() {
            if name.contains("gate.gate")
                || name.contains("gate.residual")
                || name.contains("integrate")
            {
                zero(&ps, &name);
            }
        }
        let (h, c) = (cfg.stage_side(2), cfg.stage_channels[1]);
        let r = random(&[1, h, h, c], 12);
        let cl = random(&[4, h, h, c], 13);
        let out = st
            .forward(Some(&r), Some(&cl), &lang(1, 6, cfg.lang_dim, 2, 14))
            .unwrap();
        assert_eq!(
            to_f64_vec(&out.remote.unwrap()).unwrap(),
            to_f64_vec(&r).unwrap()
        );
        assert_eq!(
            to_f64_vec(&out.close.unwrap()).unwrap(),
            to_f64_vec(&cl).unwrap()
        );
    }

    #[test]
    fn remote2close_only_leaves_remote_branch_unexchanged() {
        let mut cfg = ModelConfig::tiny();
        cfg.switches.exchange_mode = crate::config::ExchangeMode::Remote2Close;
        let ps = ParamStore::new(DType::F64, 0);
        let st = CvwinStage::new(&ps, &cfg, 1).unwrap();
        assert!(ps
            .all()
            .iter()
            .any(|(n, _, _)| n.contains("integrate_close")));
        assert!(!ps
            .all()
            .iter()
            .any(|(n, _, _)| n.contains("integrate_remote")));
        let (h, c) = (cfg.stage_side(1), cfg.stage_channels[0]);
        let r = random(&[1, h, h, c], 15);
        let l = lang(1, 6, cfg.lang_dim, 2, 16);
        let a = st
            .forward(Some(&r), Some(&random(&[4, h, h, c], 17)), &l)
            .unwrap();
        let b = st
            .forward(Some(&r), Some(&random(&[4, h, h, c], 18)), &l)
            .unwrap();
        // Remote output is independent of the close input.
        assert_eq!(
            to_f64_vec(&a.remote.unwrap()).unwrap(),
            to_f64_vec(&b.remote.unwrap()).unwrap()
        );
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = Tensor::zeros((4, 4, 3), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((2, 16, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            window_cross_attention(&a, &b, None),
            Err(Error::Dimension(_))
        ));
    }
}
