//! Hierarchical windowed-attention vision encoder.
//!
//! A 4x4 patch stem followed by three 2x patch-merging steps gives stage sides
//! `H/4, H/8, H/16, H/32`. Each stage runs pre-norm blocks of local window
//! self-attention and an MLP. Remote and close images share all weights and
//! travel through the encoder as one batch.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{assemble_grid, split_grid, LayerNorm, Linear, Mlp, ParamStore, SelfAttention};

#[derive(Clone)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone)]
struct PatchMerge {
    norm: LayerNorm,
    proj: Linear,
}

#[derive(Clone)]
pub struct Backbone {
    stem: Linear,
    stem_norm: LayerNorm,
    merges: Vec<PatchMerge>,
    stages: Vec<Vec<Block>>,
    windows: [usize; 4],
}

/// Group `k x k` neighbourhoods into channels: `(N, h, w, C) -> (N, h/k, w/k, k*k*C)`.
fn space_to_depth(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} feature is not divisible by stride {k}"
        )));
    }
    Ok(x.reshape((n, h / k, k, w / k, k, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((n, h / k, w / k, k * k * c))?)
}

impl Backbone {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let ps = ps.pp("backbone");
        let ch = cfg.stage_channels;
        let stem = Linear::new(&ps, "stem", 48, ch[0], true)?;
        let stem_norm = LayerNorm::new(&ps, "stem_norm", ch[0])?;
        let merges = (1..4)
            .map(|i| {
                let p = ps.pp(format!("merge{}", i + 1));
                Ok(PatchMerge {
                    norm: LayerNorm::new(&p, "norm", 4 * ch[i - 1])?,
                    proj: Linear::new(&p, "proj", 4 * ch[i - 1], ch[i], false)?,
                })
            })
            .collect::<Result<_>>()?;
        let stages = (0..4)
            .map(|i| {
                (0..cfg.backbone_depth)
                    .map(|j| {
                        let p = ps.pp(format!("stage{}.block{j}", i + 1));
                        Ok(Block {
                            ln1: LayerNorm::new(&p, "ln1", ch[i])?,
                            attn: SelfAttention::new(&p, "attn", ch[i], cfg.heads)?,
                            ln2: LayerNorm::new(&p, "ln2", ch[i])?,
                            mlp: Mlp::new(&p, "mlp", ch[i], cfg.mlp_ratio * ch[i])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stem,
            stem_norm,
            merges,
            stages,
            windows: cfg.win_size,
        })
    }

    /// Patch-embedding stem on `(N, H, W, 3)` images.
    pub fn stem(&self, images: &Tensor) -> Result<Tensor> {
        let x = space_to_depth(images, 4)?;
        self.stem_norm.forward(&self.stem.forward(&x)?)
    }

    /// Run stage `stage` (1-based). Stage 1 consumes images; later stages
    /// consume the previous stage's (enhanced) features.
    pub fn encode_stage(&self, input: &Tensor, stage: usize) -> Result<Tensor> {
        let mut x = if stage == 1 {
            self.stem(input)?
        } else {
            let m = &self.merges[stage - 2];
            m.proj
                .forward(&m.norm.forward(&space_to_depth(input, 2)?)?)?
        };
        let window = self.windows[stage - 1];
        for blk in &self.stages[stage - 1] {
            let attn = window_self_attention(&blk.attn, &blk.ln1.forward(&x)?, window)?;
            x = (&x + attn)?;
            x = (&x + blk.mlp.forward(&blk.ln2.forward(&x)?)?)?;
        }
        Ok(x)
    }
}

/// Self-attention restricted to non-overlapping `window x window` tiles.
/// The window is clamped to the feature side.
pub fn window_self_attention(attn: &SelfAttention, x: &Tensor, window: usize) -> Result<Tensor> {
    let (_, h, w, c) = x.dims4()?;
    let win = window.min(h).min(w);
    if h % win != 0 || w % win != 0 || h != w {
        return Err(Error::Dimension(format!(
            "{h}x{w} feature does not tile into {win}x{win} windows"
        )));
    }
    let n = h / win;
    let tiles = split_grid(x, n)?;
    let tokens = tiles.reshape((tiles.dim(0)?, win * win, c))?;
    let out = attn.forward(&tokens, None)?;
    assemble_grid(&out.reshape((tiles.dim(0)?, win, win, c))?, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{from_f64, to_f64_vec};
    use candle_core::DType;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = crate::rng::stream(seed, "backbone-test");
        let n: usize = shape.iter().product();
        from_f64(
            (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
            shape,
            DType::F64,
        )
        .unwrap()
    }

    #[test]
    fn stage_sides_halve() {
        let cfg = ModelConfig::small();
        let ps = ParamStore::new(DType::F32, 0);
        let bb = Backbone::new(&ps, &cfg).unwrap();
        let mut x = random(&[5, 64, 64, 3], 1).to_dtype(DType::F32).unwrap();
        for i in 1..=4 {
            x = bb.encode_stage(&x, i).unwrap();
            assert_eq!(
                x.dims(),
                &[
                    5,
                    cfg.stage_side(i),
                    cfg.stage_side(i),
                    cfg.stage_channels[i - 1]
                ]
            );
        }
    }

    #[test]
    fn full_window_equals_global_attention() {
        let ps = ParamStore::new(DType::F64, 2);
        let attn = SelfAttention::new(&ps, "a", 4, 2).unwrap();
        let x = random(&[2, 4, 4, 4], 3);
        let windowed = window_self_attention(&attn, &x, 4).unwrap();
        let global = attn.forward(&x.reshape((2, 16, 4)).unwrap(), None).unwrap();
        let a = to_f64_vec(&windowed).unwrap();
        let b = to_f64_vec(&global).unwrap();
        let diff = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn windows_do_not_mix() {
        // Changing one window's input must leave other windows' outputs untouched.
        let ps = ParamStore::new(DType::F64, 4);
        let attn = SelfAttention::new(&ps, "a", 4, 1).unwrap();
        let x = random(&[1, 4, 4, 4], 5);
        let mut v = to_f64_vec(&x).unwrap();
        v[0] += 1.0; // pixel (0,0) lives in window (0,0)
        let x2 = from_f64(v, &[1, 4, 4, 4], DType::F64).unwrap();
        let a = to_f64_vec(&window_self_attention(&attn, &x, 2).unwrap()).unwrap();
        let b = to_f64_vec(&window_self_attention(&attn, &x2, 2).unwrap()).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                let same = (0..4).all(|c| a[(y * 4 + xx) * 4 + c] == b[(y * 4 + xx) * 4 + c]);
                assert_eq!(same, y >= 2 || xx >= 2, "pixel ({y},{xx})");
            }
        }
    }

    #[test]
    fn zero_image_zero_bias_stem_gives_zero_features() {
        let cfg = ModelConfig::small();
        let ps = ParamStore::new(DType::F64, 0);
        let bb = Backbone::new(&ps, &cfg).unwrap();
        ps.get("backbone.stem.bias")
            .unwrap()
            .set(
                &Tensor::zeros(cfg.stage_channels[0], DType::F64, &candle_core::Device::Cpu)
                    .unwrap(),
            )
            .unwrap();
        let x = Tensor::zeros((1, 64, 64, 3), DType::F64, &candle_core::Device::Cpu).unwrap();
        let y = bb.stem(&x).unwrap();
        assert!(to_f64_vec(&y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = ModelConfig::small();
        let ps = ParamStore::new(DType::F32, 0);
        let bb = Backbone::new(&ps, &cfg).unwrap();
        let x = random(&[1, 30, 30, 3], 1).to_dtype(DType::F32).unwrap();
        assert!(matches!(bb.encode_stage(&x, 1), Err(Error::Dimension(_))));
    }
}
