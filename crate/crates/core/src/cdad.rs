//! Dilated row attention over the top stage and the cross-view decoder.
//!
//! The stage-4 features of both views are resized to `H_adjust`, a multiple of
//! the slice size, and fused into one joint map that provides keys and values.
//! Queries come from the remote feature and from strided sub-grids of the
//! upsampled close feature. Each query row of a width-`S` slice attends to the
//! same slice at its own row and at rows shifted by `±d_j`, so one attention
//! step reaches both near and far rows. A second pass repeats this on the
//! transposed map. The decoder then climbs back through stages 3, 2 and 1 with
//! conv-BN-ReLU blocks, keeps a skip from `D_1` at every step, and predicts a
//! two-channel probability map from the remote view and the reassembled close
//! view.

use candle_core::{DType, Device, Tensor, D};

use crate::config::ModelConfig;
use crate::cvwin::CvwinOutput;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::{
    assemble_grid, attention, join_views, patchify, regroup, repeat_items, resize_bilinear,
    softmax_last, split_grid, take_views, to_f64_vec, transpose_hw, Cbr, LayerNorm, Linear, Mode,
    ParamStore,
};

/// Geometry of the dilated key bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DilationSpec {
    pub slice_size: usize,
    pub density: usize,
    pub n_slice: usize,
    pub h_adjust: usize,
    /// `d_j = floor(H_adjust / 2^(J - j))`, `j = 0..J`.
    pub offsets: Vec<usize>,
}

pub fn make_dilation_spec(h4: usize, slice_size: usize, density: usize) -> DilationSpec {
    let n_slice = h4.div_ceil(slice_size);
    let h_adjust = n_slice * slice_size;
    let offsets = (0..density).map(|j| h_adjust >> (density - j)).collect();
    DilationSpec {
        slice_size,
        density,
        n_slice,
        h_adjust,
        offsets,
    }
}

impl DilationSpec {
    /// Row shifts of the bank blocks in order: `0, +d_0, -d_0, +d_1, -d_1, ..`.
    pub fn shifts(&self) -> Vec<isize> {
        let mut s = vec![0isize];
        for &d in &self.offsets {
            s.push(d as isize);
            s.push(-(d as isize));
        }
        s
    }

    /// Keys per query row: `(2J + 1) * S`.
    pub fn bank_width(&self) -> usize {
        (2 * self.density + 1) * self.slice_size
    }
}

/// Gather the dilated key bank from `k: (N, Ha, Ha, C)`.
///
/// Returns `(N, Ha, N_slice, (2J+1) S, C)`. Block `b` of row `r` holds row
/// `r + shifts[b]` of the slice, or zeros when that row is outside the map.
pub fn expand_keys(k: &Tensor, spec: &DilationSpec) -> Result<Tensor> {
    let (n, h, w, c) = k.dims4()?;
    let ha = spec.h_adjust;
    if h != ha || w != ha {
        return Err(Error::Dimension(format!(
            "{h}x{w} keys for a {ha}x{ha} dilation spec"
        )));
    }
    let padded = k.pad_with_zeros(1, ha, ha)?;
    let blocks = spec
        .shifts()
        .into_iter()
        .map(|s| {
            Ok(padded.narrow(1, (ha as isize + s) as usize, ha)?.reshape((
                n,
                ha,
                spec.n_slice,
                spec.slice_size,
                c,
            ))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&blocks, 3)?)
}

/// Normalized coordinate map `(side, side, 2)`: channel 0 is x, channel 1 is y, both in `[-1, 1]`.
pub fn coordinate_map(side: usize, dtype: DType) -> Result<Tensor> {
    let coord = |i: usize| {
        if side == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (side - 1) as f64
        }
    };
    let mut v = Vec::with_capacity(side * side * 2);
    for y in 0..side {
        for x in 0..side {
            v.push(coord(x));
            v.push(coord(y));
        }
    }
    Ok(Tensor::from_vec(v, (side, side, 2), &Device::Cpu)?.to_dtype(dtype)?)
}

/// One dilated attention pass along the vertical axis.
#[derive(Clone)]
pub struct CdaPass {
    pub pos: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ffn: Linear,
    pub ln: LayerNorm,
}

impl CdaPass {
    pub fn new(ps: &ParamStore, name: &str, c: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            pos: Linear::new(&ps, "pos", 2, c, true)?,
            q: Linear::new(&ps, "q", c, c, true)?,
            // Bias-free so that padding before or after the projection agree.
            k: Linear::new(&ps, "k", c, c, false)?,
            v: Linear::new(&ps, "v", c, c, false)?,
            ffn: Linear::new(&ps, "ffn", c, c, true)?,
            ln: LayerNorm::new(&ps, "ln", c)?,
        })
    }

    /// Positional tensor `(Ha, Ha, C)`.
    pub fn positional(&self, side: usize, dtype: DType) -> Result<Tensor> {
        self.pos.forward(&coordinate_map(side, dtype)?)
    }

    /// `query, joint: (N, Ha, Ha, C)` -> `(N, Ha, Ha, C)`.
    pub fn forward(&self, query: &Tensor, joint: &Tensor, spec: &DilationSpec) -> Result<Tensor> {
        let (n, ha, w, c) = query.dims4()?;
        if query.dims() != joint.dims() || ha != spec.h_adjust || w != ha {
            return Err(Error::Dimension(format!(
                "query {:?} and joint {:?} do not match H_adjust {}",
                query.dims(),
                joint.dims(),
                spec.h_adjust
            )));
        }
        let p = self.positional(ha, query.dtype())?;
        let q = self.q.forward(&query.broadcast_add(&p)?)?;
        let k = expand_keys(&self.k.forward(&joint.broadcast_add(&p)?)?, spec)?;
        let v = expand_keys(&self.v.forward(joint)?, spec)?;
        let (s, ns, bw) = (spec.slice_size, spec.n_slice, spec.bank_width());
        let rows = n * ha * ns;
        let r = attention(
            &q.reshape((rows, s, c))?,
            &k.reshape((rows, bw, c))?,
            &v.reshape((rows, bw, c))?,
            c,
            None,
        )?
        .reshape((n, ha, ha, c))?;
        Ok((query + self.ln.forward(&self.ffn.forward(&r)?)?)?)
    }
}

/// Vertical pass followed by a pass over the transposed map.
#[derive(Clone)]
pub struct Cda {
    pub vertical: CdaPass,
    pub transposed: CdaPass,
}

impl Cda {
    pub fn new(ps: &ParamStore, c: usize) -> Result<Self> {
        let ps = ps.pp("cda");
        Ok(Self {
            vertical: CdaPass::new(&ps, "vertical", c)?,
            transposed: CdaPass::new(&ps, "transposed", c)?,
        })
    }

    pub fn forward(&self, query: &Tensor, joint: &Tensor, spec: &DilationSpec) -> Result<Tensor> {
        let x = self.vertical.forward(query, joint, spec)?;
        let x = self
            .transposed
            .forward(&transpose_hw(&x)?, &transpose_hw(joint)?, spec)?;
        transpose_hw(&x)
    }
}

/// `FFN(cat(remote, close))` at `H_adjust`.
#[derive(Clone)]
pub struct JointFusion {
    pub proj: Linear,
}

impl JointFusion {
    pub fn new(ps: &ParamStore, c: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, "joint", 2 * c, c, true)?,
        })
    }

    pub fn forward(&self, remote: &Tensor, close: &Tensor) -> Result<Tensor> {
        if remote.dims() != close.dims() {
            return Err(Error::Dimension(format!(
                "joint inputs differ: {:?} vs {:?}",
                remote.dims(),
                close.dims()
            )));
        }
        self.proj
            .forward(&Tensor::cat(&[remote, close], D::Minus1)?)
    }
}

/// Remote and close features travelling through the decoder.
///
/// When both views exist they are joined along the batch axis as groups
/// `[remote, patch_0, .., patch_{k-1}]` per sample.
#[derive(Clone)]
enum Stack {
    Both { x: Tensor, k: usize },
    Remote(Tensor),
    Close(Tensor),
}

impl Stack {
    fn from_views(remote: Option<&Tensor>, close: Option<&Tensor>) -> Result<Self> {
        Ok(match (remote, close) {
            (Some(r), Some(c)) => Stack::Both {
                x: join_views(r, c)?,
                k: c.dim(0)? / r.dim(0)?,
            },
            (Some(r), None) => Stack::Remote(r.clone()),
            (None, Some(c)) => Stack::Close(c.clone()),
            (None, None) => return Err(Error::Dimension("no view features".into())),
        })
    }

    fn tensor(&self) -> &Tensor {
        match self {
            Stack::Both { x, .. } | Stack::Remote(x) | Stack::Close(x) => x,
        }
    }

    fn with(&self, x: Tensor) -> Self {
        match self {
            Stack::Both { k, .. } => Stack::Both { x, k: *k },
            Stack::Remote(_) => Stack::Remote(x),
            Stack::Close(_) => Stack::Close(x),
        }
    }

    fn views(&self) -> Result<(Option<Tensor>, Option<Tensor>)> {
        Ok(match self {
            Stack::Both { x, k } => (
                Some(take_views(x, 1 + k, 0, 1)?),
                Some(take_views(x, 1 + k, 1, *k)?),
            ),
            Stack::Remote(x) => (Some(x.clone()), None),
            Stack::Close(x) => (None, Some(x.clone())),
        })
    }
}

#[derive(Clone)]
struct DecoderStep {
    fuse: Cbr,
    skip: Cbr,
}

/// Intermediate decoder features, kept for inspection.
pub struct DecoderState {
    /// `D_1, D_2, ..`, each `(views, side, side, C)`.
    pub d: Vec<Tensor>,
    /// `(B, N^view H, N^view H, 2)` channel-softmax probabilities.
    pub pred: Tensor,
}

#[derive(Clone)]
pub struct Cdad {
    cda: Option<Cda>,
    joint: Option<JointFusion>,
    steps: Vec<DecoderStep>,
    head: Linear,
    n_view: usize,
    slice_size: usize,
    density: usize,
    full_side: usize,
    skip: bool,
}

impl Cdad {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let ps = ps.pp("decoder");
        let sw = cfg.switches;
        let c4 = cfg.stage_channels[3];
        let cmp = cfg.cmp_channels;
        let cda = if sw.cda_enabled {
            Some(Cda::new(&ps, c4)?)
        } else {
            None
        };
        let joint = if sw.cda_enabled && sw.has_remote() && sw.has_close() {
            Some(JointFusion::new(&ps, c4)?)
        } else {
            None
        };
        let n_steps = sw.decoder_truncate.steps();
        let mut steps = Vec::with_capacity(n_steps);
        let mut prev = c4;
        for i in 2..2 + n_steps {
            let p = ps.pp(format!("step{i}"));
            let enc = cfg.stage_channels[5 - i - 1];
            let fuse = Cbr::new(&p, "fuse", prev + enc, cmp)?;
            let skip_in = if sw.skip_enabled { cmp + c4 } else { cmp };
            let skip = Cbr::new(&p, "skip", skip_in, cmp)?;
            steps.push(DecoderStep { fuse, skip });
            prev = cmp;
        }
        Ok(Self {
            cda,
            joint,
            steps,
            head: Linear::new(&ps, "head", 2 * prev, 2, true)?,
            n_view: cfg.n_view,
            slice_size: cfg.slice_size,
            density: cfg.dilation_density,
            full_side: cfg.full_side(),
            skip: sw.skip_enabled,
        })
    }

    pub fn cda(&self) -> Option<&Cda> {
        self.cda.as_ref()
    }

    pub fn joint(&self) -> Option<&JointFusion> {
        self.joint.as_ref()
    }

    /// Enhance the stage-4 views; returns `(remote, close patches)` at `h4`.
    pub fn enhance(
        &self,
        remote: Option<&Tensor>,
        close: Option<&Tensor>,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        match &self.cda {
            Some(cda) => enhance_views(
                cda,
                self.joint.as_ref(),
                remote,
                close,
                self.n_view,
                self.slice_size,
                self.density,
            ),
            None => Ok((remote.cloned(), close.cloned())),
        }
    }

    /// `stages[i]` holds the CVWin output of stage `i + 1`.
    pub fn forward(&self, stages: &[CvwinOutput], mode: Mode) -> Result<DecoderState> {
        if stages.len() != 4 {
            return Err(Error::Dimension(format!(
                "decoder needs 4 stage features, got {}",
                stages.len()
            )));
        }
        let (r1, c1) = self.enhance(stages[3].remote.as_ref(), stages[3].close.as_ref())?;
        let d1 = Stack::from_views(r1.as_ref(), c1.as_ref())?;
        let mut ds = vec![d1.tensor().clone()];
        let mut prev = d1.tensor().clone();
        for (idx, step) in self.steps.iter().enumerate() {
            let enc_stage = &stages[2 - idx];
            let enc = Stack::from_views(enc_stage.remote.as_ref(), enc_stage.close.as_ref())?;
            let enc = enc.tensor();
            let side = enc.dim(1)?;
            let up = resize_bilinear(&prev, side, side)?;
            let i_feat = step
                .fuse
                .forward(&Tensor::cat(&[&up, enc], D::Minus1)?, mode)?;
            let d = if self.skip {
                let skip = resize_bilinear(d1.tensor(), side, side)?;
                step.skip
                    .forward(&Tensor::cat(&[&i_feat, &skip], D::Minus1)?, mode)?
            } else {
                step.skip.forward(&i_feat, mode)?
            };
            ds.push(d.clone());
            prev = d;
        }
        let pred = self.head(&d1.with(prev))?;
        Ok(DecoderState { d: ds, pred })
    }

    fn head(&self, last: &Stack) -> Result<Tensor> {
        let n = self.n_view;
        let (remote, close) = last.views()?;
        let close = close.map(|c| assemble_grid(&c, n)).transpose()?;
        let side = match (&remote, &close) {
            (_, Some(c)) => c.dim(1)?,
            (Some(r), None) => n * r.dim(1)?,
            (None, None) => unreachable!("stack holds at least one view"),
        };
        let remote = remote
            .map(|r| resize_bilinear(&r, side, side))
            .transpose()?;
        let (remote, close) = match (remote, close) {
            (Some(r), Some(c)) => (r, c),
            (Some(r), None) => (r.clone(), r.zeros_like()?),
            (None, Some(c)) => (c.zeros_like()?, c),
            (None, None) => unreachable!("stack holds at least one view"),
        };
        let logits = self
            .head
            .forward(&Tensor::cat(&[&remote, &close], D::Minus1)?)?;
        let logits = resize_bilinear(&logits, self.full_side, self.full_side)?;
        softmax_last(&logits)
    }
}

/// Dilated attention over the stage-4 views.
///
/// `remote: (B, h4, h4, C)`, `close: (B * n^2, h4, h4, C)`; either may be
/// absent. Both are resized to `H_adjust` and fused into the joint key/value
/// map. Close queries are the strided sub-grids of the close feature resized to
/// `n * H_adjust`. Outputs are resized back to `h4`, close outputs re-split into
/// their patches.
pub fn enhance_views(
    cda: &Cda,
    joint_fusion: Option<&JointFusion>,
    remote: Option<&Tensor>,
    close: Option<&Tensor>,
    n: usize,
    slice_size: usize,
    density: usize,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let h4 = remote.or(close).map(|t| t.dim(1)).transpose()?.unwrap_or(0);
    let spec = make_dilation_spec(h4, slice_size, density);
    let ha = spec.h_adjust;
    let remote_a = remote.map(|r| resize_bilinear(r, ha, ha)).transpose()?;
    let close_full = close.map(|c| assemble_grid(c, n)).transpose()?;
    let close_down = close_full
        .as_ref()
        .map(|c| resize_bilinear(c, ha, ha))
        .transpose()?;
    let joint = match (&remote_a, &close_down, joint_fusion) {
        (Some(r), Some(c), Some(f)) => f.forward(r, c)?,
        (Some(r), None, _) => r.clone(),
        (None, Some(c), _) => c.clone(),
        _ => return Err(Error::Dimension("joint fusion needs both views".into())),
    };
    let close_q = close_full
        .as_ref()
        .map(|c| patchify(&resize_bilinear(c, n * ha, n * ha)?, n))
        .transpose()?;
    let stack = Stack::from_views(remote_a.as_ref(), close_q.as_ref())?;
    let per_sample = match &stack {
        Stack::Both { k, .. } => 1 + k,
        Stack::Remote(_) => 1,
        Stack::Close(_) => n * n,
    };
    let out = cda.forward(stack.tensor(), &repeat_items(&joint, per_sample)?, &spec)?;
    let (r, c) = stack.with(out).views()?;
    let r = r.map(|r| resize_bilinear(&r, h4, h4)).transpose()?;
    let c = c
        .map(|c| -> Result<Tensor> {
            let full = resize_bilinear(&regroup(&c, n)?, n * h4, n * h4)?;
            split_grid(&full, n)
        })
        .transpose()?;
    Ok((r, c))
}

/// Foreground where the foreground probability is strictly above `threshold`.
pub fn predict_mask(pred: &Tensor, threshold: f64) -> Result<Vec<Mask>> {
    let (b, h, w, c) = pred.dims4()?;
    if c != 2 {
        return Err(Error::Dimension(format!(
            "prediction has {c} channels, expected 2"
        )));
    }
    let fg = to_f64_vec(&pred.narrow(3, 1, 1)?)?;
    Ok(fg
        .chunks(h * w)
        .take(b)
        .map(|p| {
            Mask::from_vec(
                h,
                w,
                1,
                p.iter().map(|&v| u8::from(v > threshold)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderTruncate, ViewMode};
    use crate::nn::from_f64;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = crate::rng::stream(seed, "cdad-test");
        let n: usize = shape.iter().product();
        from_f64(
            (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
            shape,
            DType::F64,
        )
        .unwrap()
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        from_f64((0..n).map(|v| v as f64 + 1.0).collect(), shape, DType::F64).unwrap()
    }

    #[test]
    fn dilation_examples() {
        let s = make_dilation_spec(12, 5, 3);
        assert_eq!((s.n_slice, s.h_adjust), (3, 15));
        assert_eq!(s.offsets, vec![1, 3, 7]);
        assert_eq!(s.bank_width(), 35);
        assert_eq!(make_dilation_spec(20, 5, 3).offsets, vec![2, 5, 10]);
        assert_eq!(make_dilation_spec(8, 8, 1).offsets, vec![4]);
        assert_eq!(s.shifts(), vec![0, 1, -1, 3, -3, 7, -7]);
    }

    #[test]
    fn expand_keys_matches_index_arithmetic() {
        let spec = make_dilation_spec(6, 3, 2);
        assert_eq!(spec.offsets, vec![1, 3]);
        let k = ramp(&[2, 6, 6, 2]);
        let kv = to_f64_vec(&k).unwrap();
        let bank = expand_keys(&k, &spec).unwrap();
        assert_eq!(bank.dims(), &[2, 6, 2, 15, 2]);
        let bv = to_f64_vec(&bank).unwrap();
        let shifts = spec.shifts();
        let mut i = 0;
        for n in 0..2 {
            for r in 0..6 {
                for sl in 0..2 {
                    for &sh in &shifts {
                        for t in 0..3 {
                            for c in 0..2 {
                                let got = bv[i];
                                let src = r as isize + sh;
                                let want = if (0..6).contains(&src) {
                                    kv[((n * 6 + src as usize) * 6 + sl * 3 + t) * 2 + c]
                                } else {
                                    0.0
                                };
                                assert_eq!(got, want);
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_keys_give_zero_bank() {
        let spec = make_dilation_spec(10, 5, 3);
        let k = Tensor::zeros((1, 10, 10, 3), DType::F64, &Device::Cpu).unwrap();
        let bank = to_f64_vec(&expand_keys(&k, &spec).unwrap()).unwrap();
        assert!(bank.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn averaging_joint_fusion_is_identity_on_equal_inputs() {
        let ps = ParamStore::new(DType::F64, 0);
        let f = JointFusion::new(&ps, 3).unwrap();
        let mut w = vec![0.0; 18];
        for c in 0..3 {
            w[c * 3 + c] = 0.5;
            w[(c + 3) * 3 + c] = 0.5;
        }
        ps.get("joint.weight")
            .unwrap()
            .set(&from_f64(w, &[6, 3], DType::F64).unwrap())
            .unwrap();
        ps.get("joint.bias")
            .unwrap()
            .set(&Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let x = random(&[1, 4, 4, 3], 1);
        let y = f.forward(&x, &x).unwrap();
        let diff = to_f64_vec(&(y - &x).unwrap()).unwrap();
        assert!(diff.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn coordinates_span_unit_square() {
        let m = to_f64_vec(&coordinate_map(3, DType::F64).unwrap()).unwrap();
        assert_eq!(&m[..2], &[-1.0, -1.0]);
        assert_eq!(&m[16..], &[1.0, 1.0]);
        assert_eq!(&m[2..4], &[0.0, -1.0]);
    }

    #[test]
    fn cda_keeps_shape() {
        let ps = ParamStore::new(DType::F64, 0);
        let cda = Cda::new(&ps, 4).unwrap();
        let spec = make_dilation_spec(5, 3, 2);
        let q = random(&[3, 6, 6, 4], 2);
        let j = random(&[3, 6, 6, 4], 3);
        assert_eq!(cda.forward(&q, &j, &spec).unwrap().dims(), q.dims());
        assert!(cda.forward(&random(&[3, 5, 5, 4], 2), &j, &spec).is_err());
    }

    fn stage_features(cfg: &ModelConfig, b: usize) -> Vec<CvwinOutput> {
        let k = cfg.n_view * cfg.n_view;
        (1..=4)
            .map(|i| {
                let (h, c) = (cfg.stage_side(i), cfg.stage_channels[i - 1]);
                CvwinOutput {
                    remote: cfg
                        .switches
                        .has_remote()
                        .then(|| random(&[b, h, h, c], i as u64)),
                    close: cfg
                        .switches
                        .has_close()
                        .then(|| random(&[b * k, h, h, c], 10 + i as u64)),
                }
            })
            .collect()
    }

    #[test]
    fn decoder_sides_double_and_pred_is_normalized() {
        let cfg = ModelConfig::small();
        let ps = ParamStore::new(DType::F64, 0);
        let dec = Cdad::new(&ps, &cfg).unwrap();
        let st = dec.forward(&stage_features(&cfg, 2), Mode::Train).unwrap();
        let sides: Vec<usize> = st.d.iter().map(|d| d.dim(1).unwrap()).collect();
        assert_eq!(sides, vec![2, 4, 8, 16]);
        assert_eq!(st.d[0].dim(0).unwrap(), 10);
        assert_eq!(st.pred.dims(), &[2, 128, 128, 2]);
        let p = to_f64_vec(&st.pred.sum(3).unwrap()).unwrap();
        assert!(p.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn default_scale_sides() {
        let cfg = ModelConfig::default();
        let sides: Vec<usize> = (0..4).map(|i| cfg.stage_side(4 - i)).collect();
        assert_eq!(sides, vec![12, 24, 48, 96]);
    }

    #[test]
    fn truncation_and_single_view_modes() {
        for (trunc, n_d) in [
            (DecoderTruncate::D4, 3),
            (DecoderTruncate::D4d3, 2),
            (DecoderTruncate::D4d3d2, 1),
        ] {
            for view in [ViewMode::Full, ViewMode::OnlyRemote, ViewMode::OnlyClose] {
                let mut cfg = ModelConfig::tiny();
                cfg.switches.decoder_truncate = trunc;
                cfg.switches.view_mode = view;
                let ps = ParamStore::new(DType::F64, 0);
                let dec = Cdad::new(&ps, &cfg).unwrap();
                let st = dec.forward(&stage_features(&cfg, 1), Mode::Eval).unwrap();
                assert_eq!(st.d.len(), n_d);
                assert_eq!(st.pred.dims(), &[1, 64, 64, 2]);
            }
        }
    }

    #[test]
    fn predict_mask_is_strict() {
        let p = from_f64(
            vec![0.4, 0.6, 0.5, 0.5, 0.0, 1.0, 0.6, 0.4],
            &[1, 2, 2, 2],
            DType::F64,
        )
        .unwrap();
        let m = predict_mask(&p, 0.5).unwrap();
        assert_eq!(m[0].data, vec![1, 0, 1, 0]);
    }
}
