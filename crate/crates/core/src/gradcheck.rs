//! Central finite-difference checks of analytic gradients, in `f64`.
//!
//! Each parameter group (one named tensor) is probed along a random unit
//! direction `u`: the analytic directional derivative `<grad, u>` is compared
//! with the fourth-order central difference
//! `(8 (f(p + h u) - f(p - h u)) - (f(p + 2h u) - f(p - 2h u))) / 12h`.
//! ReLU activation patterns are frozen at the base point, so every evaluation
//! stays on the linear piece the analytic gradient differentiates. The
//! difference is taken over a ladder of steps, walking down while estimates
//! converge and stopping where rounding takes over.
//! The choice never looks at the analytic value.
//! Outputs are reduced to a scalar by a fixed positively weighted sum of
//! squares so that every output element contributes.

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use crate::backbone::Backbone;
use crate::cdad::{make_dilation_spec, Cda, Cdad, JointFusion};
use crate::config::ModelConfig;
use crate::cvwin::{
    exchange_close_to_remote, exchange_remote_to_close, partition_windows, CvwinOutput, CvwinStage,
    ExchangeProjections, GateFuse, LanguageAlign, WindowGrid,
};
use crate::data::{generate_sample, prepare_views, SceneSpec};
use crate::error::{Error, Result};
use crate::metrics::{bce_loss, dice_loss, total_loss};
use crate::model::CsiNet;
use crate::nn::{
    assemble_grid, from_f64, patchify, regroup, resize_bilinear, softmax_last, split_grid,
    to_f64_vec, BatchNorm, Cbr, Conv3x3, LayerNorm, Mode, ParamStore, ReluFreeze,
};
use crate::rng;
use crate::text::{LanguageFeature, TextEncoder, Vocab};

/// Finite-difference steps, largest first.
pub const STEPS: [f64; 7] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5];

#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub module: String,
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
    }
}

/// Derivatives below this fraction of the checked value's magnitude are
/// compared in absolute terms. Rounding in `f` is relative to `|f|`, so exact
/// zeros (for example a bias feeding a normalization) would otherwise turn
/// that noise into a large relative error.
pub const DERIVATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Walk down the ladder while successive estimates clearly converge (the
/// truncation error of a half-decade step shrinks about 80-fold) and keep the
/// last one before rounding takes over.
pub fn stable_estimate(est: &[f64]) -> f64 {
    let diffs: Vec<f64> = est.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
    let k = (0..diffs.len())
        .find(|&i| i + 1 == diffs.len() || diffs[i + 1] > diffs[i] / 10.0)
        .unwrap_or(0);
    est[k]
}

/// Check `f` with respect to every listed variable.
pub fn check<F>(module: &str, vars: &[(String, Var)], seed: u64, f: F) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    let freeze = ReluFreeze::record();
    let loss = f()?;
    let grads = loss.backward()?;
    let floor = DERIVATIVE_FLOOR * to_f64_vec(&loss)?[0].abs().max(1.0);
    let mut r = rng::stream(seed, &format!("gradcheck-{module}"));
    let mut groups = Vec::with_capacity(vars.len());
    for (name, var) in vars {
        let p0 = var.as_tensor().copy()?;
        let n = p0.elem_count();
        let mut u: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        u.iter_mut().for_each(|v| *v /= norm);
        let ut = from_f64(u, p0.dims(), p0.dtype())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(&(g * &ut)?.sum_all()?)?[0],
            None => 0.0,
        };
        let at = |k: f64| -> Result<f64> {
            var.set(&(&p0 + (&ut * k)?)?)?;
            freeze.rewind();
            Ok(to_f64_vec(&f()?)?[0])
        };
        let mut est = Vec::with_capacity(STEPS.len());
        for h in STEPS {
            let d1 = at(h)? - at(-h)?;
            let d2 = at(2.0 * h)? - at(-2.0 * h)?;
            est.push((8.0 * d1 - d2) / (12.0 * h));
        }
        var.set(&p0)?;
        let numeric = stable_estimate(&est);
        groups.push(GroupError {
            name: name.clone(),
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric, floor),
        });
    }
    Ok(GradReport {
        module: module.to_string(),
        groups,
    })
}

struct Probe {
    r: rand_chacha::ChaCha8Rng,
    vars: Vec<(String, Var)>,
}

impl Probe {
    fn new(seed: u64, label: &str) -> Self {
        Self {
            r: rng::stream(seed, label),
            vars: Vec::new(),
        }
    }

    fn values(&mut self, shape: &[usize]) -> Vec<f64> {
        let n: usize = shape.iter().product();
        (0..n).map(|_| self.r.gen_range(-1.0..1.0)).collect()
    }

    /// A random input registered as a checked variable.
    fn input(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = from_f64(self.values(shape), shape, DType::F64)?;
        let v = Var::from_tensor(&t)?;
        self.vars.push((format!("input.{name}"), v.clone()));
        Ok(v.as_tensor().clone())
    }

    fn constant(&mut self, shape: &[usize]) -> Result<Tensor> {
        from_f64(self.values(shape), shape, DType::F64)
    }

    fn with_params(mut self, ps: &ParamStore) -> Self {
        self.vars.extend(ps.trainable());
        self
    }
}

/// Scalar `sum(w * x^2)` for a fixed random positive `w`. Every element
/// contributes and the terms cannot cancel, so `|f|` tracks the rounding scale.
fn project(x: &Tensor, seed: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed, "gradcheck-projection");
    let w: Vec<f64> = (0..x.elem_count()).map(|_| r.gen_range(0.5..1.5)).collect();
    Ok((x.sqr()? * from_f64(w, x.dims(), x.dtype())?)?.sum_all()?)
}

fn language(p: &mut Probe, b: usize, l: usize, c: usize, real: usize) -> Result<LanguageFeature> {
    let mut m = vec![0.0; b * l];
    for bi in 0..b {
        for t in 0..real {
            m[bi * l + t] = 1.0;
        }
    }
    let mask = from_f64(m, &[b, l], DType::F64)?;
    let features = p.input("language", &[b, l, c])?;
    Ok(LanguageFeature { features, mask })
}

/// Elementwise and structural tensor operations.
pub fn check_ops(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let ops: Vec<(&str, Vec<usize>, Box<dyn Fn(&Tensor) -> Result<Tensor>>)> = vec![
        (
            "resize_bilinear",
            vec![2, 3, 5, 2],
            Box::new(|x| resize_bilinear(x, 7, 4)),
        ),
        (
            "split_grid",
            vec![1, 4, 4, 2],
            Box::new(|x| split_grid(x, 2)),
        ),
        (
            "assemble_grid",
            vec![4, 2, 2, 2],
            Box::new(|x| assemble_grid(x, 2)),
        ),
        ("patchify", vec![1, 4, 6, 2], Box::new(|x| patchify(x, 2))),
        ("regroup", vec![4, 2, 3, 2], Box::new(|x| regroup(x, 2))),
        ("softmax", vec![3, 5], Box::new(softmax_last)),
    ];
    for (name, shape, op) in ops {
        let mut p = Probe::new(seed, name);
        let x = p.input("x", &shape)?;
        out.push(check(name, &p.vars, seed, || project(&op(&x)?, seed))?);
    }
    let ps = ParamStore::new(DType::F64, seed);
    let ln = LayerNorm::new(&ps, "ln", 4)?;
    let mut p = Probe::new(seed, "layer_norm").with_params(&ps);
    let x = p.input("x", &[3, 2, 4])?;
    out.push(check("layer_norm", &p.vars, seed, || {
        project(&ln.forward(&x)?, seed)
    })?);

    let ps = ParamStore::new(DType::F64, seed);
    let bn = BatchNorm::new(&ps, "bn", 3)?;
    let conv = Conv3x3::new(&ps, "conv", 2, 3)?;
    let mut p = Probe::new(seed, "conv_bn").with_params(&ps);
    let x = p.input("x", &[2, 4, 4, 2])?;
    out.push(check("conv_bn", &p.vars, seed, || {
        project(&bn.forward(&conv.forward(&x)?, Mode::Train)?, seed)
    })?);

    let ps = ParamStore::new(DType::F64, seed);
    let cbr = Cbr::new(&ps, "cbr", 2, 3)?;
    let mut p = Probe::new(seed, "cbr").with_params(&ps);
    let x = p.input("x", &[2, 3, 3, 2])?;
    out.push(check("cbr", &p.vars, seed, || {
        project(&cbr.forward(&x, Mode::Train)?, seed)
    })?);
    Ok(out)
}

pub fn check_text_encoder(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig {
        lang_dim: 4,
        lang_len: 5,
        vocab_size: 9,
        ..ModelConfig::tiny()
    };
    let ps = ParamStore::new(DType::F64, seed);
    let enc = TextEncoder::new(&ps, &cfg)?;
    let p = Probe::new(seed, "text").with_params(&ps);
    let ids = Tensor::from_vec(
        vec![2u32, 5, 7, 0, 0, 3, 1, 4, 8, 6],
        (2, 5),
        &candle_core::Device::Cpu,
    )?;
    let mask = from_f64(
        vec![1., 1., 1., 0., 0., 1., 1., 1., 1., 1.],
        &[2, 5],
        DType::F64,
    )?;
    check("text_encoder", &p.vars, seed, || {
        project(&enc.forward(&ids, &mask)?.features, seed)
    })
}

pub fn check_backbone_block(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig::tiny();
    let ps = ParamStore::new(DType::F64, seed);
    let bb = Backbone::new(&ps, &cfg)?;
    let mut p = Probe::new(seed, "backbone");
    let x = p.input("x", &[2, 4, 4, cfg.stage_channels[0]])?;
    let vars: Vec<(String, Var)> = ps
        .trainable()
        .into_iter()
        .filter(|(n, _)| n.contains("stage2") || n.contains("merge2"))
        .chain(p.vars)
        .collect();
    check("backbone_block", &vars, seed, || {
        project(&bb.encode_stage(&x, 2)?, seed)
    })
}

pub fn check_align_language(seed: u64) -> Result<GradReport> {
    let ps = ParamStore::new(DType::F64, seed);
    let align = LanguageAlign::new(&ps, "align", 8, 5)?;
    let mut p = Probe::new(seed, "align").with_params(&ps);
    let v = p.input("vision", &[1, 2, 2, 8])?;
    let lang = language(&mut p, 1, 4, 5, 3)?;
    check("align_language", &p.vars, seed, || {
        project(&align.forward(&v, &lang)?, seed)
    })
}

pub fn check_gate_fuse(seed: u64) -> Result<GradReport> {
    let ps = ParamStore::new(DType::F64, seed);
    let gate = GateFuse::new(&ps, "gate", 4)?;
    let mut p = Probe::new(seed, "gate").with_params(&ps);
    let f = p.input("aligned", &[1, 2, 2, 4])?;
    let v = p.input("vision", &[1, 2, 2, 4])?;
    check("gate_fuse", &p.vars, seed, || {
        project(&gate.forward(&f, &v)?, seed)
    })
}

pub fn check_exchange(seed: u64) -> Result<GradReport> {
    let ps = ParamStore::new(DType::F64, seed);
    let pr = ExchangeProjections::new(&ps, "remote", 3)?;
    let pc = ExchangeProjections::new(&ps, "close", 3)?;
    let mut p = Probe::new(seed, "exchange").with_params(&ps);
    let remote = p.input("remote", &[1, 3, 3, 3])?;
    let close = p.input("close", &[1, 6, 6, 3])?;
    let grid = WindowGrid::new(3, 2, 2);
    check("exchange", &p.vars, seed, || {
        let rw = partition_windows(&remote, grid.n_win, grid.remote_window)?;
        let cw = partition_windows(&close, grid.n_win, grid.close_window)?;
        let a = project(&exchange_close_to_remote(&rw, &cw, &grid, Some(&pr))?, seed)?;
        let b = project(
            &exchange_remote_to_close(&cw, &rw, &grid, Some(&pc))?,
            seed + 1,
        )?;
        Ok((a + b)?)
    })
}

pub fn check_cvwin_stage(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig {
        stage_channels: [8, 10, 12, 14],
        lang_dim: 5,
        raw_qkv: false,
        ..ModelConfig::tiny()
    };
    let ps = ParamStore::new(DType::F64, seed);
    let st = CvwinStage::new(&ps, &cfg, 1)?;
    let mut p = Probe::new(seed, "cvwin").with_params(&ps);
    let remote = p.input("remote", &[1, 4, 4, 8])?;
    let close = p.input("close", &[4, 4, 4, 8])?;
    let lang = language(&mut p, 1, 3, 5, 3)?;
    check("cvwin_forward", &p.vars, seed, || {
        let o = st.forward(Some(&remote), Some(&close), &lang)?;
        Ok((project(&o.remote.expect("remote"), seed)?
            + project(&o.close.expect("close"), seed + 1)?)?)
    })
}

pub fn check_fuse_joint(seed: u64) -> Result<GradReport> {
    let ps = ParamStore::new(DType::F64, seed);
    let j = JointFusion::new(&ps, 4)?;
    let mut p = Probe::new(seed, "joint").with_params(&ps);
    let a = p.input("remote", &[1, 3, 3, 4])?;
    let b = p.input("close", &[1, 3, 3, 4])?;
    check("fuse_joint", &p.vars, seed, || {
        project(&j.forward(&a, &b)?, seed)
    })
}

pub fn check_cda(seed: u64) -> Result<GradReport> {
    let ps = ParamStore::new(DType::F64, seed);
    let cda = Cda::new(&ps, 4)?;
    let spec = make_dilation_spec(6, 3, 2);
    let mut p = Probe::new(seed, "cda").with_params(&ps);
    let q = p.input("query", &[1, 6, 6, 4])?;
    let j = p.input("joint", &[1, 6, 6, 4])?;
    check("cda_enhance", &p.vars, seed, || {
        project(&cda.forward(&q, &j, &spec)?, seed)
    })
}

pub fn check_decode(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig::tiny();
    let ps = ParamStore::new(DType::F64, seed);
    let dec = Cdad::new(&ps, &cfg)?;
    let mut p = Probe::new(seed, "decode").with_params(&ps);
    let k = cfg.n_view * cfg.n_view;
    let mut stages = Vec::new();
    for i in 1..=4 {
        let (h, c) = (cfg.stage_side(i), cfg.stage_channels[i - 1]);
        stages.push(CvwinOutput {
            remote: Some(p.input(&format!("remote{i}"), &[1, h, h, c])?),
            close: Some(p.input(&format!("close{i}"), &[k, h, h, c])?),
        });
    }
    check("decode", &p.vars, seed, || {
        let pred = dec.forward(&stages, Mode::Train)?.pred;
        project(&pred, seed)
    })
}

pub fn check_losses(seed: u64) -> Result<GradReport> {
    let mut p = Probe::new(seed, "losses");
    let logits = p.input("logits", &[2, 3, 3, 2])?;
    let gt = p.constant(&[2, 3, 3])?.ge(0.0)?.to_dtype(DType::F64)?;
    check("losses", &p.vars, seed, || {
        let pred = softmax_last(&logits)?;
        let fg = pred.narrow(3, 1, 1)?.squeeze(3)?;
        let d = dice_loss(&fg, &gt)?;
        let b = bce_loss(&fg, &gt)?;
        Ok((total_loss(&pred, &gt, 0.9, 0.1)?.total + (d * 0.3)? + (b * 0.2)?)?)
    })
}

/// End-to-end on the 32x32 configuration against the training loss.
pub fn check_full_model(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::tiny()
    };
    let net = CsiNet::new(&cfg, DType::F64)?;
    let spec = SceneSpec {
        side: 96,
        ..SceneSpec::default()
    };
    let sample = generate_sample(seed, &spec)?;
    let bundle = prepare_views(&sample, &cfg, &Vocab::builtin())?;
    let batch = net.batch(&[&bundle])?;
    let gt = batch.target.clone().expect("target");
    let vars = net.params.trainable();
    check("full_model", &vars, seed, || {
        let pred = net.forward(&batch, Mode::Train)?;
        Ok(total_loss(&pred, &gt, 0.9, 0.1)?.total)
    })
}

/// Module names accepted by [`run`].
pub const MODULES: [&str; 12] = [
    "ops",
    "text_encoder",
    "backbone_block",
    "align_language",
    "gate_fuse",
    "exchange",
    "cvwin_forward",
    "fuse_joint",
    "cda_enhance",
    "decode",
    "losses",
    "full_model",
];

/// Run one named check, or all of them for `"all"`.
pub fn run(module: &str, seed: u64) -> Result<Vec<GradReport>> {
    Ok(match module {
        "all" => {
            let mut v = Vec::new();
            for m in MODULES {
                v.extend(run(m, seed)?);
            }
            v
        }
        "ops" => check_ops(seed)?,
        "text_encoder" => vec![check_text_encoder(seed)?],
        "backbone_block" => vec![check_backbone_block(seed)?],
        "align_language" => vec![check_align_language(seed)?],
        "gate_fuse" => vec![check_gate_fuse(seed)?],
        "exchange" => vec![check_exchange(seed)?],
        "cvwin_forward" => vec![check_cvwin_stage(seed)?],
        "fuse_joint" => vec![check_fuse_joint(seed)?],
        "cda_enhance" => vec![check_cda(seed)?],
        "decode" => vec![check_decode(seed)?],
        "losses" => vec![check_losses(seed)?],
        "full_model" => vec![check_full_model(seed)?],
        other => {
            return Err(Error::Config(vec![format!(
                "unknown gradcheck module {other:?}; expected one of all, {}",
                MODULES.join(", ")
            )]))
        }
    })
}

/// Tolerance for a module: 1e-4 for the full model, 1e-5 otherwise.
pub fn tolerance(module: &str) -> f64 {
    if module == "full_model" {
        1e-4
    } else {
        1e-5
    }
}
