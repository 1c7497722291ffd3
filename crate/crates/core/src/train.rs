//! Optimizer, learning-rate schedule, training loop and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;

use crate::cdad::predict_mask;
use crate::checkpoint::{save_checkpoint, TrainState};
use crate::config::{Config, TrainConfig};
use crate::data::ViewBundle;
use crate::error::{Error, Result};
use crate::metrics::{iou, miou, total_loss, EvalRecord};
use crate::model::CsiNet;
use crate::nn::{to_f64_vec, Mode};
use crate::rng;

/// `lr0 * (1 - t / T)^power`, clamped at zero once `t >= T`.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(power)
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn update(
        &mut self,
        params: &[(String, Var)],
        grads: &candle_core::backprop::GradStore,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params {
            let g = match grads.get(var.as_tensor()) {
                // Detached so optimizer state does not keep the step's graph alive.
                Some(g) => g.detach(),
                None => continue,
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let step = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let p = var.as_tensor();
            let decayed = (p * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (step * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "step,lr,total,dice,bce,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{}",
            self.step, self.lr, self.total, self.dice, self.bce, self.wall_ms
        )
    }
}

/// Parse a loss log written by [`Trainer`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format(path, "missing loss log header"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format(path, format!("bad log row {l:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                total: f[2].parse().map_err(|_| bad())?,
                dice: f[3].parse().map_err(|_| bad())?,
                bce: f[4].parse().map_err(|_| bad())?,
                wall_ms: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Training over an in-memory set of prepared samples.
pub struct Trainer {
    pub config: Config,
    pub net: CsiNet,
    pub opt: AdamW,
    pub log: Vec<LogRow>,
    /// Directory for checkpoints, the loss log and diagnostics.
    pub out_dir: Option<PathBuf>,
    pub best_val: Option<f64>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        let violations = crate::config::validate_config(config);
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let net = CsiNet::new(&config.model, candle_core::DType::F32)?;
        Ok(Self::from_parts(
            config.clone(),
            net,
            AdamW::new(&config.train),
        ))
    }

    pub fn from_parts(config: Config, net: CsiNet, opt: AdamW) -> Self {
        Self {
            config,
            net,
            opt,
            log: Vec::new(),
            out_dir: None,
            best_val: None,
            started: Instant::now(),
        }
    }

    /// Resume from a checkpoint written by a previous run.
    pub fn resume(path: &Path) -> Result<Self> {
        let state = crate::checkpoint::load_checkpoint(path)?;
        let opt = state.optimizer(&state.config.train);
        Ok(Self::from_parts(state.config, state.net, opt))
    }

    pub fn with_out_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.train.batch_size.max(1))
    }

    /// Total optimizer steps for a training set of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.config
            .train
            .steps
            .unwrap_or(self.config.train.epochs * self.steps_per_epoch(n))
    }

    /// Sample order of `epoch`; a function of the seed and epoch only.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(self.config.model.seed, &format!("shuffle-{epoch}"));
        idx.shuffle(&mut r);
        idx
    }

    /// Run one optimizer step on the given samples.
    pub fn step(&mut self, batch: &[&ViewBundle], total_steps: usize) -> Result<LogRow> {
        let t = self.opt.step;
        let tc = &self.config.train;
        let lr = poly_lr(tc.lr, t, total_steps, tc.poly_power);
        let input = self.net.batch(batch)?;
        let pred = self.net.forward(&input, Mode::Train)?;
        let gt = input.target.as_ref().expect("training batch has targets");
        let loss = total_loss(&pred, gt, tc.dice_weight, tc.bce_weight)?;
        let total = to_f64_vec(&loss.total)?[0];
        let dice = to_f64_vec(&loss.dice)?[0];
        let bce = to_f64_vec(&loss.bce)?[0];
        if !total.is_finite() {
            self.dump_non_finite(t, lr, total, dice, bce)?;
            return Err(Error::NonFinite(format!("loss {total} at step {t}")));
        }
        let grads = loss.total.backward()?;
        let params = self.net.params.trainable();
        for (name, var) in &params {
            if let Some(g) = grads.get(var.as_tensor()) {
                let s = to_f64_vec(&g.sqr()?.sum_all()?)?[0];
                if !s.is_finite() {
                    self.dump_non_finite(t, lr, total, dice, bce)?;
                    return Err(Error::NonFinite(format!("gradient of {name} at step {t}")));
                }
            }
        }
        self.opt.update(&params, &grads, lr)?;
        let row = LogRow {
            step: t,
            lr,
            total,
            dice,
            bce,
            wall_ms: self.started.elapsed().as_millis(),
        };
        self.log.push(row.clone());
        if let Some(dir) = &self.out_dir {
            append_log(&dir.join("loss.csv"), &row)?;
        }
        Ok(row)
    }

    fn dump_non_finite(&self, step: usize, lr: f64, total: f64, dice: f64, bce: f64) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let mut norms = serde_json::Map::new();
        for (name, var) in self.net.params.trainable() {
            let v = to_f64_vec(var.as_tensor())?;
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.insert(
                name,
                serde_json::json!(if n.is_finite() { Some(n) } else { None }),
            );
        }
        let doc = serde_json::json!({
            "step": step,
            "lr": lr,
            "total": if total.is_finite() { Some(total) } else { None },
            "dice": if dice.is_finite() { Some(dice) } else { None },
            "bce": if bce.is_finite() { Some(bce) } else { None },
            "parameter_norms": norms,
        });
        let path = dir.join("nonfinite_dump.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("json"))
            .map_err(|e| Error::io(&path, e))
    }

    /// Train until the step budget is spent. Resumed runs continue at the
    /// saved step. With an output directory, a checkpoint is written at the end
    /// of every epoch, plus `best.ckpt` whenever validation mIoU improves.
    pub fn fit(&mut self, train: &[ViewBundle], val: Option<&[ViewBundle]>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let n = train.len();
        let spe = self.steps_per_epoch(n);
        let total = self.total_steps(n);
        let bs = self.config.train.batch_size;
        if let Some(dir) = &self.out_dir {
            let log = dir.join("loss.csv");
            if self.opt.step == 0 || !log.exists() {
                std::fs::write(&log, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log, e))?;
            }
        }
        while self.opt.step < total {
            let epoch = self.opt.step / spe;
            let order = self.epoch_order(epoch, n);
            let first = self.opt.step % spe;
            for b in first..spe {
                if self.opt.step >= total {
                    break;
                }
                let items: Vec<&ViewBundle> = order[b * bs..((b + 1) * bs).min(n)]
                    .iter()
                    .map(|&i| &train[i])
                    .collect();
                self.step(&items, total)?;
            }
            if let Some(dir) = self.out_dir.clone() {
                let state = TrainState::capture(&self.config, &self.net, &self.opt);
                save_checkpoint(&dir.join(format!("epoch{epoch:03}.ckpt")), &state)?;
                save_checkpoint(&dir.join("last.ckpt"), &state)?;
                if let Some(v) = val {
                    let m = miou(&evaluate(&self.net, v, self.config.train.threshold)?)?;
                    if self.best_val.is_none_or(|b| m > b) {
                        self.best_val = Some(m);
                        save_checkpoint(&dir.join("best.ckpt"), &state)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn append_log(path: &Path, row: &LogRow) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", row.csv()).map_err(|e| Error::io(path, e))
}

/// Loss log as CSV text.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Foreground probabilities in eval mode, `(B, S, S, 2)`, in chunks of `chunk`.
pub fn predict(net: &CsiNet, samples: &[&ViewBundle], chunk: usize) -> Result<Vec<Tensor>> {
    samples
        .chunks(chunk.max(1))
        .map(|c| {
            let batch = net.batch(c)?;
            // Detached so each chunk's graph is freed before the next runs.
            Ok(net.forward(&batch, Mode::Eval)?.detach())
        })
        .collect()
}

/// Per-sample IoU records of the network's thresholded predictions.
pub fn evaluate(net: &CsiNet, samples: &[ViewBundle], threshold: f64) -> Result<Vec<EvalRecord>> {
    let refs: Vec<&ViewBundle> = samples.iter().collect();
    let mut records = Vec::with_capacity(samples.len());
    for pred in predict(net, &refs, 8)? {
        for m in predict_mask(&pred, threshold)? {
            let i = records.len();
            records.push(iou(&format!("{i}"), &m, &samples[i].mask_full)?);
        }
    }
    Ok(records)
}
