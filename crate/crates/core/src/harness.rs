//! Datasets, evaluation and ablation runs shared by the command line and tests.

use std::path::Path;

use crate::cdad::predict_mask;
use crate::config::Config;
use crate::data::{
    generate_set, prepare_image_views, prepare_views, read_image, read_manifest, read_mask,
    resize_nearest, Mask, Raster, SceneSpec, ViewBundle,
};
use crate::error::{Error, Result};
use crate::metrics::{emit_report, iou, EvalRecord, Report};
use crate::model::CsiNet;
use crate::nn::Mode;
use crate::text::{tokenize, Vocab};
use crate::train::{evaluate, Trainer};

/// Prepared samples with their identifiers and optional categories.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub categories: Vec<Option<String>>,
    pub bundles: Vec<ViewBundle>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Load every manifest record. Masks are resized to the supervision side.
    pub fn from_manifest(
        path: &Path,
        cfg: &crate::config::ModelConfig,
        vocab: &Vocab,
    ) -> Result<Self> {
        let mut ds = Dataset::default();
        for (i, r) in read_manifest(path)?.into_iter().enumerate() {
            let image = read_image(&r.image)?;
            let mask = read_mask(&r.mask)?;
            let (remote, close) = prepare_image_views(&image, cfg)?;
            let side = cfg.full_side();
            ds.bundles.push(ViewBundle {
                remote,
                close,
                mask_full: resize_nearest(&mask, side, side),
                tokens: tokenize(&r.expression, cfg.lang_len, vocab)?,
            });
            ds.ids.push(i.to_string());
            ds.categories.push(r.category);
        }
        Ok(ds)
    }

    /// `count` generated scenes; the category is the target's shape word.
    pub fn synthetic(
        count: usize,
        seed: u64,
        spec: &SceneSpec,
        cfg: &crate::config::ModelConfig,
        vocab: &Vocab,
    ) -> Result<Self> {
        let mut ds = Dataset::default();
        for (i, s) in generate_set(seed, count, spec)?.iter().enumerate() {
            ds.bundles.push(prepare_views(s, cfg, vocab)?);
            ds.ids.push(i.to_string());
            ds.categories.push(Some(s.meta.category.clone()));
        }
        Ok(ds)
    }

    /// Distinct categories in sorted order.
    pub fn category_names(&self) -> Vec<String> {
        let mut c: Vec<String> = self.categories.iter().flatten().cloned().collect();
        c.sort();
        c.dedup();
        c
    }
}

/// Per-sample records of the network's predictions, tagged with ids and categories.
pub fn evaluate_dataset(net: &CsiNet, ds: &Dataset, threshold: f64) -> Result<Vec<EvalRecord>> {
    let mut records = evaluate(net, &ds.bundles, threshold)?;
    for (r, (id, cat)) in records.iter_mut().zip(ds.ids.iter().zip(&ds.categories)) {
        r.sample_id = id.clone();
        r.category = cat.clone();
    }
    Ok(records)
}

pub fn report(net: &CsiNet, ds: &Dataset, threshold: f64) -> Result<Report> {
    emit_report(&evaluate_dataset(net, ds, threshold)?, &ds.category_names())
}

/// Score prediction masks listed in `predictions` against the ground truth in
/// `manifest`, record by record. Predictions are resized to the ground-truth side.
pub fn evaluate_masks(manifest: &Path, predictions: &Path) -> Result<Report> {
    let gt = read_manifest(manifest)?;
    let pred = read_manifest(predictions)?;
    if gt.len() != pred.len() {
        return Err(Error::format(
            predictions,
            format!("{} predictions for {} records", pred.len(), gt.len()),
        ));
    }
    let mut records = Vec::with_capacity(gt.len());
    let mut categories = Vec::new();
    for (i, (g, p)) in gt.iter().zip(&pred).enumerate() {
        let gm = read_mask(&g.mask)?;
        let pm = read_mask(&p.mask)?;
        let pm = if pm.shape() == gm.shape() {
            pm
        } else {
            resize_nearest(&pm, gm.height, gm.width)
        };
        let mut r = iou(&i.to_string(), &pm, &gm)?;
        r.category = g.category.clone();
        categories.extend(g.category.clone());
        records.push(r);
    }
    categories.sort();
    categories.dedup();
    emit_report(&records, &categories)
}

/// Binary mask at the supervision side for one image and expression.
pub fn predict_image(
    net: &CsiNet,
    image: &Raster,
    expression: &str,
    vocab: &Vocab,
    threshold: f64,
) -> Result<Mask> {
    let cfg = &net.cfg;
    let (remote, close) = prepare_image_views(image, cfg)?;
    let side = cfg.full_side();
    let bundle = ViewBundle {
        remote,
        close,
        mask_full: Mask::new(side, side, 1),
        tokens: tokenize(expression, cfg.lang_len, vocab)?,
    };
    let batch = net.batch(&[&bundle])?;
    let pred = net.forward(&batch, Mode::Eval)?;
    Ok(predict_mask(&pred, threshold)?.remove(0))
}

/// One ablation variant: a name and the config overrides that define it.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    /// Parse `name:key=value,key=value`; a bare `key=value` list is named by itself.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, body) = match text.split_once(':') {
            Some((n, b)) => (n.to_string(), b),
            None => (text.to_string(), text),
        };
        let mut overrides = Vec::new();
        for kv in body.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(vec![format!("bad variant setting {kv:?}")]))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { name, overrides })
    }

    pub fn apply(&self, base: &Config) -> Result<Config> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub report: Report,
}

/// Train every variant under every seed with the same step budget, then
/// evaluate on `val`.
pub fn ablate(
    base: &Config,
    variants: &[Variant],
    train: &Dataset,
    val: &Dataset,
    seeds: &[u64],
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for v in variants {
            let mut cfg = v.apply(base)?;
            cfg.model.seed = seed;
            let mut tr = Trainer::new(&cfg)?;
            tr.fit(&train.bundles, None)?;
            runs.push(AblationRun {
                variant: v.name.clone(),
                seed,
                report: report(&tr.net, val, cfg.train.threshold)?,
            });
        }
    }
    Ok(runs)
}

/// One row per run: variant, seed, Pr@0.5, oIoU, mIoU (percent).
pub fn ablation_table(runs: &[AblationRun]) -> String {
    let mut s = format!(
        "{:<24} {:>6} {:>8} {:>8} {:>8}\n",
        "variant", "seed", "Pr@0.5", "oIoU", "mIoU"
    );
    for r in runs {
        let o = &r.report.overall;
        s += &format!(
            "{:<24} {:>6} {:>8.2} {:>8.2} {:>8.2}\n",
            r.variant,
            r.seed,
            o.pr50,
            100.0 * o.oiou,
            100.0 * o.miou
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        let v = Variant::parse("remote:view_mode=only_remote").unwrap();
        assert_eq!(v.name, "remote");
        assert_eq!(
            v.overrides,
            vec![("view_mode".into(), "only_remote".into())]
        );
        let v = Variant::parse("view_mode=only_close,exchange_mode=none").unwrap();
        assert_eq!(v.name, "view_mode=only_close,exchange_mode=none");
        assert_eq!(v.overrides.len(), 2);
        assert!(Variant::parse("x:nonsense").is_err());
        let base = Config::default();
        assert!(Variant::parse("bogus=1").unwrap().apply(&base).is_err());
    }
}
