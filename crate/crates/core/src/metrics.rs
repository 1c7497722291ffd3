//! Training losses and evaluation metrics.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;
/// Probability clamp used by the BCE term.
pub const BCE_CLAMP: f64 = 1e-7;
/// Thresholds reported as `Pr@X`.
pub const PR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

fn check_same(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` per sample, averaged over the batch.
///
/// `pred_fg, gt: (B, ..)`.
pub fn dice_loss(pred_fg: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred_fg, gt)?;
    let b = pred_fg.dim(0)?;
    let p = pred_fg.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?;
    let inter = (p.mul(&g)?.sum(1)? * 2.0)?;
    let denom = ((p.sum(1)? + g.sum(1)?)? + DICE_EPS)?;
    let ratio = ((inter + DICE_EPS)? / denom)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(pred_fg: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred_fg, gt)?;
    let p = pred_fg.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = gt.mul(&p.log()?)?;
    let neg = gt.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Weighted loss terms of one batch.
pub struct LossTerms {
    pub total: Tensor,
    pub dice: Tensor,
    pub bce: Tensor,
}

/// `dice_weight * dice + bce_weight * bce` on `pred: (B, S, S, 2)`, `gt: (B, S, S)`.
pub fn total_loss(
    pred: &Tensor,
    gt: &Tensor,
    dice_weight: f64,
    bce_weight: f64,
) -> Result<LossTerms> {
    let fg = pred.narrow(3, 1, 1)?.squeeze(3)?;
    let dice = dice_loss(&fg, gt)?;
    let bce = bce_loss(&fg, gt)?;
    let total = ((&dice * dice_weight)? + (&bce * bce_weight)?)?;
    Ok(LossTerms { total, dice, bce })
}

/// Per-sample pixel counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Intersection over union of two binary masks. Two empty masks score 1.
pub fn iou(sample_id: &str, pred: &Mask, gt: &Mask) -> Result<EvalRecord> {
    if pred.shape() != gt.shape() {
        return Err(Error::Dimension(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut i, mut u) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        i += u64::from(p && g);
        u += u64::from(p || g);
    }
    Ok(EvalRecord {
        sample_id: sample_id.to_string(),
        intersection: i,
        union: u,
        iou: if u == 0 { 1.0 } else { i as f64 / u as f64 },
        category: None,
    })
}

fn nonempty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("no evaluation records".into()));
    }
    Ok(())
}

/// Summed intersections over summed unions.
pub fn oiou(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    let i: u64 = records.iter().map(|r| r.intersection).sum();
    let u: u64 = records.iter().map(|r| r.union).sum();
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

pub fn miou(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64)
}

/// Percentage of records with IoU strictly above `x`.
pub fn precision_at(records: &[EvalRecord], x: f64) -> Result<f64> {
    nonempty(records)?;
    let hits = records.iter().filter(|r| r.iou > x).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    #[serde(rename = "Pr@0.5")]
    pub pr50: f64,
    #[serde(rename = "Pr@0.6")]
    pub pr60: f64,
    #[serde(rename = "Pr@0.7")]
    pub pr70: f64,
    #[serde(rename = "Pr@0.8")]
    pub pr80: f64,
    #[serde(rename = "Pr@0.9")]
    pub pr90: f64,
    #[serde(rename = "oIoU")]
    pub oiou: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub samples: usize,
    pub overall: Overall,
    /// Category to mIoU, sorted by category name.
    pub per_category: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Aggregate metrics. `categories` lists the buckets expected in the
/// breakdown; a listed bucket without records is reported in `warnings`.
pub fn emit_report(records: &[EvalRecord], categories: &[String]) -> Result<Report> {
    nonempty(records)?;
    let pr = |x| precision_at(records, x);
    let overall = Overall {
        pr50: pr(0.5)?,
        pr60: pr(0.6)?,
        pr70: pr(0.7)?,
        pr80: pr(0.8)?,
        pr90: pr(0.9)?,
        oiou: oiou(records)?,
        miou: miou(records)?,
    };
    let mut buckets: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        if let Some(c) = &r.category {
            buckets.entry(c.clone()).or_default().push(r.clone());
        }
    }
    let mut warnings = Vec::new();
    for c in categories {
        if !buckets.contains_key(c) {
            warnings.push(format!("category {c:?} has no samples"));
        }
    }
    let per_category = buckets
        .iter()
        .map(|(c, rs)| Ok((c.clone(), miou(rs)?)))
        .collect::<Result<_>>()?;
    Ok(Report {
        samples: records.len(),
        overall,
        per_category,
        warnings,
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("<report>", e.to_string()))
    }

    /// Fixed-width table: `Pr@0.5 .. Pr@0.9, oIoU, mIoU`, percentages.
    pub fn table(&self) -> String {
        let o = &self.overall;
        let mut s = format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "oIoU", "mIoU"
        );
        s += &format!(
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            o.pr50,
            o.pr60,
            o.pr70,
            o.pr80,
            o.pr90,
            100.0 * o.oiou,
            100.0 * o.miou
        );
        for (c, m) in &self.per_category {
            s += &format!("{c:>12} mIoU {:>8.2}\n", 100.0 * m);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{from_f64, to_f64_vec};
    use candle_core::DType;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        from_f64(v, shape, DType::F64).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        to_f64_vec(x).unwrap()[0]
    }

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::new(h, w, 1);
        for &(y, x) in on {
            m.data[y * w + x] = 1;
        }
        m
    }

    fn rec(i: u64, u: u64) -> EvalRecord {
        EvalRecord {
            sample_id: String::new(),
            intersection: i,
            union: u,
            iou: i as f64 / u as f64,
            category: None,
        }
    }

    #[test]
    fn dice_examples() {
        let g = t(vec![1.0, 1.0, 0.0, 0.0], &[1, 4]);
        assert_eq!(scalar(&dice_loss(&g, &g).unwrap()), 0.0);
        let half = t(vec![0.5; 4], &[1, 4]);
        assert!((scalar(&dice_loss(&half, &g).unwrap()) - 0.4).abs() < 1e-12);
        let n = 10_000;
        let p = t(
            (0..2 * n).map(|i| f64::from(u8::from(i < n))).collect(),
            &[1, 2 * n],
        );
        let q = t(
            (0..2 * n).map(|i| f64::from(u8::from(i >= n))).collect(),
            &[1, 2 * n],
        );
        assert!(scalar(&dice_loss(&p, &q).unwrap()) > 0.9999);
    }

    #[test]
    fn bce_examples() {
        let g = t(vec![1.0, 0.0], &[1, 2]);
        assert!(scalar(&bce_loss(&g, &g).unwrap()) <= -(1.0f64 - 1e-7).ln() + 1e-15);
        let half = t(vec![0.5, 0.5], &[1, 2]);
        assert!((scalar(&bce_loss(&half, &g).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let p = t(vec![0.25], &[1, 1]);
        let one = t(vec![1.0], &[1, 1]);
        assert!((scalar(&bce_loss(&p, &one).unwrap()) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        // Foreground channel 0.5 everywhere against an empty mask: dice = 1 - 1/(2+1).
        let pred = t(vec![0.5; 8], &[1, 2, 2, 2]);
        let gt = t(vec![0.0; 4], &[1, 2, 2]);
        let l = total_loss(&pred, &gt, 0.9, 0.1).unwrap();
        let want = 0.9 * (1.0 - 1.0 / 3.0) + 0.1 * 2f64.ln();
        assert!((scalar(&l.total) - want).abs() < 1e-12);
        let l = total_loss(&pred, &gt, 1.0, 0.0).unwrap();
        assert!((scalar(&l.total) - 2.0 / 3.0).abs() < 1e-12);
        assert!((0.9 * 1.0 + 0.1 * 2f64.ln() - 0.9693).abs() < 1e-4);
    }

    #[test]
    fn iou_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 1), (1, 1), (0, 2), (1, 2)]);
        let r = iou("x", &a, &b).unwrap();
        assert_eq!((r.intersection, r.union), (2, 6));
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou("x", &a, &a).unwrap().iou, 1.0);
        assert_eq!(iou("x", &a, &mask(4, 4, &[(3, 3)])).unwrap().iou, 0.0);
        assert_eq!(
            iou("x", &Mask::new(2, 2, 1), &Mask::new(2, 2, 1))
                .unwrap()
                .iou,
            1.0
        );
        assert!(iou("x", &a, &Mask::new(2, 2, 1)).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let rs = vec![rec(90, 100), rec(1, 10)];
        assert!((oiou(&rs).unwrap() - 91.0 / 110.0).abs() < 1e-12);
        assert!((miou(&rs).unwrap() - 0.5).abs() < 1e-12);
        let rs = vec![rec(6, 10), rec(4, 10), rec(9, 10)];
        assert!((precision_at(&rs, 0.5).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let one = vec![rec(3, 7)];
        assert_eq!(oiou(&one).unwrap(), miou(&one).unwrap());
        assert!(matches!(miou(&[]), Err(Error::Empty(_))));
        // Strict threshold: exactly 0.5 does not count.
        assert_eq!(precision_at(&[rec(1, 2)], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn report_round_trip_and_warnings() {
        let a = mask(2, 2, &[(0, 0)]);
        let mut r = iou("s0", &a, &a).unwrap();
        r.category = Some("circle".into());
        let rep = emit_report(&[r], &["circle".into(), "square".into()]).unwrap();
        assert_eq!(rep.overall.miou, 1.0);
        assert_eq!(rep.overall.pr90, 100.0);
        assert_eq!(rep.per_category.len(), 1);
        assert_eq!(rep.warnings.len(), 1);
        let back = Report::from_json(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        assert!(rep.table().contains("mIoU"));
    }
}
