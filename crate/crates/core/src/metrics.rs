//! Confusion-matrix segmentation metrics.
//!
//! Rows are ground truth, columns prediction. For category `c`:
//! `IoU_c = TP/(TP+FP+FN)` and `F1_c = 2TP/(2TP+FP+FN)`. mIoU and F1 are
//! unweighted means over the categories that occur in either ground truth
//! or prediction; OA is the trace over the total and FWIoU weights each IoU
//! by its ground-truth frequency.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Category, LabelMask};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_categories: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            k: num_categories,
            counts: vec![0; num_categories * num_categories],
        }
    }

    pub fn from_counts(num_categories: usize, counts: Vec<u64>) -> Result<ConfusionMatrix> {
        if counts.len() != num_categories * num_categories {
            return Err(Error::shape(format!(
                "{num_categories} categories need {} counts, got {}",
                num_categories * num_categories,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix {
            k: num_categories,
            counts,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate_labels(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.k;
        let check = |labels: &[u8]| match labels.iter().position(|&l| l as usize >= k) {
            Some(index) => Err(Error::LabelOutOfRange {
                label: labels[index],
                index,
                num_categories: k,
            }),
            None => Ok(()),
        };
        check(gt)?;
        check(pred)?;
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(format!(
                "prediction is {}×{} but ground truth is {}×{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        self.accumulate_labels(pred.labels(), gt.labels())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape(format!(
                "cannot merge {} and {} categories",
                self.k, other.k
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Headline scores in `[0, 1]`. Per-category entries are `None` for
/// categories absent from both ground truth and prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub per_category_iou: Vec<Option<f64>>,
    pub per_category_f1: Vec<Option<f64>>,
    pub miou: f64,
    pub f1: f64,
    pub oa: f64,
    pub fwiou: f64,
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("cannot compute metrics from an empty confusion matrix"));
    }
    let k = cm.k;
    let mut iou = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut trace = 0;
    let mut fwiou = 0.0;
    for c in 0..k {
        let tp = cm.get(c, c);
        let gt: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let pred: u64 = (0..k).map(|g| cm.get(g, c)).sum();
        let (fn_, fp) = (gt - tp, pred - tp);
        trace += tp;
        if tp + fp + fn_ == 0 {
            iou.push(None);
            f1.push(None);
            continue;
        }
        let i = tp as f64 / (tp + fp + fn_) as f64;
        iou.push(Some(i));
        f1.push(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
        fwiou += gt as f64 / total as f64 * i;
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(Metrics {
        miou: mean(&iou),
        f1: mean(&f1),
        oa: trace as f64 / total as f64,
        fwiou,
        per_category_iou: iou,
        per_category_f1: f1,
    })
}

fn category_label(c: usize, k: usize) -> String {
    match Category::from_index(c as u8) {
        Some(cat) if k == Category::ALL.len() => cat.name().to_string(),
        _ => format!("c{c}"),
    }
}

pub const REPORT_TAG_WIDTH: usize = 20;

/// Column header matching [`report`].
pub fn report_header(num_categories: usize) -> String {
    let mut s = format!(
        "{:<w$} {:>6} {:>6} {:>6} {:>6} | IoU per category:",
        "method",
        "mIoU",
        "F1",
        "OA",
        "FWIoU",
        w = REPORT_TAG_WIDTH
    );
    for c in 0..num_categories {
        let _ = write!(s, " {:>9}", category_label(c, num_categories));
    }
    s
}

/// Fixed-width table row: tag, mIoU, F1, OA and FWIoU in percent with two
/// decimals, then per-category IoU in category order.
pub fn report(metrics: &Metrics, tag: &str) -> String {
    let pct = |v: f64| format!("{:>6.2}", 100.0 * v);
    let mut s = format!(
        "{:<w$} {} {} {} {} |",
        tag,
        pct(metrics.miou),
        pct(metrics.f1),
        pct(metrics.oa),
        pct(metrics.fwiou),
        w = REPORT_TAG_WIDTH
    );
    let k = metrics.per_category_iou.len();
    for (c, v) in metrics.per_category_iou.iter().enumerate() {
        let cell = v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = write!(s, " {}={}", category_label(c, k), cell);
    }
    s
}

impl Metrics {
    /// `key=value` lines using shortest round-trip float formatting.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "miou={}\nf1={}\noa={}\nfwiou={}\n",
            self.miou, self.f1, self.oa, self.fwiou
        );
        let k = self.per_category_iou.len();
        for c in 0..k {
            let name = category_label(c, k);
            let fmt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
            let _ = writeln!(s, "iou.{name}={}", fmt(self.per_category_iou[c]));
            let _ = writeln!(s, "f1.{name}={}", fmt(self.per_category_f1[c]));
        }
        s
    }

    pub fn parse_dump(text: &str) -> Result<Metrics> {
        let mut scalars = [None; 4];
        let mut iou = Vec::new();
        let mut f1 = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("metrics line without '=': {line:?}")))?;
            let parse = |v: &str| -> Result<Option<f64>> {
                if v == "none" {
                    return Ok(None);
                }
                v.parse()
                    .map(Some)
                    .map_err(|_| Error::invalid(format!("bad metric value {v:?} for {key}")))
            };
            let v = parse(value)?;
            match key {
                "miou" => scalars[0] = v,
                "f1" => scalars[1] = v,
                "oa" => scalars[2] = v,
                "fwiou" => scalars[3] = v,
                k if k.starts_with("iou.") => iou.push(v),
                k if k.starts_with("f1.") => f1.push(v),
                other => return Err(Error::invalid(format!("unknown metric key {other:?}"))),
            }
        }
        let need =
            |i: usize, name: &str| scalars[i].ok_or_else(|| Error::invalid(format!("metrics dump lacks {name}")));
        Ok(Metrics {
            miou: need(0, "miou")?,
            f1: need(1, "f1")?,
            oa: need(2, "oa")?,
            fwiou: need(3, "fwiou")?,
            per_category_iou: iou,
            per_category_f1: f1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(k: usize, counts: &[u64]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(k, counts.to_vec()).unwrap()
    }

    #[test]
    fn two_category_hand_example() {
        let m = compute_metrics(&matrix(2, &[3, 1, 1, 3])).unwrap();
        assert_eq!(m.per_category_iou, vec![Some(0.6), Some(0.6)]);
        assert_eq!((m.miou, m.oa, m.f1, m.fwiou), (0.6, 0.75, 0.75, 0.6));
        let row = report(&m, "x");
        let flat = row.split_whitespace().collect::<Vec<_>>().join(" ");
        assert!(flat.contains("60.00 75.00 75.00 60.00"), "{row}");
    }

    #[test]
    fn perfect_prediction() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 5) as u8).collect();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate_labels(&labels, &labels).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.miou, m.f1, m.oa, m.fwiou), (1.0, 1.0, 1.0, 1.0));
        assert!(report(&m, "GDGT").contains("100.00 100.00 100.00 100.00"));
        assert_eq!((0..5).map(|c| cm.get(c, c)).sum::<u64>(), 50);
    }

    #[test]
    fn total_miss() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate_labels(&[1; 8], &[0; 8]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.oa, 0.0);
        assert_eq!(m.per_category_iou[0], Some(0.0));
    }

    #[test]
    fn single_pixel_cell() {
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate_labels(&[2], &[1]).unwrap();
        assert_eq!(cm.get(1, 2), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn absent_categories_are_excluded() {
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate_labels(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(&m.per_category_iou[2..], &[None, None, None]);
        assert_eq!(m.miou, (0.5 + 2.0 / 3.0) / 2.0);
        assert!(report(&m, "t").contains("Land=-"));
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&ConfusionMatrix::new(3)).is_err());
        let mut cm = ConfusionMatrix::new(5);
        assert!(matches!(
            cm.accumulate_labels(&[0, 7], &[0, 1]),
            Err(Error::LabelOutOfRange { label: 7, index: 1, .. })
        ));
        assert!(cm.accumulate_labels(&[0], &[0, 1]).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn halves_accumulate_to_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<u8> = (0..400).map(|_| rng.random_range(0..5)).collect();
        let pred: Vec<u8> = (0..400).map(|_| rng.random_range(0..5)).collect();
        let mut whole = ConfusionMatrix::new(5);
        whole.accumulate_labels(&pred, &gt).unwrap();
        let mut a = ConfusionMatrix::new(5);
        a.accumulate_labels(&pred[..150], &gt[..150]).unwrap();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate_labels(&pred[150..], &gt[150..]).unwrap();
        b.merge(&a).unwrap();
        assert_eq!(b, whole);
    }

    #[test]
    fn relabeling_permutes_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<u8> = (0..300).map(|_| rng.random_range(0..5)).collect();
        let pred: Vec<u8> = gt
            .iter()
            .map(|&g| {
                if rng.random_bool(0.3) {
                    rng.random_range(0..5)
                } else {
                    g
                }
            })
            .collect();
        let perm = [3u8, 0, 4, 1, 2];
        let relabel = |v: &[u8]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<u8>>();
        let mut a = ConfusionMatrix::new(5);
        a.accumulate_labels(&pred, &gt).unwrap();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate_labels(&relabel(&pred), &relabel(&gt)).unwrap();
        let (ma, mb) = (compute_metrics(&a).unwrap(), compute_metrics(&b).unwrap());
        assert_eq!(ma.oa, mb.oa);
        assert!((ma.miou - mb.miou).abs() < 1e-15);
        for (c, &to) in perm.iter().enumerate() {
            assert_eq!(ma.per_category_iou[c], mb.per_category_iou[to as usize]);
        }
    }

    #[test]
    fn two_decimal_percent_row() {
        let m = Metrics {
            per_category_iou: vec![],
            per_category_f1: vec![],
            miou: 0.8857,
            f1: 0.9362,
            oa: 0.9576,
            fwiou: 0.9214,
        };
        let flat = report(&m, "GDGT").split_whitespace().collect::<Vec<_>>().join(" ");
        assert!(flat.starts_with("GDGT 88.57 93.62 95.76 92.14"), "{flat}");
    }

    #[test]
    fn dump_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: Vec<u8> = (0..333).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<u8> = (0..333).map(|_| rng.random_range(0..4)).collect();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate_labels(&pred, &gt).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(Metrics::parse_dump(&m.dump()).unwrap(), m);
        assert!(Metrics::parse_dump("miou=0.5").is_err());
    }

    #[test]
    fn header_aligns_with_rows() {
        let h = report_header(5);
        assert!(h.starts_with("method"));
        assert!(h.contains("Pool-Ice"));
    }
}
