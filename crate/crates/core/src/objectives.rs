//! Training losses and evaluation metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::image::{Label, Mask};
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_bce: 1.0, lambda_dice: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det: f64,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

fn check_label(label: usize) -> Result<()> {
    if label > 1 {
        return Err(Error::InvalidInput(format!("label {label} outside {{0, 1}}")));
    }
    Ok(())
}

fn check_shapes(pred: &[f64], gt: &Mask) -> Result<()> {
    if pred.len() != gt.bits().len() {
        return Err(Error::Contract(format!(
            "prediction has {} pixels, ground truth {}x{}",
            pred.len(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Softmax cross-entropy of a 2-class logit pair.
pub fn detection_loss(logits: [f64; 2], label: usize) -> Result<f64> {
    check_label(label)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let m = logits[0].max(logits[1]);
    let lse = m + libm::log(libm::exp(logits[0] - m) + libm::exp(logits[1] - m));
    Ok(lse - logits[label])
}

/// Mean binary cross-entropy with predictions clipped to `[ε, 1-ε]`.
pub fn mask_bce(pred: &[f64], gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt.bits())
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if g {
                -libm::log(p)
            } else {
                -libm::log(1.0 - p)
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `1 - (2 Σ p g + s) / (Σ p + Σ g + s)`.
pub fn mask_dice(pred: &[f64], gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut sp) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt.bits()) {
        sp += p;
        if g {
            inter += p;
        }
    }
    let sg = gt.count() as f64;
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH))
}

pub fn composite_loss(det: f64, bce: f64, dice: f64, w: LossWeights) -> LossBreakdown {
    LossBreakdown { det, bce, dice, total: det + w.lambda_bce * bce + w.lambda_dice * dice }
}

/// Loss of one sample; mask terms are dropped for authentic samples.
pub fn sample_loss(logits: [f64; 2], pred: &[f64], gt: &Mask, label: Label, w: LossWeights) -> Result<LossBreakdown> {
    let det = detection_loss(logits, label.index())?;
    if label == Label::Authentic {
        return Ok(composite_loss(det, 0.0, 0.0, w));
    }
    Ok(composite_loss(det, mask_bce(pred, gt)?, mask_dice(pred, gt)?, w))
}

/// Graph handles of a sample loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub det: Var,
    pub bce: Option<Var>,
    pub dice: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossBreakdown { det: g.value(self.det).item(), bce: v(self.bce), dice: v(self.dice), total: g.value(self.total).item() }
    }
}

/// `logits: [1, 2]` → scalar cross-entropy.
pub fn detection_loss_graph(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    check_label(label)?;
    let ls = g.log_softmax_rows(logits);
    let picked = g.slice(ls, Axis::Last, label, 1);
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0))
}

pub fn dice_graph(g: &mut Graph, probs: Var, gt: &Tensor) -> Var {
    let target = g.constant(gt.clone());
    let prod = g.mul(probs, target);
    let inter = g.sum_all(prod);
    let num = g.scale(inter, 2.0);
    let num = g.shift(num, DICE_SMOOTH);
    let sp = g.sum_all(probs);
    let den = g.shift(sp, gt.data().iter().sum::<f64>() + DICE_SMOOTH);
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -1.0);
    g.shift(neg, 1.0)
}

/// Composite loss on graph values: `logits [1, 2]`, `probs [H, W]`.
pub fn sample_loss_graph(
    g: &mut Graph,
    logits: Var,
    probs: Var,
    gt: &Mask,
    label: Label,
    w: LossWeights,
) -> Result<LossVars> {
    let det = detection_loss_graph(g, logits, label.index())?;
    if label == Label::Authentic {
        return Ok(LossVars { det, bce: None, dice: None, total: det });
    }
    if g.value(probs).shape() != [gt.height(), gt.width()] {
        return Err(Error::Contract(format!(
            "prediction {:?} does not match mask {}x{}",
            g.value(probs).shape(),
            gt.height(),
            gt.width()
        )));
    }
    let target = gt.to_tensor();
    let bce = g.bce_clipped(probs, &target, BCE_EPS);
    let dice = dice_graph(g, probs, &target);
    let wb = g.scale(bce, w.lambda_bce);
    let wd = g.scale(dice, w.lambda_dice);
    let t = g.add(det, wb);
    let total = g.add(t, wd);
    Ok(LossVars { det, bce: Some(bce), dice: Some(dice), total })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `TP / (TP + FP + FN)`, 0 when the union is empty.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            self.tp as f64 / den as f64
        }
    }
}

pub fn pixel_f1(pred: &Mask, gt: &Mask) -> f64 {
    Confusion::from_masks(pred, gt).f1()
}

pub fn mask_iou(pred: &Mask, gt: &Mask) -> f64 {
    Confusion::from_masks(pred, gt).iou()
}

/// Mann–Whitney AUC with midranks for ties. Undefined when `gt` holds a
/// single class.
pub fn pixel_auc(scores: &[f64], gt: &Mask) -> Result<f64> {
    check_shapes(scores, gt)?;
    let n_pos = gt.count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes in the ground truth".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        let pos = order[i..=j].iter().filter(|&&k| gt.bits()[k]).count();
        pos_rank_sum += mid * pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn predicted_label(logits: [f64; 2]) -> Label {
    if logits[1] > logits[0] {
        Label::Manipulated
    } else {
        Label::Authentic
    }
}

/// `(accuracy, F1)` with manipulated as the positive class.
pub fn image_level_metrics(logits: &[[f64; 2]], labels: &[Label]) -> Result<(f64, f64)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} logit rows for {} labels", logits.len(), labels.len())));
    }
    let mut c = Confusion::default();
    for (l, &y) in logits.iter().zip(labels) {
        match (predicted_label(*l), y) {
            (Label::Manipulated, Label::Manipulated) => c.tp += 1,
            (Label::Manipulated, Label::Authentic) => c.fp += 1,
            (Label::Authentic, Label::Manipulated) => c.fn_ += 1,
            (Label::Authentic, Label::Authentic) => c.tn += 1,
        }
    }
    Ok(((c.tp + c.tn) as f64 / logits.len() as f64, c.f1()))
}

/// Two-class softmax.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let (a, b) = (libm::exp(logits[0] - m), libm::exp(logits[1] - m));
    [a / (a + b), b / (a + b)]
}

/// Model output and ground truth for one evaluated sample.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub id: String,
    pub label: Label,
    pub gt: Mask,
    pub logits: [f64; 2],
    /// Row-major `H × W` probabilities.
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub label: Label,
    pub predicted: Label,
    pub prob_manipulated: f64,
    /// `None` when the sample is excluded from pixel metrics.
    pub pixel_f1: Option<f64>,
    pub pixel_iou: Option<f64>,
    /// `None` when excluded or undefined.
    pub pixel_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsAverages {
    pub pixel_f1: Option<f64>,
    pub pixel_iou: Option<f64>,
    pub pixel_auc: Option<f64>,
    pub image_f1: f64,
    pub image_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub avg: MetricsAverages,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    /// Pixel metrics cover manipulated samples, plus authentic ones when
    /// `include_authentic_pixels` is set; image metrics cover all samples.
    pub fn from_records(records: &[EvalRecord], include_authentic_pixels: bool) -> Result<Self> {
        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            check_shapes(&r.probabilities, &r.gt)?;
            let include = include_authentic_pixels || r.label == Label::Manipulated;
            let (f1, iou, auc) = if include {
                let pred = Mask::from_probabilities(r.gt.height(), r.gt.width(), &r.probabilities, crate::segmenter::MASK_THRESHOLD)?;
                let c = Confusion::from_masks(&pred, &r.gt);
                let auc = match pixel_auc(&r.probabilities, &r.gt) {
                    Ok(a) => Some(a),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                };
                (Some(c.f1()), Some(c.iou()), auc)
            } else {
                (None, None, None)
            };
            samples.push(SampleMetrics {
                id: r.id.clone(),
                label: r.label,
                predicted: predicted_label(r.logits),
                prob_manipulated: softmax2(r.logits)[1],
                pixel_f1: f1,
                pixel_iou: iou,
                pixel_auc: auc,
            });
        }
        let logits: Vec<[f64; 2]> = records.iter().map(|r| r.logits).collect();
        let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
        let (image_acc, image_f1) = image_level_metrics(&logits, &labels)?;
        let avg = MetricsAverages {
            pixel_f1: mean(samples.iter().filter_map(|s| s.pixel_f1)),
            pixel_iou: mean(samples.iter().filter_map(|s| s.pixel_iou)),
            pixel_auc: mean(samples.iter().filter_map(|s| s.pixel_auc)),
            image_f1,
            image_acc,
        };
        Ok(Self { samples, avg })
    }

    /// Mean of pixel F1 and image accuracy, used to pick the best checkpoint.
    pub fn selection_score(&self) -> f64 {
        (self.avg.pixel_f1.unwrap_or(0.0) + self.avg.image_acc) / 2.0
    }
}
