//! Segmentation and calibration metrics: IoU, generalized energy distance,
//! NLL, Brier score and expected calibration error, plus the sampling
//! helpers that turn a model's prior into probability maps.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::gaussian::{project_gaussian, sample_compact, GaussianK};
use crate::net::Model;
use crate::tensor::Tensor;

pub const PROB_EPS: f32 = 1e-7;
pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_SAMPLES: usize = 16;

/// Which labels the probability map is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationTarget {
    /// Every rater mask, pooled.
    #[default]
    PerRater,
    /// The pixelwise majority vote only.
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub ged: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub num_pred_samples: usize,
}

impl MetricsReport {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\niou,{}\nged,{}\nnll,{}\nbrier,{}\nece,{}\nnum_pred_samples,{}\n",
            self.iou, self.ged, self.nll, self.brier, self.ece, self.num_pred_samples
        )
    }

    /// Mean of per-sample reports.
    pub fn average(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            iou: mean(|r| r.iou),
            ged: mean(|r| r.ged),
            nll: mean(|r| r.nll),
            brier: mean(|r| r.brier),
            ece: mean(|r| r.ece),
            num_pred_samples: first.num_pred_samples,
        })
    }
}

fn check_same_shape(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            op,
            format!(
                "{}×{} vs {}×{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        ));
    }
    Ok(())
}

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    check_same_shape("iou", a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

struct Packed(Vec<u64>);

impl Packed {
    fn new(m: &Mask) -> Self {
        Packed(
            m.bits()
                .chunks(64)
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .fold(0u64, |w, (i, &b)| w | ((b as u64) << i))
                })
                .collect(),
        )
    }

    /// `1 − IoU`, zero for two empty masks.
    fn distance(&self, other: &Packed) -> f64 {
        let (mut inter, mut union) = (0u32, 0u32);
        for (a, b) in self.0.iter().zip(&other.0) {
            inter += (a & b).count_ones();
            union += (a | b).count_ones();
        }
        if union == 0 {
            0.0
        } else {
            1.0 - inter as f64 / union as f64
        }
    }
}

/// Mean distance over all ordered pairs, summed row by row.
fn mean_distance(a: &[Packed], b: &[Packed]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += x.distance(y);
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Generalized energy distance with `d = 1 − IoU`:
/// `sqrt(max(0, 2·E[d(S,Y)] − E[d(S,S′)] − E[d(Y,Y′)]))`. Every expectation
/// is the plain mean over all ordered pairs, self-pairs included, and the
/// sums run over the first argument in the outer loop.
pub fn ged(pred_samples: &[Mask], rater_masks: &[Mask]) -> Result<f64> {
    let (Some(first), false) = (pred_samples.first(), rater_masks.is_empty()) else {
        return Err(Error::InvalidArgument(
            "ged needs non-empty prediction and rater sets".into(),
        ));
    };
    for m in pred_samples.iter().chain(rater_masks) {
        check_same_shape("ged", first, m)?;
    }
    let s: Vec<Packed> = pred_samples.iter().map(Packed::new).collect();
    let y: Vec<Packed> = rater_masks.iter().map(Packed::new).collect();
    let cross = mean_distance(&s, &y);
    let within_s = mean_distance(&s, &s);
    let within_y = mean_distance(&y, &y);
    Ok((2.0 * cross - within_s - within_y).max(0.0).sqrt())
}

/// Pixelwise majority vote; ties go to foreground.
pub fn majority_vote(masks: &[Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("majority vote of no masks".into()))?;
    for m in masks {
        check_same_shape("majority_vote", first, m)?;
    }
    let bits = (0..first.bits().len())
        .map(|i| 2 * masks.iter().filter(|m| m.bits()[i]).count() >= masks.len())
        .collect();
    Mask::new(first.height(), first.width(), bits)
}

/// Number of masks marking each pixel as foreground.
fn positive_counts(prob: &[f32], masks: &[Mask]) -> Result<Vec<usize>> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("no label masks".into()));
    }
    if let Some(m) = masks.iter().find(|m| m.bits().len() != prob.len()) {
        return Err(Error::shape(
            "calibration metric",
            format!(
                "{} probabilities for a {}-pixel mask",
                prob.len(),
                m.bits().len()
            ),
        ));
    }
    Ok((0..prob.len())
        .map(|i| masks.iter().filter(|m| m.bits()[i]).count())
        .collect())
}

fn clamp_prob(p: f32) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS) as f64
}

/// Mean over masks and pixels of the binary cross-entropy.
pub fn nll(prob: &[f32], masks: &[Mask]) -> Result<f64> {
    let counts = positive_counts(prob, masks)?;
    let r = masks.len();
    let total: f64 = prob
        .iter()
        .zip(&counts)
        .map(|(&p, &c)| {
            let p = clamp_prob(p);
            -(c as f64 * p.ln() + (r - c) as f64 * (1.0 - p).ln())
        })
        .sum();
    Ok(total / (r * prob.len()) as f64)
}

/// Mean over masks and pixels of `(p − y)²`.
pub fn brier(prob: &[f32], masks: &[Mask]) -> Result<f64> {
    let counts = positive_counts(prob, masks)?;
    let r = masks.len();
    let total: f64 = prob
        .iter()
        .zip(&counts)
        .map(|(&p, &c)| {
            let p = p as f64;
            c as f64 * (1.0 - p).powi(2) + (r - c) as f64 * p * p
        })
        .sum();
    Ok(total / (r * prob.len()) as f64)
}

/// Expected calibration error over pooled (pixel, mask) pairs with
/// `bins` equal-width bins on the confidence `max(p, 1 − p)`.
pub fn ece(prob: &[f32], masks: &[Mask], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let counts = positive_counts(prob, masks)?;
    let r = masks.len();
    let mut n = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    for (&p, &c) in prob.iter().zip(&counts) {
        let p = clamp_prob(p);
        let label = p >= 0.5;
        let confidence = if label { p } else { 1.0 - p };
        let b = ((confidence * bins as f64) as usize).min(bins - 1);
        n[b] += r;
        correct[b] += if label { c } else { r - c };
        conf[b] += confidence * r as f64;
    }
    let total = (r * prob.len()) as f64;
    Ok((0..bins)
        .filter(|&b| n[b] > 0)
        .map(|b| {
            let nb = n[b] as f64;
            (nb / total) * (correct[b] as f64 / nb - conf[b] / nb).abs()
        })
        .sum())
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// M sigmoid maps from latents `z_k ~ g`, decoded against fixed features.
pub fn probability_maps_from<R: Rng + ?Sized>(
    model: &Model,
    features: &Tensor,
    g: &GaussianK,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f32>>> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "need at least one prediction sample".into(),
        ));
    }
    let mut latents = Vec::with_capacity(m);
    for _ in 0..m {
        let noise: Vec<f64> = (0..g.dim()).map(|_| StandardNormal.sample(rng)).collect();
        let mut sample = sample_compact(g, &noise)?;
        latents.push(model.decoder_input(&mut sample)?);
    }
    let logits = model.fuse_batch(features, &latents)?;
    logits.ensure_finite("prediction logits")?;
    let plane = logits.numel() / m;
    Ok(logits
        .data()
        .chunks(plane)
        .map(|c| c.iter().map(|&x| sigmoid(x)).collect())
        .collect())
}

/// M sigmoid maps for one `1×1×H×W` image, sampling the projected prior.
pub fn probability_maps<R: Rng + ?Sized>(
    model: &Model,
    image: &Tensor,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f32>>> {
    let features = model.backbone_forward(image)?;
    let prior = model
        .prior_forward(image)?
        .pop()
        .ok_or_else(|| Error::shape("probability_maps", "empty batch"))?;
    let compact = project_gaussian(&prior, model.projection())?;
    probability_maps_from(model, &features, &compact, m, rng)
}

/// Pixelwise mean of the maps, clamped to `[1e-7, 1 − 1e-7]`.
pub fn average_maps(maps: &[Vec<f32>]) -> Vec<f32> {
    let n = maps.len() as f64;
    (0..maps.first().map_or(0, Vec::len))
        .map(|i| {
            ((maps.iter().map(|m| m[i] as f64).sum::<f64>() / n) as f32)
                .clamp(PROB_EPS, 1.0 - PROB_EPS)
        })
        .collect()
}

pub fn mean_probability<R: Rng + ?Sized>(
    model: &Model,
    image: &Tensor,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    Ok(average_maps(&probability_maps(model, image, m, rng)?))
}

/// IoU of the thresholded mean map against the rater majority vote.
pub fn iou_against_majority(mean_prob: &[f32], size: usize, masks: &[Mask]) -> Result<f64> {
    let pred = Mask::threshold(size, size, mean_prob, 0.5)?;
    iou(&pred, &majority_vote(masks)?)
}

pub fn eval_iou<R: Rng + ?Sized>(
    model: &Model,
    sample: &crate::data::AmbiguousSample,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let mean = mean_probability(model, &sample.image_tensor(), m, rng)?;
    iou_against_majority(&mean, sample.size, &sample.masks)
}

/// All five metrics for one image given its M sampled maps.
pub fn score_sample(
    maps: &[Vec<f32>],
    size: usize,
    masks: &[Mask],
    target: CalibrationTarget,
) -> Result<MetricsReport> {
    let mean = average_maps(maps);
    let preds = maps
        .iter()
        .map(|m| Mask::threshold(size, size, m, 0.5))
        .collect::<Result<Vec<_>>>()?;
    let majority = [majority_vote(masks)?];
    let labels: &[Mask] = match target {
        CalibrationTarget::PerRater => masks,
        CalibrationTarget::Majority => &majority,
    };
    Ok(MetricsReport {
        iou: iou(&Mask::threshold(size, size, &mean, 0.5)?, &majority[0])?,
        ged: ged(&preds, masks)?,
        nll: nll(&mean, labels)?,
        brier: brier(&mean, labels)?,
        ece: ece(&mean, labels, DEFAULT_BINS)?,
        num_pred_samples: maps.len(),
    })
}
