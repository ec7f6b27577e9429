//! Detection metrics (IoU and the COCO-style AP family), classification
//! accuracy, and the self-contained model-comparison harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DiveError, Result};
use crate::invert::{
    enumerate_classify, invert, CondModel, InversionConfig, InversionModels, MonitorState,
    Prediction,
};
use crate::labels::{BBox, DetectionLabel};

/// Intersection over union of two legal boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if bx.m_max <= bx.m_min || bx.n_max <= bx.n_min {
            return Err(DiveError::IllegalBox {
                m_min: bx.m_min,
                n_min: bx.n_min,
                m_max: bx.m_max,
                n_max: bx.n_max,
            });
        }
    }
    let ix = (a.m_max.min(b.m_max) as f64 - a.m_min.max(b.m_min) as f64).max(0.0);
    let iy = (a.n_max.min(b.n_max) as f64 - a.n_min.max(b.n_min) as f64).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// One scored prediction. `rank` orders equal-confidence predictions
/// deterministically (slot index for DIVE outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// DIVE emits unscored predictions; they get uniform confidence and are
/// ordered by slot index.
pub fn detections_from_label(image_id: usize, label: &DetectionLabel) -> Vec<Detection> {
    label
        .objects
        .iter()
        .enumerate()
        .map(|(rank, o)| Detection { image_id, class: o.class, bbox: o.bbox, score: 1.0, rank })
        .collect()
}

pub fn ground_truths_from_label(image_id: usize, label: &DetectionLabel) -> Vec<GroundTruth> {
    label
        .objects
        .iter()
        .map(|o| GroundTruth { image_id, class: o.class, bbox: o.bbox })
        .collect()
}

pub const COCO_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Area buckets proportionally rescaled from COCO's 32^2/96^2 conventions to
/// R=32 images: small < R^2/36, large > R^2/9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaBuckets {
    pub small_max: f64,
    pub large_min: f64,
}

impl AreaBuckets {
    pub fn for_image_size(r: usize) -> AreaBuckets {
        let full = (r * r) as f64;
        AreaBuckets { small_max: full / 36.0, large_min: full / 9.0 }
    }

    fn range(&self, which: AreaRange) -> (f64, f64) {
        match which {
            AreaRange::All => (0.0, f64::INFINITY),
            AreaRange::Small => (0.0, self.small_max),
            AreaRange::Medium => (self.small_max, self.large_min),
            AreaRange::Large => (self.large_min, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    /// Mean over IoU thresholds 0.50:0.05:0.95 on all areas.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Per-threshold all-area values, `COCO_THRESHOLDS` order.
    pub per_threshold: Vec<f64>,
}

/// Greedy one-to-one matching in confidence order (highest IoU wins, ties to
/// the lowest ground-truth index), 101-point interpolated precision-recall
/// integration per class, mean over classes and thresholds. Classes without
/// ground truth are excluded from the mean.
pub fn compute_ap(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    num_classes: usize,
    buckets: AreaBuckets,
) -> APReport {
    let mut per_threshold = Vec::with_capacity(COCO_THRESHOLDS.len());
    for &tau in &COCO_THRESHOLDS {
        per_threshold.push(ap_at(detections, ground_truths, num_classes, tau, buckets, AreaRange::All));
    }
    let valid: Vec<f64> = per_threshold.iter().filter_map(|v| *v).collect();
    let mean_or_zero = |vals: &[f64]| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let bucket_mean = |which: AreaRange| -> Option<f64> {
        let vals: Vec<f64> = COCO_THRESHOLDS
            .iter()
            .filter_map(|&tau| ap_at(detections, ground_truths, num_classes, tau, buckets, which))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    APReport {
        ap: mean_or_zero(&valid),
        ap50: ap_at(detections, ground_truths, num_classes, 0.50, buckets, AreaRange::All).unwrap_or(0.0),
        ap75: ap_at(detections, ground_truths, num_classes, 0.75, buckets, AreaRange::All).unwrap_or(0.0),
        ap_small: bucket_mean(AreaRange::Small),
        ap_medium: bucket_mean(AreaRange::Medium),
        ap_large: bucket_mean(AreaRange::Large),
        per_threshold: per_threshold.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
    }
}

/// AP at one threshold and area range; `None` when no class has ground truth
/// in range.
fn ap_at(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    num_classes: usize,
    tau: f64,
    buckets: AreaBuckets,
    which: AreaRange,
) -> Option<f64> {
    let (lo, hi) = buckets.range(which);
    let mut per_class = Vec::new();
    for class in 0..num_classes {
        if let Some(ap) = class_ap(detections, ground_truths, class, tau, lo, hi) {
            per_class.push(ap);
        }
    }
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

fn class_ap(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    class: usize,
    tau: f64,
    area_lo: f64,
    area_hi: f64,
) -> Option<f64> {
    // ground truths of this class, grouped by image; out-of-range areas are
    // matchable but ignored (COCO convention)
    struct Gt {
        bbox: BBox,
        ignore: bool,
        matched: bool,
    }
    let mut gts: std::collections::BTreeMap<usize, Vec<Gt>> = std::collections::BTreeMap::new();
    let mut n_countable = 0usize;
    for g in ground_truths.iter().filter(|g| g.class == class) {
        let area = g.bbox.area();
        let ignore = area < area_lo || area >= area_hi;
        if !ignore {
            n_countable += 1;
        }
        gts.entry(g.image_id).or_default().push(Gt { bbox: g.bbox, ignore, matched: false });
    }
    if n_countable == 0 {
        return None;
    }
    // non-ignored ground truths come first so greedy matching prefers them
    for v in gts.values_mut() {
        v.sort_by_key(|g| g.ignore);
    }

    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(a.rank.cmp(&b.rank))
    });

    // greedy matching; tp/fp flags exclude ignored detections
    let mut tp_flags = Vec::with_capacity(dets.len());
    for d in &dets {
        let mut matched: Option<usize> = None;
        let mut best_iou = tau;
        if let Some(img_gts) = gts.get(&d.image_id) {
            for (gi, g) in img_gts.iter().enumerate() {
                if g.matched {
                    continue;
                }
                // candidates below a non-ignored match never improve it
                if let Some(m) = matched {
                    if !img_gts[m].ignore && g.ignore {
                        break;
                    }
                }
                let v = iou(&d.bbox, &g.bbox).expect("legal boxes");
                if v > best_iou || (matched.is_none() && v >= tau && v == best_iou) {
                    best_iou = v;
                    matched = Some(gi);
                }
            }
        }
        match matched {
            Some(gi) => {
                let img_gts = gts.get_mut(&d.image_id).unwrap();
                img_gts[gi].matched = true;
                if img_gts[gi].ignore {
                    tp_flags.push(None); // matched an ignored gt: drop from PR
                } else {
                    tp_flags.push(Some(true));
                }
            }
            None => {
                let area = d.bbox.area();
                if area < area_lo || area >= area_hi {
                    tp_flags.push(None); // unmatched out-of-range: ignored
                } else {
                    tp_flags.push(Some(false));
                }
            }
        }
    }

    // cumulative precision-recall over counted detections
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recalls = Vec::new();
    let mut precisions = Vec::new();
    for flag in tp_flags.into_iter().flatten() {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(tp as f64 / n_countable as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }

    // precision envelope, then 101-point interpolation
    for i in (1..precisions.len()).rev() {
        if precisions[i - 1] < precisions[i] {
            precisions[i - 1] = precisions[i];
        }
    }
    let mut acc = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recalls.partition_point(|&rec| rec < r);
        if idx < precisions.len() {
            acc += precisions[idx];
        }
    }
    Some(acc / 101.0)
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(DiveError::Evaluation(format!(
            "length mismatch: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

// ---------------------------------------------------------------------------
// Dataset-scale runs and model comparison
// ---------------------------------------------------------------------------

/// splitmix64: derive per-image seeds so results are independent of worker count.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct ImageInversion {
    pub index: usize,
    pub prediction: Prediction,
    pub convergence_step: usize,
    pub steps_used: usize,
    pub monitor_values: Vec<f64>,
    pub eval_steps: Vec<usize>,
    pub object_counts: Vec<usize>,
}

/// Invert a set of dataset images in parallel with per-image derived seeds.
pub fn invert_dataset(
    dataset: &Dataset,
    indices: &[usize],
    models: &InversionModels<'_>,
    cfg: &InversionConfig,
) -> Result<Vec<ImageInversion>> {
    indices
        .par_iter()
        .map(|&i| {
            let x = dataset.model_input(i)?;
            let mut icfg = cfg.clone();
            icfg.seed = derive_seed(cfg.seed, i as u64);
            let out = invert(&x, models, &icfg)?;
            Ok(ImageInversion {
                index: i,
                prediction: out.prediction,
                convergence_step: out.convergence_step,
                steps_used: out.steps_used,
                monitor_values: out.trace.values,
                eval_steps: out.trace.eval_steps,
                object_counts: out.trace.object_counts,
            })
        })
        .collect()
}

/// AP of inversion results against dataset ground truth.
pub fn detection_report(
    dataset: &Dataset,
    results: &[ImageInversion],
    num_classes: usize,
    img_size: usize,
) -> Result<APReport> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for r in results {
        let label = match &r.prediction {
            Prediction::Detection(l) => l,
            _ => return Err(DiveError::Evaluation("expected detection predictions".into())),
        };
        dets.extend(detections_from_label(r.index, label));
        gts.extend(ground_truths_from_label(r.index, &dataset.detection_label(r.index)?));
    }
    Ok(compute_ap(&dets, &gts, num_classes, AreaBuckets::for_image_size(img_size)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifyMode {
    /// Gradient-based inversion (DIVE).
    Optimize,
    /// Enumeration over all classes on the shared banks.
    Enumerate,
}

/// Classify a set of dataset images; returns (index, predicted class).
pub fn classify_dataset(
    dataset: &Dataset,
    indices: &[usize],
    model: &crate::models::ClassCondModel,
    cfg: &InversionConfig,
    mode: ClassifyMode,
) -> Result<Vec<(usize, usize)>> {
    let models = InversionModels { cond: CondModel::Class(model), prior: None };
    let mut base = cfg.clone();
    base.use_prior = false;
    indices
        .par_iter()
        .map(|&i| {
            let x = dataset.model_input(i)?;
            let mut icfg = base.clone();
            icfg.seed = derive_seed(base.seed, i as u64);
            let class = match mode {
                ClassifyMode::Optimize => match invert(&x, &models, &icfg)?.prediction {
                    Prediction::Class(c) => c,
                    _ => unreachable!("class model yields class predictions"),
                },
                ClassifyMode::Enumerate => {
                    let ctx = crate::invert::InversionContext::new(&models, &icfg)?;
                    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(icfg.seed);
                    use rand::SeedableRng;
                    let monitor = MonitorState::create(
                        &ctx.set,
                        &ctx.img_shape,
                        &[1, model.cfg.d],
                        &mut rng,
                    );
                    enumerate_classify(&x, model, &monitor, &icfg)?.0
                }
            };
            Ok((i, class))
        })
        .collect()
}

/// One contestant in a model comparison.
pub struct ComparisonEntry<'a> {
    pub name: String,
    pub models: InversionModels<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub name: String,
    /// Accuracy for classification, AP for detection.
    pub score: f64,
}

/// Score every model on the same test images with shared per-image seeds and
/// rank them by score (descending; ties keep entry order). Self-contained:
/// no external feature extractors.
pub fn compare_models(
    entries: &[ComparisonEntry<'_>],
    dataset: &Dataset,
    indices: &[usize],
    cfg: &InversionConfig,
) -> Result<Vec<ModelScore>> {
    let mut scores = Vec::with_capacity(entries.len());
    for entry in entries {
        let score = match entry.models.cond {
            CondModel::Class(m) => {
                let preds = classify_dataset(dataset, indices, m, cfg, ClassifyMode::Optimize)?;
                let labels: Vec<usize> =
                    indices.iter().map(|&i| dataset.class_label(i)).collect::<Result<_>>()?;
                let predicted: Vec<usize> = preds.iter().map(|(_, c)| *c).collect();
                accuracy(&predicted, &labels)?
            }
            CondModel::Layout(m) => {
                let results = invert_dataset(dataset, indices, &entry.models, cfg)?;
                detection_report(dataset, &results, m.cfg.num_classes, m.cfg.img_size)?.ap
            }
        };
        scores.push(ModelScore { name: entry.name.clone(), score });
    }
    let mut ranked = scores.clone();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok(ranked)
}
