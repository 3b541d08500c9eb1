//! Shared evaluation machinery: COCO-style AP/AR with greedy matching and
//! 101-point interpolation, and ROC/AUC over anomaly scores.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::coco::{iou, BoundingBox};
use crate::error::{Error, Result};

/// A detection prepared for matching: (image id, category, box, score).
#[derive(Debug, Clone)]
pub struct ScoredBox {
    pub image_id: u64,
    pub category: u32,
    pub box_: BoundingBox,
    pub score: f64,
}

/// Ground truth box with optional provenance tag (e.g. patch source model).
#[derive(Debug, Clone)]
pub struct GtBox {
    pub image_id: u64,
    pub category: u32,
    pub box_: BoundingBox,
    pub source: Option<String>,
}

/// Greedy matching at one IoU threshold following the COCO convention:
/// detections in descending score order, each consuming the best-IoU
/// unmatched ground truth of the same category in the same image.
/// Returns per-detection (score, is_true_positive) plus matched gt flags.
pub fn greedy_match(
    dets: &[ScoredBox],
    gts: &[GtBox],
    category: u32,
    iou_thr: f64,
    max_dets: usize,
) -> (Vec<(f64, bool)>, Vec<bool>) {
    let gt_idx: Vec<usize> = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| g.category == category)
        .map(|(i, _)| i)
        .collect();
    let mut gt_matched = vec![false; gts.len()];

    // per-image cap on detections, by score
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, d) in dets.iter().enumerate() {
        if d.category == category {
            by_image.entry(d.image_id).or_default().push(i);
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut image_ids: Vec<u64> = by_image.keys().cloned().collect();
    image_ids.sort_unstable();
    for id in image_ids {
        let mut idxs = by_image.remove(&id).unwrap();
        idxs.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        idxs.truncate(max_dets);
        kept.extend(idxs);
    }
    kept.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut results = Vec::with_capacity(kept.len());
    for &di in &kept {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for &gi in &gt_idx {
            if gt_matched[gi] || gts[gi].image_id != d.image_id {
                continue;
            }
            let ov = iou(&d.box_, &gts[gi].box_).unwrap_or(0.0);
            if ov >= iou_thr && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_matched[gi] = true;
                results.push((d.score, true));
            }
            None => results.push((d.score, false)),
        }
    }
    (results, gt_matched)
}

/// 101-point interpolated average precision from (score, tp) pairs sorted
/// by descending score, given the number of ground truths.
pub fn average_precision(matches: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(matches.len()); // (recall, precision)
    for &(_, is_tp) in matches {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope, then sample 101 recall points
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 101.0
}

/// AP and AR over one category at one IoU threshold.
pub fn ap_ar_at(
    dets: &[ScoredBox],
    gts: &[GtBox],
    category: u32,
    iou_thr: f64,
    max_dets: usize,
) -> (f64, f64) {
    let n_gt = gts.iter().filter(|g| g.category == category).count();
    let (matches, gt_matched) = greedy_match(dets, gts, category, iou_thr, max_dets);
    let ap = average_precision(&matches, n_gt);
    let recalled = gts
        .iter()
        .enumerate()
        .filter(|(i, g)| g.category == category && gt_matched[*i])
        .count();
    let ar = if n_gt == 0 {
        0.0
    } else {
        recalled as f64 / n_gt as f64
    };
    (ap, ar)
}

/// IoU threshold policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouPolicy {
    /// Average over IoU in {0.50, 0.55, ..., 0.95}.
    CocoRange,
    /// Single lenient threshold of 0.5.
    At05,
}

impl IouPolicy {
    pub fn thresholds(&self) -> Vec<f64> {
        match self {
            IouPolicy::CocoRange => (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            IouPolicy::At05 => vec![0.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApArReport {
    pub ap: f64,
    pub ar: f64,
    /// AR restricted to ground truths from each source model, when tagged.
    pub ar_by_source: Vec<(String, f64)>,
}

/// Mean AP/AR across categories present in the ground truth, averaged over
/// the policy's IoU thresholds.
pub fn ap_ar(
    dets: &[ScoredBox],
    gts: &[GtBox],
    categories: &[u32],
    policy: IouPolicy,
    max_dets: usize,
) -> Result<ApArReport> {
    if gts.is_empty() {
        return Err(Error::UndefinedMetric("empty ground truth".into()));
    }
    let cats: Vec<u32> = categories
        .iter()
        .cloned()
        .filter(|c| gts.iter().any(|g| g.category == *c))
        .collect();
    if cats.is_empty() {
        return Err(Error::UndefinedMetric(
            "no ground truth for requested categories".into(),
        ));
    }
    let thresholds = policy.thresholds();
    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    let mut sources: Vec<String> = Vec::new();
    for g in gts {
        if let Some(s) = &g.source {
            if !sources.contains(s) {
                sources.push(s.clone());
            }
        }
    }
    sources.sort();
    let mut source_recall: Vec<f64> = vec![0.0; sources.len()];
    let mut n_terms = 0usize;
    for &thr in &thresholds {
        for &cat in &cats {
            let (ap, ar) = ap_ar_at(dets, gts, cat, thr, max_dets);
            ap_sum += ap;
            ar_sum += ar;
            n_terms += 1;
            if !sources.is_empty() {
                let (_, gt_matched) = greedy_match(dets, gts, cat, thr, max_dets);
                for (si, s) in sources.iter().enumerate() {
                    let idxs: Vec<usize> = gts
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| g.category == cat && g.source.as_deref() == Some(s))
                        .map(|(i, _)| i)
                        .collect();
                    if !idxs.is_empty() {
                        let rec = idxs.iter().filter(|&&i| gt_matched[i]).count() as f64
                            / idxs.len() as f64;
                        source_recall[si] += rec / (thresholds.len() as f64);
                    }
                }
            }
        }
    }
    Ok(ApArReport {
        ap: ap_sum / n_terms as f64,
        ar: ar_sum / n_terms as f64,
        ar_by_source: sources.into_iter().zip(source_recall).collect(),
    })
}

/// ROC curve points (fpr, tpr) and trapezoid AUC. Higher score must mean
/// more likely positive. Ties are grouped.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput("scores/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC requires both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // consume the whole tie group at once
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let mut auc = 0.0;
    for w in curve.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    Ok((curve, auc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(id: u64, cat: u32, x: f64, y: f64, w: f64, h: f64, s: f64) -> ScoredBox {
        ScoredBox {
            image_id: id,
            category: cat,
            box_: BoundingBox::new(x, y, w, h),
            score: s,
        }
    }

    fn g(id: u64, cat: u32, x: f64, y: f64, w: f64, h: f64) -> GtBox {
        GtBox {
            image_id: id,
            category: cat,
            box_: BoundingBox::new(x, y, w, h),
            source: None,
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![g(1, 1, 0., 0., 10., 10.), g(2, 1, 5., 5., 10., 10.)];
        let dets = vec![d(1, 1, 0., 0., 10., 10., 1.0), d(2, 1, 5., 5., 10., 10., 1.0)];
        for policy in [IouPolicy::CocoRange, IouPolicy::At05] {
            let r = ap_ar(&dets, &gts, &[1], policy, 100).unwrap();
            assert!((r.ap - 1.0).abs() < 1e-9, "{policy:?} ap={}", r.ap);
            assert!((r.ar - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_detections_score_zero() {
        let gts = vec![g(1, 1, 0., 0., 10., 10.)];
        let r = ap_ar(&[], &gts, &[1], IouPolicy::At05, 100).unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.ar, 0.0);
    }

    #[test]
    fn empty_ground_truth_is_undefined() {
        assert!(matches!(
            ap_ar(&[], &[], &[1], IouPolicy::At05, 100),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn lenient_threshold_dominates() {
        // one detection at IoU 0.6 with gt: counts at 0.5, misses most of range
        let gts = vec![g(1, 1, 0., 0., 10., 10.), g(2, 1, 0., 0., 10., 10.), g(3, 1, 0., 0., 10., 10.)];
        let dets = vec![
            d(1, 1, 0., 0., 10., 7.5, 0.9), // IoU 0.75
            d(2, 1, 0., 0., 10., 6.0, 0.8), // IoU 0.6
            d(3, 1, 30., 30., 5., 5., 0.7), // miss
        ];
        let lenient = ap_ar(&dets, &gts, &[1], IouPolicy::At05, 100).unwrap();
        let strict = ap_ar(&dets, &gts, &[1], IouPolicy::CocoRange, 100).unwrap();
        assert!(lenient.ap >= strict.ap);
        assert!(lenient.ar >= strict.ar);
    }

    #[test]
    fn micro_case_matches_hand_computation() {
        // 3 images, single category, one 0.6-IoU match among three detections
        let gts = vec![g(1, 1, 0., 0., 10., 10.), g(2, 1, 0., 0., 10., 10.)];
        let dets = vec![
            d(1, 1, 0., 0., 10., 6.0, 0.9), // tp at 0.5 (IoU 0.6)
            d(2, 1, 50., 50., 10., 10., 0.8), // fp
        ];
        let (matches, _) = greedy_match(&dets, &gts, 1, 0.5, 100);
        assert_eq!(matches, vec![(0.9, true), (0.8, false)]);
        // hand AP: precision 1.0 up to recall 0.5, then 0 beyond
        let ap = average_precision(&matches, 2);
        let expected = (51.0 * 1.0 + 50.0 * 0.0) / 101.0;
        assert!((ap - expected).abs() < 1e-9, "ap={ap} expected={expected}");
    }

    #[test]
    fn roc_trivial_cases() {
        // scores identical to labels -> AUC 1
        let (_, auc) = roc(&[1.0, 1.0, 0.0, 0.0], &[true, true, false, false]).unwrap();
        assert!((auc - 1.0).abs() < 1e-12);
        // constant scores -> AUC 0.5
        let (_, auc) = roc(&[0.3, 0.3, 0.3, 0.3], &[true, false, true, false]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
        // single class undefined
        assert!(roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    /// Exhaustive pair-counting oracle: P(s_pos > s_neg) + 0.5 P(tie).
    fn auc_pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut cnt = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                cnt += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / cnt
    }

    #[test]
    fn roc_matches_pair_counting_oracle() {
        let scores = [0.9, 0.8, 0.8, 0.4, 0.35, 0.1];
        let labels = [true, false, true, true, false, false];
        let (curve, auc) = roc(&scores, &labels).unwrap();
        assert!((auc - auc_pair_oracle(&scores, &labels)).abs() < 1e-12);
        // monotone curve
        for w in curve.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }
}
