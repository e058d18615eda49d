//! Evaluation protocol: answer accuracy by sub-class, exact-match at k,
//! per-type grounding average precision at an IoU threshold, and top-1
//! box accuracy with the unique/multiple split.

use crate::data::{AnswerCategory, GQASample, RelatedObjectType};
use crate::error::{Error, Result};
use crate::geometry::{iou, Aabb};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Accuracy per answer sub-class. A sub-class with no samples is reported
/// as absent (null), not zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccBlock {
    pub number: Option<f64>,
    pub color: Option<f64>,
    pub yesno: Option<f64>,
    pub other: Option<f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmBlock {
    pub em1: f64,
    pub em10: f64,
}

/// Per-type AP; types with zero ground truth are undefined, excluded from
/// the mean, and listed in `undefined_types`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ap05Block {
    pub in_q: Option<f64>,
    pub notin_q: Option<f64>,
    pub context: Option<f64>,
    pub mean: Option<f64>,
    pub undefined_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundAccBlock {
    pub unique_at_25: Option<f64>,
    pub unique_at_50: Option<f64>,
    pub multiple_at_25: Option<f64>,
    pub multiple_at_50: Option<f64>,
    pub overall_at_25: Option<f64>,
    pub overall_at_50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: AccBlock,
    pub em: EmBlock,
    pub ap05: Ap05Block,
    pub ground_acc: GroundAccBlock,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn fmt_opt(v: Option<f64>) -> String {
        match v {
            Some(x) => format!("{:>7.4}", x),
            None => format!("{:>7}", "-"),
        }
    }

    /// Plain-text table in the published column order.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str("                 number   color  yes/no   other overall\n");
        s.push_str(&format!(
            "answer acc      {} {} {} {} {:>7.4}\n",
            Self::fmt_opt(self.acc.number),
            Self::fmt_opt(self.acc.color),
            Self::fmt_opt(self.acc.yesno),
            Self::fmt_opt(self.acc.other),
            self.acc.overall,
        ));
        s.push_str(&format!("em              EM@1 {:.4}  EM@10 {:.4}\n", self.em.em1, self.em.em10));
        s.push_str("                AG-In-Q AG-NotIn-Q Context-Of-AG    mean\n");
        s.push_str(&format!(
            "grounding AP@.5 {} {:>10} {:>13} {}\n",
            Self::fmt_opt(self.ap05.in_q),
            Self::fmt_opt(self.ap05.notin_q).trim(),
            Self::fmt_opt(self.ap05.context).trim(),
            Self::fmt_opt(self.ap05.mean),
        ));
        s.push_str("                unique@0.25 unique@0.5 multiple@0.25 multiple@0.5 overall@0.25 overall@0.5\n");
        s.push_str(&format!(
            "top-1 acc       {:>11} {:>10} {:>13} {:>12} {:>12} {:>11}\n",
            Self::fmt_opt(self.ground_acc.unique_at_25).trim(),
            Self::fmt_opt(self.ground_acc.unique_at_50).trim(),
            Self::fmt_opt(self.ground_acc.multiple_at_25).trim(),
            Self::fmt_opt(self.ground_acc.multiple_at_50).trim(),
            Self::fmt_opt(self.ground_acc.overall_at_25).trim(),
            Self::fmt_opt(self.ground_acc.overall_at_50).trim(),
        ));
        s
    }
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Exact string match after lowercasing and trimming, grouped by the
/// sample's answer category.
pub fn answer_accuracy(predictions: &[String], samples: &[GQASample]) -> Result<AccBlock> {
    if predictions.len() != samples.len() {
        return Err(Error::Data(format!(
            "answer_accuracy: {} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data("answer_accuracy: empty evaluation set".into()));
    }
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    for (p, s) in predictions.iter().zip(samples) {
        let idx = AnswerCategory::ALL.iter().position(|c| *c == s.answer_category).unwrap();
        total[idx] += 1;
        if norm(p) == norm(&s.answer) {
            correct[idx] += 1;
        }
    }
    let frac = |c: usize, t: usize| if t == 0 { None } else { Some(c as f64 / t as f64) };
    let all_c: usize = correct.iter().sum();
    let all_t: usize = total.iter().sum();
    Ok(AccBlock {
        number: frac(correct[0], total[0]),
        color: frac(correct[1], total[1]),
        yesno: frac(correct[2], total[2]),
        other: frac(correct[3], total[3]),
        overall: all_c as f64 / all_t as f64,
    })
}

/// Fraction of samples whose ground-truth id appears among the k highest
/// logits; logit ties ranked by lower class id. Ground-truth ids equal to
/// the reserved OOV class count as misses.
pub fn em_at_k(answer_logits: &Array2<f64>, gt_ids: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Data("em_at_k: k must be >= 1".into()));
    }
    if k > answer_logits.ncols() {
        return Err(Error::Data(format!(
            "em_at_k: k {} exceeds vocabulary size {}",
            k,
            answer_logits.ncols()
        )));
    }
    if answer_logits.nrows() != gt_ids.len() {
        return Err(Error::Data("em_at_k: one gt id per row required".into()));
    }
    if gt_ids.is_empty() {
        return Err(Error::Data("em_at_k: empty evaluation set".into()));
    }
    let mut hits = 0usize;
    for (row, &gt) in answer_logits.rows().into_iter().zip(gt_ids) {
        if gt == crate::heads::OOV_ID {
            continue;
        }
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
        });
        if order[..k].contains(&gt) {
            hits += 1;
        }
    }
    Ok(hits as f64 / gt_ids.len() as f64)
}

/// All-point average precision from a ranked match list: area under the
/// precision-recall step curve with the standard precision envelope.
pub fn average_precision(ranked_is_match: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n = ranked_is_match.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &m) in ranked_is_match.iter().enumerate() {
        if m {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Envelope: running max of precision from the right.
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        if recall[i] > prev_r {
            ap += (recall[i] - prev_r) * precision[i];
            prev_r = recall[i];
        }
    }
    ap
}

/// One scored proposal attached to an evaluation sample.
#[derive(Debug, Clone)]
pub struct TypedProposal {
    pub sample_idx: usize,
    pub bbox: Aabb,
    /// Score per related-object type, indexed by `RelatedObjectType::index`.
    pub scores: [f64; 3],
}

/// One typed ground-truth object attached to an evaluation sample.
#[derive(Debug, Clone)]
pub struct TypedGt {
    pub sample_idx: usize,
    pub bbox: Aabb,
    pub obj_type: RelatedObjectType,
}

fn ap_for_type(
    proposals: &[TypedProposal],
    gts: &[TypedGt],
    t: RelatedObjectType,
    iou_thr: f64,
) -> Option<f64> {
    let gt_idx: Vec<usize> = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| g.obj_type == t)
        .map(|(i, _)| i)
        .collect();
    if gt_idx.is_empty() {
        return None;
    }
    // Rank by score descending, ties by (sample, original order).
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b].scores[t.index()]
            .partial_cmp(&proposals[a].scores[t.index()])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut ranked = Vec::with_capacity(order.len());
    for &pi in &order {
        let p = &proposals[pi];
        // Best unmatched same-sample GT of this type at or above threshold.
        let mut best: Option<(usize, f64)> = None;
        for &gi in &gt_idx {
            if matched[gi] || gts[gi].sample_idx != p.sample_idx {
                continue;
            }
            let v = iou(&p.bbox, &gts[gi].bbox);
            if v >= iou_thr && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                ranked.push(true);
            }
            None => ranked.push(false),
        }
    }
    Some(average_precision(&ranked, gt_idx.len()))
}

/// Per-type AP over the pooled evaluation set: proposals are ranked by the
/// type score across samples and greedily matched (IoU >= `iou_thr`, highest
/// IoU first) to unmatched ground truth of the same sample and type.
pub fn grounding_ap(
    proposals: &[TypedProposal],
    gts: &[TypedGt],
    iou_thr: f64,
) -> Result<Ap05Block> {
    if !(0.0..=1.0).contains(&iou_thr) {
        return Err(Error::Data(format!("grounding_ap: threshold {iou_thr} outside [0,1]")));
    }
    let in_q = ap_for_type(proposals, gts, RelatedObjectType::AgInQ, iou_thr);
    let notin_q = ap_for_type(proposals, gts, RelatedObjectType::AgNotInQ, iou_thr);
    let context = ap_for_type(proposals, gts, RelatedObjectType::ContextOfAg, iou_thr);
    let mut undefined = Vec::new();
    for (v, t) in [
        (&in_q, RelatedObjectType::AgInQ),
        (&notin_q, RelatedObjectType::AgNotInQ),
        (&context, RelatedObjectType::ContextOfAg),
    ] {
        if v.is_none() {
            undefined.push(t.label().to_string());
        }
    }
    let present: Vec<f64> = [in_q, notin_q, context].iter().filter_map(|v| *v).collect();
    let mean = if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    };
    Ok(Ap05Block { in_q, notin_q, context, mean, undefined_types: undefined })
}

/// One top-1 grounding decision: predicted box, ground truth, and how many
/// objects of the target class the scene contains.
#[derive(Debug, Clone)]
pub struct GroundingEntry {
    pub top1: Aabb,
    pub gt: Aabb,
    /// Occurrences of the target class in the scene; must be >= 1.
    pub scene_class_count: usize,
}

/// Acc@0.25 / Acc@0.5 partitioned into unique (target class occurs once in
/// the scene) and multiple.
pub fn grounding_acc(entries: &[GroundingEntry]) -> Result<GroundAccBlock> {
    for e in entries {
        if e.scene_class_count == 0 {
            return Err(Error::Data(
                "grounding_acc: scene class count missing (0) for an entry".into(),
            ));
        }
    }
    let acc = |subset: &[&GroundingEntry], thr: f64| -> Option<f64> {
        if subset.is_empty() {
            return None;
        }
        let hits = subset.iter().filter(|e| iou(&e.top1, &e.gt) >= thr).count();
        Some(hits as f64 / subset.len() as f64)
    };
    let unique: Vec<&GroundingEntry> = entries.iter().filter(|e| e.scene_class_count == 1).collect();
    let multiple: Vec<&GroundingEntry> =
        entries.iter().filter(|e| e.scene_class_count > 1).collect();
    let all: Vec<&GroundingEntry> = entries.iter().collect();
    Ok(GroundAccBlock {
        unique_at_25: acc(&unique, 0.25),
        unique_at_50: acc(&unique, 0.5),
        multiple_at_25: acc(&multiple, 0.25),
        multiple_at_50: acc(&multiple, 0.5),
        overall_at_25: acc(&all, 0.25),
        overall_at_50: acc(&all, 0.5),
    })
}
