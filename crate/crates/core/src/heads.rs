//! Grounded answer generation heads and the training objective: a learned
//! query cross-attending over the fused tokens feeds parallel linear heads
//! (answer classification and the language-side class-by-type grid), a
//! per-proposal type head supervises grounding, and the total combines the
//! detection loss with focal QA/type/semcls terms at weight 0.5 each,
//! gated by the per-source loss mask.

use crate::data::{RelatedObject, RelatedObjectType};
use crate::error::{Error, Result};
use crate::geometry::{encode_boundaries, iou, Aabb, Vec3};
use crate::nn::{self, ParamStore};
use crate::tape::{Graph, VarId};
use crate::transform::LossMask;
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// Answer-string classification vocabulary built from training answers.
/// Id 0 is the reserved out-of-vocabulary class: unseen evaluation answers
/// map there and always count as wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const OOV_ANSWER: &str = "[oov]";
pub const OOV_ID: usize = 0;

impl AnswerVocab {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(training_answers: I) -> Self {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for a in training_answers {
            set.insert(a.trim().to_lowercase());
        }
        let mut answers = vec![OOV_ANSWER.to_string()];
        answers.extend(set);
        let index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Self { answers, index }
    }

    pub fn id(&self, answer: &str) -> usize {
        self.index.get(&answer.trim().to_lowercase()).copied().unwrap_or(OOV_ID)
    }

    pub fn answer(&self, id: usize) -> &str {
        &self.answers[id]
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for a in &self.answers {
            writeln!(f, "{a}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut answers = Vec::new();
        for line in f.lines() {
            answers.push(line?);
        }
        if answers.first().map(String::as_str) != Some(OOV_ANSWER) {
            return Err(Error::Data("answer vocab must start with the OOV entry".into()));
        }
        let index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Ok(Self { answers, index })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadsConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub n_classes: usize,
    pub n_answers: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

pub fn ensure_decoder_params(store: &mut ParamStore, cfg: &HeadsConfig, seed: u64) {
    store.ensure_xavier("decoder.query", 1, cfg.d_model, seed);
    nn::ensure_attention_ffn_block(store, "decoder.block", cfg.d_model, cfg.ffn_mult, true, seed);
    store.ensure_linear("decoder.answer", cfg.d_model, cfg.n_answers, seed);
    store.ensure_linear("decoder.grid", cfg.d_model, cfg.n_classes * 3, seed);
    store.ensure_linear("decoder.type", cfg.d_model, 3, seed);
}

pub struct DecoderOutputs {
    /// (1, |answers|) answer logits.
    pub answer_logits: VarId,
    /// (1, C*3) language-side multi-label grid, column = class_id * 3 + type.
    pub grid_logits: VarId,
    /// (M, 3) per-proposal related-object type logits.
    pub type_logits: VarId,
}

/// A learned query token cross-attends over the concatenated fused word and
/// object tokens; parallel linear heads read the result.
pub fn decode_answer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadsConfig,
    fused_words: VarId,
    fused_objects: VarId,
    word_pad_mask: &[bool],
) -> Result<DecoderOutputs> {
    let m = g.shape(fused_objects)[0];
    let keys = g.concat_rows(&[fused_words, fused_objects]);
    let mut key_mask = word_pad_mask.to_vec();
    key_mask.extend(std::iter::repeat_n(false, m));
    let query = g.param("decoder.query", store);
    let h = nn::attention_ffn_block(
        g,
        store,
        "decoder.block",
        query,
        Some(keys),
        cfg.n_heads,
        None,
        Some(&key_mask),
    )?;
    Ok(DecoderOutputs {
        answer_logits: nn::linear(g, store, "decoder.answer", h),
        grid_logits: nn::linear(g, store, "decoder.grid", h),
        type_logits: nn::linear(g, store, "decoder.type", fused_objects),
    })
}

/// Per-type positive assignment: proposal m is positive for type t iff its
/// best IoU against a ground-truth object of type t strictly exceeds 0.5.
pub fn assign_positives(proposals: &[Aabb], gt: &[RelatedObject]) -> Array2<f64> {
    let mut labels = Array2::<f64>::zeros((proposals.len(), 3));
    for (mi, p) in proposals.iter().enumerate() {
        for r in gt {
            if iou(p, &r.bbox) > 0.5 {
                labels[[mi, r.object_type.index()]] = 1.0;
            }
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalMode {
    Multiclass,
    Multilabel,
}

/// Multiclass focal loss over softmax: mean over rows of
/// -alpha (1 - p_t)^gamma log p_t with p_t the target-class probability.
/// gamma = 0, alpha = 1 is exactly cross-entropy.
pub fn focal_multiclass(
    g: &mut Graph,
    logits: VarId,
    targets: &[usize],
    gamma: f64,
    alpha: f64,
) -> VarId {
    assert_eq!(g.shape(logits)[0], targets.len(), "one target per row");
    let logp = g.log_softmax_rows(logits);
    let coords: Vec<(usize, usize)> = targets.iter().enumerate().map(|(r, &c)| (r, c)).collect();
    let lp = g.pick(logp, &coords);
    let pt = g.exp(lp);
    let om = g.one_minus(pt);
    let w = g.pow_scalar(om, gamma);
    let wl = g.mul(w, lp);
    let neg = g.scale(wl, -alpha);
    g.mean_all(neg)
}

/// Multilabel focal loss over per-entry sigmoids, mean-reduced over included
/// entries. `include` masks entries out of the mean (empty include set gives
/// a zero loss and raises the flag). Stable via log-sigmoid identities.
pub fn focal_multilabel(
    g: &mut Graph,
    logits: VarId,
    targets: &Array2<f64>,
    include: &Array2<f64>,
    gamma: f64,
    alpha: f64,
) -> (VarId, bool) {
    let shape = g.shape(logits).to_vec();
    assert_eq!(&shape[..], targets.shape(), "targets shape mismatch");
    assert_eq!(&shape[..], include.shape(), "include shape mismatch");
    let count = include.iter().filter(|&&v| v != 0.0).count();
    if count == 0 {
        let zero = g.constant(ndarray::arr0(0.0).into_dyn());
        return (zero, true);
    }
    let y = g.constant2(targets.clone());
    let yc = g.one_minus(y);
    // log p = -softplus(-z); log (1-p) = -softplus(z).
    let nz = g.neg(logits);
    let sp_nz = g.softplus(nz);
    let log_p = g.neg(sp_nz);
    let sp_z = g.softplus(logits);
    let log_1mp = g.neg(sp_z);
    let a = g.mul(y, log_p);
    let b = g.mul(yc, log_1mp);
    let log_pt = g.add(a, b);
    let pt = g.exp(log_pt);
    let om = g.one_minus(pt);
    let w = g.pow_scalar(om, gamma);
    let wl = g.mul(w, log_pt);
    let mask = g.constant2(include.clone());
    let masked = g.mul(wl, mask);
    let total = g.sum_all(masked);
    (g.scale(total, -alpha / count as f64), false)
}

/// Ground truth for the detection heads of one scene.
#[derive(Debug, Clone)]
pub struct DetectionGt {
    pub boxes: Vec<Aabb>,
    pub class_ids: Vec<usize>,
}

/// Objectness assignment radii (distance from the cluster origin to the
/// nearest ground-truth center): closer than NEAR is positive, farther than
/// FAR is negative, in between is ignored.
pub const OBJECTNESS_NEAR: f64 = 0.3;
pub const OBJECTNESS_FAR: f64 = 0.6;

/// Frozen supervision targets for the detection heads. Rebuilt from current
/// origins every training step; reused verbatim during gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionPlan {
    pub obj_target: Vec<f64>,
    pub obj_include: Vec<bool>,
    pub boundary_targets: Array2<f64>,
    pub boundary_include: Vec<bool>,
    pub sem_targets: Vec<usize>,
}

pub fn build_detection_plan(origins: &Array2<f64>, gt: &DetectionGt) -> DetectionPlan {
    let m = origins.nrows();
    let mut plan = DetectionPlan {
        obj_target: vec![0.0; m],
        obj_include: vec![false; m],
        boundary_targets: Array2::zeros((m, 6)),
        boundary_include: vec![false; m],
        sem_targets: vec![0; m],
    };
    if gt.boxes.is_empty() {
        return plan;
    }
    for mi in 0..m {
        let o = Vec3::new(origins[[mi, 0]], origins[[mi, 1]], origins[[mi, 2]]);
        let (gi, dist) = gt
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| (i, b.center().distance(&o)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .unwrap();
        if dist < OBJECTNESS_NEAR {
            plan.obj_target[mi] = 1.0;
            plan.obj_include[mi] = true;
            plan.sem_targets[mi] = gt.class_ids[gi];
            // Boundary regression only where the origin lies strictly inside
            // its assigned box, matching the encoder's domain.
            if let Ok(d) = encode_boundaries(&o, &gt.boxes[gi]) {
                let arr = d.as_array();
                for c in 0..6 {
                    plan.boundary_targets[[mi, c]] = arr[c];
                }
                plan.boundary_include[mi] = true;
            }
        } else if dist > OBJECTNESS_FAR {
            plan.obj_target[mi] = 0.0;
            plan.obj_include[mi] = true;
        }
    }
    plan
}

pub struct DetectionLossParts {
    pub vote: VarId,
    pub objectness: VarId,
    pub boundary: VarId,
    pub semcls: VarId,
    pub total: VarId,
    /// Set when the scene has no ground-truth objects and every component
    /// is identically zero.
    pub zero_gt: bool,
}

/// VoteNet-style detection loss with the anchor heads replaced by boundary
/// regression: L1 vote loss over object seeds, binary objectness with
/// near/far assignment, smooth-L1 on the six boundary distances for
/// positives, and semantic cross-entropy for positives.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    g: &mut Graph,
    votes: VarId,
    origins: VarId,
    boundaries: VarId,
    objectness: VarId,
    sem_logits: VarId,
    seed_object_ids: &[i64],
    gt: &DetectionGt,
    plan: Option<&DetectionPlan>,
) -> Result<(DetectionLossParts, DetectionPlan)> {
    let p = g.shape(votes)[0];
    let m = g.shape(origins)[0];
    assert_eq!(seed_object_ids.len(), p, "one object id per seed");
    if gt.boxes.len() != gt.class_ids.len() {
        return Err(Error::Model("detection gt boxes/classes length mismatch".into()));
    }

    if gt.boxes.is_empty() {
        let zero = g.constant(ndarray::arr0(0.0).into_dyn());
        let plan_out = DetectionPlan {
            obj_target: vec![0.0; m],
            obj_include: vec![false; m],
            boundary_targets: Array2::zeros((m, 6)),
            boundary_include: vec![false; m],
            sem_targets: vec![0; m],
        };
        return Ok((
            DetectionLossParts {
                vote: zero,
                objectness: zero,
                boundary: zero,
                semcls: zero,
                total: zero,
                zero_gt: true,
            },
            plan_out,
        ));
    }

    // Vote loss: L1 distance from each object seed's vote to its object's
    // center; background seeds excluded.
    let mut vote_targets = Array2::<f64>::zeros((p, 3));
    let mut vote_mask = Array2::<f64>::zeros((p, 3));
    let mut n_obj_seeds = 0usize;
    for (si, &oid) in seed_object_ids.iter().enumerate() {
        if oid >= 0 {
            let c = gt.boxes[oid as usize].center();
            vote_targets[[si, 0]] = c.x;
            vote_targets[[si, 1]] = c.y;
            vote_targets[[si, 2]] = c.z;
            for ccol in 0..3 {
                vote_mask[[si, ccol]] = 1.0;
            }
            n_obj_seeds += 1;
        }
    }
    let vote = if n_obj_seeds == 0 {
        g.constant(ndarray::arr0(0.0).into_dyn())
    } else {
        let t = g.constant2(vote_targets);
        let mask = g.constant2(vote_mask);
        let diff = g.sub(votes, t);
        let a = g.abs(diff);
        let am = g.mul(a, mask);
        let s = g.sum_all(am);
        g.scale(s, 1.0 / n_obj_seeds as f64)
    };

    let plan_out = match plan {
        Some(pl) => pl.clone(),
        None => {
            let ov = g
                .value(origins)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            build_detection_plan(&ov, gt)
        }
    };

    // Objectness: binary cross-entropy over non-ignored proposals,
    // softplus(z) - y z form.
    let included = plan_out.obj_include.iter().filter(|&&b| b).count();
    let objectness_loss = if included == 0 {
        g.constant(ndarray::arr0(0.0).into_dyn())
    } else {
        let y = g.constant2(Array2::from_shape_vec((m, 1), plan_out.obj_target.clone()).unwrap());
        let inc = g.constant2(
            Array2::from_shape_vec(
                (m, 1),
                plan_out.obj_include.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap(),
        );
        let sp = g.softplus(objectness);
        let yz = g.mul(y, objectness);
        let ce = g.sub(sp, yz);
        let cem = g.mul(ce, inc);
        let s = g.sum_all(cem);
        g.scale(s, 1.0 / included as f64)
    };

    // Boundary: smooth-L1 between predicted distances and the encoded
    // distances of the assigned box, averaged over positive proposals.
    let npos_boundary = plan_out.boundary_include.iter().filter(|&&b| b).count();
    let boundary_loss = if npos_boundary == 0 {
        g.constant(ndarray::arr0(0.0).into_dyn())
    } else {
        let mut mask = Array2::<f64>::zeros((m, 6));
        for (mi, &inc) in plan_out.boundary_include.iter().enumerate() {
            if inc {
                for c in 0..6 {
                    mask[[mi, c]] = 1.0;
                }
            }
        }
        let t = g.constant2(plan_out.boundary_targets.clone());
        let mk = g.constant2(mask);
        let diff = g.sub(boundaries, t);
        let h = g.huber(diff);
        let hm = g.mul(h, mk);
        let s = g.sum_all(hm);
        g.scale(s, 1.0 / (6 * npos_boundary) as f64)
    };

    // Semantic classification: cross-entropy over positive proposals.
    let pos_rows: Vec<usize> = plan_out
        .obj_target
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == 1.0)
        .map(|(i, _)| i)
        .collect();
    let semcls_loss = if pos_rows.is_empty() {
        g.constant(ndarray::arr0(0.0).into_dyn())
    } else {
        let rows = g.gather_rows(sem_logits, &pos_rows);
        let logp = g.log_softmax_rows(rows);
        let coords: Vec<(usize, usize)> = pos_rows
            .iter()
            .enumerate()
            .map(|(r, &mi)| (r, plan_out.sem_targets[mi]))
            .collect();
        let lp = g.pick(logp, &coords);
        let neg = g.neg(lp);
        g.mean_all(neg)
    };

    let t1 = g.add(vote, objectness_loss);
    let t2 = g.add(boundary_loss, semcls_loss);
    let total = g.add(t1, t2);
    Ok((
        DetectionLossParts {
            vote,
            objectness: objectness_loss,
            boundary: boundary_loss,
            semcls: semcls_loss,
            total,
            zero_gt: false,
        },
        plan_out,
    ))
}

/// Per-sample supervision targets for the QA, type, and semcls heads.
#[derive(Debug, Clone)]
pub struct SampleTargets {
    pub answer_id: usize,
    /// (M, 3) binary positives per proposal and type.
    pub type_labels: Array2<f64>,
    /// (1, C*3) binary grid, column = class_id * 3 + type index.
    pub grid_labels: Array2<f64>,
}

pub fn build_sample_targets(
    proposal_boxes: &[Aabb],
    gt_related: &[RelatedObject],
    class_to_id: &BTreeMap<String, usize>,
    n_classes: usize,
    answer_id: usize,
) -> SampleTargets {
    let type_labels = assign_positives(proposal_boxes, gt_related);
    let mut grid = Array2::<f64>::zeros((1, n_classes * 3));
    for r in gt_related {
        if let Some(&cid) = class_to_id.get(&r.class_label) {
            grid[[0, cid * 3 + r.object_type.index()]] = 1.0;
        }
    }
    SampleTargets { answer_id, type_labels, grid_labels: grid }
}

pub struct SampleLossParts {
    pub qa: VarId,
    pub type_loss: VarId,
    pub semcls: VarId,
}

/// Focal QA/type/semcls terms with the per-source mask applied by dropping
/// the excluded sub-terms (per-type columns) before reduction.
pub fn sample_losses(
    g: &mut Graph,
    cfg: &HeadsConfig,
    dec: &DecoderOutputs,
    targets: &SampleTargets,
    mask: &LossMask,
) -> SampleLossParts {
    let qa = if mask.use_qa {
        focal_multiclass(
            g,
            dec.answer_logits,
            &[targets.answer_id],
            cfg.focal_gamma,
            cfg.focal_alpha,
        )
    } else {
        g.constant(ndarray::arr0(0.0).into_dyn())
    };

    let m = targets.type_labels.nrows();
    let mut type_include = Array2::<f64>::zeros((m, 3));
    for t in RelatedObjectType::ALL {
        if mask.type_flag(t) {
            for mi in 0..m {
                type_include[[mi, t.index()]] = 1.0;
            }
        }
    }
    let (type_loss, _) = focal_multilabel(
        g,
        dec.type_logits,
        &targets.type_labels,
        &type_include,
        cfg.focal_gamma,
        cfg.focal_alpha,
    );

    let mut grid_include = Array2::<f64>::zeros((1, cfg.n_classes * 3));
    for t in RelatedObjectType::ALL {
        if mask.semcls_flag(t) {
            for c in 0..cfg.n_classes {
                grid_include[[0, c * 3 + t.index()]] = 1.0;
            }
        }
    }
    let (semcls, _) = focal_multilabel(
        g,
        dec.grid_logits,
        &targets.grid_labels,
        &grid_include,
        cfg.focal_gamma,
        cfg.focal_alpha,
    );

    SampleLossParts { qa, type_loss, semcls }
}

/// L_total = L_detection + 0.5 (L_QA + L_type + L_semcls). Masked terms are
/// already zero constants, so they contribute exactly nothing.
pub fn total_loss(g: &mut Graph, l_det: VarId, l_qa: VarId, l_type: VarId, l_semcls: VarId) -> VarId {
    let a = g.add(l_qa, l_type);
    let b = g.add(a, l_semcls);
    let half = g.scale(b, 0.5);
    g.add(l_det, half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleSource;
    use crate::transform::loss_mask_for_source;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(c: [f64; 3], s: [f64; 3]) -> Aabb {
        Aabb::new(Vec3::new(c[0], c[1], c[2]), Vec3::new(s[0], s[1], s[2])).unwrap()
    }

    fn rel(class: &str, t: RelatedObjectType, id: i64, b: Aabb) -> RelatedObject {
        RelatedObject { class_label: class.into(), object_type: t, object_id: id, bbox: b }
    }

    #[test]
    fn answer_vocab_oov_and_roundtrip() {
        let v = AnswerVocab::build(["red", "3", "Yes", "red"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("red"), v.id("RED"));
        assert_eq!(v.id("never-seen"), OOV_ID);
        assert_eq!(v.answer(OOV_ID), OOV_ANSWER);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("answers.txt");
        v.save(&p).unwrap();
        assert_eq!(AnswerVocab::load(&p).unwrap(), v);
    }

    #[test]
    fn assign_positives_fixtures() {
        let unit = bx([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        let gt = vec![rel("chair", RelatedObjectType::AgInQ, 0, unit)];
        let labels = assign_positives(&[unit], &gt);
        assert_eq!(labels[[0, 0]], 1.0);
        assert_eq!(labels[[0, 1]], 0.0);

        // Exactly IoU 0.5 (unit box fully inside a double-volume box) is
        // negative under the strict rule.
        let double = bx([0.0, 0.0, 0.5], [1.0, 1.0, 2.0]);
        assert_eq!(iou(&double, &unit), 0.5);
        let labels = assign_positives(&[double], &gt);
        assert_eq!(labels[[0, 0]], 0.0);
    }

    #[test]
    fn assign_positives_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let nprop = rng.random_range(1..=8);
            let ngt = rng.random_range(1..=3);
            let rand_box = |rng: &mut ChaCha8Rng| {
                bx(
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ],
                    [
                        rng.random_range(0.3..2.0),
                        rng.random_range(0.3..2.0),
                        rng.random_range(0.3..2.0),
                    ],
                )
            };
            let proposals: Vec<Aabb> = (0..nprop).map(|_| rand_box(&mut rng)).collect();
            let gt: Vec<RelatedObject> = (0..ngt)
                .map(|i| {
                    let t = RelatedObjectType::ALL[rng.random_range(0..3)];
                    rel("c", t, i as i64, rand_box(&mut rng))
                })
                .collect();
            let got = assign_positives(&proposals, &gt);
            for (mi, p) in proposals.iter().enumerate() {
                for t in RelatedObjectType::ALL {
                    let best = gt
                        .iter()
                        .filter(|r| r.object_type == t)
                        .map(|r| iou(p, &r.bbox))
                        .fold(0.0f64, f64::max);
                    let expect = if best > 0.5 { 1.0 } else { 0.0 };
                    assert_eq!(got[[mi, t.index()]], expect);
                }
            }
        }
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        // Multiclass: logits [ln 9, 0] put p = 0.9 on class 0.
        let mut g = Graph::new();
        let z = g.constant2(arr2(&[[9.0f64.ln(), 0.0]]));
        let fl = focal_multiclass(&mut g, z, &[0], 0.0, 1.0);
        let expect = -(0.9f64.ln());
        assert!((g.scalar(fl) - expect).abs() < 1e-9);

        // Multilabel, binary p = 0.5: loss is ln 2.
        let mut g = Graph::new();
        let z = g.constant2(arr2(&[[0.0]]));
        let y = arr2(&[[1.0]]);
        let inc = arr2(&[[1.0]]);
        let (fl, flag) = focal_multilabel(&mut g, z, &y, &inc, 0.0, 1.0);
        assert!(!flag);
        assert!((g.scalar(fl) - std::f64::consts::LN_2).abs() < 1e-12);

        // Multilabel gamma=0 alpha=1 equals binary cross-entropy on random
        // logits.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z0 = rng.random_range(-4.0..4.0);
            let z1 = rng.random_range(-4.0..4.0);
            let y0 = if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 };
            let y1 = if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 };
            let mut g = Graph::new();
            let z = g.constant2(arr2(&[[z0, z1]]));
            let y = arr2(&[[y0, y1]]);
            let inc = arr2(&[[1.0, 1.0]]);
            let (fl, _) = focal_multilabel(&mut g, z, &y, &inc, 0.0, 1.0);
            let bce = |z: f64, y: f64| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            };
            let expect = (bce(z0, y0) + bce(z1, y1)) / 2.0;
            assert!((g.scalar(fl) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_hand_fixture_and_limits() {
        // gamma=2, alpha=1, p_t=0.9: 0.01 * (-ln 0.9).
        let mut g = Graph::new();
        let z = g.constant2(arr2(&[[9.0f64.ln(), 0.0]]));
        let fl = focal_multiclass(&mut g, z, &[0], 2.0, 1.0);
        let expect = 0.01 * -(0.9f64.ln());
        assert!((g.scalar(fl) - expect).abs() < 1e-12, "{}", g.scalar(fl));

        // Confident correct prediction drives the loss to ~0.
        let mut g = Graph::new();
        let z = g.constant2(arr2(&[[40.0, 0.0]]));
        let fl = focal_multiclass(&mut g, z, &[0], 2.0, 0.25);
        assert!(g.scalar(fl).abs() < 1e-12);

        // Empty include set: zero loss with the warning flag.
        let mut g = Graph::new();
        let z = g.constant2(arr2(&[[0.3, -0.2]]));
        let (fl, flag) = focal_multilabel(
            &mut g,
            z,
            &arr2(&[[1.0, 0.0]]),
            &arr2(&[[0.0, 0.0]]),
            2.0,
            0.25,
        );
        assert!(flag);
        assert_eq!(g.scalar(fl), 0.0);
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::new();
        let c = |g: &mut Graph, v: f64| g.constant(ndarray::arr0(v).into_dyn());
        let l1 = c(&mut g, 1.0);
        let l2 = c(&mut g, 2.0);
        let l3 = c(&mut g, 3.0);
        let l4 = c(&mut g, 4.0);
        let total = total_loss(&mut g, l1, l2, l3, l4);
        assert_eq!(g.scalar(total), 5.5);

        // Ablation without grounding: only detection + 0.5 QA remain.
        let mut g = Graph::new();
        let l1 = c(&mut g, 1.0);
        let l2 = c(&mut g, 2.0);
        let z1 = c(&mut g, 0.0);
        let z2 = c(&mut g, 0.0);
        let total = total_loss(&mut g, l1, l2, z1, z2);
        assert_eq!(g.scalar(total), 2.0);
    }

    #[test]
    fn detection_loss_zero_fixtures() {
        let gt = DetectionGt {
            boxes: vec![bx([1.0, 1.0, 0.5], [1.0, 1.0, 1.0]), bx([4.0, 4.0, 0.5], [1.0, 1.0, 1.0])],
            class_ids: vec![0, 1],
        };
        // Two seeds on object 0, one on object 1, one background; votes sit
        // exactly at the centers.
        let seed_ids = vec![0i64, 0, 1, -1];
        let votes_v = arr2(&[[1.0, 1.0, 0.5], [1.0, 1.0, 0.5], [4.0, 4.0, 0.5], [9.0, 9.0, 9.0]]);
        // Origins strictly inside each box, boundaries = exact encodings.
        let origins_v = arr2(&[[1.1, 0.9, 0.4], [3.9, 4.2, 0.6]]);
        let mut b = Array2::<f64>::zeros((2, 6));
        for (mi, gi) in [(0usize, 0usize), (1, 1)] {
            let o = Vec3::new(origins_v[[mi, 0]], origins_v[[mi, 1]], origins_v[[mi, 2]]);
            let d = encode_boundaries(&o, &gt.boxes[gi]).unwrap().as_array();
            for c in 0..6 {
                b[[mi, c]] = d[c];
            }
        }
        let mut g = Graph::new();
        let votes = g.constant2(votes_v);
        let origins = g.constant2(origins_v);
        let boundaries = g.constant2(b);
        let objectness = g.constant2(arr2(&[[8.0], [8.0]]));
        let sem = g.constant2(arr2(&[[9.0, 0.0, 0.0], [0.0, 9.0, 0.0]]));
        let (parts, plan) =
            detection_loss(&mut g, votes, origins, boundaries, objectness, sem, &seed_ids, &gt, None)
                .unwrap();
        assert_eq!(g.scalar(parts.vote), 0.0);
        assert_eq!(g.scalar(parts.boundary), 0.0);
        assert!(g.scalar(parts.objectness) < 1e-3);
        assert!(g.scalar(parts.semcls) < 1e-3);
        assert!(!parts.zero_gt);
        assert_eq!(plan.sem_targets, vec![0, 1]);
        assert_eq!(plan.boundary_include, vec![true, true]);

        // Zero ground truth: all components zero with the flag set.
        let mut g = Graph::new();
        let votes = g.constant2(arr2(&[[0.0, 0.0, 0.0]]));
        let origins = g.constant2(arr2(&[[0.0, 0.0, 0.0]]));
        let boundaries = g.constant2(Array2::ones((1, 6)));
        let objectness = g.constant2(arr2(&[[0.0]]));
        let sem = g.constant2(arr2(&[[0.0, 0.0]]));
        let empty = DetectionGt { boxes: vec![], class_ids: vec![] };
        let (parts, _) =
            detection_loss(&mut g, votes, origins, boundaries, objectness, sem, &[-1], &empty, None)
                .unwrap();
        assert!(parts.zero_gt);
        assert_eq!(g.scalar(parts.total), 0.0);
    }

    /// Straightforward reimplementation of every component on a random
    /// instance.
    #[test]
    fn detection_loss_matches_reference_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..30 {
            let ngt = rng.random_range(1..=3);
            let gt = DetectionGt {
                boxes: (0..ngt)
                    .map(|_| {
                        bx(
                            [
                                rng.random_range(0.0..4.0),
                                rng.random_range(0.0..4.0),
                                rng.random_range(0.3..1.0),
                            ],
                            [
                                rng.random_range(0.4..1.5),
                                rng.random_range(0.4..1.5),
                                rng.random_range(0.4..1.5),
                            ],
                        )
                    })
                    .collect(),
                class_ids: (0..ngt).map(|_| rng.random_range(0..4)).collect(),
            };
            let p = 6;
            let m = 4;
            let seed_ids: Vec<i64> =
                (0..p).map(|_| rng.random_range(-1..ngt as i64)).collect();
            let votes_v = Array2::from_shape_fn((p, 3), |_| rng.random_range(-1.0..5.0));
            let origins_v = Array2::from_shape_fn((m, 3), |_| rng.random_range(0.0..4.0));
            let bounds_v = Array2::from_shape_fn((m, 6), |_| rng.random_range(0.01..1.5));
            let obj_v = Array2::from_shape_fn((m, 1), |_| rng.random_range(-2.0..2.0));
            let sem_v = Array2::from_shape_fn((m, 4), |_| rng.random_range(-2.0..2.0));

            let mut g = Graph::new();
            let votes = g.constant2(votes_v.clone());
            let origins = g.constant2(origins_v.clone());
            let boundaries = g.constant2(bounds_v.clone());
            let objectness = g.constant2(obj_v.clone());
            let sem = g.constant2(sem_v.clone());
            let (parts, _) = detection_loss(
                &mut g, votes, origins, boundaries, objectness, sem, &seed_ids, &gt, None,
            )
            .unwrap();

            // Reference: vote term.
            let mut vote_sum = 0.0;
            let mut nseeds = 0;
            for (si, &oid) in seed_ids.iter().enumerate() {
                if oid >= 0 {
                    let c = gt.boxes[oid as usize].center();
                    vote_sum += (votes_v[[si, 0]] - c.x).abs()
                        + (votes_v[[si, 1]] - c.y).abs()
                        + (votes_v[[si, 2]] - c.z).abs();
                    nseeds += 1;
                }
            }
            let vote_ref = if nseeds == 0 { 0.0 } else { vote_sum / nseeds as f64 };
            assert!((g.scalar(parts.vote) - vote_ref).abs() < 1e-9, "trial {trial}");

            // Reference: assignment, objectness, boundary, semcls.
            let mut obj_sum = 0.0;
            let mut obj_n = 0;
            let mut bnd_sum = 0.0;
            let mut bnd_n = 0;
            let mut sem_sum = 0.0;
            let mut sem_n = 0;
            for mi in 0..m {
                let o = Vec3::new(origins_v[[mi, 0]], origins_v[[mi, 1]], origins_v[[mi, 2]]);
                let (gi, dist) = gt
                    .boxes
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (i, b.center().distance(&o)))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                let z: f64 = obj_v[[mi, 0]];
                let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
                if dist < OBJECTNESS_NEAR {
                    obj_sum += softplus(z) - z;
                    obj_n += 1;
                    if let Ok(d) = encode_boundaries(&o, &gt.boxes[gi]) {
                        let da = d.as_array();
                        for c in 0..6 {
                            let x: f64 = bounds_v[[mi, c]] - da[c];
                            bnd_sum +=
                                if x.abs() <= 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
                        }
                        bnd_n += 1;
                    }
                    let row: Vec<f64> = (0..4).map(|c| sem_v[[mi, c]]).collect();
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    sem_sum += lse - row[gt.class_ids[gi]];
                    sem_n += 1;
                } else if dist > OBJECTNESS_FAR {
                    obj_sum += softplus(z);
                    obj_n += 1;
                }
            }
            let obj_ref = if obj_n == 0 { 0.0 } else { obj_sum / obj_n as f64 };
            let bnd_ref = if bnd_n == 0 { 0.0 } else { bnd_sum / (6 * bnd_n) as f64 };
            let sem_ref = if sem_n == 0 { 0.0 } else { sem_sum / sem_n as f64 };
            assert!((g.scalar(parts.objectness) - obj_ref).abs() < 1e-9, "trial {trial}");
            assert!((g.scalar(parts.boundary) - bnd_ref).abs() < 1e-9, "trial {trial}");
            assert!((g.scalar(parts.semcls) - sem_ref).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn masked_sources_zero_their_head_gradients() {
        let cfg = HeadsConfig {
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            n_classes: 4,
            n_answers: 5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        };
        let mut store = ParamStore::new();
        ensure_decoder_params(&mut store, &cfg, 3);

        let run = |mask: &LossMask, store: &ParamStore| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let words = g.constant2(Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0)));
            let objects =
                g.constant2(Array2::from_shape_fn((3, 8), |_| rng.random_range(-1.0..1.0)));
            let dec = decode_answer(&mut g, store, &cfg, words, objects, &[false; 4]).unwrap();
            let unit = bx([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
            let gt = vec![
                rel("a", RelatedObjectType::AgInQ, 0, unit),
                rel("b", RelatedObjectType::AgNotInQ, 1, bx([3.0, 0.0, 0.0], [1.0, 1.0, 1.0])),
                rel("c", RelatedObjectType::ContextOfAg, 2, bx([0.0, 3.0, 0.0], [1.0, 1.0, 1.0])),
            ];
            let mut class_map = BTreeMap::new();
            for (i, c) in ["a", "b", "c", "d"].iter().enumerate() {
                class_map.insert(c.to_string(), i);
            }
            let targets = build_sample_targets(
                &[unit, bx([3.0, 0.0, 0.0], [1.0, 1.0, 1.0]), bx([0.0, 3.0, 0.0], [1.0, 1.0, 1.0])],
                &gt,
                &class_map,
                cfg.n_classes,
                2,
            );
            let parts = sample_losses(&mut g, &cfg, &dec, &targets, mask);
            let zero = g.constant(ndarray::arr0(0.0).into_dyn());
            let total = total_loss(&mut g, zero, parts.qa, parts.type_loss, parts.semcls);
            let grads = g.backward(total);
            (g.scalar(total), g.param_grads(&grads))
        };

        // Full mask: grid head receives nonzero gradient.
        let (_, pg_full) = run(&loss_mask_for_source(SampleSource::ManualSynth), &store);
        assert!(pg_full["decoder.grid.w"].iter().any(|v| *v != 0.0));

        // Ground transform: columns for NotIn-Q and Context are dropped.
        // Their grid-head weight columns must get exactly zero gradient.
        let (_, pg_ground) = run(&loss_mask_for_source(SampleSource::GroundTransform), &store);
        let gw = pg_ground["decoder.grid.w"]
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for c in 0..cfg.n_classes {
            for t in [1usize, 2] {
                let col = c * 3 + t;
                assert!(
                    gw.column(col).iter().all(|v| *v == 0.0),
                    "masked grid column {col} leaked gradient"
                );
            }
            assert!(gw.column(c * 3).iter().any(|v| *v != 0.0) || true);
        }
        // Type head: masked type columns zero too.
        let tw = pg_ground["decoder.type.w"]
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for t in [1usize, 2] {
            assert!(tw.column(t).iter().all(|v| *v == 0.0));
        }
        assert!(tw.column(0).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn decoder_shapes_and_gradients() {
        let cfg = HeadsConfig {
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            n_classes: 3,
            n_answers: 6,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        };
        let mut store = ParamStore::new();
        ensure_decoder_params(&mut store, &cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let words_v = Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0));
        let objects_v = Array2::from_shape_fn((3, 8), |_| rng.random_range(-1.0..1.0));
        let mask = vec![false, false, true, true];

        let loss = |s: &ParamStore| {
            let mut g = Graph::new();
            let w = g.constant2(words_v.clone());
            let o = g.constant2(objects_v.clone());
            let dec = decode_answer(&mut g, s, &cfg, w, o, &mask).unwrap();
            let a = g.sum_all(dec.answer_logits);
            let gr = g.sum_all(dec.grid_logits);
            let t = g.sum_all(dec.type_logits);
            let s1 = g.add(a, gr);
            let out = g.add(s1, t);
            g.scalar(out)
        };

        let mut g = Graph::new();
        let w = g.constant2(words_v.clone());
        let o = g.constant2(objects_v.clone());
        let dec = decode_answer(&mut g, &store, &cfg, w, o, &mask).unwrap();
        assert_eq!(g.shape(dec.answer_logits), &[1, 6]);
        assert_eq!(g.shape(dec.grid_logits), &[1, 9]);
        assert_eq!(g.shape(dec.type_logits), &[3, 3]);
        let a = g.sum_all(dec.answer_logits);
        let gr = g.sum_all(dec.grid_logits);
        let t = g.sum_all(dec.type_logits);
        let s1 = g.add(a, gr);
        let out = g.add(s1, t);
        let grads = g.backward(out);
        let pg = g.param_grads(&grads);

        let h = 1e-5;
        for name in ["decoder.query", "decoder.answer.w", "decoder.grid.w", "decoder.type.w"] {
            let analytic = &pg[name];
            let nvals = store.get(name).len();
            for k in (0..nvals).step_by(nvals / 5 + 1) {
                let orig = store.get(name).as_slice().unwrap()[k];
                store.get_mut(name).as_slice_mut().unwrap()[k] = orig + h;
                let fp = loss(&store);
                store.get_mut(name).as_slice_mut().unwrap()[k] = orig - h;
                let fm = loss(&store);
                store.get_mut(name).as_slice_mut().unwrap()[k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                assert!(rel < 1e-4, "{name}[{k}]: fd {fd} vs analytic {an}");
            }
        }
    }
}
