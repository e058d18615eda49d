//! Dataset extension: turning detection annotations and grounding
//! descriptions into QA samples, the masked-grounding variant, and the
//! per-source supervision masks that drop loss terms whose annotations a
//! transformed source does not carry.

use crate::data::{classify_answer, GQASample, RelatedObject, RelatedObjectType, SampleSource};
use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::lang::{word_tokenize, MASK_TOKEN};
use crate::synth::{count_question, exists_question, Scene};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One grounding annotation: a referring description plus its target object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub scene_id: String,
    pub description: String,
    pub target_class: String,
    pub target_id: i64,
    #[serde(rename = "box")]
    pub bbox: Aabb,
}

impl GroundingRecord {
    pub fn validate(&self) -> Result<()> {
        if !word_tokenize(&self.description).contains(&self.target_class) {
            return Err(Error::Data(format!(
                "target class {:?} does not occur in description {:?}",
                self.target_class, self.description
            )));
        }
        Ok(())
    }
}

/// Per-sample supervision switches. `use_qa` gates the answer loss; the six
/// type/semcls flags gate the per-type halves of the grounding losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub use_qa: bool,
    pub use_type_in_q: bool,
    pub use_type_notin_q: bool,
    pub use_type_context: bool,
    pub use_semcls_in_q: bool,
    pub use_semcls_notin_q: bool,
    pub use_semcls_context: bool,
}

impl LossMask {
    pub fn all() -> Self {
        Self {
            use_qa: true,
            use_type_in_q: true,
            use_type_notin_q: true,
            use_type_context: true,
            use_semcls_in_q: true,
            use_semcls_notin_q: true,
            use_semcls_context: true,
        }
    }

    pub fn type_flag(&self, t: RelatedObjectType) -> bool {
        match t {
            RelatedObjectType::AgInQ => self.use_type_in_q,
            RelatedObjectType::AgNotInQ => self.use_type_notin_q,
            RelatedObjectType::ContextOfAg => self.use_type_context,
        }
    }

    pub fn semcls_flag(&self, t: RelatedObjectType) -> bool {
        match t {
            RelatedObjectType::AgInQ => self.use_semcls_in_q,
            RelatedObjectType::AgNotInQ => self.use_semcls_notin_q,
            RelatedObjectType::ContextOfAg => self.use_semcls_context,
        }
    }
}

/// Supervision table per source. Transformed grounding data lacks
/// AG-NotIn-Q/Context annotations, masked grounding lacks AG-In-Q/Context,
/// and detection transforms lack Context annotations.
pub fn loss_mask_for_source(source: SampleSource) -> LossMask {
    let mut m = LossMask::all();
    match source {
        SampleSource::ManualSynth => {}
        SampleSource::DetTransform => {
            m.use_type_context = false;
            m.use_semcls_context = false;
        }
        SampleSource::GroundTransform => {
            m.use_type_notin_q = false;
            m.use_type_context = false;
            m.use_semcls_notin_q = false;
            m.use_semcls_context = false;
        }
        SampleSource::MaskedGroundTransform => {
            m.use_type_in_q = false;
            m.use_type_context = false;
            m.use_semcls_in_q = false;
            m.use_semcls_context = false;
        }
    }
    m
}

/// One count question and one existence question per vocabulary class,
/// absent classes included ("0" / "no" with no related objects).
pub fn detection_to_gqa(scene: &Scene, vocabulary: &[String]) -> Vec<GQASample> {
    let mut out = Vec::with_capacity(vocabulary.len() * 2);
    for class in vocabulary {
        let found = scene.find(class);
        let related: Vec<RelatedObject> = found
            .iter()
            .map(|o| RelatedObject {
                class_label: o.class_label.clone(),
                object_type: RelatedObjectType::AgInQ,
                object_id: o.object_id,
                bbox: o.bbox,
            })
            .collect();
        let count_answer = found.len().to_string();
        out.push(GQASample {
            scene_id: scene.scene_id.clone(),
            question: count_question(class),
            answer: count_answer.clone(),
            answer_category: classify_answer(&count_answer),
            source: SampleSource::DetTransform,
            related: related.clone(),
        });
        let exists_answer = if found.is_empty() { "no" } else { "yes" };
        out.push(GQASample {
            scene_id: scene.scene_id.clone(),
            question: exists_question(class),
            answer: exists_answer.to_string(),
            answer_category: classify_answer(exists_answer),
            source: SampleSource::DetTransform,
            related,
        });
    }
    out
}

const GROUNDING_WRAPPER: &str = "which object matches:";
const MASKED_WRAPPER: &str = "what is the [mask]:";

/// Grounding description as a question; the referred class is the answer and
/// the target box the single AG-In-Q object. `raw_question` skips the
/// question-form wrapper and uses the bare description.
pub fn grounding_to_gqa(record: &GroundingRecord, raw_question: bool) -> Result<GQASample> {
    record.validate()?;
    let question = if raw_question {
        record.description.clone()
    } else {
        format!("{GROUNDING_WRAPPER} {}", record.description)
    };
    Ok(GQASample {
        scene_id: record.scene_id.clone(),
        question,
        answer: record.target_class.clone(),
        answer_category: classify_answer(&record.target_class),
        source: SampleSource::GroundTransform,
        related: vec![RelatedObject {
            class_label: record.target_class.clone(),
            object_type: RelatedObjectType::AgInQ,
            object_id: record.target_id,
            bbox: record.bbox,
        }],
    })
}

/// Every token occurrence of the target class becomes the literal `[mask]`;
/// the masked class is the answer and the target box the single AG-NotIn-Q
/// object. The emitted question is token-normalized (single spaces).
pub fn masked_grounding_to_gqa(record: &GroundingRecord, raw_question: bool) -> Result<GQASample> {
    record.validate()?;
    let masked: Vec<String> = word_tokenize(&record.description)
        .into_iter()
        .map(|t| if t == record.target_class { MASK_TOKEN.to_string() } else { t })
        .collect();
    let masked = masked.join(" ");
    let question = if raw_question {
        masked
    } else {
        format!("{MASKED_WRAPPER} {masked}")
    };
    debug_assert!(!word_tokenize(&question).contains(&record.target_class));
    Ok(GQASample {
        scene_id: record.scene_id.clone(),
        question,
        answer: record.target_class.clone(),
        answer_category: classify_answer(&record.target_class),
        source: SampleSource::MaskedGroundTransform,
        related: vec![RelatedObject {
            class_label: record.target_class.clone(),
            object_type: RelatedObjectType::AgNotInQ,
            object_id: record.target_id,
            bbox: record.bbox,
        }],
    })
}

/// Synthetic grounding descriptions for unique-class objects: stands in for
/// a real referring-expression dataset as input to the two grounding
/// transforms.
pub fn synthesize_grounding_records(scene: &Scene) -> Vec<GroundingRecord> {
    let unique = scene.unique_classes();
    let mut out = Vec::new();
    for (class, obj) in &unique {
        // Nearest other unique class anchors the relational description.
        let anchor = unique
            .iter()
            .filter(|(c, _)| c != class)
            .min_by(|(_, x), (_, y)| {
                let dx = x.bbox.center().distance(&obj.bbox.center());
                let dy = y.bbox.center().distance(&obj.bbox.center());
                dx.partial_cmp(&dy).unwrap().then(x.object_id.cmp(&y.object_id))
            })
            .map(|(c, _)| *c);
        let description = match anchor {
            Some(a) => format!("the {} {} near the {}", obj.color, class, a),
            None => format!("the {} {} in the room", obj.color, class),
        };
        out.push(GroundingRecord {
            scene_id: scene.scene_id.clone(),
            description,
            target_class: class.to_string(),
            target_id: obj.object_id,
            bbox: obj.bbox,
        });
    }
    out
}

pub fn save_grounding_jsonl(records: &[GroundingRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_grounding_jsonl(path: &Path) -> Result<Vec<GroundingRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroundingRecord = serde_json::from_str(&line).map_err(|e| Error::DataLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::DataLine { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Named training mixtures assembled from the manual samples plus the
/// transformed sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixPreset {
    Manual,
    ManualDet,
    ManualDetGround,
    ManualExt,
}

impl std::str::FromStr for MixPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(MixPreset::Manual),
            "manual_det" => Ok(MixPreset::ManualDet),
            "manual_det_ground" => Ok(MixPreset::ManualDetGround),
            "manual_ext" => Ok(MixPreset::ManualExt),
            other => Err(Error::Config(format!(
                "unknown mix {other:?}; expected manual | manual_det | manual_det_ground | manual_ext"
            ))),
        }
    }
}

pub fn build_mix(
    preset: MixPreset,
    manual: &[GQASample],
    scenes: &[Scene],
    records: &[GroundingRecord],
    vocabulary: &[String],
    raw_grounding_questions: bool,
) -> Result<Vec<GQASample>> {
    let mut out: Vec<GQASample> = manual.to_vec();
    if preset == MixPreset::Manual {
        return Ok(out);
    }
    for scene in scenes {
        out.extend(detection_to_gqa(scene, vocabulary));
    }
    if preset == MixPreset::ManualDet {
        return Ok(out);
    }
    for r in records {
        out.push(grounding_to_gqa(r, raw_grounding_questions)?);
    }
    if preset == MixPreset::ManualDetGround {
        return Ok(out);
    }
    for r in records {
        out.push(masked_grounding_to_gqa(r, raw_grounding_questions)?);
    }
    Ok(out)
}
