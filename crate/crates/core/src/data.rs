//! The grounded QA sample model: the task quintuple, typed related-object
//! annotations, JSONL serialization, dataset statistics, and scene-disjoint
//! splitting.
//!
//! JSONL field names are part of the external contract and must not change:
//! `scene_id`, `question`, `answer`, `answer_category`, `source`, and
//! `related` with `class_label` / `object_type` / `object_id` / `box`.

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

/// How a related object relates to the question/answer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelatedObjectType {
    /// Answer-grounded object whose class name appears in the question.
    #[serde(rename = "AG-In-Q")]
    AgInQ,
    /// Answer-grounded object whose class name does not appear in the question.
    #[serde(rename = "AG-NotIn-Q")]
    AgNotInQ,
    /// Contextual object constraining the answer-grounded object.
    #[serde(rename = "Context-Of-AG")]
    ContextOfAg,
}

impl RelatedObjectType {
    pub const ALL: [RelatedObjectType; 3] = [
        RelatedObjectType::AgInQ,
        RelatedObjectType::AgNotInQ,
        RelatedObjectType::ContextOfAg,
    ];

    pub fn index(&self) -> usize {
        match self {
            RelatedObjectType::AgInQ => 0,
            RelatedObjectType::AgNotInQ => 1,
            RelatedObjectType::ContextOfAg => 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RelatedObjectType::AgInQ => "AG-In-Q",
            RelatedObjectType::AgNotInQ => "AG-NotIn-Q",
            RelatedObjectType::ContextOfAg => "Context-Of-AG",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatedObject {
    pub class_label: String,
    pub object_type: RelatedObjectType,
    pub object_id: i64,
    #[serde(rename = "box")]
    pub bbox: Aabb,
}

/// Where a sample came from; decides which supervision terms apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    ManualSynth,
    DetTransform,
    GroundTransform,
    MaskedGroundTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerCategory {
    Number,
    Color,
    Yesno,
    Other,
}

impl AnswerCategory {
    pub const ALL: [AnswerCategory; 4] = [
        AnswerCategory::Number,
        AnswerCategory::Color,
        AnswerCategory::Yesno,
        AnswerCategory::Other,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AnswerCategory::Number => "number",
            AnswerCategory::Color => "color",
            AnswerCategory::Yesno => "yesno",
            AnswerCategory::Other => "other",
        }
    }
}

/// One grounded QA record: question, scene reference, answer, and the typed
/// related-object annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GQASample {
    pub scene_id: String,
    pub question: String,
    pub answer: String,
    pub answer_category: AnswerCategory,
    pub source: SampleSource,
    pub related: Vec<RelatedObject>,
}

impl GQASample {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Data("question must be nonempty".into()));
        }
        if self.answer.trim().is_empty() {
            return Err(Error::Data("answer must be nonempty".into()));
        }
        for r in &self.related {
            if r.class_label.trim().is_empty() {
                return Err(Error::Data("related object class_label must be nonempty".into()));
            }
        }
        Ok(())
    }

    pub fn count_type(&self, t: RelatedObjectType) -> usize {
        self.related.iter().filter(|r| r.object_type == t).count()
    }
}

/// Color lexicon used both by the answer classifier and the scene painter.
pub const COLOR_LEXICON: [&str; 17] = [
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "brown", "black", "white",
    "gray", "grey", "beige", "cyan", "magenta", "teal", "navy",
];

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];

/// Deterministic answer sub-class rule: yes/no first, then integers and
/// number words, then the color lexicon, otherwise `Other`. Matching is
/// case-insensitive on the trimmed answer.
pub fn classify_answer(answer: &str) -> AnswerCategory {
    let a = answer.trim().to_lowercase();
    if a == "yes" || a == "no" {
        return AnswerCategory::Yesno;
    }
    if a.parse::<i64>().is_ok() || NUMBER_WORDS.contains(&a.as_str()) {
        return AnswerCategory::Number;
    }
    if COLOR_LEXICON.contains(&a.as_str()) {
        return AnswerCategory::Color;
    }
    AnswerCategory::Other
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub avg_in_q: f64,
    pub avg_notin_q: f64,
    pub avg_context: f64,
    pub avg_overall: f64,
    pub avg_words_per_question: f64,
}

/// Per-type related-object averages over samples; the overall average is the
/// grand total over the same denominator, so it equals the sum of the three
/// type averages up to rounding.
pub fn compute_stats(samples: &[GQASample]) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(Error::Data("compute_stats: empty dataset".into()));
    }
    let n = samples.len() as f64;
    let mut counts = [0usize; 3];
    let mut words = 0usize;
    for s in samples {
        for r in &s.related {
            counts[r.object_type.index()] += 1;
        }
        words += s.question.split_whitespace().count();
    }
    let total: usize = counts.iter().sum();
    Ok(DatasetStats {
        n_samples: samples.len(),
        avg_in_q: counts[0] as f64 / n,
        avg_notin_q: counts[1] as f64 / n,
        avg_context: counts[2] as f64 / n,
        avg_overall: total as f64 / n,
        avg_words_per_question: words as f64 / n,
    })
}

pub fn save_jsonl(samples: &[GQASample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<GQASample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: GQASample = serde_json::from_str(&line).map_err(|e| Error::DataLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        sample.validate().map_err(|e| Error::DataLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Scene-disjoint split: scene ids are shuffled deterministically and
/// assigned wholesale to train or val; no scene appears in both.
pub fn split_by_scene(
    samples: &[GQASample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<GQASample>, Vec<GQASample>)> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::Data(format!("split ratio {ratio} outside (0, 1)")));
    }
    let scenes: BTreeSet<&str> = samples.iter().map(|s| s.scene_id.as_str()).collect();
    if scenes.len() < 2 {
        return Err(Error::Data(format!(
            "split_by_scene needs at least 2 scenes, got {}",
            scenes.len()
        )));
    }
    let mut scene_ids: Vec<&str> = scenes.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scene_ids.shuffle(&mut rng);
    let n_train =
        ((scene_ids.len() as f64 * ratio).round() as usize).clamp(1, scene_ids.len() - 1);
    let train_scenes: BTreeSet<&str> = scene_ids[..n_train].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        if train_scenes.contains(s.scene_id.as_str()) {
            train.push(s.clone());
        } else {
            val.push(s.clone());
        }
    }
    Ok((train, val))
}
