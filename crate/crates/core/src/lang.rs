//! Language branch: word tokenization with the task prefix, the vocabulary
//! file format, and two interchangeable text encoders — a small pre-norm
//! transformer (default) and a bidirectional GRU (ablation variant). Both
//! produce (L, D) features with padded positions zeroed.

use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::tape::{Graph, VarId};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

/// Task prefix prepended to every question before encoding.
pub const TASK_PREFIX: &str = "visual question answering:";

/// Literal mask token inserted by the masked-grounding transform.
pub const MASK_TOKEN: &str = "[mask]";

const PUNCT: [char; 10] = ['?', '!', '.', ',', ':', ';', '(', ')', '"', '\''];

/// Lowercased whitespace tokenization with punctuation split into separate
/// tokens. The literal `[mask]` survives as a single token.
pub fn word_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        if lower == MASK_TOKEN {
            out.push(lower);
            continue;
        }
        let mut word = String::new();
        for ch in lower.chars() {
            if PUNCT.contains(&ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Token-to-id map with reserved entries: PAD=0, UNK=1, MASK=2, then the
/// task-prefix tokens, then corpus tokens in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    fn reserved_tokens() -> Vec<String> {
        let mut v = vec!["[pad]".to_string(), "[unk]".to_string(), MASK_TOKEN.to_string()];
        v.extend(word_tokenize(TASK_PREFIX));
        v
    }

    /// Build from a corpus of texts. Deterministic: corpus tokens are sorted.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let reserved = Self::reserved_tokens();
        let mut extra: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for text in corpus {
            for tok in word_tokenize(text) {
                extra.insert(tok);
            }
        }
        let mut tokens = reserved.clone();
        for t in extra {
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Ids of the task-prefix tokens, in order.
    pub fn prefix_ids(&self) -> Vec<usize> {
        word_tokenize(TASK_PREFIX).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            tokens.push(line?);
        }
        let reserved = Self::reserved_tokens();
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(Error::Data("vocab file missing reserved token header".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }
}

/// Question to ids: task-prefix ids followed by word ids, OOV mapped to UNK.
pub fn tokenize(question: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    if question.trim().is_empty() {
        return Err(Error::Data("tokenize: empty question".into()));
    }
    let mut ids = vocab.prefix_ids();
    for tok in word_tokenize(question) {
        ids.push(vocab.id(&tok));
    }
    Ok(ids)
}

/// Inverse of [`tokenize`] on in-vocabulary text: drops the leading prefix
/// and any padding, then joins tokens with single spaces.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    let prefix = vocab.prefix_ids();
    let body = if ids.len() >= prefix.len() && ids[..prefix.len()] == prefix[..] {
        &ids[prefix.len()..]
    } else {
        ids
    };
    body.iter()
        .filter(|&&id| id != PAD_ID)
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Truncate or pad to length `l`. Returns (ids, padding mask); mask true
/// marks a padded position.
pub fn pad_to(ids: &[usize], l: usize) -> (Vec<usize>, Vec<bool>) {
    let mut out = vec![PAD_ID; l];
    let mut mask = vec![true; l];
    for (i, &id) in ids.iter().take(l).enumerate() {
        out[i] = id;
        mask[i] = false;
    }
    (out, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Transformer,
    Recurrent,
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(EncoderVariant::Transformer),
            "recurrent" => Ok(EncoderVariant::Recurrent),
            other => Err(Error::Config(format!("unknown encoder variant: {other}"))),
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderVariant::Transformer => write!(f, "transformer"),
            EncoderVariant::Recurrent => write!(f, "recurrent"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LangConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
}

pub fn ensure_lang_params(
    store: &mut ParamStore,
    cfg: &LangConfig,
    vocab_size: usize,
    variant: EncoderVariant,
    seed: u64,
) {
    store.ensure_xavier("lang.embed", vocab_size, cfg.d_model, seed);
    store.ensure_xavier("lang.pos", cfg.max_len, cfg.d_model, seed);
    store.ensure_layer_norm("lang.final_ln", cfg.d_model);
    match variant {
        EncoderVariant::Transformer => {
            for i in 0..cfg.n_layers {
                nn::ensure_attention_ffn_block(
                    store,
                    &format!("lang.t{i}"),
                    cfg.d_model,
                    cfg.ffn_mult,
                    false,
                    seed,
                );
            }
        }
        EncoderVariant::Recurrent => {
            assert_eq!(cfg.d_model % 2, 0, "recurrent encoder needs even width");
            let dh = cfg.d_model / 2;
            for dir in ["fwd", "bwd"] {
                for gate in ["z", "r", "h"] {
                    store.ensure_xavier(&format!("lang.gru.{dir}.w{gate}"), cfg.d_model, dh, seed);
                    store.ensure_xavier(&format!("lang.gru.{dir}.u{gate}"), dh, dh, seed);
                    store.ensure_zeros1(&format!("lang.gru.{dir}.b{gate}"), dh);
                }
            }
        }
    }
}

fn gru_direction(
    g: &mut Graph,
    store: &ParamStore,
    dir: &str,
    embedded: VarId,
    order: &[usize],
    pad_mask: &[bool],
    dh: usize,
) -> Vec<VarId> {
    let wz = g.param(&format!("lang.gru.{dir}.wz"), store);
    let uz = g.param(&format!("lang.gru.{dir}.uz"), store);
    let bz = g.param(&format!("lang.gru.{dir}.bz"), store);
    let wr = g.param(&format!("lang.gru.{dir}.wr"), store);
    let ur = g.param(&format!("lang.gru.{dir}.ur"), store);
    let br = g.param(&format!("lang.gru.{dir}.br"), store);
    let wh = g.param(&format!("lang.gru.{dir}.wh"), store);
    let uh = g.param(&format!("lang.gru.{dir}.uh"), store);
    let bh = g.param(&format!("lang.gru.{dir}.bh"), store);

    let mut h = g.constant2(Array2::zeros((1, dh)));
    let mut outputs = vec![h; order.len()];
    for &t in order {
        let x_t = g.gather_rows(embedded, &[t]);
        let zx = g.matmul(x_t, wz);
        let zh = g.matmul(h, uz);
        let z0 = g.add(zx, zh);
        let z1 = g.add_bias(z0, bz);
        let z = g.sigmoid(z1);
        let rx = g.matmul(x_t, wr);
        let rh = g.matmul(h, ur);
        let r0 = g.add(rx, rh);
        let r1 = g.add_bias(r0, br);
        let r = g.sigmoid(r1);
        let hx = g.matmul(x_t, wh);
        let rh2 = g.mul(r, h);
        let hu = g.matmul(rh2, uh);
        let h0 = g.add(hx, hu);
        let h1 = g.add_bias(h0, bh);
        let hc = g.tanh(h1);
        let zi = g.one_minus(z);
        let keep = g.mul(zi, h);
        let upd = g.mul(z, hc);
        let h_new = g.add(keep, upd);
        // Padded steps carry the hidden state through unchanged so trailing
        // garbage never leaks into real positions.
        if !pad_mask[t] {
            h = h_new;
        }
        outputs[t] = h;
    }
    outputs
}

/// Encode padded token ids to (L, D) features. Padded rows are exactly zero.
pub fn encode_text(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LangConfig,
    ids: &[usize],
    pad_mask: &[bool],
    variant: EncoderVariant,
) -> Result<VarId> {
    let l = cfg.max_len;
    assert_eq!(ids.len(), l, "ids must be padded to max_len");
    assert_eq!(pad_mask.len(), l);
    if pad_mask.iter().all(|&m| m) {
        return Err(Error::Model("encode_text: no unpadded tokens".into()));
    }

    let embed = g.param("lang.embed", store);
    let pos = g.param("lang.pos", store);
    let tok = g.gather_rows(embed, ids);
    let x = g.add(tok, pos);

    let encoded = match variant {
        EncoderVariant::Transformer => {
            let mut h = x;
            for i in 0..cfg.n_layers {
                h = nn::attention_ffn_block(
                    g,
                    store,
                    &format!("lang.t{i}"),
                    h,
                    None,
                    cfg.n_heads,
                    None,
                    Some(pad_mask),
                )?;
            }
            h
        }
        EncoderVariant::Recurrent => {
            let dh = cfg.d_model / 2;
            let fwd_order: Vec<usize> = (0..l).collect();
            let bwd_order: Vec<usize> = (0..l).rev().collect();
            let fwd = gru_direction(g, store, "fwd", x, &fwd_order, pad_mask, dh);
            let bwd = gru_direction(g, store, "bwd", x, &bwd_order, pad_mask, dh);
            let mut rows = Vec::with_capacity(l);
            for t in 0..l {
                rows.push(g.concat_cols(&[fwd[t], bwd[t]]));
            }
            g.concat_rows(&rows)
        }
    };

    let normed = nn::layer_norm(g, store, "lang.final_ln", encoded);
    // Zero padded rows.
    let mut keep = Array2::<f64>::zeros((l, cfg.d_model));
    for (t, &is_pad) in pad_mask.iter().enumerate() {
        if !is_pad {
            keep.row_mut(t).fill(1.0);
        }
    }
    let keep = g.constant2(keep);
    Ok(g.mul(normed, keep))
}
