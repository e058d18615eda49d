//! Parameter storage, deterministic initialization, tensor serialization,
//! and the small layer builders shared by the language, vision, and fusion
//! branches.

use crate::error::{Error, Result};
use crate::tape::{Graph, VarId, MASK_NEG};
use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Named parameter tensors, ordered by name for deterministic iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

/// Stable per-tensor RNG stream: global seed mixed with an FNV-1a hash of
/// the tensor name, so initialization does not depend on creation order.
pub fn name_seed(global: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ global
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter not found: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter not found: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Xavier-uniform matrix, created once; repeat calls are no-ops.
    pub fn ensure_xavier(&mut self, name: &str, rows: usize, cols: usize, seed: u64) {
        if self.contains(name) {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut m = Array2::<f64>::zeros((rows, cols));
        for v in m.iter_mut() {
            *v = rng.random_range(-limit..limit);
        }
        self.insert(name, m.into_dyn());
    }

    pub fn ensure_zeros1(&mut self, name: &str, n: usize) {
        if !self.contains(name) {
            self.insert(name, Array1::<f64>::zeros(n).into_dyn());
        }
    }

    pub fn ensure_ones1(&mut self, name: &str, n: usize) {
        if !self.contains(name) {
            self.insert(name, Array1::<f64>::ones(n).into_dyn());
        }
    }

    pub fn ensure_zeros2(&mut self, name: &str, rows: usize, cols: usize) {
        if !self.contains(name) {
            self.insert(name, Array2::<f64>::zeros((rows, cols)).into_dyn());
        }
    }

    /// Linear layer parameters: `{name}.w` (in, out) and `{name}.b` (out).
    pub fn ensure_linear(&mut self, name: &str, d_in: usize, d_out: usize, seed: u64) {
        self.ensure_xavier(&format!("{name}.w"), d_in, d_out, seed);
        self.ensure_zeros1(&format!("{name}.b"), d_out);
    }

    /// Layer-norm parameters: `{name}.g` ones and `{name}.o` zeros.
    pub fn ensure_layer_norm(&mut self, name: &str, d: usize) {
        self.ensure_ones1(&format!("{name}.g"), d);
        self.ensure_zeros1(&format!("{name}.o"), d);
    }

    /// Attention block parameters: query/key/value/output projections.
    pub fn ensure_attention(&mut self, name: &str, d: usize, seed: u64) {
        for p in ["q", "k", "v", "o"] {
            self.ensure_linear(&format!("{name}.{p}"), d, d, seed);
        }
    }

    /// Two-layer feed-forward parameters with a given hidden width.
    pub fn ensure_ffn(&mut self, name: &str, d: usize, hidden: usize, seed: u64) {
        self.ensure_mlp2(name, d, hidden, d, seed);
    }

    /// Two-layer projection parameters with distinct in/hidden/out widths.
    pub fn ensure_mlp2(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize, seed: u64) {
        self.ensure_linear(&format!("{name}.l1"), d_in, hidden, seed);
        self.ensure_linear(&format!("{name}.l2"), hidden, d_out, seed);
    }

    const MAGIC: &'static [u8; 8] = b"GQ3DPARM";

    /// Binary serialization: little-endian f64 payload with a name/shape
    /// directory. Round-trips bit-exactly.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.map.len() as u32).to_le_bytes())?;
        for (name, v) in &self.map {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(v.ndim() as u32).to_le_bytes())?;
            for d in v.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for x in v.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Data("bad parameter file magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Data("bad parameter name".into()))?;
            r.read_exact(&mut b4)?;
            let ndim = u32::from_le_bytes(b4) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut b8)?;
                shape.push(u64::from_le_bytes(b8) as usize);
            }
            let n: usize = shape.iter().product();
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                vals.push(f64::from_le_bytes(b8));
            }
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), vals)
                .map_err(|e| Error::Data(format!("bad tensor shape: {e}")))?;
            map.insert(name, arr);
        }
        Ok(Self { map })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// x W + b for parameters named `{name}.w` / `{name}.b`.
pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: VarId) -> VarId {
    let w = g.param(&format!("{name}.w"), store);
    let b = g.param(&format!("{name}.b"), store);
    let h = g.matmul(x, w);
    g.add_bias(h, b)
}

/// Two-layer projection with SiLU in between.
pub fn mlp2(g: &mut Graph, store: &ParamStore, name: &str, x: VarId) -> VarId {
    let h = linear(g, store, &format!("{name}.l1"), x);
    let h = g.silu(h);
    linear(g, store, &format!("{name}.l2"), h)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: VarId) -> VarId {
    let gamma = g.param(&format!("{name}.g"), store);
    let beta = g.param(&format!("{name}.o"), store);
    g.layer_norm(x, gamma, beta)
}

/// Multi-head scaled dot-product attention.
///
/// `q_in` is (A, D), `kv_in` is (B, D). `bias` optionally supplies one (A, B)
/// pre-softmax additive bias per head. `key_mask[b] = true` hides key b from
/// every query row. Rows must keep at least one visible key.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    q_in: VarId,
    kv_in: VarId,
    n_heads: usize,
    bias: Option<&[VarId]>,
    key_mask: Option<&[bool]>,
) -> Result<VarId> {
    let d = g.shape(q_in)[1];
    assert_eq!(d % n_heads, 0, "model width must divide head count");
    let dh = d / n_heads;
    if let Some(bias) = bias {
        assert_eq!(bias.len(), n_heads, "one bias matrix per head");
    }

    let mask_const = if let Some(mask) = key_mask {
        if mask.iter().all(|&m| m) {
            return Err(Error::Model("attention: all keys masked".into()));
        }
        let a = g.shape(q_in)[0];
        let mut m = Array2::<f64>::zeros((a, mask.len()));
        for (j, &hidden) in mask.iter().enumerate() {
            if hidden {
                m.column_mut(j).fill(MASK_NEG);
            }
        }
        Some(g.constant2(m))
    } else {
        None
    };

    let q = linear(g, store, &format!("{name}.q"), q_in);
    let k = linear(g, store, &format!("{name}.k"), kv_in);
    let v = linear(g, store, &format!("{name}.v"), kv_in);

    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(bias) = bias {
            scores = g.add(scores, bias[h]);
        }
        if let Some(mc) = mask_const {
            scores = g.add(scores, mc);
        }
        let probs = g.softmax_rows(scores);
        head_outs.push(g.matmul(probs, vh));
    }
    let merged = g.concat_cols(&head_outs);
    Ok(linear(g, store, &format!("{name}.o"), merged))
}

/// Pre-norm residual attention sublayer followed by a pre-norm residual
/// feed-forward sublayer, the layer recipe used throughout the stack.
#[allow(clippy::too_many_arguments)]
pub fn attention_ffn_block(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: VarId,
    kv: Option<VarId>,
    n_heads: usize,
    bias: Option<&[VarId]>,
    key_mask: Option<&[bool]>,
) -> Result<VarId> {
    let xq = layer_norm(g, store, &format!("{name}.ln_q"), x);
    let kv_in = match kv {
        Some(other) => layer_norm(g, store, &format!("{name}.ln_kv"), other),
        None => xq,
    };
    let att = multi_head_attention(
        g,
        store,
        &format!("{name}.att"),
        xq,
        kv_in,
        n_heads,
        bias,
        key_mask,
    )?;
    let x = g.add(x, att);
    let xn = layer_norm(g, store, &format!("{name}.ln_f"), x);
    let ff = mlp2(g, store, &format!("{name}.ffn"), xn);
    Ok(g.add(x, ff))
}

/// Parameter registration matching [`attention_ffn_block`].
pub fn ensure_attention_ffn_block(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    ffn_mult: usize,
    cross: bool,
    seed: u64,
) {
    store.ensure_layer_norm(&format!("{name}.ln_q"), d);
    if cross {
        store.ensure_layer_norm(&format!("{name}.ln_kv"), d);
    }
    store.ensure_attention(&format!("{name}.att"), d, seed);
    store.ensure_layer_norm(&format!("{name}.ln_f"), d);
    store.ensure_ffn(&format!("{name}.ffn"), d, d * ffn_mult, seed);
}
