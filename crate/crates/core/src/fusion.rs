//! Token encoding and fusion: word self-attention, object self-attention
//! with an additive pairwise-offset bias (the enhanced variant), and
//! interlaced cross-attention in both directions, repeated k rounds.

use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::tape::{Graph, VarId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaVariant {
    Enhanced,
    Standard,
}

impl std::str::FromStr for SaVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enhanced" => Ok(SaVariant::Enhanced),
            "standard" => Ok(SaVariant::Standard),
            other => Err(Error::Config(format!("unknown self-attention variant: {other}"))),
        }
    }
}

impl std::fmt::Display for SaVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SaVariant::Enhanced => write!(f, "enhanced"),
            SaVariant::Standard => write!(f, "standard"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub k_rounds: usize,
    pub ffn_mult: usize,
    pub bias_hidden: usize,
    /// One bias projection shared by all rounds instead of one per round.
    pub share_bias_proj: bool,
    pub variant: SaVariant,
}

fn bias_prefix(cfg: &FusionConfig, round: usize) -> String {
    if cfg.share_bias_proj {
        "fusion.bias".to_string()
    } else {
        format!("fusion.r{round}.bias")
    }
}

pub fn ensure_fusion_params(store: &mut ParamStore, cfg: &FusionConfig, seed: u64) {
    for r in 0..cfg.k_rounds {
        nn::ensure_attention_ffn_block(
            store,
            &format!("fusion.r{r}.word_sa"),
            cfg.d_model,
            cfg.ffn_mult,
            false,
            seed,
        );
        nn::ensure_attention_ffn_block(
            store,
            &format!("fusion.r{r}.obj_sa"),
            cfg.d_model,
            cfg.ffn_mult,
            false,
            seed,
        );
        nn::ensure_attention_ffn_block(
            store,
            &format!("fusion.r{r}.word_ca"),
            cfg.d_model,
            cfg.ffn_mult,
            true,
            seed,
        );
        nn::ensure_attention_ffn_block(
            store,
            &format!("fusion.r{r}.obj_ca"),
            cfg.d_model,
            cfg.ffn_mult,
            true,
            seed,
        );
        // The bias projection exists in both variants so an enhanced
        // checkpoint stays loadable; the standard variant just never calls it.
        store.ensure_mlp2(&bias_prefix(cfg, r), 3, cfg.bias_hidden, cfg.n_heads, seed);
    }
    store.ensure_layer_norm("fusion.word_final", cfg.d_model);
    store.ensure_layer_norm("fusion.obj_final", cfg.d_model);
}

/// Per-head (M, M) additive attention bias from pairwise center offsets
/// through a shared two-layer projection. Offsets are differences, so any
/// rigid translation of the centers leaves the bias unchanged.
pub fn distance_bias(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    centers: VarId,
    n_heads: usize,
) -> Vec<VarId> {
    let m = g.shape(centers)[0];
    let mut rep_i = Vec::with_capacity(m * m);
    let mut tile_j = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            rep_i.push(i);
            tile_j.push(j);
        }
    }
    let from = g.gather_rows(centers, &tile_j);
    let to = g.gather_rows(centers, &rep_i);
    let offsets = g.sub(from, to);
    let proj = nn::mlp2(g, store, prefix, offsets);
    (0..n_heads)
        .map(|h| {
            let col = g.slice_cols(proj, h, 1);
            g.reshape(col, &[m, m])
        })
        .collect()
}

/// One fusion pass: per round, word self-attention, object self-attention
/// (with the distance bias in the enhanced variant), then word<-object and
/// object<-word cross-attention. Outputs keep the input shapes.
pub fn fusion_stack(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FusionConfig,
    words: VarId,
    objects: VarId,
    centers: VarId,
    word_pad_mask: &[bool],
) -> Result<(VarId, VarId)> {
    let mut words = words;
    let mut objects = objects;
    for r in 0..cfg.k_rounds {
        words = nn::attention_ffn_block(
            g,
            store,
            &format!("fusion.r{r}.word_sa"),
            words,
            None,
            cfg.n_heads,
            None,
            Some(word_pad_mask),
        )?;
        let bias = match cfg.variant {
            SaVariant::Enhanced => {
                Some(distance_bias(g, store, &bias_prefix(cfg, r), centers, cfg.n_heads))
            }
            SaVariant::Standard => None,
        };
        objects = nn::attention_ffn_block(
            g,
            store,
            &format!("fusion.r{r}.obj_sa"),
            objects,
            None,
            cfg.n_heads,
            bias.as_deref(),
            None,
        )?;
        words = nn::attention_ffn_block(
            g,
            store,
            &format!("fusion.r{r}.word_ca"),
            words,
            Some(objects),
            cfg.n_heads,
            None,
            None,
        )?;
        objects = nn::attention_ffn_block(
            g,
            store,
            &format!("fusion.r{r}.obj_ca"),
            objects,
            Some(words),
            cfg.n_heads,
            None,
            Some(word_pad_mask),
        )?;
    }
    let words = nn::layer_norm(g, store, "fusion.word_final", words);
    let objects = nn::layer_norm(g, store, "fusion.obj_final", objects);
    Ok((words, objects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: SaVariant) -> FusionConfig {
        FusionConfig {
            d_model: 8,
            n_heads: 2,
            k_rounds: 2,
            ffn_mult: 2,
            bias_hidden: 4,
            share_bias_proj: false,
            variant,
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        let mut m = Array2::zeros((r, c));
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    /// Dyadic-grid centers keep translation arithmetic exact.
    fn dyadic_centers(rng: &mut ChaCha8Rng, m: usize) -> Array2<f64> {
        let mut c = Array2::zeros((m, 3));
        for v in c.iter_mut() {
            *v = rng.random_range(-8192i32..8192) as f64 / 1024.0;
        }
        c
    }

    fn run_stack(
        store: &ParamStore,
        fc: &FusionConfig,
        words: &Array2<f64>,
        objects: &Array2<f64>,
        centers: &Array2<f64>,
        mask: &[bool],
    ) -> (ndarray::ArrayD<f64>, ndarray::ArrayD<f64>) {
        let mut g = Graph::new();
        let w = g.constant2(words.clone());
        let o = g.constant2(objects.clone());
        let c = g.constant2(centers.clone());
        let (fw, fo) = fusion_stack(&mut g, store, fc, w, o, c, mask).unwrap();
        (g.value(fw).clone(), g.value(fo).clone())
    }

    #[test]
    fn shapes_and_determinism() {
        let fc = cfg(SaVariant::Enhanced);
        let mut store = ParamStore::new();
        ensure_fusion_params(&mut store, &fc, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let words = rand_mat(&mut rng, 6, fc.d_model);
        let objects = rand_mat(&mut rng, 4, fc.d_model);
        let centers = dyadic_centers(&mut rng, 4);
        let mask = vec![false, false, false, false, true, true];
        let (w1, o1) = run_stack(&store, &fc, &words, &objects, &centers, &mask);
        assert_eq!(w1.shape(), &[6, fc.d_model]);
        assert_eq!(o1.shape(), &[4, fc.d_model]);
        let (w2, o2) = run_stack(&store, &fc, &words, &objects, &centers, &mask);
        assert_eq!(w1, w2);
        assert_eq!(o1, o2);
    }

    #[test]
    fn zero_bias_projection_reduces_to_standard_bitwise() {
        let fc_e = cfg(SaVariant::Enhanced);
        let fc_s = cfg(SaVariant::Standard);
        let mut store = ParamStore::new();
        ensure_fusion_params(&mut store, &fc_e, 3);
        // Zero the last bias-projection layer: the projected bias is exactly 0.
        for r in 0..fc_e.k_rounds {
            let w = store.get(&format!("fusion.r{r}.bias.l2.w")).clone();
            store.insert(&format!("fusion.r{r}.bias.l2.w"), w.mapv(|_| 0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let words = rand_mat(&mut rng, 5, fc_e.d_model);
            let objects = rand_mat(&mut rng, 3, fc_e.d_model);
            let centers = dyadic_centers(&mut rng, 3);
            let mask = vec![false, false, false, true, true];
            let (we, oe) = run_stack(&store, &fc_e, &words, &objects, &centers, &mask);
            let (ws, os) = run_stack(&store, &fc_s, &words, &objects, &centers, &mask);
            assert_eq!(we, ws, "trial {trial}");
            assert_eq!(oe, os, "trial {trial}");
        }
    }

    #[test]
    fn distance_bias_is_translation_invariant() {
        let fc = cfg(SaVariant::Enhanced);
        let mut store = ParamStore::new();
        ensure_fusion_params(&mut store, &fc, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = dyadic_centers(&mut rng, 5);
        let base = {
            let mut g = Graph::new();
            let c = g.constant2(centers.clone());
            let b = distance_bias(&mut g, &store, "fusion.r0.bias", c, fc.n_heads);
            b.iter().map(|&h| g.value(h).clone()).collect::<Vec<_>>()
        };
        for _ in 0..20 {
            let t = [
                rng.random_range(-8192i32..8192) as f64 / 1024.0,
                rng.random_range(-8192i32..8192) as f64 / 1024.0,
                rng.random_range(-8192i32..8192) as f64 / 1024.0,
            ];
            let mut moved = centers.clone();
            for mut row in moved.rows_mut() {
                for c in 0..3 {
                    row[c] += t[c];
                }
            }
            let mut g = Graph::new();
            let c = g.constant2(moved);
            let b = distance_bias(&mut g, &store, "fusion.r0.bias", c, fc.n_heads);
            for (h, &hb) in b.iter().enumerate() {
                assert_eq!(g.value(hb), &base[h], "head {h} changed under translation");
            }
        }
    }

    #[test]
    fn single_center_bias_is_projection_of_zero() {
        let fc = cfg(SaVariant::Enhanced);
        let mut store = ParamStore::new();
        ensure_fusion_params(&mut store, &fc, 4);
        let mut g = Graph::new();
        let c = g.constant2(Array2::zeros((1, 3)));
        let b = distance_bias(&mut g, &store, "fusion.r0.bias", c, fc.n_heads);
        let mut g2 = Graph::new();
        let zero = g2.constant2(Array2::zeros((1, 3)));
        let proj = nn::mlp2(&mut g2, &store, "fusion.r0.bias", zero);
        for (h, &hb) in b.iter().enumerate() {
            assert_eq!(g.shape(hb), &[1, 1]);
            assert_eq!(g.value(hb)[[0, 0]], g2.value(proj)[[0, h]]);
        }
    }

    #[test]
    fn bias_finite_on_random_centers() {
        let fc = cfg(SaVariant::Enhanced);
        let mut store = ParamStore::new();
        ensure_fusion_params(&mut store, &fc, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut centers = Array2::zeros((6, 3));
        for v in centers.iter_mut() {
            *v = rng.random_range(-10.0..10.0);
        }
        let mut g = Graph::new();
        let c = g.constant2(centers);
        let b = distance_bias(&mut g, &store, "fusion.r1.bias", c, fc.n_heads);
        for &hb in &b {
            assert!(g.value(hb).iter().all(|v| v.is_finite()));
        }
    }

    /// Every fusion parameter receives a nonzero gradient from a generic
    /// loss over both outputs: no dead branches.
    #[test]
    fn all_parameters_receive_gradient() {
        let fc = cfg(SaVariant::Enhanced);
        let mut store = ParamStore::new();
        ensure_fusion_params(&mut store, &fc, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let words = rand_mat(&mut rng, 5, fc.d_model);
        let objects = rand_mat(&mut rng, 4, fc.d_model);
        let centers = dyadic_centers(&mut rng, 4);
        let mask = vec![false, false, false, false, true];

        let mut g = Graph::new();
        let w = g.constant2(words);
        let o = g.constant2(objects);
        let c = g.constant2(centers);
        let (fw, fo) = fusion_stack(&mut g, &store, &fc, w, o, c, &mask).unwrap();
        // Squared sums so gradients do not cancel by symmetry.
        let fw2 = g.mul(fw, fw);
        let fo2 = g.mul(fo, fo);
        let sw = g.sum_all(fw2);
        let so = g.sum_all(fo2);
        let loss = g.add(sw, so);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        for name in store.names() {
            let gr = pg.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(
                gr.iter().any(|v| *v != 0.0),
                "parameter {name} has all-zero gradient"
            );
        }
    }

    /// Central-difference spot check through the full stack, including the
    /// bias projection.
    #[test]
    fn fusion_gradients_match_finite_differences() {
        let fc = FusionConfig { k_rounds: 1, ..cfg(SaVariant::Enhanced) };
        let mut store = ParamStore::new();
        ensure_fusion_params(&mut store, &fc, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let words = rand_mat(&mut rng, 4, fc.d_model);
        let objects = rand_mat(&mut rng, 3, fc.d_model);
        let centers = dyadic_centers(&mut rng, 3);
        let mask = vec![false, false, false, true];

        let loss = |s: &ParamStore| {
            let mut g = Graph::new();
            let w = g.constant2(words.clone());
            let o = g.constant2(objects.clone());
            let c = g.constant2(centers.clone());
            let (fw, fo) = fusion_stack(&mut g, s, &fc, w, o, c, &mask).unwrap();
            let fw2 = g.mul(fw, fw);
            let fo2 = g.mul(fo, fo);
            let sw = g.sum_all(fw2);
            let so = g.sum_all(fo2);
            let out = g.add(sw, so);
            g.scalar(out)
        };

        let mut g = Graph::new();
        let w = g.constant2(words.clone());
        let o = g.constant2(objects.clone());
        let c = g.constant2(centers.clone());
        let (fw, fo) = fusion_stack(&mut g, &store, &fc, w, o, c, &mask).unwrap();
        let fw2 = g.mul(fw, fw);
        let fo2 = g.mul(fo, fo);
        let sw = g.sum_all(fw2);
        let so = g.sum_all(fo2);
        let out = g.add(sw, so);
        let grads = g.backward(out);
        let pg = g.param_grads(&grads);

        let h = 1e-5;
        for name in [
            "fusion.r0.bias.l1.w",
            "fusion.r0.bias.l2.w",
            "fusion.r0.obj_sa.att.q.w",
            "fusion.r0.word_ca.att.v.w",
            "fusion.r0.obj_ca.ffn.l1.w",
        ] {
            let analytic = &pg[name];
            let nvals = store.get(name).len();
            for k in (0..nvals).step_by(nvals / 6 + 1) {
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
