//! Vision branch: point feature extraction over local neighborhoods,
//! center voting, anchor-free proposal generation via six boundary
//! distances, and within-object token embedding from box corners plus
//! pooled in-box features.
//!
//! Discrete selections (farthest-point picks, kNN, radius grouping, in-box
//! membership) are captured in a [`VisionPlan`]. Training recomputes the
//! plan each forward; gradient checking reuses a frozen plan so finite
//! differences see the same structure as the analytic tape.

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::nn::{self, ParamStore};
use crate::synth::PointCloud;
use crate::tape::{Graph, VarId};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryActivation {
    Softplus,
    Exp,
}

impl std::str::FromStr for BoundaryActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(BoundaryActivation::Softplus),
            "exp" => Ok(BoundaryActivation::Exp),
            other => Err(Error::Config(format!("unknown boundary activation: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VisionConfig {
    pub k_features: usize,
    pub f_point: usize,
    pub f_seed: usize,
    pub p_seeds: usize,
    pub n_knn: usize,
    pub m_proposals: usize,
    pub cluster_radius: f64,
    pub n_classes: usize,
    pub d_model: usize,
    pub boundary_act: BoundaryActivation,
}

pub fn ensure_vision_params(store: &mut ParamStore, cfg: &VisionConfig, seed: u64) {
    store.ensure_mlp2("vision.point_mlp", cfg.k_features, cfg.f_point, cfg.f_point, seed);
    store.ensure_mlp2("vision.local", 3 + cfg.f_point, cfg.f_seed, cfg.f_seed, seed);
    store.ensure_linear("vision.vote.offset", cfg.f_seed, 3, seed);
    store.ensure_linear("vision.vote.feat", cfg.f_seed, cfg.f_seed, seed);
    store.ensure_mlp2("vision.prop.trunk", cfg.f_seed, cfg.f_seed, cfg.f_seed, seed);
    store.ensure_linear("vision.prop.boundary", cfg.f_seed, 6, seed);
    store.ensure_linear("vision.prop.obj", cfg.f_seed, 1, seed);
    store.ensure_linear("vision.prop.sem", cfg.f_seed, cfg.n_classes, seed);
    store.ensure_mlp2("vision.token", 24 + cfg.k_features, cfg.d_model, cfg.d_model, seed);
}

/// Deterministic farthest-point sampling: starts at index 0, then greedily
/// takes the point maximizing the distance to the chosen set (ties to the
/// lower index).
pub fn farthest_point_sample(coords: &Array2<f64>, k: usize) -> Vec<usize> {
    let n = coords.nrows();
    assert!(k <= n, "fps: k {k} > n {n}");
    let mut picked = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = 0usize;
    picked.push(current);
    for _ in 1..k {
        let cur = coords.row(current);
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let dx = coords[[i, 0]] - cur[0];
            let dy = coords[[i, 1]] - cur[1];
            let dz = coords[[i, 2]] - cur[2];
            let d = dx * dx + dy * dy + dz * dz;
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        picked.push(current);
    }
    picked
}

/// Indices of the k nearest points to `query` (self included), ordered by
/// (distance, index).
fn knn_indices(coords: &Array2<f64>, query: usize, k: usize) -> Vec<usize> {
    let q = [coords[[query, 0]], coords[[query, 1]], coords[[query, 2]]];
    let mut d: Vec<(f64, usize)> = (0..coords.nrows())
        .map(|i| {
            let dx = coords[[i, 0]] - q[0];
            let dy = coords[[i, 1]] - q[1];
            let dz = coords[[i, 2]] - q[2];
            (dx * dx + dy * dy + dz * dz, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Frozen selection structure of one vision forward.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionPlan {
    pub seed_idx: Vec<usize>,
    pub knn: Vec<Vec<usize>>,
    pub cluster_pick: Vec<usize>,
    pub cluster_members: Vec<Vec<usize>>,
    pub inside_points: Vec<Vec<usize>>,
}

/// Tape handles for everything downstream modules consume.
pub struct VisionOutputs {
    /// (P, 3) constant seed coordinates.
    pub seed_coords: VarId,
    /// (P, F) seed features.
    pub seed_feats: VarId,
    /// (P, 3) voted coordinates.
    pub votes: VarId,
    /// (P, F) vote features.
    pub vote_feats: VarId,
    /// (M, 3) cluster reference points (gathered votes).
    pub origins: VarId,
    /// (M, 6) nonnegative boundary distances.
    pub boundaries: VarId,
    /// (M, 1) objectness logits.
    pub objectness: VarId,
    /// (M, C) semantic logits.
    pub sem_logits: VarId,
    /// (M, 3) decoded box centers.
    pub centers: VarId,
    /// (M, 3) decoded box sizes.
    pub sizes: VarId,
    /// (M, 24) box corner coordinates, x-fastest corner order.
    pub corners: VarId,
    /// (M, D) object tokens.
    pub tokens: VarId,
}

fn column(g: &mut Graph, m: VarId, c: usize) -> VarId {
    g.slice_cols(m, c, 1)
}

/// Full vision forward. With `plan = None` all selections are derived from
/// the current values and returned; passing a plan reuses its structure.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &VisionConfig,
    cloud: &PointCloud,
    plan: Option<&VisionPlan>,
) -> Result<(VisionOutputs, VisionPlan)> {
    let n = cloud.n_points();
    if n < cfg.p_seeds {
        return Err(Error::Model(format!(
            "cloud has {n} points but {} seeds requested",
            cfg.p_seeds
        )));
    }
    if cloud.k_features() != cfg.k_features {
        return Err(Error::Model(format!(
            "cloud has K={} features, config expects {}",
            cloud.k_features(),
            cfg.k_features
        )));
    }
    let k_nn = cfg.n_knn.min(n);

    // Per-point features from the K input channels (translation invariant).
    let feats_const = g.constant2(cloud.features.clone());
    let point_feats = nn::mlp2(g, store, "vision.point_mlp", feats_const);

    let seed_idx = match plan {
        Some(p) => p.seed_idx.clone(),
        None => farthest_point_sample(&cloud.coords, cfg.p_seeds),
    };
    let knn: Vec<Vec<usize>> = match plan {
        Some(p) => p.knn.clone(),
        None => seed_idx.iter().map(|&s| knn_indices(&cloud.coords, s, k_nn)).collect(),
    };

    // Neighborhood encoding: [neighbor - seed offset, neighbor features]
    // through a shared projection, max-pooled per seed.
    let mut flat: Vec<usize> = Vec::with_capacity(cfg.p_seeds * k_nn);
    let mut rel = Array2::<f64>::zeros((cfg.p_seeds * k_nn, 3));
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(cfg.p_seeds);
    for (si, (&s, nbrs)) in seed_idx.iter().zip(&knn).enumerate() {
        let mut grp = Vec::with_capacity(k_nn);
        for &nb in nbrs {
            let r = flat.len();
            for c in 0..3 {
                rel[[r, c]] = cloud.coords[[nb, c]] - cloud.coords[[s, c]];
            }
            grp.push(r);
            flat.push(nb);
        }
        debug_assert_eq!(grp.len(), k_nn, "seed {si} has short neighborhood");
        groups.push(grp);
    }
    let nbr_feats = g.gather_rows(point_feats, &flat);
    let rel_const = g.constant2(rel);
    let local_in = g.concat_cols(&[rel_const, nbr_feats]);
    let local = nn::mlp2(g, store, "vision.local", local_in);
    let seed_feats = g.max_pool_groups(local, &groups);

    let mut seed_xyz = Array2::<f64>::zeros((cfg.p_seeds, 3));
    for (r, &s) in seed_idx.iter().enumerate() {
        for c in 0..3 {
            seed_xyz[[r, c]] = cloud.coords[[s, c]];
        }
    }
    let seed_coords = g.constant2(seed_xyz);

    // Voting: one vote per seed, coordinate = seed + predicted offset.
    let offset = nn::linear(g, store, "vision.vote.offset", seed_feats);
    let votes = g.add(seed_coords, offset);
    let vf = nn::linear(g, store, "vision.vote.feat", seed_feats);
    let vote_feats = g.silu(vf);

    // Cluster votes: farthest-point pick M centers, average features of
    // votes within the cluster radius of each pick.
    let votes_val = g
        .value(votes)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let cluster_pick = match plan {
        Some(p) => p.cluster_pick.clone(),
        None => farthest_point_sample(&votes_val, cfg.m_proposals.min(cfg.p_seeds)),
    };
    let cluster_members: Vec<Vec<usize>> = match plan {
        Some(p) => p.cluster_members.clone(),
        None => {
            let r2 = cfg.cluster_radius * cfg.cluster_radius;
            cluster_pick
                .iter()
                .map(|&c| {
                    (0..votes_val.nrows())
                        .filter(|&i| {
                            let dx = votes_val[[i, 0]] - votes_val[[c, 0]];
                            let dy = votes_val[[i, 1]] - votes_val[[c, 1]];
                            let dz = votes_val[[i, 2]] - votes_val[[c, 2]];
                            dx * dx + dy * dy + dz * dz <= r2
                        })
                        .collect()
                })
                .collect()
        }
    };

    let origins = g.gather_rows(votes, &cluster_pick);
    let cluster_feats = g.mean_pool_groups(vote_feats, &cluster_members);

    // Anchor-free heads: six positive boundary distances, objectness,
    // semantic logits.
    let trunk = nn::mlp2(g, store, "vision.prop.trunk", cluster_feats);
    let traw = g.silu(trunk);
    let braw = nn::linear(g, store, "vision.prop.boundary", traw);
    let boundaries = match cfg.boundary_act {
        BoundaryActivation::Softplus => g.softplus(braw),
        BoundaryActivation::Exp => g.exp(braw),
    };
    let objectness = nn::linear(g, store, "vision.prop.obj", traw);
    let sem_logits = nn::linear(g, store, "vision.prop.sem", traw);

    // Decode: center = origin + (d_max - d_min)/2, size = d_min + d_max.
    let mut center_cols = Vec::with_capacity(3);
    let mut size_cols = Vec::with_capacity(3);
    for ax in 0..3 {
        let dmin = column(g, boundaries, 2 * ax);
        let dmax = column(g, boundaries, 2 * ax + 1);
        let o = column(g, origins, ax);
        let diff = g.sub(dmax, dmin);
        let half = g.scale(diff, 0.5);
        center_cols.push(g.add(o, half));
        size_cols.push(g.add(dmin, dmax));
    }
    let centers = g.concat_cols(&center_cols);
    let sizes = g.concat_cols(&size_cols);

    // Corners in the fixed x-fastest order (bit 0 -> x max, bit 1 -> y max,
    // bit 2 -> z max), matching geometry::corners.
    let mut lo = Vec::with_capacity(3);
    let mut hi = Vec::with_capacity(3);
    for ax in 0..3 {
        let half = g.scale(size_cols[ax], 0.5);
        lo.push(g.sub(center_cols[ax], half));
        hi.push(g.add(center_cols[ax], half));
    }
    let mut corner_cols = Vec::with_capacity(24);
    for i in 0..8 {
        for (ax, bit) in [(0usize, 1usize), (1, 2), (2, 4)] {
            corner_cols.push(if i & bit == 0 { lo[ax] } else { hi[ax] });
        }
    }
    let corners = g.concat_cols(&corner_cols);

    // In-box pooling over the raw cloud features (zero vector when empty).
    let inside_points: Vec<Vec<usize>> = match plan {
        Some(p) => p.inside_points.clone(),
        None => {
            let cv = g.value(centers).clone();
            let sv = g.value(sizes).clone();
            (0..cluster_pick.len())
                .map(|m| {
                    let cx = cv[[m, 0]];
                    let cy = cv[[m, 1]];
                    let cz = cv[[m, 2]];
                    let hx = sv[[m, 0]] / 2.0;
                    let hy = sv[[m, 1]] / 2.0;
                    let hz = sv[[m, 2]] / 2.0;
                    (0..n)
                        .filter(|&i| {
                            (cloud.coords[[i, 0]] - cx).abs() <= hx
                                && (cloud.coords[[i, 1]] - cy).abs() <= hy
                                && (cloud.coords[[i, 2]] - cz).abs() <= hz
                        })
                        .collect()
                })
                .collect()
        }
    };
    let pooled = g.mean_pool_groups(feats_const, &inside_points);
    let token_in = g.concat_cols(&[corners, pooled]);
    let tokens = nn::mlp2(g, store, "vision.token", token_in);

    let plan_out = VisionPlan { seed_idx, knn, cluster_pick, cluster_members, inside_points };
    Ok((
        VisionOutputs {
            seed_coords,
            seed_feats,
            votes,
            vote_feats,
            origins,
            boundaries,
            objectness,
            sem_logits,
            centers,
            sizes,
            corners,
            tokens,
        },
        plan_out,
    ))
}

/// A decoded proposal snapshot for evaluation and dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: Aabb,
    pub objectness: f64,
    pub class_id: usize,
}

/// Materialize decoded boxes with objectness and argmax class.
pub fn extract_proposals(g: &Graph, out: &VisionOutputs) -> Result<Vec<Proposal>> {
    let centers = g.value(out.centers);
    let sizes = g.value(out.sizes);
    let objectness = g.value(out.objectness);
    let sem = g.value(out.sem_logits);
    let m = centers.shape()[0];
    let c_classes = sem.shape()[1];
    let mut props = Vec::with_capacity(m);
    for i in 0..m {
        let bbox = Aabb::new(
            Vec3::new(centers[[i, 0]], centers[[i, 1]], centers[[i, 2]]),
            Vec3::new(sizes[[i, 0]], sizes[[i, 1]], sizes[[i, 2]]),
        )?;
        let mut best = 0usize;
        for c in 1..c_classes {
            if sem[[i, c]] > sem[[i, best]] {
                best = c;
            }
        }
        props.push(Proposal { bbox, objectness: objectness[[i, 0]], class_id: best });
    }
    Ok(props)
}

pub fn save_proposal_dump(props: &[Proposal], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in props {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
