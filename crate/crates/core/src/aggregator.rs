//! Per-branch Q-Former, projection into the text space, and the learned
//! temporal table.
//!
//! Parameters of branch `b` live under `branch.{b}.qformer.*`,
//! `branch.{b}.proj.*` and `branch.{b}.temporal`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::StreamId;
use crate::encoders::FrameFeatures;
use crate::nn;
use crate::params::{init_layer_norm, init_linear, normal_mat, ParamStore};
use crate::snapshot::{self, SnapshotError};
use crate::tensor::{Graph, Mat, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_v: usize,
    pub d_text: usize,
    pub seed: u64,
    pub proj_layers: usize,
    pub t_max: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            depth: 2,
            heads: 4,
            d_v: 32,
            d_text: 64,
            seed: 0,
            proj_layers: 1,
            t_max: 16,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<(), AggregatorError> {
        let positive = [
            self.num_queries,
            self.depth,
            self.heads,
            self.d_v,
            self.d_text,
            self.proj_layers,
            self.t_max,
        ];
        if positive.contains(&0) {
            return Err(AggregatorError::Config(
                "all Q-Former sizes must be positive".into(),
            ));
        }
        if self.d_v % self.heads != 0 {
            return Err(AggregatorError::Config(format!(
                "d_v {} is not divisible by {} heads",
                self.d_v, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AggregatorError {
    #[error("aggregator configuration error: {0}")]
    Config(String),
    #[error("{frames} frames exceed temporal capacity {capacity}")]
    Capacity { frames: usize, capacity: usize },
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

/// `Q × d_text` output of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbedding {
    pub values: Mat,
    pub branch: StreamId,
}

pub fn branch_prefix(branch: StreamId) -> String {
    format!("branch.{}", branch.as_str())
}

pub fn temporal_name(branch: StreamId) -> String {
    format!("{}.temporal", branch_prefix(branch))
}

/// Registers the Q-Former, projection and temporal table of `branch`. The
/// stream of random numbers depends on `cfg.seed` and the branch only.
pub fn init_branch(
    store: &mut ParamStore,
    cfg: &QFormerConfig,
    branch: StreamId,
) -> Result<(), AggregatorError> {
    cfg.validate()?;
    let salt = StreamId::ALL.iter().position(|&b| b == branch).unwrap() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt));
    let root = branch_prefix(branch);
    let q = format!("{root}.qformer");
    let d = cfg.d_v;
    let std = (1.0 / d as f64).sqrt();
    store.insert(
        format!("{q}.queries"),
        normal_mat(&mut rng, cfg.num_queries, d, 1.0),
    );
    for l in 0..cfg.depth {
        let b = format!("{q}.block{l}");
        init_layer_norm(store, &format!("{b}.ln_q"), d);
        init_layer_norm(store, &format!("{b}.ln_kv"), d);
        nn::init_attention(store, &mut rng, &format!("{b}.xattn"), d, std);
        init_layer_norm(store, &format!("{b}.ln2"), d);
        nn::init_mlp(store, &mut rng, &format!("{b}.mlp"), d, 2 * d, std);
    }
    init_layer_norm(store, &format!("{q}.ln_f"), d);
    let mut d_in = d;
    for l in 0..cfg.proj_layers {
        init_linear(
            store,
            &mut rng,
            &format!("{root}.proj.l{l}"),
            d_in,
            cfg.d_text,
            (1.0 / d_in as f64).sqrt(),
        );
        d_in = cfg.d_text;
    }
    store.insert(
        temporal_name(branch),
        normal_mat(&mut rng, cfg.t_max, d, 0.1),
    );
    Ok(())
}

/// Learnable queries cross-attending over `kv` (`N × d_v`); returns `Q × d_v`.
pub fn aggregate_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &QFormerConfig,
    branch: StreamId,
    kv: NodeId,
) -> NodeId {
    let q = format!("{}.qformer", branch_prefix(branch));
    let mut x = g.param(store, &format!("{q}.queries"));
    for l in 0..cfg.depth {
        let b = format!("{q}.block{l}");
        let h = nn::layer_norm(g, store, &format!("{b}.ln_q"), x);
        let m = nn::layer_norm(g, store, &format!("{b}.ln_kv"), kv);
        let a = nn::attention(g, store, &format!("{b}.xattn"), h, m, cfg.heads, false);
        x = g.add(x, a);
        let h = nn::layer_norm(g, store, &format!("{b}.ln2"), x);
        let f = nn::mlp(g, store, &format!("{b}.mlp"), h);
        x = g.add(x, f);
    }
    nn::layer_norm(g, store, &format!("{q}.ln_f"), x)
}

/// Affine stack mapping `Q × d_v` to `Q × d_text` (GELU between layers).
pub fn project_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &QFormerConfig,
    branch: StreamId,
    x: NodeId,
) -> NodeId {
    let root = branch_prefix(branch);
    let mut x = x;
    for l in 0..cfg.proj_layers {
        if l > 0 {
            x = g.gelu(x);
        }
        x = nn::linear(g, store, &format!("{root}.proj.l{l}"), x);
    }
    x
}

/// Flattened `(T·P) × d_v` tokens with the branch's temporal rows added.
pub fn temporal_tokens_graph(
    g: &mut Graph,
    store: &ParamStore,
    branch: StreamId,
    f: &FrameFeatures,
) -> Result<NodeId, AggregatorError> {
    let name = temporal_name(branch);
    let capacity = store.get(&name).map_or(0, Mat::rows);
    if f.frames() > capacity {
        return Err(AggregatorError::Capacity {
            frames: f.frames(),
            capacity,
        });
    }
    let ids: Vec<usize> = (0..f.frames())
        .flat_map(|t| std::iter::repeat_n(t, f.patches()))
        .collect();
    let table = g.param(store, &name);
    let rows = g.gather(table, &ids);
    let feats = g.constant(f.flatten());
    Ok(g.add(feats, rows))
}

/// Full branch: temporal embedding, Q-Former, projection.
pub fn branch_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &QFormerConfig,
    branch: StreamId,
    f: &FrameFeatures,
) -> Result<NodeId, AggregatorError> {
    check_width(f, cfg)?;
    let kv = temporal_tokens_graph(g, store, branch, f)?;
    let q = aggregate_graph(g, store, cfg, branch, kv);
    Ok(project_graph(g, store, cfg, branch, q))
}

fn check_width(f: &FrameFeatures, cfg: &QFormerConfig) -> Result<(), AggregatorError> {
    if f.frames() == 0 {
        return Err(AggregatorError::Config("no frames to aggregate".into()));
    }
    if f.width() != cfg.d_v {
        return Err(AggregatorError::Config(format!(
            "feature width {} does not match Q-Former d_v {}",
            f.width(),
            cfg.d_v
        )));
    }
    Ok(())
}

/// Q-Former over already time-embedded features; `Q × d_v`.
pub fn aggregate(
    f: &FrameFeatures,
    cfg: &QFormerConfig,
    store: &ParamStore,
    branch: StreamId,
) -> Result<Mat, AggregatorError> {
    check_width(f, cfg)?;
    let mut g = Graph::inference();
    let kv = g.constant(f.flatten());
    let out = aggregate_graph(&mut g, store, cfg, branch, kv);
    Ok(g.value(out).clone())
}

pub fn project(
    q_out: &Mat,
    cfg: &QFormerConfig,
    store: &ParamStore,
    branch: StreamId,
) -> VideoEmbedding {
    let mut g = Graph::inference();
    let x = g.constant(q_out.clone());
    let out = project_graph(&mut g, store, cfg, branch, x);
    VideoEmbedding {
        values: g.value(out).clone(),
        branch,
    }
}

/// Inference-mode full branch output.
pub fn embed_branch(
    f: &FrameFeatures,
    cfg: &QFormerConfig,
    store: &ParamStore,
    branch: StreamId,
) -> Result<VideoEmbedding, AggregatorError> {
    let mut g = Graph::inference();
    let out = branch_graph(&mut g, store, cfg, branch, f)?;
    Ok(VideoEmbedding {
        values: g.value(out).clone(),
        branch,
    })
}

/// Writes every `branch.{b}.*` array plus the config echo.
pub fn save_branch(
    path: &Path,
    store: &ParamStore,
    cfg: &QFormerConfig,
    branch: StreamId,
) -> Result<(), AggregatorError> {
    let prefix = format!("{}.", branch_prefix(branch));
    let mut sub = ParamStore::default();
    for (n, m) in store.iter().filter(|(n, _)| n.starts_with(&prefix)) {
        sub.insert(n, m.clone());
    }
    let meta = serde_json::json!({ "config": cfg, "branch": branch.as_str() });
    Ok(snapshot::save(path, &meta, &sub)?)
}

/// Overwrites the `branch.{b}.*` arrays of `store` from a branch snapshot.
pub fn load_branch(
    path: &Path,
    store: &mut ParamStore,
    branch: StreamId,
) -> Result<(), AggregatorError> {
    let (_, sub) = snapshot::load(path)?;
    let prefix = format!("{}.", branch_prefix(branch));
    snapshot::check_no_extra(store, &sub, |n| n.starts_with(&prefix))?;
    Ok(snapshot::restore_into(store, &sub, |n| {
        n.starts_with(&prefix)
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn small_cfg() -> QFormerConfig {
        QFormerConfig {
            num_queries: 3,
            depth: 1,
            heads: 2,
            d_v: 8,
            d_text: 6,
            seed: 5,
            proj_layers: 1,
            t_max: 64,
        }
    }

    fn features(rng: &mut ChaCha8Rng, t: usize, p: usize, d: usize) -> FrameFeatures {
        FrameFeatures {
            values: (0..t).map(|_| normal_mat(rng, p, d, 1.0)).collect(),
            kind: EncoderKind::Person,
        }
    }

    fn store_for(cfg: &QFormerConfig) -> ParamStore {
        let mut s = ParamStore::default();
        init_branch(&mut s, cfg, StreamId::P1).unwrap();
        s
    }

    fn perturb_all(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            for v in store.get_mut(&n).unwrap().data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    fn ln_rows(x: &[Vec<f64>], g: &Mat, b: &Mat) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g.get(0, j) + b.get(0, j))
                    .collect()
            })
            .collect()
    }

    fn affine(x: &[Vec<f64>], w: &Mat, b: &Mat) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                (0..w.cols())
                    .map(|j| {
                        b.get(0, j)
                            + r.iter()
                                .enumerate()
                                .map(|(i, v)| v * w.get(i, j))
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    // Dense-math depth-1 Q-Former, written against weight names only.
    fn reference(store: &ParamStore, cfg: &QFormerConfig, kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let p = |n: &str| store.get(&format!("branch.p1.qformer.{n}")).unwrap();
        let rows = |m: &Mat| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
        let x0 = rows(p("queries"));
        let hq = ln_rows(&x0, p("block0.ln_q.gamma"), p("block0.ln_q.beta"));
        let hk = ln_rows(kv, p("block0.ln_kv.gamma"), p("block0.ln_kv.beta"));
        let q = affine(&hq, p("block0.xattn.q.weight"), p("block0.xattn.q.bias"));
        let k = affine(&hk, p("block0.xattn.k.weight"), p("block0.xattn.k.bias"));
        let v = affine(&hk, p("block0.xattn.v.weight"), p("block0.xattn.v.bias"));
        let hd = cfg.d_v / cfg.heads;
        let mut merged = vec![vec![0.0; cfg.d_v]; x0.len()];
        for h in 0..cfg.heads {
            for i in 0..x0.len() {
                let s: Vec<f64> = (0..kv.len())
                    .map(|j| {
                        (h * hd..(h + 1) * hd)
                            .map(|c| q[i][c] * k[j][c])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for c in h * hd..(h + 1) * hd {
                    merged[i][c] = (0..kv.len()).map(|j| (s[j] - mx).exp() / z * v[j][c]).sum();
                }
            }
        }
        let a = affine(
            &merged,
            p("block0.xattn.o.weight"),
            p("block0.xattn.o.bias"),
        );
        let x1: Vec<Vec<f64>> = x0
            .iter()
            .zip(&a)
            .map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect())
            .collect();
        let h2 = ln_rows(&x1, p("block0.ln2.gamma"), p("block0.ln2.beta"));
        let f1 = affine(&h2, p("block0.mlp.fc1.weight"), p("block0.mlp.fc1.bias"));
        let f1: Vec<Vec<f64>> = f1
            .iter()
            .map(|r| r.iter().map(|&u| crate::tensor::gelu(u)).collect())
            .collect();
        let f2 = affine(&f1, p("block0.mlp.fc2.weight"), p("block0.mlp.fc2.bias"));
        let x2: Vec<Vec<f64>> = x1
            .iter()
            .zip(&f2)
            .map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect())
            .collect();
        ln_rows(&x2, p("ln_f.gamma"), p("ln_f.beta"))
    }

    #[test]
    fn matches_dense_reference() {
        let cfg = small_cfg();
        let mut store = store_for(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        perturb_all(&mut store, &mut rng);
        let f = features(&mut rng, 2, 4, 8);
        let got = aggregate(&f, &cfg, &store, StreamId::P1).unwrap();
        let flat = f.flatten();
        let kv: Vec<Vec<f64>> = (0..flat.rows()).map(|i| flat.row(i).to_vec()).collect();
        let want = reference(&store, &cfg, &kv);
        for (i, r) in want.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                let g = got.get(i, j);
                assert!(
                    (g - v).abs() <= 1e-5 * v.abs().max(1e-3),
                    "({i},{j}) {g} vs {v}"
                );
            }
        }
    }

    #[test]
    fn identical_tokens_give_their_value_projection() {
        let cfg = small_cfg();
        let mut store = store_for(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        perturb_all(&mut store, &mut rng);
        let token = normal_mat(&mut rng, 1, 8, 1.0);
        let kv = Mat::concat_rows(&vec![&token; 10]);
        let mut g = Graph::inference();
        let kvn = g.constant(kv);
        let queries = g.param(&store, "branch.p1.qformer.queries");
        let h = nn::layer_norm(&mut g, &store, "branch.p1.qformer.block0.ln_q", queries);
        let m = nn::layer_norm(&mut g, &store, "branch.p1.qformer.block0.ln_kv", kvn);
        let a = nn::attention(
            &mut g,
            &store,
            "branch.p1.qformer.block0.xattn",
            h,
            m,
            cfg.heads,
            false,
        );
        let single = g.slice_rows(m, 0, 1);
        let v = nn::linear(&mut g, &store, "branch.p1.qformer.block0.xattn.v", single);
        let expect = nn::linear(&mut g, &store, "branch.p1.qformer.block0.xattn.o", v);
        let (a, e) = (g.value(a).clone(), g.value(expect).clone());
        for i in 0..cfg.num_queries {
            for j in 0..8 {
                assert!((a.get(i, j) - e.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_is_independent_of_length() {
        let cfg = QFormerConfig {
            t_max: 40,
            ..QFormerConfig::default()
        };
        let store = store_for(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 3, 16, 40] {
            let f = features(&mut rng, t, 4, 32);
            let q = aggregate(&f, &cfg, &store, StreamId::P1).unwrap();
            assert_eq!(q.shape(), (8, 32));
            let e = embed_branch(&f, &cfg, &store, StreamId::P1).unwrap();
            assert_eq!(e.values.shape(), (8, 64));
        }
    }

    #[test]
    fn frame_permutation_invariance_and_temporal_sensitivity() {
        let cfg = small_cfg();
        let mut store = store_for(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = features(&mut rng, 6, 4, 8);
        let perm = [5, 2, 0, 1, 4, 3];
        let pf = FrameFeatures {
            values: perm.iter().map(|&i| f.values[i].clone()).collect(),
            kind: f.kind,
        };
        *store.get_mut("branch.p1.temporal").unwrap() = Mat::zeros(64, 8);
        let a = embed_branch(&f, &cfg, &store, StreamId::P1).unwrap();
        let b = embed_branch(&pf, &cfg, &store, StreamId::P1).unwrap();
        assert!(a.values.max_abs_diff(&b.values) <= 1e-6);
        *store.get_mut("branch.p1.temporal").unwrap() = normal_mat(&mut rng, 64, 8, 1.0);
        let a = embed_branch(&f, &cfg, &store, StreamId::P1).unwrap();
        let b = embed_branch(&pf, &cfg, &store, StreamId::P1).unwrap();
        assert!(a.values.max_abs_diff(&b.values) > 1e-6);
    }

    #[test]
    fn projection_cases() {
        let cfg = QFormerConfig {
            d_v: 4,
            d_text: 4,
            heads: 2,
            ..small_cfg()
        };
        let mut store = ParamStore::default();
        init_branch(&mut store, &cfg, StreamId::P2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normal_mat(&mut rng, 3, 4, 1.0);
        *store.get_mut("branch.p2.proj.l0.weight").unwrap() = Mat::identity(4);
        assert_eq!(project(&x, &cfg, &store, StreamId::P2).values, x);
        *store.get_mut("branch.p2.proj.l0.weight").unwrap() = Mat::zeros(4, 4);
        let b = Mat::from_vec(1, 4, vec![1.0, -2.0, 0.5, 3.0]);
        *store.get_mut("branch.p2.proj.l0.bias").unwrap() = b.clone();
        let out = project(&x, &cfg, &store, StreamId::P2).values;
        for i in 0..3 {
            assert_eq!(out.row(i), b.row(0));
        }

        let cfg = QFormerConfig {
            d_v: 2,
            d_text: 4,
            heads: 1,
            ..small_cfg()
        };
        let mut store = ParamStore::default();
        init_branch(&mut store, &cfg, StreamId::P2).unwrap();
        let w = Mat::from_vec(2, 4, vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 3.0, 1.0]);
        let b = Mat::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        *store.get_mut("branch.p2.proj.l0.weight").unwrap() = w;
        *store.get_mut("branch.p2.proj.l0.bias").unwrap() = b;
        let x = Mat::from_vec(2, 2, vec![1.0, 2.0, -1.0, 4.0]);
        let out = project(&x, &cfg, &store, StreamId::P2).values;
        let want = [[2.1, 2.2, 6.3, 1.4], [1.1, -1.8, 12.3, 5.4]];
        for i in 0..2 {
            for j in 0..4 {
                assert!((out.get(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = features(&mut rng, 2, 4, 5);
        assert!(matches!(
            aggregate(&f, &cfg, &store, StreamId::P1),
            Err(AggregatorError::Config(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut store = store_for(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        perturb_all(&mut store, &mut rng);
        let f = features(&mut rng, 3, 4, 8);
        let weights = normal_mat(&mut rng, cfg.num_queries, cfg.d_text, 1.0);
        let loss = |s: &ParamStore, track: &BTreeSet<String>| {
            let mut g = Graph::tracking(track);
            let out = branch_graph(&mut g, s, &cfg, StreamId::P1, &f).unwrap();
            let l = g.weighted_sum(out, weights.clone());
            (g.value(l).get(0, 0), g.backward(l))
        };
        let names: BTreeSet<String> = store.names().map(String::from).collect();
        let (_, grads) = loss(&store, &names);
        for n in &names {
            let gm = grads
                .param(n)
                .expect("every branch parameter gets a gradient");
            assert!(gm.sq_norm() > 0.0, "{n} has zero gradient");
        }
        let list: Vec<&String> = names.iter().collect();
        for _ in 0..6 {
            let name = list[rng.random_range(0..list.len())];
            let idx = rng.random_range(0..store.get(name).unwrap().len());
            let h = 1e-5;
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= h;
            let none = BTreeSet::new();
            let fd = (loss(&plus, &none).0 - loss(&minus, &none).0) / (2.0 * h);
            let an = grads.param(name).unwrap().data()[idx];
            assert!(
                (fd - an).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-4),
                "{name}[{idx}] fd {fd} an {an}"
            );
        }
    }

    #[test]
    fn branch_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let p = dir.path().join("p1.snap");
        save_branch(&p, &store, &cfg, StreamId::P1).unwrap();
        let mut other = ParamStore::default();
        init_branch(
            &mut other,
            &QFormerConfig {
                seed: 99,
                ..cfg.clone()
            },
            StreamId::P1,
        )
        .unwrap();
        load_branch(&p, &mut other, StreamId::P1).unwrap();
        assert_eq!(other.checksum(|_| true), store.checksum(|_| true));
    }
}
