//! The planning agent: a two-relation message-passing encoder, an attentive
//! policy over feasible regions, and a pooled value head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{FeatureMatrix, HeteroGraph};
use crate::nn::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Network dimensions. `dim` must be divisible by `heads`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub feature_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl AgentConfig {
    pub fn new(feature_dim: usize) -> Self {
        AgentConfig {
            feature_dim,
            dim: 32,
            layers: 2,
            heads: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("agent dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// All learnable tensors, indexed by a stable name list: the input
/// projection, per-layer message/combine matrices, per-head query/key
/// projections, the head-merge projection, and the policy and value MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    cfg: AgentConfig,
    tensors: Vec<Tensor>,
}

impl AgentParams {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases,
    /// drawn deterministically from the seed.
    pub fn init(cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (_, rows, cols, is_bias) in layout(&cfg) {
            let mut t = Tensor::zeros(rows, cols);
            if !is_bias {
                let bound = 1.0 / libm::sqrt(rows as f64);
                for v in t.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            tensors.push(t);
        }
        Ok(AgentParams { cfg, tensors })
    }

    /// Rebuilds parameters from named tensors (checkpoint loading). Every
    /// name in the layout must be present with the right shape.
    pub fn from_named(cfg: AgentConfig, named: &[(String, Tensor)]) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = Vec::new();
        for (name, rows, cols, _) in layout(&cfg) {
            let t = named
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Validation(format!("checkpoint missing tensor {}", name)))?;
            if t.shape() != (rows, cols) {
                return Err(Error::Validation(format!(
                    "tensor {} has shape {:?}, expected ({}, {})",
                    name,
                    t.shape(),
                    rows,
                    cols
                )));
            }
            tensors.push(t);
        }
        Ok(AgentParams { cfg, tensors })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    /// Stable parameter names in slot order.
    pub fn names(&self) -> Vec<String> {
        layout(&self.cfg).into_iter().map(|(n, ..)| n).collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// Registers every tensor on the tape, slot i = parameter i.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<TensorId>> {
        let mut ids = Vec::with_capacity(self.tensors.len());
        for (slot, t) in self.tensors.iter().enumerate() {
            ids.push(tape.param(slot, t)?);
        }
        Ok(ids)
    }

    fn slot(&self, name: &str) -> usize {
        layout(&self.cfg)
            .iter()
            .position(|(n, ..)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    /// Message-passing encoder. Per layer, spatial and flow messages are
    /// aggregated independently over their edge lists, combined, and added
    /// to the previous embedding inside tanh (residual form):
    /// `h' = tanh(W_c (h_s || h_o) + h)`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        features: &FeatureMatrix,
        graph: &HeteroGraph,
    ) -> Result<TensorId> {
        if features.dim() != self.cfg.feature_dim {
            return Err(Error::Numeric(format!(
                "feature dim {} does not match the agent input projection {}",
                features.dim(),
                self.cfg.feature_dim
            )));
        }
        let k = features.rows();
        let a = tape.constant(Tensor::from_vec(
            k,
            features.dim(),
            features.data().to_vec(),
        )?)?;
        let mut h = tape.matmul(a, pids[self.slot("w_a")])?;
        let spatial = graph.spatial_directed();
        let flow = graph.flow_directed();
        for l in 0..self.cfg.layers {
            let ms = tape.matmul(h, pids[self.slot(&format!("gnn{}.w_s", l))])?;
            let hs = tape.segment_sum(ms, spatial.clone(), k)?;
            let mo = tape.matmul(h, pids[self.slot(&format!("gnn{}.w_o", l))])?;
            let ho = tape.segment_sum(mo, flow.clone(), k)?;
            let cat = tape.concat_cols(hs, ho)?;
            let combined = tape.matmul(cat, pids[self.slot(&format!("gnn{}.w_c", l))])?;
            let residual = tape.add(combined, h)?;
            h = tape.tanh(residual)?;
        }
        Ok(h)
    }

    /// Attentive policy scores. Every region attends over the current
    /// station set (scaled dot-product, split-dimension heads over the
    /// station embeddings), the merged context is added to the region's own
    /// embedding inside tanh, and an MLP produces one score per region.
    /// Returns the 1 x k masked log-softmax over feasible regions.
    pub fn score_actions(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        emb: TensorId,
        stations: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        if stations.is_empty() {
            return Err(Error::InvalidState(
                "policy attention needs at least one station".into(),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidState("action mask is empty".into()));
        }
        let dh = self.cfg.head_dim();
        let hv = tape.gather_rows(emb, stations.to_vec())?;
        let mut contexts = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let q = tape.matmul(emb, pids[self.slot(&format!("attn{}.w_q", hd))])?;
            let kmat = tape.matmul(hv, pids[self.slot(&format!("attn{}.w_k", hd))])?;
            let kt = tape.transpose(kmat)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
            let attn = tape.softmax_rows(scaled)?;
            let values = tape.slice_cols(hv, hd * dh, (hd + 1) * dh)?;
            contexts.push(tape.matmul(attn, values)?);
        }
        let mut ctx = contexts[0];
        for &c in &contexts[1..] {
            ctx = tape.concat_cols(ctx, c)?;
        }
        let merged = tape.matmul(ctx, pids[self.slot("attn.merge")])?;
        let residual = tape.add(merged, emb)?;
        let activated = tape.tanh(residual)?;
        let h0 = tape.matmul(activated, pids[self.slot("policy.w0")])?;
        let h0 = tape.add_bias(h0, pids[self.slot("policy.b0")])?;
        let h0 = tape.tanh(h0)?;
        let s = tape.matmul(h0, pids[self.slot("policy.w1")])?;
        let s = tape.add_bias(s, pids[self.slot("policy.b1")])?;
        let row = tape.transpose(s)?;
        tape.masked_log_softmax(row, mask.to_vec())
    }

    /// State value: mean-pooled embeddings concatenated with the remaining
    /// budget and line-quota fractions, through a two-hidden-layer MLP with
    /// tanh activations.
    pub fn value_head(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        emb: TensorId,
        budget_frac: f64,
        lines_frac: f64,
    ) -> Result<TensorId> {
        let pooled = tape.mean_pool_rows(emb)?;
        let scalars = tape.constant(Tensor::from_vec(1, 2, vec![budget_frac, lines_frac])?)?;
        let x = tape.concat_cols(pooled, scalars)?;
        let h1 = tape.matmul(x, pids[self.slot("value.w0")])?;
        let h1 = tape.add_bias(h1, pids[self.slot("value.b0")])?;
        let h1 = tape.tanh(h1)?;
        let h2 = tape.matmul(h1, pids[self.slot("value.w1")])?;
        let h2 = tape.add_bias(h2, pids[self.slot("value.b1")])?;
        let h2 = tape.tanh(h2)?;
        let v = tape.matmul(h2, pids[self.slot("value.w2")])?;
        tape.add_bias(v, pids[self.slot("value.b2")])
    }
}

/// (name, rows, cols, is_bias) for every parameter slot, in order.
fn layout(cfg: &AgentConfig) -> Vec<(String, usize, usize, bool)> {
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let mut v = Vec::new();
    v.push(("w_a".into(), cfg.feature_dim, d, false));
    for l in 0..cfg.layers {
        v.push((format!("gnn{}.w_s", l), d, d, false));
        v.push((format!("gnn{}.w_o", l), d, d, false));
        v.push((format!("gnn{}.w_c", l), 2 * d, d, false));
    }
    for h in 0..cfg.heads {
        v.push((format!("attn{}.w_q", h), d, dh, false));
        v.push((format!("attn{}.w_k", h), d, dh, false));
    }
    v.push(("attn.merge".into(), d, d, false));
    v.push(("policy.w0".into(), d, d, false));
    v.push(("policy.b0".into(), 1, d, true));
    v.push(("policy.w1".into(), d, 1, false));
    v.push(("policy.b1".into(), 1, 1, true));
    v.push(("value.w0".into(), d + 2, d, false));
    v.push(("value.b0".into(), 1, d, true));
    v.push(("value.w1".into(), d, d, false));
    v.push(("value.b1".into(), 1, d, true));
    v.push(("value.w2".into(), d, 1, false));
    v.push(("value.b2".into(), 1, 1, true));
    v
}

/// Samples from a 1 x k log-probability row (masked entries carry
/// probability exactly zero). Returns the node, its log-probability, and
/// the distribution entropy.
pub fn sample_action<R: Rng>(log_probs: &Tensor, rng: &mut R) -> Result<(usize, f64, f64)> {
    let (r, k) = log_probs.shape();
    if r != 1 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "sample_action expects a 1 x k row, got {}x{}",
            r, k
        )));
    }
    let probs: Vec<f64> = log_probs.data().iter().map(|&lp| libm::exp(lp)).collect();
    let entropy = entropy_of(&probs, log_probs.data());
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        if u < acc {
            chosen = Some(i);
            break;
        }
    }
    // Numerical slack: fall back to the last positive-probability node.
    let node = match chosen {
        Some(n) => n,
        None => probs
            .iter()
            .rposition(|&p| p > 0.0)
            .ok_or_else(|| Error::InvalidState("no feasible action to sample".into()))?,
    };
    Ok((node, log_probs.data()[node], entropy))
}

/// Argmax action with lowest-index tie-breaking.
pub fn greedy_action(log_probs: &Tensor) -> Result<(usize, f64, f64)> {
    let (r, k) = log_probs.shape();
    if r != 1 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "greedy_action expects a 1 x k row, got {}x{}",
            r, k
        )));
    }
    let probs: Vec<f64> = log_probs.data().iter().map(|&lp| libm::exp(lp)).collect();
    let entropy = entropy_of(&probs, log_probs.data());
    let mut best = None;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, bp)) => p > bp,
        };
        if better {
            best = Some((i, p));
        }
    }
    let (node, _) = best.ok_or_else(|| Error::InvalidState("no feasible action".into()))?;
    Ok((node, log_probs.data()[node], entropy))
}

fn entropy_of(probs: &[f64], log_probs: &[f64]) -> f64 {
    let mut e = 0.0;
    for (&p, &lp) in probs.iter().zip(log_probs) {
        if p > 0.0 {
            e -= p * lp;
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::city::{generate_city, City, GenParams, Region};
    use crate::graph::{build_graph, node_features};
    use crate::metro::MetroState;
    use alloc::vec;

    fn toy_setup() -> (City, crate::graph::HeteroGraph, MetroState) {
        let city = generate_city(10, 0, &GenParams { side_km: 6.0, ..GenParams::default() }).unwrap();
        let graph = build_graph(&city, 2.5, crate::graph::default_flow_threshold(&city)).unwrap();
        let metro = MetroState::from_lines(vec![vec![0, 1, 2]], 1e4, 2).unwrap();
        (city, graph, metro)
    }

    fn small_params(feature_dim: usize) -> AgentParams {
        AgentParams::init(
            AgentConfig {
                feature_dim,
                dim: 8,
                layers: 2,
                heads: 2,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = small_params(11);
        let b = small_params(11);
        assert_eq!(a, b);
        for (name, t) in a.names().iter().zip(a.tensors()) {
            if name.contains(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{} not zero", name);
            }
        }
    }

    #[test]
    fn zero_edge_graph_reduces_to_tanh_of_projection() {
        let (city, _, metro) = toy_setup();
        // Graph with no edges at all: t1 tiny, t2 enormous.
        let graph = build_graph(&city, 1e-9, 1e18).unwrap();
        assert!(graph.spatial_pairs().is_empty());
        assert!(graph.flow_pairs().is_empty());
        let features = node_features(&city, &graph, &metro);
        let params = small_params(features.dim());
        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();

        // Expected: h = tanh(tanh(A W_a)) after two edgeless layers.
        let wa = &params.tensors()[0];
        let k = features.rows();
        let d = params.config().dim;
        for i in 0..k {
            for c in 0..d {
                let mut h0 = 0.0;
                for f in 0..features.dim() {
                    h0 += features.get(i, f) * wa.get(f, c);
                }
                let expect = libm::tanh(libm::tanh(h0));
                let got = tape.value(emb).get(i, c);
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_matches_straight_line_reimplementation() {
        // 5-node path graph, independent nested-loop recomputation.
        let regions = (0..5)
            .map(|i| Region {
                id: i,
                x: i as f64,
                y: 0.0,
                population: (i + 1) as f64 * 10.0,
                poi: vec![1.0, 2.0],
            })
            .collect();
        let mut flows = vec![0.0; 25];
        for i in 0..4 {
            flows[i * 5 + i + 1] = 100.0;
            flows[(i + 1) * 5 + i] = 100.0;
        }
        let city = City::new(regions, flows).unwrap();
        let graph = build_graph(&city, 1.5, 150.0).unwrap();
        let metro = MetroState::from_lines(vec![vec![0, 1]], 1e4, 2).unwrap();
        let features = node_features(&city, &graph, &metro);
        let params = small_params(features.dim());
        let cfg = params.config().clone();

        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();

        // Independent recomputation with plain loops over dense matrices.
        let d = cfg.dim;
        let k = 5;
        let get = |name: &str| &params.tensors()[params.slot(name)];
        let mut h = vec![vec![0.0f64; d]; k];
        for i in 0..k {
            for c in 0..d {
                let mut s = 0.0;
                for f in 0..features.dim() {
                    s += features.get(i, f) * get("w_a").get(f, c);
                }
                h[i][c] = s;
            }
        }
        for l in 0..cfg.layers {
            let ws = get(&format!("gnn{}.w_s", l)).clone();
            let wo = get(&format!("gnn{}.w_o", l)).clone();
            let wc = get(&format!("gnn{}.w_c", l)).clone();
            let mut next = vec![vec![0.0f64; d]; k];
            for i in 0..k {
                let mut hs = vec![0.0f64; d];
                let mut ho = vec![0.0f64; d];
                for j in 0..k {
                    if graph.has_spatial_edge(i, j) {
                        for c in 0..d {
                            for e in 0..d {
                                hs[c] += h[j][e] * ws.get(e, c);
                            }
                        }
                    }
                    if graph.has_flow_edge(i, j) {
                        for c in 0..d {
                            for e in 0..d {
                                ho[c] += h[j][e] * wo.get(e, c);
                            }
                        }
                    }
                }
                for c in 0..d {
                    let mut s = h[i][c];
                    for e in 0..d {
                        s += hs[e] * wc.get(e, c);
                    }
                    for e in 0..d {
                        s += ho[e] * wc.get(d + e, c);
                    }
                    next[i][c] = libm::tanh(s);
                }
            }
            h = next;
        }
        for i in 0..k {
            for c in 0..d {
                let got = tape.value(emb).get(i, c);
                assert!(
                    (got - h[i][c]).abs() < 1e-9,
                    "node {} dim {}: {} vs {}",
                    i,
                    c,
                    got,
                    h[i][c]
                );
            }
        }
    }

    #[test]
    fn zero_weights_leave_pure_tanh_residual() {
        // With every message-passing matrix zeroed, each layer reduces to
        // h' = tanh(h) regardless of the graph.
        let (city, graph, metro) = toy_setup();
        let features = node_features(&city, &graph, &metro);
        let mut params = small_params(features.dim());
        for l in 0..params.config().layers {
            for name in ["w_s", "w_o", "w_c"] {
                let slot = params.slot(&format!("gnn{}.{}", l, name));
                params.tensors_mut()[slot].fill(0.0);
            }
        }
        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();
        let wa = &params.tensors()[params.slot("w_a")];
        for i in 0..features.rows() {
            for c in 0..params.config().dim {
                let mut h0 = 0.0;
                for f in 0..features.dim() {
                    h0 += features.get(i, f) * wa.get(f, c);
                }
                let expect = libm::tanh(libm::tanh(h0));
                assert!((tape.value(emb).get(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (city, graph, metro) = toy_setup();
        let features = node_features(&city, &graph, &metro);
        let params = small_params(features.dim());
        let k = city.len();

        // Permutation: reverse the ids.
        let perm: Vec<usize> = (0..k).rev().collect();
        let permuted_regions: Vec<Region> = (0..k)
            .map(|i| {
                let src = city.region(perm[i]);
                Region {
                    id: i,
                    x: src.x,
                    y: src.y,
                    population: src.population,
                    poi: src.poi.clone(),
                }
            })
            .collect();
        let mut permuted_flows = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                permuted_flows[i * k + j] = city.flow(perm[i], perm[j]);
            }
        }
        let city2 = City::new(permuted_regions, permuted_flows).unwrap();
        let graph2 = build_graph(&city2, graph.t1, graph.t2).unwrap();
        let inv = |v: usize| perm.iter().position(|&p| p == v).unwrap();
        let metro2 = MetroState::from_lines(
            vec![vec![inv(0), inv(1), inv(2)]],
            1e4,
            2,
        )
        .unwrap();
        let features2 = node_features(&city2, &graph2, &metro2);

        let run = |features: &crate::graph::FeatureMatrix,
                   graph: &crate::graph::HeteroGraph,
                   stations: Vec<usize>| {
            let mut tape = Tape::new(params.len());
            let pids = params.register(&mut tape).unwrap();
            let emb = params.encode(&mut tape, &pids, features, graph).unwrap();
            let v = params
                .value_head(&mut tape, &pids, emb, 0.5, 0.5)
                .unwrap();
            let mut st = stations;
            st.sort_unstable();
            let mask = vec![true; features.rows()];
            let lp = params
                .score_actions(&mut tape, &pids, emb, &st, &mask)
                .unwrap();
            (
                tape.value(emb).clone(),
                tape.value(lp).clone(),
                tape.value(v).item().unwrap(),
            )
        };
        let (e1, lp1, v1) = run(&features, &graph, vec![0, 1, 2]);
        let (e2, lp2, v2) = run(&features2, &graph2, vec![inv(0), inv(1), inv(2)]);

        for i in 0..k {
            for c in 0..params.config().dim {
                assert!((e1.get(perm[i], c) - e2.get(i, c)).abs() < 1e-9);
            }
            assert!((lp1.get(0, perm[i]) - lp2.get(0, i)).abs() < 1e-9);
        }
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn masked_probabilities_are_exact_zero_and_normalized() {
        let (city, graph, metro) = toy_setup();
        let features = node_features(&city, &graph, &metro);
        let params = small_params(features.dim());
        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();
        let stations: Vec<usize> = metro.stations().into_iter().collect();
        let mut mask = vec![false; city.len()];
        mask[3] = true;
        mask[7] = true;
        mask[9] = true;
        let lp = params
            .score_actions(&mut tape, &pids, emb, &stations, &mask)
            .unwrap();
        let probs: Vec<f64> = tape.value(lp).data().iter().map(|&l| libm::exp(l)).collect();
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if mask[i] {
                assert!(p > 0.0);
                sum += p;
            } else {
                assert_eq!(p, 0.0);
            }
        }
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_station_attention_is_degenerate() {
        let (city, graph, _) = toy_setup();
        let metro = MetroState::from_lines(vec![vec![4]], 1e4, 2).unwrap();
        let features = node_features(&city, &graph, &metro);
        let params = small_params(features.dim());
        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();
        // With one key the softmax over stations is 1 everywhere, so the
        // context of every region equals that station's embedding. Verify
        // through the policy path being well-defined and finite.
        let mask = vec![true; city.len()];
        let lp = params
            .score_actions(&mut tape, &pids, emb, &[4], &mask)
            .unwrap();
        assert!(tape.value(lp).is_finite());
        // Degenerate softmax directly:
        let hv = tape.gather_rows(emb, vec![4]).unwrap();
        let q = tape.matmul(emb, pids[params.slot("attn0.w_q")]).unwrap();
        let kk = tape.matmul(hv, pids[params.slot("attn0.w_k")]).unwrap();
        let kt = tape.transpose(kk).unwrap();
        let sc = tape.matmul(q, kt).unwrap();
        let at = tape.softmax_rows(sc).unwrap();
        for i in 0..city.len() {
            assert_eq!(tape.value(at).get(i, 0), 1.0);
        }
    }

    #[test]
    fn empty_mask_and_empty_stations_error() {
        let (city, graph, metro) = toy_setup();
        let features = node_features(&city, &graph, &metro);
        let params = small_params(features.dim());
        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();
        let mask = vec![false; city.len()];
        let stations: Vec<usize> = metro.stations().into_iter().collect();
        assert!(params
            .score_actions(&mut tape, &pids, emb, &stations, &mask)
            .is_err());
        let mask = vec![true; city.len()];
        assert!(params
            .score_actions(&mut tape, &pids, emb, &[], &mask)
            .is_err());
    }

    #[test]
    fn value_is_invariant_to_node_duplication() {
        let (city, graph, metro) = toy_setup();
        let features = node_features(&city, &graph, &metro);
        let params = small_params(features.dim());

        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();
        let v1 = params.value_head(&mut tape, &pids, emb, 0.7, 0.3).unwrap();
        // Duplicate every embedding row; the mean pool is unchanged.
        let dup: Vec<usize> = (0..city.len()).chain(0..city.len()).collect();
        let emb2 = tape.gather_rows(emb, dup).unwrap();
        let v2 = params.value_head(&mut tape, &pids, emb2, 0.7, 0.3).unwrap();
        let a = tape.value(v1).item().unwrap();
        let b = tape.value(v2).item().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn zero_final_value_layer_gives_zero_value() {
        let (city, graph, metro) = toy_setup();
        let features = node_features(&city, &graph, &metro);
        let mut params = small_params(features.dim());
        let w2 = params.slot("value.w2");
        params.tensors_mut()[w2].fill(0.0);
        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();
        let v = params.value_head(&mut tape, &pids, emb, 0.7, 0.3).unwrap();
        assert_eq!(tape.value(v).item().unwrap(), 0.0);
    }

    /// Regression pin: value-head output with seed-0 full-size parameters
    /// on the k=20 reference city's initial state, frozen from the first
    /// implementation run.
    #[test]
    fn value_reference_smoke_pinned() {
        let city = generate_city(
            20,
            0,
            &GenParams {
                side_km: 9.0,
                ..GenParams::default()
            },
        )
        .unwrap();
        let graph = build_graph(&city, 2.0, crate::graph::default_flow_threshold(&city)).unwrap();
        let env_cfg = crate::env::EnvConfig {
            budget: 10_000.0,
            initial_lines: 2,
            max_new_lines: 2,
            init_line_len: 4,
            ..crate::env::EnvConfig::default()
        };
        let env = crate::env::Env::reset(&city, &env_cfg, 1).unwrap();
        let params = AgentParams::init(
            AgentConfig {
                feature_dim: crate::graph::feature_dim(4),
                dim: 32,
                layers: 2,
                heads: 2,
            },
            0,
        )
        .unwrap();
        let features = node_features(&city, &graph, env.state());
        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape).unwrap();
        let emb = params.encode(&mut tape, &pids, &features, &graph).unwrap();
        let v = params.value_head(&mut tape, &pids, emb, 1.0, 1.0).unwrap();
        assert_eq!(tape.value(v).item().unwrap(), -0.016_397_642_683_598_1);
    }

    #[test]
    fn point_mass_sampling() {
        let mut lp = Tensor::from_vec(1, 3, vec![crate::nn::MASK_NEG; 3]).unwrap();
        lp.set(0, 1, 0.0); // probability 1 on node 1
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (node, logp, entropy) = sample_action(&lp, &mut rng).unwrap();
        assert_eq!(node, 1);
        assert_eq!(logp, 0.0);
        assert_eq!(entropy, 0.0);
    }

    #[test]
    fn uniform_entropy_is_ln_n() {
        let lp = Tensor::from_vec(1, 4, vec![libm::log(0.25); 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, entropy) = sample_action(&lp, &mut rng).unwrap();
        assert!((entropy - libm::log(4.0)).abs() < 1e-12);
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        // Fixed 3-node distribution, 1e5 samples, 3-sigma band.
        let p = [0.2, 0.5, 0.3];
        let lp = Tensor::from_vec(1, 3, p.iter().map(|&x: &f64| libm::log(x)).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let (node, _, _) = sample_action(&lp, &mut rng).unwrap();
            counts[node] += 1;
        }
        for i in 0..3 {
            let mean = n as f64 * p[i];
            let sigma = libm::sqrt(n as f64 * p[i] * (1.0 - p[i]));
            let diff = (counts[i] as f64 - mean).abs();
            assert!(diff < 3.0 * sigma, "node {}: {} vs {}", i, counts[i], mean);
        }
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let lp = Tensor::from_vec(1, 3, vec![libm::log(0.4), libm::log(0.4), libm::log(0.2)])
            .unwrap();
        let (node, _, _) = greedy_action(&lp).unwrap();
        assert_eq!(node, 0);
    }
}
