//! The equivariant motion network.
//!
//! Features live on a [`Graph`] so the same code serves inference and
//! training. [`Pass`] builds individual layers onto a caller-owned graph;
//! the methods on [`EqMotion`] wrap it for plain tensors.
//!
//! Shapes: motions are `[M, T, n]`, geometric features `[M, C, n]`,
//! pattern features `[M, D]`. Pairwise quantities are stored per ordered
//! pair `(i, j)`, `j != i`, in row-major order of `i` then `j`; agent `i`
//! is the receiver.

mod checkpoint;
mod config;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, NeighborRule, VelocityInjection};

use crate::error::{Error, Result};
use crate::geometry::{dct_pair, velocity_profile, DctPair};
use crate::numerics::{mlp_forward, Graph, MlpIds, ParamId, ParameterSet, Tensor, Var};

#[derive(Clone, Debug)]
struct LayerIds {
    att: MlpIds,
    edge: Vec<MlpIds>,
    query: ParamId,
    key: ParamId,
    msg: MlpIds,
    node: MlpIds,
}

impl LayerIds {
    fn register(p: &mut ParameterSet, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c, d, h) = (cfg.geo_channels, cfg.pattern_dim, cfg.hidden_dim);
        let pair_in = 2 * d + c;
        LayerIds {
            att: MlpIds::register(p, &format!("{prefix}.att"), d, h, c, rng),
            edge: (0..cfg.num_categories)
                .map(|k| MlpIds::register(p, &format!("{prefix}.edge.{k}"), pair_in, h, c, rng))
                .collect(),
            query: p.push_uniform(format!("{prefix}.query"), &[c, c], c, rng),
            key: p.push_uniform(format!("{prefix}.key"), &[c, c], c, rng),
            msg: MlpIds::register(p, &format!("{prefix}.msg"), pair_in, h, d, rng),
            node: MlpIds::register(p, &format!("{prefix}.node"), 2 * d, h, d, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct HeadIds {
    layer: LayerIds,
    out: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    init_g: ParamId,
    init_h: MlpIds,
    reason_msg: MlpIds,
    reason_node: MlpIds,
    reason_cat: MlpIds,
    velocity: Option<MlpIds>,
    shared: Vec<LayerIds>,
    heads: Vec<HeadIds>,
}

impl Layout {
    fn build(cfg: &ModelConfig, rng: &mut impl Rng) -> (Self, ParameterSet) {
        let mut p = ParameterSet::new();
        let (c, d, h, t_p) = (cfg.geo_channels, cfg.pattern_dim, cfg.hidden_dim, cfg.past_len);
        let pair_in = 2 * d + c;
        let init_g = p.push_uniform("init_g.weight", &[c, t_p], t_p, rng);
        let init_h = MlpIds::register(&mut p, "init_h", 2 * t_p, h, d, rng);
        let reason_msg = MlpIds::register(&mut p, "reason.msg", pair_in, h, d, rng);
        let reason_node = MlpIds::register(&mut p, "reason.node", 2 * d, h, d, rng);
        let reason_cat = MlpIds::register(&mut p, "reason.cat", pair_in, h, cfg.num_categories, rng);
        let velocity = cfg
            .use_velocity_injection
            .then(|| MlpIds::register(&mut p, "velocity", t_p, h, c, rng));
        let shared = (0..cfg.num_layers - 1)
            .map(|l| LayerIds::register(&mut p, &format!("layers.{l}"), cfg, rng))
            .collect();
        let heads = (0..cfg.num_heads)
            .map(|k| HeadIds {
                layer: LayerIds::register(&mut p, &format!("heads.{k}.layer"), cfg, rng),
                out: p.push_uniform(format!("heads.{k}.out"), &[cfg.future_len, c], c, rng),
            })
            .collect();
        let layout = Layout {
            init_g,
            init_h,
            reason_msg,
            reason_node,
            reason_cat,
            velocity,
            shared,
            heads,
        };
        (layout, p)
    }
}

/// Receiver and sender agent of every ordered pair.
#[derive(Clone, Debug)]
struct Pairs {
    recv: Arc<[usize]>,
    send: Arc<[usize]>,
}

impl Pairs {
    fn all_others(m: usize) -> Self {
        let (mut recv, mut send) = (Vec::new(), Vec::new());
        for i in 0..m {
            for j in (0..m).filter(|&j| j != i) {
                recv.push(i);
                send.push(j);
            }
        }
        Pairs {
            recv: recv.into(),
            send: send.into(),
        }
    }

    fn len(&self) -> usize {
        self.recv.len()
    }
}

/// Pairwise categorical interaction weights, `[M, M, K]` with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    weights: Tensor,
}

impl InteractionGraph {
    fn from_pairs(c: &Tensor, m: usize) -> Result<Self> {
        let (p, k) = c.as_matrix()?;
        if p != m * (m - 1) {
            return Err(Error::dim(format!("{p} pair rows for {m} agents")));
        }
        let mut w = Tensor::zeros(&[m, m, k]);
        let pairs = Pairs::all_others(m);
        for (row, (&i, &j)) in pairs.recv.iter().zip(pairs.send.iter()).enumerate() {
            let dst = (i * m + j) * k;
            w.data_mut()[dst..dst + k].copy_from_slice(&c.data()[row * k..(row + 1) * k]);
        }
        Ok(InteractionGraph { weights: w })
    }

    /// Build from a full `[M, M, K]` array; the diagonal is ignored.
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape().to_vec();
        if s.len() != 3 || s[0] != s[1] || s[0] == 0 {
            return Err(Error::dim(format!("interaction weights must be [M, M, K], got {s:?}")));
        }
        let mut weights = weights;
        let (m, k) = (s[0], s[2]);
        for i in 0..m {
            let at = (i * m + i) * k;
            weights.data_mut()[at..at + k].fill(0.0);
        }
        Ok(InteractionGraph { weights })
    }

    fn pair_tensor(&self) -> Tensor {
        let (m, k) = (self.num_agents(), self.num_categories());
        let pairs = Pairs::all_others(m);
        let mut out = Vec::with_capacity(pairs.len() * k);
        for (&i, &j) in pairs.recv.iter().zip(pairs.send.iter()) {
            out.extend_from_slice(self.probabilities(i, j));
        }
        Tensor::new(vec![pairs.len(), k], out).expect("pair tensor size")
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn num_agents(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_categories(&self) -> usize {
        self.weights.shape()[2]
    }

    /// `c_ij`; all zeros when `i == j`.
    pub fn probabilities(&self, i: usize, j: usize) -> &[f64] {
        let (m, k) = (self.num_agents(), self.num_categories());
        let at = (i * m + j) * k;
        &self.weights.data()[at..at + k]
    }

    /// Most likely category of pair `(i, j)`, lowest index on ties.
    pub fn category(&self, i: usize, j: usize) -> usize {
        let p = self.probabilities(i, j);
        let mut best = 0;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        best
    }
}

/// Intermediates of the interaction reasoning step.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageBuffer {
    /// `[M, M, D]`, zero on the diagonal.
    pub edge_messages: Tensor,
    /// `[M, D]`, per-agent sum of incoming edge messages.
    pub aggregated: Tensor,
    /// `[M, D]`.
    pub refreshed_nodes: Tensor,
}

/// Output of [`EqMotion::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    /// One `[M, T_f, n]` motion per head.
    pub heads: Vec<Tensor>,
    pub interactions: InteractionGraph,
}

/// Handles produced by [`Pass::init_features`].
#[derive(Clone, Copy, Debug)]
pub struct InitFeatures {
    /// `[M, C, n]`.
    pub geometric: Var,
    /// `[M, D]`.
    pub pattern: Var,
    /// Per-agent velocity magnitudes, `[M, T_p]`.
    pub speeds: Var,
    /// Mean input position, `[n]`; re-added after the inverse DCT.
    pub anchor: Var,
}

/// Handles produced by [`Pass::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// One `[M, T_f, n]` motion per head.
    pub predictions: Vec<Var>,
    /// `[P, K]` interaction probabilities in pair order.
    pub interactions: Var,
}

#[derive(Clone, Copy, Debug)]
struct ReasoningVars {
    edge_messages: Var,
    aggregated: Var,
    refreshed: Var,
    categories: Var,
}

#[derive(Clone, Debug)]
pub struct EqMotion {
    config: ModelConfig,
    params: ParameterSet,
    layout: Layout,
    pairs: Pairs,
    dct: Option<(DctPair, DctPair)>,
}

impl EqMotion {
    /// A model with freshly initialised parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (layout, params) = Layout::build(&config, rng);
        let dct = if config.use_dct {
            Some((dct_pair(config.past_len)?, dct_pair(config.future_len)?))
        } else {
            None
        };
        Ok(EqMotion {
            pairs: Pairs::all_others(config.num_agents),
            config,
            params,
            layout,
            dct,
        })
    }

    /// A model using `params`, whose names and shapes must match the layout
    /// implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.names() != params.names() {
            let expected = model.params.names().len();
            let missing = model
                .params
                .names()
                .iter()
                .find(|n| params.id(n).is_none())
                .cloned();
            return Err(Error::Contract(match missing {
                Some(name) => format!("parameter {name} missing"),
                None => format!("expected {expected} parameters in layout order, got {}", params.len()),
            }));
        }
        model.params.assign(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Mutable parameter values. Shapes must be left alone.
    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn layer_ids(&self, layer: usize, head: usize) -> Result<&LayerIds> {
        self.check_head(head)?;
        let last = self.config.num_layers - 1;
        match layer {
            l if l < last => Ok(&self.layout.shared[l]),
            l if l == last => Ok(&self.layout.heads[head].layer),
            l => Err(Error::param(format!(
                "layer {l} out of range for {} layers",
                self.config.num_layers
            ))),
        }
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.config.num_heads {
            return Err(Error::param(format!(
                "head {head} out of range for {} heads",
                self.config.num_heads
            )));
        }
        Ok(())
    }

    /// Run `f` on a fresh graph with the parameters bound.
    pub fn with_pass<T>(&self, f: impl FnOnce(&mut Pass<'_>) -> Result<T>) -> Result<T> {
        let mut graph = Graph::new();
        let vars = self.params.bind(&mut graph);
        let mut pass = Pass::new(self, &mut graph, &vars)?;
        f(&mut pass)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        self.with_pass(|p| {
            let out = p.forward(x)?;
            let heads = out.predictions.iter().map(|&v| p.value(v).clone()).collect();
            let interactions = InteractionGraph::from_pairs(p.value(out.interactions), self.config.num_agents)?;
            Ok(Prediction { heads, interactions })
        })
    }

    /// Only the reasoning part of the network.
    pub fn interactions(&self, x: &Tensor) -> Result<InteractionGraph> {
        self.with_pass(|p| {
            let init = p.init_features(x)?;
            let c = p.reason_interactions(init.geometric, init.pattern)?;
            InteractionGraph::from_pairs(p.value(c), self.config.num_agents)
        })
    }

    /// Initial geometric `[M, C, n]` and pattern `[M, D]` features.
    pub fn init_features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.with_pass(|p| {
            let init = p.init_features(x)?;
            Ok((p.value(init.geometric).clone(), p.value(init.pattern).clone()))
        })
    }

    pub fn reason_interactions(&self, geo: &Tensor, pat: &Tensor) -> Result<InteractionGraph> {
        self.with_pass(|p| {
            let (g, h) = (p.constant(geo.clone()), p.constant(pat.clone()));
            let c = p.reason_interactions(g, h)?;
            InteractionGraph::from_pairs(p.value(c), self.config.num_agents)
        })
    }

    pub fn reasoning_messages(&self, geo: &Tensor, pat: &Tensor) -> Result<MessageBuffer> {
        let m = self.config.num_agents;
        let d = self.config.pattern_dim;
        self.with_pass(|p| {
            let (g, h) = (p.constant(geo.clone()), p.constant(pat.clone()));
            let r = p.reasoning(g, h)?;
            let msgs = p.value(r.edge_messages);
            let mut edge_messages = Tensor::zeros(&[m, m, d]);
            for (row, (&i, &j)) in self.pairs.recv.iter().zip(self.pairs.send.iter()).enumerate() {
                let dst = (i * m + j) * d;
                edge_messages.data_mut()[dst..dst + d].copy_from_slice(&msgs.data()[row * d..(row + 1) * d]);
            }
            Ok(MessageBuffer {
                edge_messages,
                aggregated: p.value(r.aggregated).clone(),
                refreshed_nodes: p.value(r.refreshed).clone(),
            })
        })
    }

    pub fn inner_attention(&self, geo: &Tensor, pat: &Tensor, layer: usize) -> Result<Tensor> {
        self.with_pass(|p| {
            let (g, h) = (p.constant(geo.clone()), p.constant(pat.clone()));
            let out = p.inner_attention(g, h, layer, 0)?;
            Ok(p.value(out).clone())
        })
    }

    pub fn inter_aggregate(&self, geo: &Tensor, pat: &Tensor, c: &InteractionGraph, layer: usize) -> Result<Tensor> {
        self.with_pass(|p| {
            let (g, h) = (p.constant(geo.clone()), p.constant(pat.clone()));
            let c = p.constant(c.pair_tensor());
            let out = p.inter_aggregate(g, h, c, layer, 0)?;
            Ok(p.value(out).clone())
        })
    }

    /// `speeds` is `[M, T_p]`. The velocity network is shared by all layers.
    pub fn inject_velocity(&self, geo: &Tensor, speeds: &Tensor) -> Result<Tensor> {
        self.with_pass(|p| {
            let (g, s) = (p.constant(geo.clone()), p.constant(speeds.clone()));
            let out = p.inject_velocity(g, s)?;
            Ok(p.value(out).clone())
        })
    }

    pub fn equivariant_nonlinear(&self, geo: &Tensor, layer: usize) -> Result<Tensor> {
        self.with_pass(|p| {
            let g = p.constant(geo.clone());
            let out = p.equivariant_nonlinear(g, layer, 0)?;
            Ok(p.value(out).clone())
        })
    }

    pub fn pattern_update(&self, geo: &Tensor, pat: &Tensor, layer: usize) -> Result<Tensor> {
        self.with_pass(|p| {
            let (g, h) = (p.constant(geo.clone()), p.constant(pat.clone()));
            let out = p.pattern_update(g, h, layer, 0)?;
            Ok(p.value(out).clone())
        })
    }

    /// `anchor` is the mean input position; only used with the DCT enabled.
    pub fn decode_output(&self, geo: &Tensor, head: usize, anchor: &[f64]) -> Result<Tensor> {
        self.with_pass(|p| {
            let g = p.constant(geo.clone());
            let a = p.constant(Tensor::new(vec![anchor.len()], anchor.to_vec())?);
            let out = p.decode_output(g, head, a)?;
            Ok(p.value(out).clone())
        })
    }
}

/// Builds model layers onto a graph whose leaves `params` hold the model's
/// parameters in enumeration order.
pub struct Pass<'a> {
    model: &'a EqMotion,
    graph: &'a mut Graph,
    params: &'a [Var],
}

impl<'a> Pass<'a> {
    pub fn new(model: &'a EqMotion, graph: &'a mut Graph, params: &'a [Var]) -> Result<Self> {
        if params.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (v, t) in params.iter().zip(model.params.tensors()) {
            if graph.shape(*v) != t.shape() {
                return Err(Error::dim(format!(
                    "parameter handle shape {:?} vs {:?}",
                    graph.shape(*v),
                    t.shape()
                )));
            }
        }
        Ok(Pass { model, graph, params })
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.graph
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    fn cfg(&self) -> &'a ModelConfig {
        &self.model.config
    }

    fn w(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    fn mlp(&mut self, ids: &MlpIds, x: Var) -> Result<Var> {
        mlp_forward(self.graph, x, &ids.vars(self.params))
    }

    fn expect_shape(&self, v: Var, what: &str, shape: &[usize]) -> Result<()> {
        if self.graph.shape(v) != shape {
            return Err(Error::dim(format!(
                "{what} must be {shape:?}, got {:?}",
                self.graph.shape(v)
            )));
        }
        Ok(())
    }

    fn check_geo(&self, geo: Var) -> Result<()> {
        let c = self.cfg();
        self.expect_shape(geo, "geometric feature", &[c.num_agents, c.geo_channels, c.space_dim])
    }

    fn check_pat(&self, pat: Var) -> Result<()> {
        let c = self.cfg();
        self.expect_shape(pat, "pattern feature", &[c.num_agents, c.pattern_dim])
    }

    /// `G - Gbar` and `Gbar`.
    fn centered(&mut self, x: Var) -> Result<(Var, Var)> {
        let mean = self.graph.point_mean(x)?;
        let cen = self.graph.sub_point(x, mean)?;
        Ok((cen, mean))
    }

    /// Per-pair `G_i - G_j` as `[P, C, n]` and its column norms `[P, C]`.
    fn pair_geometry(&mut self, geo: Var) -> Result<(Var, Var)> {
        let c = self.cfg();
        let (m, width) = (c.num_agents, c.geo_channels * c.space_dim);
        let flat = self.graph.reshape(geo, &[m, width])?;
        let gi = self.graph.gather_rows(flat, self.model.pairs.recv.clone())?;
        let gj = self.graph.gather_rows(flat, self.model.pairs.send.clone())?;
        let diff = self.graph.sub(gi, gj)?;
        let diff = self.graph.reshape(diff, &[self.model.pairs.len(), c.geo_channels, c.space_dim])?;
        let dist = self.graph.row_norms(diff)?;
        Ok((diff, dist))
    }

    /// `[h_i; h_j; d_ij]` per pair.
    fn pair_inputs(&mut self, pat: Var, dist: Var) -> Result<Var> {
        let hi = self.graph.gather_rows(pat, self.model.pairs.recv.clone())?;
        let hj = self.graph.gather_rows(pat, self.model.pairs.send.clone())?;
        self.graph.concat_cols(&[hi, hj, dist])
    }

    fn sum_incoming(&mut self, per_pair: Var) -> Result<Var> {
        self.graph
            .scatter_rows(per_pair, self.model.pairs.recv.clone(), self.cfg().num_agents)
    }

    pub fn init_features(&mut self, x: &Tensor) -> Result<InitFeatures> {
        let c = self.cfg();
        let (m, t_p, n) = (c.num_agents, c.past_len, c.space_dim);
        if x.shape() != [m, t_p, n] {
            return Err(Error::dim(format!(
                "input motion must be [{m}, {t_p}, {n}], got {:?}",
                x.shape()
            )));
        }
        let mut mean = vec![0.0; n];
        for p in x.data().chunks_exact(n) {
            for (a, b) in mean.iter_mut().zip(p) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|a| *a /= (m * t_p) as f64);

        let mut feats = Vec::with_capacity(m * 2 * t_p);
        let mut speeds = Vec::with_capacity(m * t_p);
        for agent in x.data().chunks_exact(t_p * n) {
            let traj = Tensor::new(vec![t_p, n], agent.to_vec())?;
            let prof = velocity_profile(&traj)?;
            feats.extend_from_slice(&prof.magnitudes);
            feats.extend_from_slice(&prof.turn_cosines);
            speeds.extend_from_slice(&prof.magnitudes);
        }

        // The network input, and the point its features are centred on.
        let (input, centre) = match &self.model.dct {
            Some((past, _)) => {
                let mut coeffs = Tensor::zeros(&[m, t_p, n]);
                for (a, agent) in x.data().chunks_exact(t_p * n).enumerate() {
                    let out = &mut coeffs.data_mut()[a * t_p * n..(a + 1) * t_p * n];
                    for k in 0..t_p {
                        for t in 0..t_p {
                            let w = past.forward.data()[k * t_p + t];
                            for d in 0..n {
                                out[k * n + d] += w * (agent[t * n + d] - mean[d]);
                            }
                        }
                    }
                }
                let mut centre = vec![0.0; n];
                for p in coeffs.data().chunks_exact(n) {
                    for (a, b) in centre.iter_mut().zip(p) {
                        *a += b;
                    }
                }
                centre.iter_mut().for_each(|a| *a /= (m * t_p) as f64);
                (coeffs, centre)
            }
            None => (x.clone(), mean.clone()),
        };
        let mut offsets = input;
        for p in offsets.data_mut().chunks_exact_mut(n) {
            for (a, b) in p.iter_mut().zip(&centre) {
                *a -= b;
            }
        }

        let offsets = self.graph.constant(offsets);
        let centre = self.graph.constant(Tensor::new(vec![n], centre)?);
        let mixed = self.graph.channel_mix(self.w(self.model.layout.init_g), offsets)?;
        let geometric = self.graph.add_point(mixed, centre)?;
        let feats = self.graph.constant(Tensor::new(vec![m, 2 * t_p], feats)?);
        let pattern = self.mlp(&self.model.layout.init_h, feats)?;
        let speeds = self.graph.constant(Tensor::new(vec![m, t_p], speeds)?);
        let anchor = self.graph.constant(Tensor::new(vec![n], mean)?);
        Ok(InitFeatures {
            geometric,
            pattern,
            speeds,
            anchor,
        })
    }

    fn reasoning(&mut self, geo: Var, pat: Var) -> Result<ReasoningVars> {
        self.check_geo(geo)?;
        self.check_pat(pat)?;
        let layout = &self.model.layout;
        let (_, dist) = self.pair_geometry(geo)?;
        let input = self.pair_inputs(pat, dist)?;
        let edge_messages = self.mlp(&layout.reason_msg, input)?;
        let aggregated = self.sum_incoming(edge_messages)?;
        let node_in = self.graph.concat_cols(&[aggregated, pat])?;
        let refreshed = self.mlp(&layout.reason_node, node_in)?;
        let cat_in = self.pair_inputs(refreshed, dist)?;
        let logits = self.mlp(&layout.reason_cat, cat_in)?;
        let categories = self.graph.softmax_rows(logits, self.cfg().temperature)?;
        Ok(ReasoningVars {
            edge_messages,
            aggregated,
            refreshed,
            categories,
        })
    }

    /// `[P, K]` interaction probabilities.
    pub fn reason_interactions(&mut self, geo: Var, pat: Var) -> Result<Var> {
        Ok(self.reasoning(geo, pat)?.categories)
    }

    pub fn inner_attention(&mut self, geo: Var, pat: Var, layer: usize, head: usize) -> Result<Var> {
        self.check_geo(geo)?;
        self.check_pat(pat)?;
        let ids = self.model.layer_ids(layer, head)?;
        let (cen, mean) = self.centered(geo)?;
        let weights = self.mlp(&ids.att, pat)?;
        let scaled = self.graph.broadcast_mul(weights, cen)?;
        self.graph.add_point(scaled, mean)
    }

    /// `c` is `[P, K]` in pair order.
    pub fn inter_aggregate(&mut self, geo: Var, pat: Var, c: Var, layer: usize, head: usize) -> Result<Var> {
        self.check_geo(geo)?;
        self.check_pat(pat)?;
        let cfg = self.cfg();
        self.expect_shape(c, "interaction weights", &[self.model.pairs.len(), cfg.num_categories])?;
        let ids = self.model.layer_ids(layer, head)?;
        let (diff, dist) = self.pair_geometry(geo)?;
        let input = self.pair_inputs(pat, dist)?;
        let mut weights = None;
        for (k, edge) in ids.edge.iter().enumerate() {
            let ck = self.graph.slice_col(c, k)?;
            let ek = self.mlp(edge, input)?;
            let term = self.graph.broadcast_mul(ck, ek)?;
            weights = Some(match weights {
                Some(acc) => self.graph.add(acc, term)?,
                None => term,
            });
        }
        let weights = weights.expect("at least one category");
        let pushed = self.graph.broadcast_mul(weights, diff)?;
        let width = cfg.geo_channels * cfg.space_dim;
        let pushed = self.graph.reshape(pushed, &[self.model.pairs.len(), width])?;
        let summed = self.sum_incoming(pushed)?;
        let summed = self.graph.reshape(summed, &[cfg.num_agents, cfg.geo_channels, cfg.space_dim])?;
        self.graph.add(geo, summed)
    }

    /// `speeds` is `[M, T_p]`.
    pub fn inject_velocity(&mut self, geo: Var, speeds: Var) -> Result<Var> {
        let cfg = self.cfg();
        let Some(ids) = &self.model.layout.velocity else {
            return Err(Error::Contract("velocity injection is disabled in the model config".into()));
        };
        self.check_geo(geo)?;
        self.expect_shape(speeds, "speeds", &[cfg.num_agents, cfg.past_len])?;
        let s = self.mlp(ids, speeds)?;
        match cfg.velocity_injection_mode {
            VelocityInjection::Scaling => {
                let (cen, _) = self.centered(geo)?;
                let push = self.graph.broadcast_mul(s, cen)?;
                self.graph.add(geo, push)
            }
            VelocityInjection::Additive => self.graph.broadcast_add(s, geo),
        }
    }

    pub fn equivariant_nonlinear(&mut self, geo: Var, layer: usize, head: usize) -> Result<Var> {
        self.check_geo(geo)?;
        let ids = self.model.layer_ids(layer, head)?;
        let (query, key) = (self.w(ids.query), self.w(ids.key));
        let (cen, mean) = self.centered(geo)?;
        let q = self.graph.channel_mix(query, cen)?;
        let k = self.graph.channel_mix(key, cen)?;
        let out = self.graph.equivariant_clip(q, k)?;
        self.graph.add_point(out, mean)
    }

    pub fn pattern_update(&mut self, geo: Var, pat: Var, layer: usize, head: usize) -> Result<Var> {
        self.check_geo(geo)?;
        self.check_pat(pat)?;
        let ids = self.model.layer_ids(layer, head)?;
        let (_, dist) = self.pair_geometry(geo)?;
        let input = self.pair_inputs(pat, dist)?;
        let msgs = self.mlp(&ids.msg, input)?;
        let agg = self.sum_incoming(msgs)?;
        let node_in = self.graph.concat_cols(&[pat, agg])?;
        self.mlp(&ids.node, node_in)
    }

    /// `[M, T_f, n]` prediction of one head. `anchor` is the mean input
    /// position from [`Pass::init_features`]; only read with the DCT enabled.
    pub fn decode_output(&mut self, geo: Var, head: usize, anchor: Var) -> Result<Var> {
        self.model.check_head(head)?;
        self.check_geo(geo)?;
        let (cen, mean) = self.centered(geo)?;
        let out = self.w(self.model.layout.heads[head].out);
        let y = self.graph.channel_mix(out, cen)?;
        let y = self.graph.add_point(y, mean)?;
        match &self.model.dct {
            Some((_, future)) => {
                self.expect_shape(anchor, "anchor", &[self.cfg().space_dim])?;
                let inv = self.graph.constant(future.inverse.clone());
                let y = self.graph.channel_mix(inv, y)?;
                self.graph.add_point(y, anchor)
            }
            None => Ok(y),
        }
    }

    /// One geometric layer: attention, aggregation, optional velocity
    /// injection, then the non-linearity.
    pub fn geometric_layer(
        &mut self,
        geo: Var,
        pat: Var,
        c: Var,
        speeds: Var,
        layer: usize,
        head: usize,
    ) -> Result<Var> {
        let g = self.inner_attention(geo, pat, layer, head)?;
        let g = self.inter_aggregate(g, pat, c, layer, head)?;
        let g = if self.cfg().use_velocity_injection {
            self.inject_velocity(g, speeds)?
        } else {
            g
        };
        self.equivariant_nonlinear(g, layer, head)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<ForwardVars> {
        let cfg = self.cfg();
        let init = self.init_features(x)?;
        let c = self.reason_interactions(init.geometric, init.pattern)?;
        let (mut geo, mut pat) = (init.geometric, init.pattern);
        let last = cfg.num_layers - 1;
        for l in 0..last {
            // Both features of layer l + 1 are computed from layer l.
            let next_geo = self.geometric_layer(geo, pat, c, init.speeds, l, 0)?;
            pat = self.pattern_update(geo, pat, l, 0)?;
            geo = next_geo;
        }
        // The final layer's pattern update would feed nothing, so it is skipped.
        let mut predictions = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let g = self.geometric_layer(geo, pat, c, init.speeds, last, h)?;
            predictions.push(self.decode_output(g, h, init.anchor)?);
        }
        Ok(ForwardVars {
            predictions,
            interactions: c,
        })
    }
}
