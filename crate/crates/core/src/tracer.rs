//! Desk-scale information-flow-route tracing.
//!
//! A small pre-norm decoder with deterministic pseudo-random weights is run
//! forward while every residual update is recorded as a node in a
//! [`TraceGraph`]. Each edge carries the vector it contributes to its target
//! and a proportional importance score. [`prune_routes`] then walks backward
//! from an output node keeping only edges above a threshold, and
//! [`circuit_membership`] projects the surviving nodes onto component ids.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationRecord, ComponentId, FactEntry, SnapshotId};

pub const ROUTE_FORMAT_VERSION: u32 = 1;

/// Default pruning threshold for route extraction.
pub const DEFAULT_THETA_IFR: f64 = 0.04;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub weight_seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 64,
            weight_seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(format!("toy model config: {m}")));
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1");
        }
        if self.num_heads < 1 {
            return bad("num_heads must be >= 1");
        }
        if self.d_model < 2 || self.d_ff < 2 || self.vocab_size < 2 {
            return bad("d_model, d_ff and vocab_size must be >= 2");
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return bad("d_model must be divisible by num_heads");
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone)]
struct Matrix {
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        // Uniform with unit-variance-preserving scale for fan-in `cols`.
        let a = (3.0 / cols as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        Self { cols, data }
    }

    fn zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }
}

struct LayerWeights {
    // Per-head projections, each d_head x d_model.
    wq: Vec<Matrix>,
    wk: Vec<Matrix>,
    wv: Vec<Matrix>,
    // Output projection, d_model x d_model; head h owns columns [h*d_head, (h+1)*d_head).
    wo: Matrix,
    w_in: Matrix,
    b_in: Vec<f64>,
    w_out: Matrix,
}

/// Deterministic toy decoder built from a [`ToyModelConfig`].
pub struct ToyModel {
    config: ToyModelConfig,
    embed: Matrix,
    layers: Vec<LayerWeights>,
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

fn scaled(x: &[f64], s: f64) -> Vec<f64> {
    x.iter().map(|v| v * s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x.powi(3))).tanh())
}

fn positional(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let d = config.d_model;
        let dh = config.d_head();
        let embed = Matrix::random(config.vocab_size, d, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| {
                let mut per_head = || {
                    (0..config.num_heads)
                        .map(|_| Matrix::random(dh, d, &mut rng))
                        .collect::<Vec<_>>()
                };
                let wq = per_head();
                let wk = per_head();
                let wv = per_head();
                LayerWeights {
                    wq,
                    wk,
                    wv,
                    wo: Matrix::random(d, d, &mut rng),
                    w_in: Matrix::random(config.d_ff, d, &mut rng),
                    b_in: (0..config.d_ff).map(|_| rng.random_range(-0.1..0.1)).collect(),
                    w_out: Matrix::random(d, config.d_ff, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            embed,
            layers,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Zeroes every attention output projection, so all head updates vanish.
    pub fn zero_attention_outputs(&mut self) {
        self.layers.iter_mut().for_each(|l| l.wo.zero());
    }

    /// Zeroes every FFN down projection, so all FFN updates vanish.
    pub fn zero_ffn_outputs(&mut self) {
        self.layers.iter_mut().for_each(|l| l.w_out.zero());
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("token sequence is empty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn input_embedding(&self, token: usize, pos: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let mut x = self.embed.data[token * d..(token + 1) * d].to_vec();
        add_into(&mut x, &positional(pos, d));
        x
    }

    fn ffn(&self, layer: &LayerWeights, x: &[f64]) -> Vec<f64> {
        let mut hidden = layer.w_in.matvec(&layer_norm(x));
        hidden
            .iter_mut()
            .zip(&layer.b_in)
            .for_each(|(h, b)| *h = gelu(*h + b));
        layer.w_out.matvec(&hidden)
    }

    fn attention_pattern(&self, layer: &LayerWeights, head: usize, normed: &[Vec<f64>], pos: usize) -> Vec<f64> {
        let scale = 1.0 / (self.config.d_head() as f64).sqrt();
        let q = layer.wq[head].matvec(&normed[pos]);
        let scores: Vec<f64> = (0..=pos)
            .map(|src| dot(&q, &layer.wk[head].matvec(&normed[src])) * scale)
            .collect();
        softmax(&scores)
    }

    /// Plain forward pass returning the final residual stream at every
    /// position. Attention output is projected through the full `W_O` from the
    /// concatenated head values, without per-head decomposition.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let dh = self.config.d_head();
        let mut stream: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| self.input_embedding(t, p))
            .collect();
        for layer in &self.layers {
            let normed: Vec<Vec<f64>> = stream.iter().map(|x| layer_norm(x)).collect();
            let mut mid = Vec::with_capacity(n);
            for (p, resid) in stream.iter().enumerate() {
                let mut concat = vec![0.0; self.config.d_model];
                for h in 0..self.config.num_heads {
                    let pattern = self.attention_pattern(layer, h, &normed, p);
                    for (src, a) in pattern.iter().enumerate() {
                        let v = layer.wv[h].matvec(&normed[src]);
                        for (i, vi) in v.iter().enumerate() {
                            concat[h * dh + i] += a * vi;
                        }
                    }
                }
                let mut x = resid.clone();
                add_into(&mut x, &layer.wo.matvec(&concat));
                mid.push(x);
            }
            stream = mid
                .into_iter()
                .map(|x| {
                    let mut out = x.clone();
                    add_into(&mut out, &self.ffn(layer, &x));
                    out
                })
                .collect();
        }
        Ok(stream)
    }

    /// Head `h`'s slice of the output projection applied to a value vector.
    fn head_output_projection(&self, layer: &LayerWeights, head: usize, v: &[f64]) -> Vec<f64> {
        let d = self.config.d_model;
        let dh = self.config.d_head();
        (0..d)
            .map(|row| {
                let w = &layer.wo.data[row * d + head * dh..row * d + (head + 1) * dh];
                dot(w, v)
            })
            .collect()
    }

    /// Runs the forward pass while recording every residual update.
    pub fn trace(&self, tokens: &[usize]) -> Result<TraceGraph> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let mut g = TraceGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            incoming: Vec::new(),
            outputs: Vec::new(),
            num_layers: self.config.num_layers,
            num_tokens: n,
        };
        // Residual-stream node feeding the current layer, per position.
        let mut stream: Vec<NodeId> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| g.add_node(NodeKind::TokenInput, None, p, None, self.input_embedding(t, p)))
            .collect();

        for (l, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<f64>> = stream.iter().map(|&id| layer_norm(&g.nodes[id].value)).collect();
            let mut next = Vec::with_capacity(n);
            for p in 0..n {
                let mut head_nodes = Vec::with_capacity(self.config.num_heads);
                for h in 0..self.config.num_heads {
                    let pattern = self.attention_pattern(layer, h, &normed, p);
                    let contributions: Vec<Vec<f64>> = pattern
                        .iter()
                        .enumerate()
                        .map(|(src, a)| {
                            let v = layer.wv[h].matvec(&normed[src]);
                            scaled(&self.head_output_projection(layer, h, &v), *a)
                        })
                        .collect();
                    let mut out = vec![0.0; self.config.d_model];
                    contributions.iter().for_each(|c| add_into(&mut out, c));
                    let comp = ComponentId::head(l as u32, h as u32);
                    let node = g.add_node(NodeKind::HeadOutput, Some(l), p, Some(comp), out);
                    let sources: Vec<NodeId> = stream[..=p].to_vec();
                    g.connect(node, &sources, contributions)?;
                    head_nodes.push(node);
                }

                // Mid-layer residual: previous stream plus every head update.
                let mut mid_sources = vec![stream[p]];
                mid_sources.extend(&head_nodes);
                let mid_updates: Vec<Vec<f64>> =
                    mid_sources.iter().map(|&id| g.nodes[id].value.clone()).collect();
                let mut mid_value = vec![0.0; self.config.d_model];
                mid_updates.iter().for_each(|u| add_into(&mut mid_value, u));
                let mid = g.add_node(NodeKind::AttnResidual, Some(l), p, None, mid_value);
                g.connect(mid, &mid_sources, mid_updates)?;

                let ffn_value = self.ffn(layer, &g.nodes[mid].value);
                let ffn = g.add_node(
                    NodeKind::FfnOutput,
                    Some(l),
                    p,
                    Some(ComponentId::ffn(l as u32)),
                    ffn_value.clone(),
                );
                g.connect(ffn, &[mid], vec![ffn_value.clone()])?;

                let mut post_value = g.nodes[mid].value.clone();
                add_into(&mut post_value, &ffn_value);
                let post = g.add_node(NodeKind::Residual, Some(l), p, None, post_value);
                let post_updates = vec![g.nodes[mid].value.clone(), ffn_value];
                g.connect(post, &[mid, ffn], post_updates)?;
                next.push(post);
            }
            stream = next;
        }

        for (p, &last) in stream.iter().enumerate() {
            let value = g.nodes[last].value.clone();
            let out = g.add_node(NodeKind::Final, None, p, None, value.clone());
            g.connect(out, &[last], vec![value])?;
            g.outputs.push(out);
        }
        Ok(g)
    }
}

/// Builds the toy model for `config` and traces `tokens` through it.
pub fn forward_trace(config: &ToyModelConfig, tokens: &[usize]) -> Result<TraceGraph> {
    ToyModel::new(config.clone())?.trace(tokens)
}

/// Proportional attribution of `update` to the sum `target` of `co_updates`.
///
/// Raw score is `max(0, |y| - |y - u|)`; scores are normalised over all
/// contributors. When every raw score is zero the mass is split evenly over
/// the non-zero updates, or over all of them if every update is zero.
pub fn edge_importance(update: &[f64], target_sum: &[f64], co_updates: &[Vec<f64>]) -> Result<f64> {
    let dim = target_sum.len();
    if update.len() != dim {
        return Err(Error::Shape {
            expected: dim,
            actual: update.len(),
        });
    }
    let all = importances(target_sum, co_updates)?;
    let raw_u = raw_score(update, target_sum);
    let total: f64 = co_updates.iter().map(|u| raw_score(u, target_sum)).sum();
    if total > 0.0 {
        return Ok(raw_u / total);
    }
    let is_zero = |u: &[f64]| u.iter().all(|&x| x == 0.0);
    let nonzero = co_updates.iter().filter(|u| !is_zero(u)).count();
    Ok(match (nonzero, is_zero(update)) {
        (0, _) => 1.0 / all.len() as f64,
        (_, true) => 0.0,
        (k, false) => 1.0 / k as f64,
    })
}

fn raw_score(update: &[f64], target: &[f64]) -> f64 {
    let residual: Vec<f64> = target.iter().zip(update).map(|(y, u)| y - u).collect();
    (norm(target) - norm(&residual)).max(0.0)
}

/// Importances of every contributor in `co_updates` towards `target_sum`.
pub fn importances(target_sum: &[f64], co_updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = target_sum.len();
    if co_updates.is_empty() {
        return Err(Error::Input("no contributors".into()));
    }
    if let Some(bad) = co_updates.iter().find(|u| u.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: bad.len(),
        });
    }
    let raw: Vec<f64> = co_updates.iter().map(|u| raw_score(u, target_sum)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        return Ok(raw.into_iter().map(|r| r / total).collect());
    }
    let zero: Vec<bool> = co_updates.iter().map(|u| u.iter().all(|&x| x == 0.0)).collect();
    let nonzero = zero.iter().filter(|z| !**z).count();
    Ok(if nonzero == 0 {
        vec![1.0 / co_updates.len() as f64; co_updates.len()]
    } else {
        zero.iter()
            .map(|&z| if z { 0.0 } else { 1.0 / nonzero as f64 })
            .collect()
    })
}

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    TokenInput,
    HeadOutput,
    /// Residual stream after the attention sublayer.
    AttnResidual,
    FfnOutput,
    /// Residual stream after the FFN sublayer.
    Residual,
    Final,
}

impl NodeKind {
    pub fn is_residual(self) -> bool {
        matches!(self, NodeKind::AttnResidual | NodeKind::Residual)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::TokenInput => "token",
            NodeKind::HeadOutput => "head",
            NodeKind::AttnResidual => "resid_mid",
            NodeKind::FfnOutput => "ffn",
            NodeKind::Residual => "resid_post",
            NodeKind::Final => "final",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub layer: Option<usize>,
    pub pos: usize,
    pub component: Option<ComponentId>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub update: Vec<f64>,
    pub importance: f64,
}

/// Weighted computational graph of one forward pass. Immutable once built.
#[derive(Debug, Clone)]
pub struct TraceGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<EdgeId>>,
    outputs: Vec<NodeId>,
    num_layers: usize,
    num_tokens: usize,
}

impl TraceGraph {
    fn add_node(
        &mut self,
        kind: NodeKind,
        layer: Option<usize>,
        pos: usize,
        component: Option<ComponentId>,
        value: Vec<f64>,
    ) -> NodeId {
        self.nodes.push(Node {
            kind,
            layer,
            pos,
            component,
            value,
        });
        self.incoming.push(Vec::new());
        self.nodes.len() - 1
    }

    fn connect(&mut self, target: NodeId, sources: &[NodeId], updates: Vec<Vec<f64>>) -> Result<()> {
        let weights = {
            let mut sum = vec![0.0; self.nodes[target].value.len()];
            updates.iter().for_each(|u| add_into(&mut sum, u));
            importances(&sum, &updates)?
        };
        for ((&source, update), importance) in sources.iter().zip(updates).zip(weights) {
            self.edges.push(Edge {
                source,
                target,
                update,
                importance,
            });
            self.incoming[target].push(self.edges.len() - 1);
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn incoming(&self, node: NodeId) -> &[EdgeId] {
        &self.incoming[node]
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    /// Output node at token position `pos`.
    pub fn output_node(&self, pos: usize) -> Option<NodeId> {
        self.outputs.get(pos).copied()
    }

    /// Output node at the last position, the route root for next-token prediction.
    pub fn final_node(&self) -> NodeId {
        *self.outputs.last().expect("trace graph has at least one token")
    }

    /// Sum of incoming edge importances at every residual node.
    pub fn residual_importance_sums(&self) -> Vec<(NodeId, f64)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind.is_residual())
            .map(|(id, _)| (id, self.incoming[id].iter().map(|&e| self.edges[e].importance).sum()))
            .collect()
    }
}

/// Nodes and edges of a [`TraceGraph`] reachable backward from one output
/// node through edges whose importance exceeds `theta`.
#[derive(Debug, Clone)]
pub struct RouteSubgraph<'g> {
    graph: &'g TraceGraph,
    theta: f64,
    output_pos: usize,
    nodes: BTreeSet<NodeId>,
    edges: BTreeSet<EdgeId>,
}

impl PartialEq for RouteSubgraph<'_> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.graph, other.graph)
            && self.theta == other.theta
            && self.output_pos == other.output_pos
            && self.nodes == other.nodes
            && self.edges == other.edges
    }
}

impl<'g> RouteSubgraph<'g> {
    pub fn graph(&self) -> &'g TraceGraph {
        self.graph
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn output_pos(&self) -> usize {
        self.output_pos
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<EdgeId> {
        &self.edges
    }

    /// Components whose head or FFN node appears anywhere in the route.
    pub fn components(&self) -> BTreeSet<ComponentId> {
        self.nodes
            .iter()
            .filter_map(|&id| self.graph.nodes[id].component)
            .collect()
    }

    /// Line-oriented node/edge table of the retained subgraph.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# route format_version={ROUTE_FORMAT_VERSION} theta={} output_pos={}",
            self.theta, self.output_pos
        );
        for &id in &self.nodes {
            let n = &self.graph.nodes[id];
            let layer = n.layer.map_or_else(|| "-".to_string(), |l| l.to_string());
            let comp = n.component.map_or_else(|| "-".to_string(), |c| c.to_string());
            let _ = writeln!(out, "node {id} {} {layer} {} {comp}", n.kind.as_str(), n.pos);
        }
        for &id in &self.edges {
            let e = &self.graph.edges[id];
            let _ = writeln!(out, "edge {} {} {:.6}", e.source, e.target, e.importance);
        }
        out
    }
}

/// Route for next-token prediction at the last position.
pub fn prune_routes(graph: &TraceGraph, theta_ifr: f64) -> Result<RouteSubgraph<'_>> {
    prune_route_at(graph, graph.num_tokens - 1, theta_ifr)
}

/// Route rooted at the output node of position `pos`.
pub fn prune_route_at(graph: &TraceGraph, pos: usize, theta_ifr: f64) -> Result<RouteSubgraph<'_>> {
    if !(0.0..=1.0).contains(&theta_ifr) {
        return Err(Error::Input(format!("theta_ifr {theta_ifr} must lie in [0, 1]")));
    }
    let root = graph
        .output_node(pos)
        .ok_or_else(|| Error::Input(format!("no output node at position {pos}")))?;
    let mut nodes = BTreeSet::from([root]);
    let mut edges = BTreeSet::new();
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        for &e in graph.incoming(node) {
            let edge = &graph.edges[e];
            if edge.importance > theta_ifr {
                edges.insert(e);
                if nodes.insert(edge.source) {
                    stack.push(edge.source);
                }
            }
        }
    }
    Ok(RouteSubgraph {
        graph,
        theta: theta_ifr,
        output_pos: pos,
        nodes,
        edges,
    })
}

/// One route per output position of `graph`.
pub fn prune_all_positions(graph: &TraceGraph, theta_ifr: f64) -> Result<Vec<RouteSubgraph<'_>>> {
    (0..graph.num_tokens)
        .map(|p| prune_route_at(graph, p, theta_ifr))
        .collect()
}

/// Projects per-position routes of `fact` onto activation records.
///
/// `routes[t]` must be the route rooted at output position `t` of a trace over
/// the fact's own subtoken sequence.
pub fn circuit_membership(
    routes: &[RouteSubgraph<'_>],
    fact: &FactEntry,
    snapshot: SnapshotId,
) -> Result<Vec<ActivationRecord>> {
    if routes.len() != fact.len() {
        return Err(Error::Consistency(format!(
            "fact {} has {} subtokens but {} routes were given",
            fact.fact_id,
            fact.len(),
            routes.len()
        )));
    }
    routes
        .iter()
        .enumerate()
        .map(|(t, route)| {
            if route.graph.num_tokens != fact.len() || route.output_pos != t {
                return Err(Error::Consistency(format!(
                    "route {t} for fact {} was traced over {} tokens at position {}",
                    fact.fact_id, route.graph.num_tokens, route.output_pos
                )));
            }
            Ok(ActivationRecord {
                snapshot,
                fact_id: fact.fact_id.clone(),
                token_pos: t,
                active_components: route.components(),
            })
        })
        .collect()
}

/// Stable token-string to vocabulary-id mapping (FNV-1a modulo vocabulary).
pub fn token_ids(subtokens: &[String], vocab_size: usize) -> Vec<usize> {
    subtokens
        .iter()
        .map(|s| {
            let h = s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
            });
            (h % vocab_size as u64) as usize
        })
        .collect()
}

/// Traces `fact` through `model` and returns one activation record per position.
pub fn trace_fact(
    model: &ToyModel,
    fact: &FactEntry,
    snapshot: SnapshotId,
    theta_ifr: f64,
) -> Result<Vec<ActivationRecord>> {
    let tokens = token_ids(&fact.subtokens, model.config.vocab_size);
    let graph = model.trace(&tokens)?;
    let routes = prune_all_positions(&graph, theta_ifr)?;
    circuit_membership(&routes, fact, snapshot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Span;

    fn cfg(layers: usize, heads: usize, seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            num_layers: layers,
            num_heads: heads,
            d_model: 4 * heads,
            d_ff: 8,
            vocab_size: 32,
            weight_seed: seed,
        }
    }

    #[test]
    fn single_head_graph_has_one_head_and_ffn_per_position() {
        let g = forward_trace(&cfg(1, 1, 3), &[1, 2, 3]).unwrap();
        for p in 0..3 {
            let at = |k: NodeKind| g.nodes().iter().filter(|n| n.kind == k && n.pos == p).count();
            assert_eq!(at(NodeKind::HeadOutput), 1);
            assert_eq!(at(NodeKind::FfnOutput), 1);
            assert_eq!(at(NodeKind::Final), 1);
        }
    }

    #[test]
    fn trace_values_match_plain_forward() {
        let model = ToyModel::new(cfg(3, 2, 11)).unwrap();
        let tokens = [5, 9, 0, 31];
        let plain = model.forward(&tokens).unwrap();
        let g = model.trace(&tokens).unwrap();
        for (p, expected) in plain.iter().enumerate() {
            let got = &g.nodes()[g.output_node(p).unwrap()].value;
            for (a, b) in got.iter().zip(expected) {
                assert!((a - b).abs() < 1e-9, "position {p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zeroed_outputs_get_zero_importance() {
        let mut model = ToyModel::new(cfg(2, 2, 5)).unwrap();
        model.zero_attention_outputs();
        model.zero_ffn_outputs();
        let g = model.trace(&[1, 2, 3]).unwrap();
        for e in g.edges() {
            let src = g.nodes()[e.source].kind;
            if matches!(src, NodeKind::HeadOutput | NodeKind::FfnOutput) {
                assert_eq!(e.importance, 0.0);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        assert!(forward_trace(&cfg(1, 1, 0), &[40]).is_err());
        assert!(forward_trace(&cfg(1, 1, 0), &[]).is_err());
        let bad = ToyModelConfig {
            d_model: 5,
            num_heads: 2,
            ..ToyModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn edge_importance_cases() {
        let u = vec![1.0, -2.0, 0.5];
        assert_eq!(edge_importance(&u, &u, std::slice::from_ref(&u)).unwrap(), 1.0);

        let zero = vec![0.0; 3];
        let other = vec![2.0, 1.0, 0.0];
        let imp = edge_importance(&zero, &other, &[zero.clone(), other.clone()]).unwrap();
        assert_eq!(imp, 0.0);

        let target: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        let half = edge_importance(&u, &target, &[u.clone(), u.clone()]).unwrap();
        assert!((half - 0.5).abs() < 1e-12);

        assert!(matches!(
            edge_importance(&[1.0], &target, std::slice::from_ref(&u)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cancelling_updates_leave_zero_update_at_zero() {
        let u = vec![1.0, 1.0];
        let neg = vec![-1.0, -1.0];
        let zero = vec![0.0, 0.0];
        let w = importances(&[0.0, 0.0], &[u, neg, zero]).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn threshold_extremes() {
        let g = forward_trace(&cfg(2, 2, 9), &[3, 4, 5]).unwrap();
        let top = prune_routes(&g, 1.0).unwrap();
        assert_eq!(top.nodes().len(), 1);
        assert!(top.edges().is_empty());
        assert!(top.components().is_empty());

        let all = prune_routes(&g, 0.0).unwrap();
        let root = g.final_node();
        for &e in all.edges() {
            assert!(g.edges()[e].importance > 0.0);
        }
        assert!(all.nodes().contains(&root));
        assert!(prune_routes(&g, 1.5).is_err());
    }

    #[test]
    fn membership_projects_components() {
        let g = forward_trace(&cfg(2, 2, 1), &[1, 2]).unwrap();
        let fact = FactEntry {
            fact_id: "f".into(),
            relation_id: "r".into(),
            group: None,
            subtokens: vec!["x".into(), "y".into()],
            subject_span: Span::new(0, 1),
            answer_span: Span::new(1, 2),
            gold_answer: "y".into(),
            final_period_index: None,
        };
        // A hand-built route keeping only the layer-0 FFN nodes.
        let ffn0: BTreeSet<NodeId> = g
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::FfnOutput && n.layer == Some(0))
            .map(|(i, _)| i)
            .collect();
        let routes: Vec<RouteSubgraph> = (0..2)
            .map(|p| RouteSubgraph {
                graph: &g,
                theta: 0.5,
                output_pos: p,
                nodes: ffn0.iter().copied().chain([g.output_node(p).unwrap()]).collect(),
                edges: BTreeSet::new(),
            })
            .collect();
        let recs = circuit_membership(&routes, &fact, SnapshotId::Main).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].active_components, BTreeSet::from([ComponentId::ffn(0)]));

        let empty = prune_all_positions(&g, 1.0).unwrap();
        let recs = circuit_membership(&empty, &fact, SnapshotId::Main).unwrap();
        assert!(recs.iter().all(|r| r.active_components.is_empty()));

        assert!(circuit_membership(&empty[..1], &fact, SnapshotId::Main).is_err());
    }

    #[test]
    fn route_table_lists_nodes_and_edges() {
        let g = forward_trace(&cfg(1, 1, 2), &[1, 2]).unwrap();
        let r = prune_routes(&g, 0.0).unwrap();
        let table = r.to_table();
        assert!(table.starts_with("# route format_version=1"));
        assert_eq!(table.lines().filter(|l| l.starts_with("node ")).count(), r.nodes().len());
        assert_eq!(table.lines().filter(|l| l.starts_with("edge ")).count(), r.edges().len());
    }
}
