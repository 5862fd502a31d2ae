//! The window encoder: a one-layer graph convolution per timestep, a dense
//! graph–signal interaction layer, a bidirectional GRU over the window and a
//! linear head on the concatenated final states.
//!
//! With `use_graph = false` the graph path is dropped and the GRU reads the
//! raw signal only (the signal-only TNC encoder).

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{EdgeSet, WindowPair};
use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_inplace, slice_of, slice_of_mut, uniform_matrix, Dense, Gru, GruTrace,
    Parameters,
};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_nodes: usize,
    /// Node embedding size `k`.
    pub graph_embed_dim: usize,
    /// Graph–signal interaction size `d`.
    pub interaction_dim: usize,
    /// Hidden size per GRU direction.
    pub gru_hidden: usize,
    /// Representation size `h`.
    pub repr_dim: usize,
    #[serde(default = "default_true")]
    pub use_graph: bool,
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    pub fn synthetic() -> Self {
        Self {
            n_nodes: 10,
            graph_embed_dim: 4,
            interaction_dim: 8,
            gru_hidden: 64,
            repr_dim: 8,
            use_graph: true,
        }
    }

    pub fn eeg() -> Self {
        Self {
            n_nodes: 32,
            graph_embed_dim: 4,
            interaction_dim: 32,
            gru_hidden: 64,
            repr_dim: 32,
            use_graph: true,
        }
    }

    /// The same encoder without the graph path.
    pub fn signal_only(&self) -> Self {
        Self {
            use_graph: false,
            ..self.clone()
        }
    }

    pub fn gru_input_dim(&self) -> usize {
        if self.use_graph {
            self.n_nodes + self.interaction_dim
        } else {
            self.n_nodes
        }
    }

    pub fn interaction_input_dim(&self) -> usize {
        self.n_nodes * self.graph_embed_dim + self.n_nodes
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_nodes,
            self.graph_embed_dim,
            self.interaction_dim,
            self.gru_hidden,
            self.repr_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "encoder dimensions must be ≥ 1, got {dims:?}"
            )));
        }
        Ok(())
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(&self) -> usize {
        let (n, k, d, s, h) = (
            self.n_nodes,
            self.graph_embed_dim,
            self.interaction_dim,
            self.gru_hidden,
            self.repr_dim,
        );
        let graph = if self.use_graph {
            n * k + (self.interaction_input_dim() * d + d)
        } else {
            0
        };
        let gru = 2 * 3 * (self.gru_input_dim() * s + s * s + s);
        graph + gru + 2 * s * h + h
    }
}

/// `f^G` weight and the interaction layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphModule {
    /// `N×k`; node inputs are one-hot identities so this is the full GCN weight.
    pub gcn_weight: Array2<f64>,
    pub interaction: Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub graph: Option<GraphModule>,
    pub gru_forward: Gru,
    pub gru_backward: Gru,
    pub head: Dense,
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        if let Some(g) = &self.graph {
            out.push(("gcn.weight", slice_of(&g.gcn_weight)));
            g.interaction
                .push_tensors(&mut out, "interaction.weight", "interaction.bias");
        }
        self.gru_forward.push_tensors(
            &mut out,
            ["gru_fwd.w_input", "gru_fwd.w_hidden", "gru_fwd.bias"],
        );
        self.gru_backward.push_tensors(
            &mut out,
            ["gru_bwd.w_input", "gru_bwd.w_hidden", "gru_bwd.bias"],
        );
        self.head.push_tensors(&mut out, "head.weight", "head.bias");
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(g) = &mut self.graph {
            out.push(("gcn.weight", slice_of_mut(&mut g.gcn_weight)));
            g.interaction
                .push_tensors_mut(&mut out, "interaction.weight", "interaction.bias");
        }
        self.gru_forward.push_tensors_mut(
            &mut out,
            ["gru_fwd.w_input", "gru_fwd.w_hidden", "gru_fwd.bias"],
        );
        self.gru_backward.push_tensors_mut(
            &mut out,
            ["gru_bwd.w_input", "gru_bwd.w_hidden", "gru_bwd.bias"],
        );
        self.head
            .push_tensors_mut(&mut out, "head.weight", "head.bias");
        out
    }
}

/// Weights uniform in ±1/√fan_in, biases zero.
pub fn init_encoder(config: &EncoderConfig, rng: &mut Rng) -> Result<EncoderParams> {
    config.validate()?;
    let graph = config.use_graph.then(|| GraphModule {
        gcn_weight: uniform_matrix(config.n_nodes, config.graph_embed_dim, config.n_nodes, rng),
        interaction: Dense::init(config.interaction_input_dim(), config.interaction_dim, rng),
    });
    let gru_forward = Gru::init(config.gru_input_dim(), config.gru_hidden, rng);
    let gru_backward = Gru::init(config.gru_input_dim(), config.gru_hidden, rng);
    let head = Dense::init(2 * config.gru_hidden, config.repr_dim, rng);
    Ok(EncoderParams {
        config: config.clone(),
        graph,
        gru_forward,
        gru_backward,
        head,
    })
}

pub fn param_count(params: &EncoderParams) -> usize {
    params.param_count()
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for a binary undirected graph.
pub fn normalized_adjacency(edges: &EdgeSet, n_nodes: usize) -> Array2<f64> {
    let mut degree = vec![1.0f64; n_nodes];
    for &(i, j) in edges.pairs() {
        degree[i] += 1.0;
        degree[j] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut a = Array2::zeros((n_nodes, n_nodes));
    for i in 0..n_nodes {
        a[[i, i]] = inv_sqrt[i] * inv_sqrt[i];
    }
    for &(i, j) in edges.pairs() {
        let v = inv_sqrt[i] * inv_sqrt[j];
        a[[i, j]] = v;
        a[[j, i]] = v;
    }
    a
}

fn check_edges(edges: &EdgeSet, n_nodes: usize) -> Result<()> {
    match edges.max_node() {
        Some(m) if m >= n_nodes => Err(Error::Shape(format!(
            "edge references node {m} but the encoder has {n_nodes} nodes"
        ))),
        _ => Ok(()),
    }
}

fn graph_module(params: &EncoderParams) -> Result<&GraphModule> {
    params
        .graph
        .as_ref()
        .ok_or_else(|| Error::Config("encoder has no graph module".into()))
}

/// Node embeddings `H = relu(Â W)` for one graph.
pub fn graph_embed(edges: &EdgeSet, params: &EncoderParams) -> Result<Array2<f64>> {
    let g = graph_module(params)?;
    check_edges(edges, params.config.n_nodes)?;
    let mut h = normalized_adjacency(edges, params.config.n_nodes).dot(&g.gcn_weight);
    relu_inplace(&mut h);
    Ok(h)
}

/// Column-stacking `vec(H)` followed by the signal values.
fn interaction_input(h: &Array2<f64>, x: impl Iterator<Item = f64>, out: &mut [f64]) {
    let n = h.nrows();
    for c in 0..h.ncols() {
        for i in 0..n {
            out[c * n + i] = h[[i, c]];
        }
    }
    for (slot, v) in out[n * h.ncols()..].iter_mut().zip(x) {
        *slot = v;
    }
}

/// `e = relu(W₁ [vec(H) ‖ x] + b₁)`.
pub fn interact(h: &Array2<f64>, x: &Array1<f64>, params: &EncoderParams) -> Result<Array1<f64>> {
    let g = graph_module(params)?;
    let cfg = &params.config;
    if h.dim() != (cfg.n_nodes, cfg.graph_embed_dim) || x.len() != cfg.n_nodes {
        return Err(Error::Shape(format!(
            "interaction expects H {}×{} and x of length {}, got {:?} and {}",
            cfg.n_nodes,
            cfg.graph_embed_dim,
            cfg.n_nodes,
            h.dim(),
            x.len()
        )));
    }
    let mut input = Array2::zeros((1, cfg.interaction_input_dim()));
    interaction_input(h, x.iter().copied(), input.as_slice_mut().unwrap());
    let mut e = g.interaction.forward(&input.view());
    relu_inplace(&mut e);
    Ok(e.row(0).to_owned())
}

struct GraphStep {
    adjacency: Vec<Array2<f64>>,
    pre_embed: Vec<Array2<f64>>,
    interaction_input: Array2<f64>,
    interaction_out: Array2<f64>,
}

/// Everything the backward pass needs from a batched forward pass.
pub struct EncoderTrace {
    graph_steps: Vec<GraphStep>,
    forward: GruTrace,
    backward: GruTrace,
    final_states: Array2<f64>,
    n_nodes: usize,
}

/// Encode a batch of equal-width windows; row `b` of the result is `z` for `windows[b]`.
pub fn encode_batch(
    params: &EncoderParams,
    windows: &[WindowPair<'_>],
) -> Result<(Array2<f64>, EncoderTrace)> {
    let cfg = &params.config;
    let n = cfg.n_nodes;
    let width = windows
        .first()
        .map(|w| w.width)
        .ok_or_else(|| Error::Empty("no windows to encode".into()))?;
    if width == 0 {
        return Err(Error::ZeroWidth);
    }
    for w in windows {
        if w.width != width || w.signal.dim() != (n, width) || w.graphs.len() != width {
            return Err(Error::Shape(format!(
                "window of signal {:?} with {} graphs does not match N={n}, w={width}",
                w.signal.dim(),
                w.graphs.len()
            )));
        }
    }
    let batch = windows.len();
    let mut graph_steps = Vec::new();
    let mut gru_inputs = Vec::with_capacity(width);
    for i in 0..width {
        let mut x = Array2::zeros((batch, n));
        for (b, w) in windows.iter().enumerate() {
            x.row_mut(b).assign(&w.signal.column(i));
        }
        match &params.graph {
            None => gru_inputs.push(x),
            Some(g) => {
                let mut input = Array2::zeros((batch, cfg.interaction_input_dim()));
                let mut adjacency = Vec::with_capacity(batch);
                let mut pre_embed = Vec::with_capacity(batch);
                for (b, w) in windows.iter().enumerate() {
                    check_edges(&w.graphs[i], n)?;
                    let a = normalized_adjacency(&w.graphs[i], n);
                    let pre = a.dot(&g.gcn_weight);
                    let h = pre.mapv(|v| v.max(0.0));
                    let mut row = input.row_mut(b);
                    interaction_input(
                        &h,
                        w.signal.column(i).iter().copied(),
                        row.as_slice_mut().unwrap(),
                    );
                    adjacency.push(a);
                    pre_embed.push(pre);
                }
                let mut e = g.interaction.forward(&input.view());
                relu_inplace(&mut e);
                gru_inputs.push(concatenate![Axis(1), x, e]);
                graph_steps.push(GraphStep {
                    adjacency,
                    pre_embed,
                    interaction_input: input,
                    interaction_out: e,
                });
            }
        }
    }
    let (h_fwd, forward) = params.gru_forward.forward(gru_inputs.clone(), false);
    let (h_bwd, backward) = params.gru_backward.forward(gru_inputs, true);
    let final_states = concatenate![Axis(1), h_fwd, h_bwd];
    let z = params.head.forward(&final_states.view());
    Ok((
        z,
        EncoderTrace {
            graph_steps,
            forward,
            backward,
            final_states,
            n_nodes: n,
        },
    ))
}

/// Gradients of `Σ_b dz[b]·z[b]` with respect to every encoder parameter,
/// accumulated into `grad`.
pub fn encode_batch_backward(
    params: &EncoderParams,
    trace: &EncoderTrace,
    dz: &Array2<f64>,
    grad: &mut EncoderParams,
) {
    let s = params.config.gru_hidden;
    let n = trace.n_nodes;
    let d_states = params
        .head
        .backward(&trace.final_states.view(), &dz.view(), &mut grad.head);
    let dh_fwd = d_states.slice(s![.., ..s]).to_owned();
    let dh_bwd = d_states.slice(s![.., s..]).to_owned();
    let dx_fwd = params
        .gru_forward
        .backward(&trace.forward, &dh_fwd, &mut grad.gru_forward);
    let dx_bwd = params
        .gru_backward
        .backward(&trace.backward, &dh_bwd, &mut grad.gru_backward);

    let (Some(g), Some(gg)) = (&params.graph, &mut grad.graph) else {
        return;
    };
    let k = g.gcn_weight.ncols();
    for (i, step) in trace.graph_steps.iter().enumerate() {
        let mut de = &dx_fwd[i].slice(s![.., n..]) + &dx_bwd[i].slice(s![.., n..]);
        relu_backward(&step.interaction_out, &mut de);
        let du = g.interaction.backward(
            &step.interaction_input.view(),
            &de.view(),
            &mut gg.interaction,
        );
        for (b, (a, pre)) in step.adjacency.iter().zip(&step.pre_embed).enumerate() {
            let mut dpre = Array2::zeros((n, k));
            for c in 0..k {
                for node in 0..n {
                    if pre[[node, c]] > 0.0 {
                        dpre[[node, c]] = du[[b, c * n + node]];
                    }
                }
            }
            // Â is symmetric, so Âᵀ dG = Â dG.
            gg.gcn_weight += &a.dot(&dpre);
        }
    }
}

/// Representation of a single window.
pub fn encode_window(window: &WindowPair<'_>, params: &EncoderParams) -> Result<Array1<f64>> {
    let (z, _) = encode_batch(params, std::slice::from_ref(window))?;
    Ok(z.row(0).to_owned())
}

/// Representations of many windows, batched in chunks to bound memory.
pub fn encode_many(params: &EncoderParams, windows: &[WindowPair<'_>]) -> Result<Array2<f64>> {
    const CHUNK: usize = 256;
    let mut rows = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        let (z, _) = encode_batch(params, chunk)?;
        rows.push(z);
    }
    if rows.is_empty() {
        return Ok(Array2::zeros((0, params.config.repr_dim)));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share the representation width"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DynamicGraphSequence, MultivariateSeries, Sample};
    use crate::rng::seeded;
    use ndarray::array;

    fn toy_sample(n: usize, t: usize, seed: u64) -> Sample {
        let mut rng = seeded(seed);
        let values = uniform_matrix(n, t, 1, &mut rng);
        let edges = (0..t)
            .map(|i| {
                EdgeSet::from_pairs(
                    n,
                    (0..n - 1).filter(|j| (i + j) % 3 != 0).map(|j| (j, j + 1)),
                )
                .unwrap()
            })
            .collect();
        Sample::new(
            MultivariateSeries::new(values, None).unwrap(),
            DynamicGraphSequence::new(n, edges).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn table_dimensions() {
        let p = init_encoder(&EncoderConfig::synthetic(), &mut seeded(0)).unwrap();
        assert_eq!(p.gru_forward.inputs(), 18);
        assert_eq!(p.graph.as_ref().unwrap().interaction.inputs(), 50);
        assert_eq!(p.graph.as_ref().unwrap().interaction.outputs(), 8);
        let p = init_encoder(&EncoderConfig::eeg(), &mut seeded(0)).unwrap();
        assert_eq!(p.gru_forward.inputs(), 64);
        assert_eq!(p.graph.as_ref().unwrap().interaction.inputs(), 160);
        assert_eq!(p.graph.as_ref().unwrap().interaction.outputs(), 32);
        let p = init_encoder(&EncoderConfig::synthetic().signal_only(), &mut seeded(0)).unwrap();
        assert_eq!(p.gru_forward.inputs(), 10);
        assert!(init_encoder(
            &EncoderConfig {
                gru_hidden: 0,
                ..EncoderConfig::synthetic()
            },
            &mut seeded(0)
        )
        .is_err());
    }

    #[test]
    fn param_counts_match_closed_form() {
        for cfg in [
            EncoderConfig::synthetic(),
            EncoderConfig::eeg(),
            EncoderConfig::synthetic().signal_only(),
        ] {
            let p = init_encoder(&cfg, &mut seeded(1)).unwrap();
            assert_eq!(param_count(&p), cfg.param_count());
        }
        let p = init_encoder(&EncoderConfig::synthetic(), &mut seeded(1)).unwrap();
        let g = p.graph.as_ref().unwrap();
        assert_eq!(g.gcn_weight.len(), 40);
        assert_eq!(g.interaction.weight.len() + g.interaction.bias.len(), 408);
        let gru: usize = [&p.gru_forward, &p.gru_backward]
            .iter()
            .map(|g| g.param_count())
            .sum();
        assert_eq!(gru, 31_872);
        assert_eq!(p.head.weight.len() + p.head.bias.len(), 128 * 8 + 8);
        assert_eq!(EncoderConfig::eeg().param_count(), 58_944);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_encoder(&EncoderConfig::synthetic(), &mut seeded(5)).unwrap();
        let b = init_encoder(&EncoderConfig::synthetic(), &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        assert!(a
            .graph
            .as_ref()
            .unwrap()
            .interaction
            .bias
            .iter()
            .all(|&v| v == 0.0));
        let bound = 1.0 / (50f64).sqrt();
        assert!(a
            .graph
            .unwrap()
            .interaction
            .weight
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn empty_graph_embedding_is_relu_of_weight() {
        let p = init_encoder(&EncoderConfig::synthetic(), &mut seeded(2)).unwrap();
        let h = graph_embed(&EdgeSet::empty(), &p).unwrap();
        assert_eq!(h.dim(), (10, 4));
        assert_eq!(h, p.graph.as_ref().unwrap().gcn_weight.mapv(|v| v.max(0.0)));
        let bad = EdgeSet::from_pairs(12, [(0, 11)]).unwrap();
        assert!(graph_embed(&bad, &p).is_err());
    }

    #[test]
    fn two_node_graph_has_equal_rows() {
        let cfg = EncoderConfig {
            n_nodes: 2,
            ..EncoderConfig::synthetic()
        };
        let p = init_encoder(&cfg, &mut seeded(3)).unwrap();
        let e = EdgeSet::from_pairs(2, [(0, 1)]).unwrap();
        let a = normalized_adjacency(&e, 2);
        assert!(a
            .iter()
            .zip(array![[0.5, 0.5], [0.5, 0.5]].iter())
            .all(|(x, y)| (x - y).abs() < 1e-15));
        let h = graph_embed(&e, &p).unwrap();
        assert_eq!(h.row(0), h.row(1));
    }

    #[test]
    fn zero_interaction_weights_give_zero() {
        let mut p = init_encoder(&EncoderConfig::synthetic(), &mut seeded(3)).unwrap();
        let g = p.graph.as_mut().unwrap();
        g.interaction.weight.fill(0.0);
        let h = graph_embed(&EdgeSet::empty(), &p).unwrap();
        let e = interact(&h, &Array1::ones(10), &p).unwrap();
        assert_eq!(e.len(), 8);
        assert!(e.iter().all(|&v| v == 0.0));
        assert!(interact(&h, &Array1::ones(9), &p).is_err());
    }

    #[test]
    fn encoding_shapes_zero_params_and_purity() {
        let sample = toy_sample(10, 40, 9);
        let w = sample.window(5, 20).unwrap();
        let p = init_encoder(&EncoderConfig::synthetic(), &mut seeded(4)).unwrap();
        let z = encode_window(&w, &p).unwrap();
        assert_eq!(z.len(), 8);
        assert_eq!(z, encode_window(&w, &p).unwrap());
        assert_eq!(
            encode_window(&w, &p.zeros_like()).unwrap(),
            Array1::<f64>::zeros(8)
        );
    }

    #[test]
    fn batched_encoding_matches_single_windows() {
        let sample = toy_sample(10, 60, 1);
        let p = init_encoder(&EncoderConfig::synthetic(), &mut seeded(8)).unwrap();
        let windows: Vec<_> = [0, 7, 33]
            .iter()
            .map(|&t| sample.window(t, 20).unwrap())
            .collect();
        let (z, _) = encode_batch(&p, &windows).unwrap();
        for (b, w) in windows.iter().enumerate() {
            let single = encode_window(w, &p).unwrap();
            for j in 0..8 {
                assert!((z[[b, j]] - single[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_embedding_commutes_with_node_permutation() {
        let p = init_encoder(&EncoderConfig::synthetic(), &mut seeded(6)).unwrap();
        let edges = EdgeSet::from_pairs(10, [(0, 3), (3, 7), (2, 9), (1, 2), (4, 5)]).unwrap();
        let perm = [3, 0, 8, 1, 9, 2, 4, 6, 5, 7];
        let permuted =
            EdgeSet::from_pairs(10, edges.pairs().iter().map(|&(a, b)| (perm[a], perm[b])))
                .unwrap();
        let mut q = p.clone();
        let w = &p.graph.as_ref().unwrap().gcn_weight;
        for i in 0..10 {
            q.graph
                .as_mut()
                .unwrap()
                .gcn_weight
                .row_mut(perm[i])
                .assign(&w.row(i));
        }
        let h = graph_embed(&edges, &p).unwrap();
        let hp = graph_embed(&permuted, &q).unwrap();
        for i in 0..10 {
            for c in 0..4 {
                assert!((hp[[perm[i], c]] - h[[i, c]]).abs() < 1e-14);
            }
        }
    }
}
