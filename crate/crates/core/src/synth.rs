//! The synthetic benchmark: an HMM picks a hidden state per timestep, each
//! state drives its own latent feature generator and its own evolving
//! Erdős–Rényi graph, and the observed signal is the graph-filtered mix
//! `x_{t+1} = r·A_t·f_t + (1 − r)·f_t`.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    DatasetMeta, DynamicGraphSequence, EdgeSet, LabeledDataset, MultivariateSeries, Sample,
};
use crate::error::{Error, Result};
use crate::rng::{digest_json, stream, Rng};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmSpec {
    pub n_states: usize,
    /// Row-stochastic `S×S` transition matrix.
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

impl HmmSpec {
    /// `S` states that stay put with probability `stay` and otherwise move uniformly.
    pub fn sticky(n_states: usize, stay: f64) -> Self {
        let off = if n_states > 1 {
            (1.0 - stay) / (n_states - 1) as f64
        } else {
            0.0
        };
        let transition = (0..n_states)
            .map(|i| {
                (0..n_states)
                    .map(|j| {
                        if i == j {
                            if n_states > 1 {
                                stay
                            } else {
                                1.0
                            }
                        } else {
                            off
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            n_states,
            transition,
            initial: vec![1.0 / n_states as f64; n_states],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_states;
        if s == 0 {
            return Err(Error::Config("HMM needs at least one state".into()));
        }
        if self.initial.len() != s
            || self.transition.len() != s
            || self.transition.iter().any(|r| r.len() != s)
        {
            return Err(Error::Config(format!(
                "HMM matrices must be {s}×{s} with a length-{s} initial vector"
            )));
        }
        let check = |row: &[f64], what: &str| -> Result<()> {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Config(format!(
                    "{what} has a negative or non-finite entry"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Config(format!("{what} sums to {total}, not 1")));
            }
            Ok(())
        };
        check(&self.initial, "initial distribution")?;
        for (i, row) in self.transition.iter().enumerate() {
            check(row, &format!("transition row {i}"))?;
        }
        Ok(())
    }
}

fn draw_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last state with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Sample a state path: `s_0 ~ initial`, `s_{t+1} ~ transition[s_t]`.
pub fn sample_states(hmm: &HmmSpec, length: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    hmm.validate()?;
    let mut states = Vec::with_capacity(length);
    if length == 0 {
        return Ok(states);
    }
    let mut s = draw_categorical(&hmm.initial, rng);
    states.push(s);
    for _ in 1..length {
        s = draw_categorical(&hmm.transition[s], rng);
        states.push(s);
    }
    Ok(states)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case")]
pub enum Kernel {
    Rbf,
    Periodic { period: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    /// `f_{t+1} = a·f_t + b·f_t·(f_t + f_{t−1})/2 + c·u_t·u_{t−1} + d·u_t + mean`,
    /// with `u_t ~ Uniform(0, drive_max)`.
    Narma {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        drive_max: f64,
    },
    /// Independent zero-mean GP draw per feature over each state segment.
    Gp {
        #[serde(flatten)]
        kernel: Kernel,
        length_scale: f64,
        variance: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateGeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    /// Constant level added to the generator output.
    #[serde(default)]
    pub mean: f64,
    /// Standard deviation of additive Gaussian observation noise.
    pub noise: f64,
}

impl StateGeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.mean.is_finite() {
            return Err(Error::Config(
                "generator noise must be finite and non-negative".into(),
            ));
        }
        match self.kind {
            GeneratorKind::Narma {
                a,
                b,
                c,
                d,
                drive_max,
            } => {
                if ![a, b, c, d, drive_max].iter().all(|v| v.is_finite()) || drive_max < 0.0 {
                    return Err(Error::Config(
                        "NARMA coefficients must be finite with drive_max ≥ 0".into(),
                    ));
                }
            }
            GeneratorKind::Gp {
                kernel,
                length_scale,
                variance,
            } => {
                if !(length_scale > 0.0 && variance > 0.0) {
                    return Err(Error::Config(
                        "GP length-scale and variance must be positive".into(),
                    ));
                }
                if let Kernel::Periodic { period } = kernel {
                    if !(period > 0.0) {
                        return Err(Error::Config(
                            "periodic kernel needs a positive period".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct NarmaState {
    prev: f64,
    prev2: f64,
    drive_prev: f64,
}

fn kernel_value(kernel: Kernel, length_scale: f64, variance: f64, dt: f64) -> f64 {
    match kernel {
        Kernel::Rbf => variance * (-0.5 * (dt / length_scale).powi(2)).exp(),
        Kernel::Periodic { period } => {
            let s = (std::f64::consts::PI * dt.abs() / period).sin();
            variance * (-2.0 * s * s / (length_scale * length_scale)).exp()
        }
    }
}

/// Lower Cholesky factor of the kernel Gram matrix over `0..len`, with jitter.
fn gp_factor(kernel: Kernel, length_scale: f64, variance: f64, len: usize) -> DMatrix<f64> {
    let gram = DMatrix::from_fn(len, len, |i, j| {
        kernel_value(kernel, length_scale, variance, i as f64 - j as f64)
    });
    let mut jitter = 1e-9 * variance;
    loop {
        let mut m = gram.clone();
        for i in 0..len {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return chol.l();
        }
        jitter *= 10.0;
    }
}

/// Latent features: column `t` comes from the generator of `states[t]`.
///
/// NARMA generators keep one recurrence per (state, feature) that resumes on
/// re-entry. GP generators draw a fresh joint sample over each maximal segment.
pub fn gen_latent_features(
    states: &[usize],
    generators: &[StateGeneratorSpec],
    n_features: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    for g in generators {
        g.validate()?;
    }
    if let Some(&s) = states.iter().find(|&&s| s >= generators.len()) {
        return Err(Error::Config(format!("state {s} has no generator spec")));
    }
    let t_len = states.len();
    let mut out = Array2::zeros((n_features, t_len));
    let mut narma = vec![vec![NarmaState::default(); n_features]; generators.len()];

    let mut start = 0;
    while start < t_len {
        let s = states[start];
        let end = (start..t_len).find(|&t| states[t] != s).unwrap_or(t_len);
        let spec = generators[s];
        match spec.kind {
            GeneratorKind::Narma {
                a,
                b,
                c,
                d,
                drive_max,
            } => {
                for t in start..end {
                    for (i, st) in narma[s].iter_mut().enumerate() {
                        let u = if drive_max > 0.0 {
                            rng.random_range(0.0..drive_max)
                        } else {
                            0.0
                        };
                        let next = a * st.prev
                            + b * st.prev * 0.5 * (st.prev + st.prev2)
                            + c * u * st.drive_prev
                            + d * u;
                        st.prev2 = st.prev;
                        st.prev = next;
                        st.drive_prev = u;
                        out[[i, t]] = next;
                    }
                }
            }
            GeneratorKind::Gp {
                kernel,
                length_scale,
                variance,
            } => {
                let len = end - start;
                let l = gp_factor(kernel, length_scale, variance, len);
                for i in 0..n_features {
                    let z = DVector::from_fn(len, |_, _| {
                        Distribution::<f64>::sample(&StandardNormal, rng)
                    });
                    let draw = &l * z;
                    for (k, v) in draw.iter().enumerate() {
                        out[[i, start + k]] = *v;
                    }
                }
            }
        }
        for t in start..end {
            for i in 0..n_features {
                let noise: f64 = if spec.noise > 0.0 {
                    spec.noise * Distribution::<f64>::sample(&StandardNormal, rng)
                } else {
                    0.0
                };
                out[[i, t]] += spec.mean + noise;
            }
        }
        start = end;
    }
    Ok(out)
}

/// Per-step mutation probability `q = p / (10 (1 − p))`, capped at 1.
pub fn flip_probability(edge_prob: f64) -> f64 {
    (edge_prob / (10.0 * (1.0 - edge_prob))).min(1.0)
}

fn erdos_renyi(n: usize, p: f64, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Add one absent pair or drop one present edge, chosen with probability ½ each.
fn mutate(n: usize, edges: &mut Vec<(usize, usize)>, rng: &mut Rng) {
    let total = n * n.saturating_sub(1) / 2;
    if rng.random_bool(0.5) {
        let absent = total - edges.len();
        if absent == 0 {
            return;
        }
        let mut k = rng.random_range(0..absent);
        for i in 0..n {
            for j in i + 1..n {
                if edges.binary_search(&(i, j)).is_err() {
                    if k == 0 {
                        let pos = edges.binary_search(&(i, j)).unwrap_err();
                        edges.insert(pos, (i, j));
                        return;
                    }
                    k -= 1;
                }
            }
        }
    } else if !edges.is_empty() {
        let k = rng.random_range(0..edges.len());
        edges.remove(k);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEvolution {
    /// Erdős–Rényi edge probability `p^s` per state.
    pub edge_prob: Vec<f64>,
    /// Per-state mutation probability override; defaults to `p/(10(1−p))`.
    #[serde(default)]
    pub flip_prob: Option<Vec<f64>>,
    /// Draw a fresh graph at every entry into a state rather than resuming.
    #[serde(default = "default_true")]
    pub restart_on_reentry: bool,
}

fn default_true() -> bool {
    true
}

impl GraphEvolution {
    pub fn new(edge_prob: Vec<f64>) -> Self {
        Self {
            edge_prob,
            flip_prob: None,
            restart_on_reentry: true,
        }
    }

    pub fn flip_probs(&self) -> Vec<f64> {
        self.flip_prob.clone().unwrap_or_else(|| {
            self.edge_prob
                .iter()
                .map(|&p| flip_probability(p))
                .collect()
        })
    }

    pub fn validate(&self, n_states: usize) -> Result<()> {
        if self.edge_prob.len() != n_states {
            return Err(Error::Config(format!(
                "{} edge probabilities for {n_states} states",
                self.edge_prob.len()
            )));
        }
        if let Some(p) = self.edge_prob.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!(
                "edge probability {p} outside (0, 1)"
            )));
        }
        if let Some(q) = &self.flip_prob {
            if q.len() != n_states || q.iter().any(|q| !(0.0..=1.0).contains(q)) {
                return Err(Error::Config(
                    "flip_prob needs one probability in [0, 1] per state".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn evolve_graphs(
    states: &[usize],
    evolution: &GraphEvolution,
    n_nodes: usize,
    rng: &mut Rng,
) -> Result<DynamicGraphSequence> {
    let n_states = states
        .iter()
        .copied()
        .max()
        .map_or(evolution.edge_prob.len(), |m| {
            (m + 1).max(evolution.edge_prob.len())
        });
    evolution.validate(n_states)?;
    let flips = evolution.flip_probs();
    let mut cached: Vec<Option<Vec<(usize, usize)>>> = vec![None; n_states];
    let mut current: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::with_capacity(states.len());
    for (t, &s) in states.iter().enumerate() {
        let entering = t == 0 || states[t - 1] != s;
        if entering {
            if t > 0 {
                cached[states[t - 1]] = Some(current.clone());
            }
            current = match (&cached[s], evolution.restart_on_reentry) {
                (Some(g), false) => g.clone(),
                _ => erdos_renyi(n_nodes, evolution.edge_prob[s], rng),
            };
        } else if flips[s] > 0.0 && rng.random_bool(flips[s]) {
            mutate(n_nodes, &mut current, rng);
        }
        out.push(EdgeSet::from_sorted_unchecked(current.clone()));
    }
    DynamicGraphSequence::new(n_nodes, out)
}

/// `x_0 = f_0`, `x_{t+1} = r·A_t·f_t + (1 − r)·f_t`.
pub fn mix_signal(
    features: &Array2<f64>,
    graphs: &DynamicGraphSequence,
    r: f64,
) -> Result<MultivariateSeries> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("mixing weight {r} outside [0, 1]")));
    }
    let (n, t_len) = features.dim();
    if graphs.len() != t_len || graphs.n_nodes() != n {
        return Err(Error::Shape(format!(
            "features are {n}×{t_len} but graphs cover {} nodes × {} steps",
            graphs.n_nodes(),
            graphs.len()
        )));
    }
    let mut x = Array2::zeros((n, t_len));
    if t_len > 0 {
        x.column_mut(0).assign(&features.column(0));
    }
    for t in 0..t_len.saturating_sub(1) {
        let f = features.column(t);
        let mut next = f.mapv(|v| (1.0 - r) * v);
        for &(i, j) in graphs.edges()[t].pairs() {
            next[i] += r * f[j];
            next[j] += r * f[i];
        }
        x.column_mut(t + 1).assign(&next);
    }
    MultivariateSeries::new(x, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_features: usize,
    pub length: usize,
    pub n_samples: usize,
    pub window_width: usize,
    pub hmm: HmmSpec,
    pub generators: Vec<StateGeneratorSpec>,
    pub graphs: GraphEvolution,
    /// Graph mixing weight in `[0, 1]`.
    pub r: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let narma = |a, b, c, d, mean, noise| StateGeneratorSpec {
            kind: GeneratorKind::Narma {
                a,
                b,
                c,
                d,
                drive_max: 0.5,
            },
            mean,
            noise,
        };
        let gp = |kernel, length_scale, variance, mean, noise| StateGeneratorSpec {
            kind: GeneratorKind::Gp {
                kernel,
                length_scale,
                variance,
            },
            mean,
            noise,
        };
        Self {
            n_features: 10,
            length: 500,
            n_samples: 30,
            window_width: 20,
            hmm: HmmSpec::sticky(4, 0.95),
            generators: vec![
                narma(0.3, 0.05, 1.5, 0.1, 0.0, 0.1),
                gp(Kernel::Rbf, 8.0, 1.0, 1.0, 0.1),
                narma(0.5, 0.03, 1.2, 0.2, -1.0, 0.1),
                gp(Kernel::Periodic { period: 10.0 }, 1.0, 1.0, 2.0, 0.1),
            ],
            graphs: GraphEvolution::new(vec![0.2, 0.4, 0.6, 0.8]),
            r: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.hmm.validate()?;
        let s = self.hmm.n_states;
        if self.generators.len() != s {
            return Err(Error::Config(format!(
                "{} generators for {s} states",
                self.generators.len()
            )));
        }
        for g in &self.generators {
            g.validate()?;
        }
        self.graphs.validate(s)?;
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::Config(format!("r = {} outside [0, 1]", self.r)));
        }
        if self.n_features == 0 || self.window_width == 0 || self.length < self.window_width {
            return Err(Error::Config("need N ≥ 1 and T ≥ w ≥ 1".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

/// One sample drawn from its own seed-derived stream.
pub fn generate_sample(config: &SynthConfig, index: usize) -> Result<Sample> {
    let idx = index as u64;
    let states = sample_states(
        &config.hmm,
        config.length,
        &mut stream(config.seed, "synth/states", idx),
    )?;
    let features = gen_latent_features(
        &states,
        &config.generators,
        config.n_features,
        &mut stream(config.seed, "synth/features", idx),
    )?;
    let graphs = evolve_graphs(
        &states,
        &config.graphs,
        config.n_features,
        &mut stream(config.seed, "synth/graphs", idx),
    )?;
    let mixed = mix_signal(&features, &graphs, config.r)?;
    let series = MultivariateSeries::new(mixed.values().clone(), Some(states))?;
    Sample::new(series, graphs)
}

pub fn generate_dataset(config: &SynthConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let samples = (0..config.n_samples)
        .map(|i| generate_sample(config, i))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(
        samples,
        config.window_width,
        DatasetMeta {
            name: "synthetic".into(),
            n_states: config.hmm.n_states,
            seed: Some(config.seed),
            config_digest: config.digest(),
        },
    )
}
