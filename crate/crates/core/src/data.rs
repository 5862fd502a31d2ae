//! Series and graph containers, windowing, and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus, per sample `i`,
//! `signals_<i>.csv` (T rows × N columns), `states_<i>.csv` (T rows, optional)
//! and `graphs_<i>.jsonl` (T lines, each a JSON array of `[i, j]` pairs).

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An N×T real signal matrix plus optional per-timestep state labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    values: Array2<f64>,
    states: Option<Vec<usize>>,
}

impl MultivariateSeries {
    pub fn new(values: Array2<f64>, states: Option<Vec<usize>>) -> Result<Self> {
        if let Some((idx, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("series entry {idx} is {v}")));
        }
        if let Some(states) = &states {
            if states.len() != values.ncols() {
                return Err(Error::Shape(format!(
                    "{} state labels for a series of length {}",
                    states.len(),
                    values.ncols()
                )));
            }
        }
        Ok(Self { values, states })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn states(&self) -> Option<&[usize]> {
        self.states.as_deref()
    }

    pub fn n_features(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature `i` as a contiguous vector.
    pub fn feature(&self, i: usize) -> Vec<f64> {
        self.values.row(i).to_vec()
    }
}

/// Undirected edge set over a fixed node set, stored as canonical `(i, j)`, `i < j`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeSet(Vec<(usize, usize)>);

impl EdgeSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Canonicalize and validate pairs over `n_nodes` nodes. Duplicates and
    /// reversed pairs collapse; self-loops are rejected.
    pub fn from_pairs<I>(n_nodes: usize, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (a, b) in pairs {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::Shape(format!(
                    "edge ({a}, {b}) references a node outside [0, {n_nodes})"
                )));
            }
            if a == b {
                return Err(Error::Shape(format!("self-loop on node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self(set.into_iter().collect()))
    }

    /// Build from an already canonical, sorted, deduplicated list.
    pub(crate) fn from_sorted_unchecked(pairs: Vec<(usize, usize)>) -> Self {
        debug_assert!(pairs.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(pairs.iter().all(|&(a, b)| a < b));
        Self(pairs)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.0.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    /// Largest node index referenced, if any.
    pub fn max_node(&self) -> Option<usize> {
        self.0.iter().map(|&(_, b)| b).max()
    }

    /// Binary symmetric adjacency with zero diagonal.
    pub fn adjacency(&self, n_nodes: usize) -> Array2<f64> {
        let mut a = Array2::zeros((n_nodes, n_nodes));
        for &(i, j) in &self.0 {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }
}

/// T edge sets over a constant node set.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraphSequence {
    n_nodes: usize,
    edges: Vec<EdgeSet>,
}

impl DynamicGraphSequence {
    pub fn new(n_nodes: usize, edges: Vec<EdgeSet>) -> Result<Self> {
        for (t, e) in edges.iter().enumerate() {
            if let Some(m) = e.max_node() {
                if m >= n_nodes {
                    return Err(Error::Shape(format!(
                        "graph {t} references node {m} but only {n_nodes} nodes exist"
                    )));
                }
            }
        }
        Ok(Self { n_nodes, edges })
    }

    /// The same graph repeated at every one of `length` timesteps.
    pub fn repeated(n_nodes: usize, graph: EdgeSet, length: usize) -> Result<Self> {
        Self::new(n_nodes, vec![graph; length])
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[EdgeSet] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// A width-`w` slice of a series and the `w` aligned graphs, borrowed from the source.
#[derive(Clone, Copy, Debug)]
pub struct WindowPair<'a> {
    pub signal: ArrayView2<'a, f64>,
    pub graphs: &'a [EdgeSet],
    pub start: usize,
    pub width: usize,
}

/// Columns `t..t+w` of the signal and graphs `t..t+w`.
pub fn extract_window<'a>(
    series: &'a MultivariateSeries,
    graphs: &'a DynamicGraphSequence,
    t: usize,
    w: usize,
) -> Result<WindowPair<'a>> {
    if w == 0 {
        return Err(Error::ZeroWidth);
    }
    if graphs.len() != series.len() {
        return Err(Error::Shape(format!(
            "series has {} timesteps but graph sequence has {}",
            series.len(),
            graphs.len()
        )));
    }
    let len = series.len();
    if t.checked_add(w).is_none_or(|end| end > len) {
        return Err(Error::WindowOutOfRange {
            start: t,
            width: w,
            len,
        });
    }
    Ok(WindowPair {
        signal: series.values.slice(s![.., t..t + w]),
        graphs: &graphs.edges[t..t + w],
        start: t,
        width: w,
    })
}

/// Majority state over `states[t..t+w]`; ties go to the state seen first in the window.
pub fn window_label(states: &[usize], t: usize, w: usize) -> usize {
    let window = &states[t..t + w];
    let n_states = window.iter().copied().max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; n_states];
    for &s in window {
        counts[s] += 1;
    }
    let mut best = window[0];
    for &s in window {
        if counts[s] > counts[best] {
            best = s;
        }
    }
    best
}

/// One (series, graphs) pair of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub series: MultivariateSeries,
    pub graphs: DynamicGraphSequence,
}

impl Sample {
    pub fn new(series: MultivariateSeries, graphs: DynamicGraphSequence) -> Result<Self> {
        if series.len() != graphs.len() {
            return Err(Error::Shape(format!(
                "series length {} differs from graph sequence length {}",
                series.len(),
                graphs.len()
            )));
        }
        if series.n_features() != graphs.n_nodes() {
            return Err(Error::Shape(format!(
                "{} features but {} graph nodes",
                series.n_features(),
                graphs.n_nodes()
            )));
        }
        Ok(Self { series, graphs })
    }

    pub fn window(&self, t: usize, w: usize) -> Result<WindowPair<'_>> {
        extract_window(&self.series, &self.graphs, t, w)
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub n_states: usize,
    pub seed: Option<u64>,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    window_width: usize,
    meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, window_width: usize, meta: DatasetMeta) -> Result<Self> {
        if window_width == 0 {
            return Err(Error::ZeroWidth);
        }
        if let Some(first) = samples.first() {
            let (n, t) = (first.series.n_features(), first.len());
            for (i, s) in samples.iter().enumerate() {
                if s.series.n_features() != n || s.len() != t {
                    return Err(Error::Shape(format!(
                        "sample {i} is {}×{}, expected {n}×{t}",
                        s.series.n_features(),
                        s.len()
                    )));
                }
                if let Some(states) = s.series.states() {
                    if let Some(&bad) = states.iter().find(|&&st| st >= meta.n_states) {
                        return Err(Error::Label {
                            label: bad,
                            n_classes: meta.n_states,
                        });
                    }
                }
            }
        }
        Ok(Self {
            samples,
            window_width,
            meta,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn window_width(&self) -> usize {
        self.window_width
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn n_features(&self) -> usize {
        self.samples.first().map_or(0, |s| s.series.n_features())
    }

    pub fn series_len(&self) -> usize {
        self.samples.first().map_or(0, Sample::len)
    }

    pub fn n_states(&self) -> usize {
        self.meta.n_states
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A dataset holding clones of the samples at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            window_width: self.window_width,
            meta: self.meta.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    name: String,
    n_features: usize,
    length: usize,
    n_states: usize,
    window_width: usize,
    n_samples: usize,
    seed: Option<u64>,
    config_digest: String,
}

pub fn save_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let manifest = Manifest {
        name: dataset.meta.name.clone(),
        n_features: dataset.n_features(),
        length: dataset.series_len(),
        n_states: dataset.meta.n_states,
        window_width: dataset.window_width,
        n_samples: dataset.len(),
        seed: dataset.meta.seed,
        config_digest: dataset.meta.config_digest.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    for (i, sample) in dataset.samples.iter().enumerate() {
        let path = dir.join(format!("signals_{i}.csv"));
        let mut out = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(Error::csv(&path))?;
        let values = sample.series.values();
        for col in values.columns() {
            out.write_record(col.iter().map(|v| v.to_string()))
                .map_err(Error::csv(&path))?;
        }
        out.flush().map_err(Error::io(&path))?;

        if let Some(states) = sample.series.states() {
            let path = dir.join(format!("states_{i}.csv"));
            let mut out = BufWriter::new(File::create(&path).map_err(Error::io(&path))?);
            for s in states {
                writeln!(out, "{s}").map_err(Error::io(&path))?;
            }
            out.flush().map_err(Error::io(&path))?;
        }

        let path = dir.join(format!("graphs_{i}.jsonl"));
        let mut out = BufWriter::new(File::create(&path).map_err(Error::io(&path))?);
        for edges in sample.graphs.edges() {
            let line = serde_json::to_string(edges).map_err(Error::json(&path))?;
            writeln!(out, "{line}").map_err(Error::io(&path))?;
        }
        out.flush().map_err(Error::io(&path))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let (n, t) = (manifest.n_features, manifest.length);
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for i in 0..manifest.n_samples {
        let path = dir.join(format!("signals_{i}.csv"));
        let file = File::open(&path).map_err(Error::io(&path))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(file);
        let mut values = Array2::zeros((n, t));
        let mut rows = 0;
        for record in reader.records() {
            let record = record.map_err(Error::csv(&path))?;
            if record.len() != n {
                return Err(Error::Shape(format!(
                    "{}: row {rows} has {} columns, expected {n}",
                    path.display(),
                    record.len()
                )));
            }
            if rows >= t {
                return Err(Error::Shape(format!(
                    "{}: more than {t} rows",
                    path.display()
                )));
            }
            for (j, field) in record.iter().enumerate() {
                values[[j, rows]] = field.trim().parse().map_err(|e| Error::Malformed {
                    what: "signal value",
                    path: path.clone(),
                    detail: format!("row {rows}, column {j}: {e}"),
                })?;
            }
            rows += 1;
        }
        if rows != t {
            return Err(Error::Shape(format!(
                "{}: {rows} rows, expected {t}",
                path.display()
            )));
        }

        let path = dir.join(format!("states_{i}.csv"));
        let states = if path.exists() {
            let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
            let states = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(row, l)| {
                    l.trim().parse::<usize>().map_err(|e| Error::Malformed {
                        what: "state label",
                        path: path.clone(),
                        detail: format!("row {row}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if states.len() != t {
                return Err(Error::Shape(format!(
                    "{}: {} state labels, expected {t}",
                    path.display(),
                    states.len()
                )));
            }
            Some(states)
        } else {
            None
        };

        let path = dir.join(format!("graphs_{i}.jsonl"));
        let file = File::open(&path).map_err(Error::io(&path))?;
        let mut edges = Vec::with_capacity(t);
        for (row, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(Error::io(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let pairs: Vec<(usize, usize)> =
                serde_json::from_str(&line).map_err(|e| Error::Malformed {
                    what: "edge list",
                    path: path.clone(),
                    detail: format!("line {row}: {e}"),
                })?;
            let set = EdgeSet::from_pairs(n, pairs).map_err(|e| Error::Malformed {
                what: "edge list",
                path: path.clone(),
                detail: format!("line {row}: {e}"),
            })?;
            edges.push(set);
        }
        if edges.len() != t {
            return Err(Error::Shape(format!(
                "{}: {} graphs, expected {t}",
                path.display(),
                edges.len()
            )));
        }

        let series = MultivariateSeries::new(values, states)?;
        samples.push(Sample::new(series, DynamicGraphSequence::new(n, edges)?)?);
    }
    LabeledDataset::new(
        samples,
        manifest.window_width,
        DatasetMeta {
            name: manifest.name,
            n_states: manifest.n_states,
            seed: manifest.seed,
            config_digest: manifest.config_digest,
        },
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(Error::json(path))?;
    writeln!(out).map_err(Error::io(path))?;
    out.flush().map_err(Error::io(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(Error::io(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(Error::json(path))
}
