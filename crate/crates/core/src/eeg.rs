//! Ingestion of grasp-and-lift EEG recordings.
//!
//! Each recording is a pair of CSVs: `*_data.csv` (`id` + 32 channel columns)
//! and `*_events.csv` (`id` + 6 binary event columns). Timesteps are labeled
//! with the earliest active event, or [`NO_ACTION`] when none is active. The
//! electrode graph comes from a montage file and is repeated at every step.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{
    DatasetMeta, DynamicGraphSequence, EdgeSet, LabeledDataset, MultivariateSeries, Sample,
};
use crate::error::{Error, Result};
use crate::rng::digest_json;

pub const N_CHANNELS: usize = 32;

pub const EVENT_COLUMNS: [&str; 6] = [
    "HandStart",
    "FirstDigitTouch",
    "BothStartLoadPhase",
    "LiftOff",
    "Replace",
    "BothReleased",
];

/// Label of timesteps with no active event.
pub const NO_ACTION: usize = 6;
pub const N_EEG_STATES: usize = 7;

/// Electrode names plus an undirected adjacency list between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    pub electrodes: Vec<String>,
    pub adjacency: BTreeMap<String, Vec<String>>,
}

impl Montage {
    pub fn load(path: &Path) -> Result<Self> {
        crate::data::read_json(path)
    }

    /// The montage graph with nodes numbered by `channel_order`.
    pub fn edge_set(&self, channel_order: &[String]) -> Result<EdgeSet> {
        let index = |name: &str| {
            channel_order
                .iter()
                .position(|c| c.eq_ignore_ascii_case(name))
                .ok_or_else(|| {
                    Error::Config(format!("montage electrode {name} is not a data channel"))
                })
        };
        let mut pairs = Vec::new();
        for (a, neighbours) in &self.adjacency {
            let ia = index(a)?;
            for b in neighbours {
                let ib = index(b)?;
                if ia == ib {
                    return Err(Error::Config(format!(
                        "montage lists {a} as its own neighbour"
                    )));
                }
                pairs.push((ia, ib));
            }
        }
        EdgeSet::from_pairs(channel_order.len(), pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EegIngestSpec {
    pub signal_csvs: Vec<PathBuf>,
    pub event_csvs: Vec<PathBuf>,
    pub montage: PathBuf,
    pub n_signals: usize,
    pub length: usize,
    pub window_width: usize,
}

struct Recording {
    channels: Vec<String>,
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn read_recording(data: &Path, events: &Path) -> Result<Recording> {
    let mut reader = csv::Reader::from_reader(File::open(data).map_err(Error::io(data))?);
    let header = reader.headers().map_err(Error::csv(data))?.clone();
    if header.len() != N_CHANNELS + 1 {
        return Err(Error::Shape(format!(
            "{}: expected id + {N_CHANNELS} channel columns, found {} channel columns",
            data.display(),
            header.len().saturating_sub(1)
        )));
    }
    let channels: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(Error::csv(data))?;
        let row = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed {
                what: "EEG sample",
                path: data.to_owned(),
                detail: format!("row {r}: {e}"),
            })?;
        rows.push(row);
    }

    let mut reader = csv::Reader::from_reader(File::open(events).map_err(Error::io(events))?);
    let header = reader.headers().map_err(Error::csv(events))?.clone();
    let mut event_index = Vec::new();
    for name in header.iter().skip(1) {
        let idx = EVENT_COLUMNS
            .iter()
            .position(|e| *e == name)
            .ok_or_else(|| Error::Malformed {
                what: "event header",
                path: events.to_owned(),
                detail: format!("unknown event column {name:?}"),
            })?;
        event_index.push(idx);
    }
    let mut labels = Vec::with_capacity(rows.len());
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(Error::csv(events))?;
        let mut label = NO_ACTION;
        for (field, &event) in record.iter().skip(1).zip(&event_index) {
            let active = field.trim() != "0";
            if active && event < label {
                label = event;
            }
        }
        if record.len() != event_index.len() + 1 {
            return Err(Error::Malformed {
                what: "event row",
                path: events.to_owned(),
                detail: format!("row {r} has {} fields", record.len()),
            });
        }
        labels.push(label);
    }
    if labels.len() != rows.len() {
        return Err(Error::Shape(format!(
            "{} has {} rows but {} has {}",
            data.display(),
            rows.len(),
            events.display(),
            labels.len()
        )));
    }
    Ok(Recording {
        channels,
        rows,
        labels,
    })
}

/// Cut `n_signals` consecutive, non-overlapping segments of `length` timesteps
/// from the recordings, in file order.
pub fn ingest_eeg(
    signal_csvs: &[PathBuf],
    event_csvs: &[PathBuf],
    montage: &Montage,
    n_signals: usize,
    length: usize,
    window_width: usize,
) -> Result<LabeledDataset> {
    if signal_csvs.len() != event_csvs.len() {
        return Err(Error::Config(format!(
            "{} signal files but {} event files",
            signal_csvs.len(),
            event_csvs.len()
        )));
    }
    if length == 0 || length < window_width {
        return Err(Error::Config(format!(
            "segment length {length} cannot hold a window of width {window_width}"
        )));
    }
    let mut graph: Option<(Vec<String>, EdgeSet)> = None;
    let mut samples = Vec::with_capacity(n_signals);
    'files: for (data, events) in signal_csvs.iter().zip(event_csvs) {
        let rec = read_recording(data, events)?;
        let edges = match &graph {
            Some((channels, edges)) => {
                if *channels != rec.channels {
                    return Err(Error::Shape(format!(
                        "{}: channel order differs between files",
                        data.display()
                    )));
                }
                edges.clone()
            }
            None => {
                let edges = montage.edge_set(&rec.channels)?;
                graph = Some((rec.channels.clone(), edges.clone()));
                edges
            }
        };
        for start in (0..rec.rows.len()).step_by(length) {
            if samples.len() == n_signals {
                break 'files;
            }
            if start + length > rec.rows.len() {
                break;
            }
            let values =
                Array2::from_shape_fn((N_CHANNELS, length), |(c, j)| rec.rows[start + j][c]);
            let states = rec.labels[start..start + length].to_vec();
            let series = MultivariateSeries::new(values, Some(states))?;
            let graphs = DynamicGraphSequence::repeated(N_CHANNELS, edges.clone(), length)?;
            samples.push(Sample::new(series, graphs)?);
        }
    }
    if samples.len() < n_signals {
        return Err(Error::Shape(format!(
            "recordings yield only {} full segments of length {length}, {n_signals} requested",
            samples.len()
        )));
    }
    let digest = digest_json(&(
        signal_csvs,
        event_csvs,
        montage,
        n_signals,
        length,
        window_width,
    ));
    LabeledDataset::new(
        samples,
        window_width,
        DatasetMeta {
            name: "eeg".into(),
            n_states: N_EEG_STATES,
            seed: None,
            config_digest: digest,
        },
    )
}

pub fn ingest_from_spec(spec: &EegIngestSpec) -> Result<LabeledDataset> {
    let montage = Montage::load(&spec.montage)?;
    ingest_eeg(
        &spec.signal_csvs,
        &spec.event_csvs,
        &montage,
        spec.n_signals,
        spec.length,
        spec.window_width,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    fn channel_names() -> Vec<String> {
        (0..N_CHANNELS).map(|i| format!("C{i}")).collect()
    }

    fn ring_montage() -> Montage {
        let names = channel_names();
        let adjacency = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), vec![names[(i + 1) % N_CHANNELS].clone()]))
            .collect();
        Montage {
            electrodes: names,
            adjacency,
        }
    }

    fn write_recording(
        dir: &Path,
        rows: usize,
        channels: usize,
        events: impl Fn(usize) -> [u8; 6],
    ) -> (PathBuf, PathBuf) {
        let mut data = String::from("id");
        for c in 0..channels {
            write!(data, ",C{c}").unwrap();
        }
        data.push('\n');
        let mut ev = format!("id,{}\n", EVENT_COLUMNS.join(","));
        for r in 0..rows {
            write!(data, "subj1_series1_{r}").unwrap();
            for c in 0..channels {
                write!(data, ",{}", (r * 31 + c) as f64 * 0.5 - 7.0).unwrap();
            }
            data.push('\n');
            let flags = events(r);
            writeln!(
                ev,
                "subj1_series1_{r},{}",
                flags.map(|f| f.to_string()).join(",")
            )
            .unwrap();
        }
        let (dp, ep) = (
            dir.join("subj1_series1_data.csv"),
            dir.join("subj1_series1_events.csv"),
        );
        std::fs::write(&dp, data).unwrap();
        std::fs::write(&ep, ev).unwrap();
        (dp, ep)
    }

    #[test]
    fn ingests_segments_with_static_graph() {
        let dir = tempfile::tempdir().unwrap();
        let (d, e) = write_recording(dir.path(), 6000, N_CHANNELS, |r| {
            let mut f = [0u8; 6];
            if r % 100 < 10 {
                f[3] = 1;
            }
            if r % 100 < 5 {
                f[1] = 1;
            }
            f
        });
        let montage = ring_montage();
        let ds = ingest_eeg(&[d], &[e], &montage, 100, 60, 10).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.n_features(), 32);
        assert_eq!(ds.series_len(), 60);
        let expected = montage.edge_set(&channel_names()).unwrap();
        assert_eq!(expected.len(), 32);
        for s in ds.samples() {
            assert!(s.graphs.edges().iter().all(|g| *g == expected));
        }
        let states = ds.samples()[0].series.states().unwrap();
        assert_eq!(states[0], 1, "earliest active event wins");
        assert_eq!(states[7], 3);
        assert_eq!(states[20], NO_ACTION);
    }

    #[test]
    fn all_zero_events_are_no_action() {
        let dir = tempfile::tempdir().unwrap();
        let (d, e) = write_recording(dir.path(), 120, N_CHANNELS, |_| [0; 6]);
        let ds = ingest_eeg(&[d], &[e], &ring_montage(), 2, 60, 10).unwrap();
        for s in ds.samples() {
            assert!(s.series.states().unwrap().iter().all(|&l| l == NO_ACTION));
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (d, e) = write_recording(dir.path(), 120, 31, |_| [0; 6]);
        let err = ingest_eeg(&[d], &[e], &ring_montage(), 1, 60, 10).unwrap_err();
        assert!(err.to_string().contains("31 channel columns"), "{err}");
    }

    #[test]
    fn unknown_event_column_and_short_recording() {
        let dir = tempfile::tempdir().unwrap();
        let (d, e) = write_recording(dir.path(), 100, N_CHANNELS, |_| [0; 6]);
        let err = ingest_eeg(
            std::slice::from_ref(&d),
            std::slice::from_ref(&e),
            &ring_montage(),
            2,
            60,
            10,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");

        let text = std::fs::read_to_string(&e)
            .unwrap()
            .replacen("LiftOff", "Wave", 1);
        std::fs::write(&e, text).unwrap();
        let err = ingest_eeg(&[d], &[e], &ring_montage(), 1, 60, 10).unwrap_err();
        assert!(err.to_string().contains("Wave"), "{err}");
    }

    #[test]
    fn shipped_montage_is_a_connected_32_node_graph() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/eeg_montage.json");
        let montage = Montage::load(&path).unwrap();
        assert_eq!(montage.electrodes.len(), 32);
        let edges = montage.edge_set(&montage.electrodes).unwrap();
        let mut seen = [false; 32];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in edges.pairs() {
                let other = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
