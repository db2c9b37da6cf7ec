//! Trajectory CSV: header `agent_id,k,t,x0,...,x{M-1}`, one row per sample, rows sorted by
//! `(agent_id, k)` with `t = k * tau`.
//!
//! Files whose agents cover different step ranges (pedestrian recordings, where people enter
//! and leave the scene) are cut to the common window `[max start, min end]`; samples outside
//! it are dropped and counted in the [`LoadReport`].

use std::collections::BTreeMap;
use std::path::Path;

use super::{DomainBox, TrajectoryDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    /// Samples outside the common step window.
    pub dropped_samples: usize,
    /// Inclusive `(first, last)` source step index kept for every agent.
    pub window: (u64, u64),
    pub agent_ids: Vec<u64>,
}

pub fn save_trajectories(dataset: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_io)?;
    let mut header = vec!["agent_id".to_string(), "k".to_string(), "t".to_string()];
    header.extend((0..dataset.dim()).map(|m| format!("x{m}")));
    w.write_record(&header).map_err(csv_io)?;
    let mut row = Vec::with_capacity(3 + dataset.dim());
    for n in 0..dataset.n_agents() {
        for k in 0..=dataset.n_steps() {
            row.clear();
            row.push(n.to_string());
            row.push(k.to_string());
            row.push((k as f64 * dataset.tau()).to_string());
            row.extend(dataset.state(n, k).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema(format!("{other:?}")),
    }
}

struct AgentTrack {
    first_k: u64,
    first_t: f64,
    samples: Vec<(u64, f64, Vec<f64>)>,
}

/// Loads a trajectory CSV. The returned dataset's domain is the bounding box of the data,
/// padded by 5% of each axis span (0.5 for a flat axis).
pub fn load_trajectories(path: impl AsRef<Path>) -> Result<(TrajectoryDataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(csv_io)?;

    let header = reader.headers().map_err(csv_io)?.clone();
    if header.len() < 4 || &header[0] != "agent_id" || &header[1] != "k" || &header[2] != "t" {
        return Err(Error::Schema(
            "expected header `agent_id,k,t,x0,...` with at least one state column".into(),
        ));
    }
    let dim = header.len() - 3;
    for (m, name) in header.iter().skip(3).enumerate() {
        if name != format!("x{m}") {
            return Err(Error::Schema(format!("column {} should be `x{m}`, found `{name}`", m + 3)));
        }
    }

    let mut agents: BTreeMap<u64, AgentTrack> = BTreeMap::new();
    let mut total_rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_io)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != dim + 3 {
            return Err(Error::Schema(format!(
                "line {line}: expected {} fields for dimension {dim}, found {}",
                dim + 3,
                record.len()
            )));
        }
        let parse_int = |i: usize| -> Result<u64> {
            record[i].parse::<u64>().map_err(|e| Error::Parse {
                line,
                message: format!("field {i} `{}`: {e}", &record[i]),
            })
        };
        let parse_f = |i: usize| -> Result<f64> {
            let v = record[i].parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("field {i} `{}`: {e}", &record[i]),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    line,
                    message: format!("field {i} is not finite"),
                })
            }
        };
        let id = parse_int(0)?;
        let k = parse_int(1)?;
        let t = parse_f(2)?;
        let x = (3..dim + 3).map(parse_f).collect::<Result<Vec<_>>>()?;
        let track = agents.entry(id).or_insert_with(|| AgentTrack {
            first_k: k,
            first_t: t,
            samples: Vec::new(),
        });
        if let Some((prev, _, _)) = track.samples.last() {
            if k != prev + 1 {
                return Err(Error::Schema(format!(
                    "line {line}: agent {id} jumps from k = {prev} to k = {k}; rows must be sorted and contiguous"
                )));
            }
        }
        track.samples.push((k, t, x));
        total_rows += 1;
    }
    if agents.is_empty() {
        return Err(Error::Schema("trajectory file contains no samples".into()));
    }

    let tau = infer_tau(&agents)?;
    let start = agents.values().map(|a| a.first_k).max().unwrap();
    let end = agents
        .values()
        .map(|a| a.samples.last().unwrap().0)
        .min()
        .unwrap();
    if end <= start {
        return Err(Error::Schema(format!(
            "agents share no common window of at least two samples (latest start {start}, earliest end {end})"
        )));
    }
    let n_steps = (end - start) as usize;
    let mut states = Vec::with_capacity(agents.len() * (n_steps + 1) * dim);
    for track in agents.values() {
        let offset = (start - track.first_k) as usize;
        for (_, _, x) in &track.samples[offset..=offset + n_steps] {
            states.extend_from_slice(x);
        }
    }
    let kept = agents.len() * (n_steps + 1);

    let domain = padded_bounds(&states, dim)?;
    let dataset = TrajectoryDataset::new(agents.len(), n_steps, tau, domain, states)?;
    Ok((
        dataset,
        LoadReport {
            dropped_samples: total_rows - kept,
            window: (start, end),
            agent_ids: agents.keys().copied().collect(),
        },
    ))
}

fn infer_tau(agents: &BTreeMap<u64, AgentTrack>) -> Result<f64> {
    let mut tau = None;
    for (id, track) in agents {
        if track.samples.len() < 2 {
            continue;
        }
        let (k1, t1, _) = &track.samples[1];
        let candidate = (t1 - track.first_t) / (k1 - track.first_k) as f64;
        if !(candidate > 0.0) {
            return Err(Error::Schema(format!("agent {id}: time does not increase with k")));
        }
        let tau = *tau.get_or_insert(candidate);
        for (k, t, _) in &track.samples {
            let expected = track.first_t + (k - track.first_k) as f64 * tau;
            if (t - expected).abs() > 1e-6 * tau.max(t.abs()) {
                return Err(Error::Schema(format!(
                    "agent {id}: t = {t} at k = {k} is inconsistent with a sampling period of {tau}"
                )));
            }
        }
    }
    tau.ok_or_else(|| Error::Schema("cannot infer tau: no agent has two samples".into()))
}

fn padded_bounds(states: &[f64], dim: usize) -> Result<DomainBox> {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for x in states.chunks_exact(dim) {
        for m in 0..dim {
            lo[m] = lo[m].min(x[m]);
            hi[m] = hi[m].max(x[m]);
        }
    }
    for m in 0..dim {
        let span = hi[m] - lo[m];
        let pad = if span > 0.0 { 0.05 * span } else { 0.5 };
        lo[m] -= pad;
        hi[m] += pad;
    }
    DomainBox::new(lo, hi)
}
