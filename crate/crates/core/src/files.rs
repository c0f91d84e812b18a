//! CSV artifacts: event logs, snapshot series, and matrix/vector tables, all
//! carrying a provenance header.
//!
//! Header lines start with `#` and record the tool version, scenario hash,
//! seed, and the shape/horizon metadata needed to re-read the file without
//! the scenario. Agent ids are 1-based in files (matching scenario files);
//! configurations are digit strings with agent 1 leftmost. Floats print in
//! shortest round-trip form, so write-then-read is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::ChoiceConfiguration;
use crate::error::{Error, Result};
use crate::simulate::{EventRecord, ObservedEvent, SnapshotSeries};

/// Metadata stamped on every output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub tool_version: String,
    pub scenario_hash: u64,
    pub seed: u64,
    pub num_agents: usize,
    pub num_alternatives: usize,
    /// Simulation horizon, when the artifact came from a trajectory.
    pub horizon: Option<f64>,
    /// Sampling interval, for snapshot-derived artifacts.
    pub delta: Option<f64>,
}

impl Provenance {
    pub fn new(scenario_hash: u64, seed: u64, num_agents: usize, num_alternatives: usize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario_hash,
            seed,
            num_agents,
            num_alternatives,
            horizon: None,
            delta: None,
        }
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = Some(horizon);
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }

    fn header(&self) -> String {
        let mut s = format!(
            "# ctpeer {} scenario={:016x} seed={}\n# agents={} alternatives={}",
            self.tool_version, self.scenario_hash, self.seed, self.num_agents, self.num_alternatives
        );
        if let Some(t) = self.horizon {
            write!(s, " horizon={t}").unwrap();
        }
        if let Some(d) = self.delta {
            write!(s, " delta={d}").unwrap();
        }
        s.push('\n');
        s
    }

    fn parse(lines: &[&str], file: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            file: file.to_string(),
            line,
            message,
        };
        if lines.len() < 2 || !lines[0].starts_with("# ctpeer ") || !lines[1].starts_with("# ") {
            return Err(bad(1, "missing provenance header".into()));
        }
        let first: Vec<&str> = lines[0].trim_start_matches("# ctpeer ").split(' ').collect();
        if first.len() != 3 {
            return Err(bad(1, "malformed provenance line".into()));
        }
        let tool_version = first[0].to_string();
        let scenario_hash = u64::from_str_radix(
            first[1].strip_prefix("scenario=").ok_or_else(|| bad(1, "missing scenario hash".into()))?,
            16,
        )
        .map_err(|e| bad(1, e.to_string()))?;
        let seed = first[2]
            .strip_prefix("seed=")
            .ok_or_else(|| bad(1, "missing seed".into()))?
            .parse()
            .map_err(|e: std::num::ParseIntError| bad(1, e.to_string()))?;

        let mut out = Self {
            tool_version,
            scenario_hash,
            seed,
            num_agents: 0,
            num_alternatives: 0,
            horizon: None,
            delta: None,
        };
        for field in lines[1].trim_start_matches("# ").split(' ') {
            let Some((key, value)) = field.split_once('=') else {
                continue;
            };
            match key {
                "agents" => out.num_agents = value.parse().map_err(|e: std::num::ParseIntError| bad(2, e.to_string()))?,
                "alternatives" => {
                    out.num_alternatives = value.parse().map_err(|e: std::num::ParseIntError| bad(2, e.to_string()))?
                }
                "horizon" => out.horizon = Some(value.parse().map_err(|e: std::num::ParseFloatError| bad(2, e.to_string()))?),
                "delta" => out.delta = Some(value.parse().map_err(|e: std::num::ParseFloatError| bad(2, e.to_string()))?),
                _ => {}
            }
        }
        if out.num_agents == 0 || out.num_alternatives == 0 {
            return Err(bad(2, "header missing agents/alternatives".into()));
        }
        Ok(out)
    }
}

fn digits_of(index: usize, prov: &Provenance) -> String {
    ChoiceConfiguration::from_index(index, prov.num_agents, prov.num_alternatives).digits()
}

fn index_of(digits: &str, prov: &Provenance, file: &str, line: usize) -> Result<usize> {
    let bad = |message: String| Error::Parse {
        file: file.to_string(),
        line,
        message,
    };
    if digits.len() != prov.num_agents {
        return Err(bad(format!(
            "configuration '{digits}' has {} digits, expected {}",
            digits.len(),
            prov.num_agents
        )));
    }
    let mut choices = Vec::with_capacity(prov.num_agents);
    for c in digits.chars() {
        let d = c.to_digit(10).ok_or_else(|| bad(format!("bad digit '{c}'")))? as usize;
        if d >= prov.num_alternatives {
            return Err(bad(format!("choice {d} out of range")));
        }
        choices.push(d);
    }
    Ok(ChoiceConfiguration::new(choices, prov.num_alternatives)
        .expect("digits validated")
        .index())
}

// ---------------------------------------------------------------------------
// Event logs
// ---------------------------------------------------------------------------

/// Write a Dataset-1 event log: `time,agent,config,choice`.
pub fn write_events(path: &Path, events: &[ObservedEvent], prov: &Provenance) -> Result<()> {
    let mut out = prov.header();
    out.push_str("time,agent,config,choice\n");
    for e in events {
        writeln!(
            out,
            "{},{},{},{}",
            e.time,
            e.agent + 1,
            digits_of(e.config_before, prov),
            e.choice
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the full event log including the latent active sets (debug mode).
/// The extra column is a bitmask over agent ids, bit `a-1` set when agent `a`
/// is in the active set.
pub fn write_events_debug(path: &Path, events: &[EventRecord], prov: &Provenance) -> Result<()> {
    let mut out = prov.header();
    out.push_str("time,agent,config,choice,active_set\n");
    for e in events {
        let mask: u64 = e.active_set.iter().map(|&p| 1u64 << p).sum();
        writeln!(
            out,
            "{},{},{},{},{}",
            e.time,
            e.agent + 1,
            digits_of(e.config_before, prov),
            e.choice,
            mask
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a Dataset-1 event log (the debug column, if present, is ignored).
pub fn read_events(path: &Path) -> Result<(Vec<ObservedEvent>, Provenance)> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let prov = Provenance::parse(&lines, &file)?;
    let mut events = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(3) {
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            file: file.clone(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(bad(format!("expected 4+ fields, got {}", fields.len())));
        }
        let agent: usize = fields[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        if agent == 0 || agent > prov.num_agents {
            return Err(bad(format!("agent id {agent} out of 1..={}", prov.num_agents)));
        }
        events.push(ObservedEvent {
            time: fields[0].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            agent: agent - 1,
            config_before: index_of(fields[2], &prov, &file, i + 1)?,
            choice: fields[3].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        });
    }
    Ok((events, prov))
}

// ---------------------------------------------------------------------------
// Snapshot series
// ---------------------------------------------------------------------------

/// Write a Dataset-2 snapshot series: `k,time,config`.
pub fn write_snapshots(path: &Path, series: &SnapshotSeries, prov: &Provenance) -> Result<()> {
    let mut out = prov.header();
    out.push_str("k,time,config\n");
    for (k, &config) in series.configs.iter().enumerate() {
        writeln!(
            out,
            "{},{},{}",
            k,
            k as f64 * series.delta,
            digits_of(config, prov)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_snapshots(path: &Path) -> Result<(SnapshotSeries, Provenance)> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let prov = Provenance::parse(&lines, &file)?;
    let delta = prov.delta.ok_or_else(|| Error::Parse {
        file: file.clone(),
        line: 2,
        message: "snapshot file header must carry delta".into(),
    })?;
    let mut configs = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(3) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                file: file.clone(),
                line: i + 1,
                message: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        configs.push(index_of(fields[2], &prov, &file, i + 1)?);
    }
    Ok((SnapshotSeries { delta, configs }, prov))
}

// ---------------------------------------------------------------------------
// Vectors and matrices over configurations
// ---------------------------------------------------------------------------

/// Write a per-configuration vector (e.g. the invariant distribution):
/// `index,config,<name>`.
pub fn write_state_vector(
    path: &Path,
    name: &str,
    values: &[f64],
    prov: &Provenance,
) -> Result<()> {
    let mut out = prov.header();
    writeln!(out, "index,config,{name}").unwrap();
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{},{},{}", i, digits_of(i, prov), v).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a configurations-by-configurations matrix (generator or transition
/// kernel): `index,config,v0,v1,...`.
pub fn write_state_matrix(
    path: &Path,
    matrix: &nalgebra::DMatrix<f64>,
    prov: &Provenance,
) -> Result<()> {
    let mut out = prov.header();
    out.push_str("index,config");
    for j in 0..matrix.ncols() {
        write!(out, ",v{j}").unwrap();
    }
    out.push('\n');
    for i in 0..matrix.nrows() {
        write!(out, "{},{}", i, digits_of(i, prov)).unwrap();
        for j in 0..matrix.ncols() {
            write!(out, ",{}", matrix[(i, j)]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read back a state matrix written by `write_state_matrix`.
pub fn read_state_matrix(path: &Path) -> Result<(nalgebra::DMatrix<f64>, Provenance)> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let prov = Provenance::parse(&lines, &file)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(3) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let row: Vec<f64> = fields[2..]
            .iter()
            .map(|f| {
                f.parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                    file: file.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    Ok((
        nalgebra::DMatrix::from_fn(n, m, |i, j| rows[i][j]),
        prov,
    ))
}
