//! Trajectory JSON Lines and network CSV/manifest files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{FeatureSpec, FeatureTensor, Mdp, StateId, TransitionKernel};
use crate::trajectory::{ObservedStep, Segment, Trajectory};

pub const NETWORK_CSV: &str = "network.csv";
pub const NETWORK_MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    origin: usize,
    dest: usize,
    segments: Vec<SegmentRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum SegmentRecord {
    Obs(Vec<(usize, usize)>),
    Gap((usize, usize)),
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        TrajectoryRecord {
            origin: t.origin.0,
            dest: t.dest.0,
            segments: t
                .segments
                .iter()
                .map(|s| match s {
                    Segment::Observed(steps) => SegmentRecord::Obs(steps.iter().map(|st| (st.state.0, st.action.0)).collect()),
                    Segment::Gap { u, v } => SegmentRecord::Gap((u.0, v.0)),
                })
                .collect(),
        }
    }
}

impl From<TrajectoryRecord> for Trajectory {
    fn from(r: TrajectoryRecord) -> Self {
        Trajectory {
            origin: StateId(r.origin),
            dest: StateId(r.dest),
            segments: r
                .segments
                .into_iter()
                .map(|s| match s {
                    SegmentRecord::Obs(steps) => Segment::Observed(steps.into_iter().map(|(s, a)| ObservedStep::new(s, a)).collect()),
                    SegmentRecord::Gap((u, v)) => Segment::Gap { u: StateId(u), v: StateId(v) },
                })
                .collect(),
        }
    }
}

/// One JSON object per line.
pub fn write_trajectories<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut out, &TrajectoryRecord::from(t))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSON Lines; blank lines are skipped, malformed ones reported with
/// their 1-based line number.
pub fn read_trajectories<R: Read>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec.into());
    }
    Ok(out)
}

pub fn write_trajectories_file(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    write_trajectories(BufWriter::new(File::create(path)?), trajectories)
}

pub fn read_trajectories_file(path: &Path) -> Result<Vec<Trajectory>> {
    read_trajectories(File::open(path)?)
}

/// Reads trajectories and checks each against the network.
pub fn read_validated(path: &Path, mdp: &Mdp) -> Result<Vec<Trajectory>> {
    let data = read_trajectories_file(path)?;
    for (i, t) in data.iter().enumerate() {
        t.validate(mdp).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
    }
    Ok(data)
}

/// Feature schema and state count of a network, plus free-form provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub features: Vec<FeatureSpec>,
    pub n_states: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_manifest: Option<String>,
}

/// Writes one CSV row `from,to,f_1,…,f_T` per transition, sorted by
/// `(from, to)`. Only deterministic kernels (one successor per action) can
/// be written.
pub fn write_network_csv<W: Write>(out: W, mdp: &Mdp) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let specs = mdp.features().specs();
    let mut header = vec!["from".to_string(), "to".to_string()];
    header.extend(specs.iter().map(|s| s.name.clone()));
    w.write_record(&header)?;
    let kernel = mdp.kernel();
    for s in 0..mdp.n_states() {
        let mut targets = Vec::new();
        for g in kernel.action_range(StateId(s)) {
            let (succ, _) = kernel.outcomes(g);
            if succ.len() != 1 {
                return Err(Error::invalid(format!("state {s} has a stochastic action; the CSV format is deterministic")));
            }
            targets.push(succ[0]);
        }
        targets.sort_unstable();
        for t in targets {
            let pos = mdp.support().position(s, t).expect("kernel entry in support");
            let mut row = vec![s.to_string(), t.to_string()];
            row.extend(mdp.features_at(pos).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses the network CSV against a manifest.
pub fn read_network_csv<R: Read>(input: R, manifest: &NetworkManifest) -> Result<Mdp> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    let t = manifest.features.len();
    let expected: Vec<&str> = ["from", "to"].into_iter().chain(manifest.features.iter().map(|f| f.name.as_str())).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse { line: 1, msg: format!("header {:?} does not match manifest {:?}", header, expected) });
    }
    let mut edges = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != t + 2 {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", t + 2, rec.len()) });
        }
        let idx = |k: usize| -> Result<usize> {
            let v: usize = rec[k].trim().parse().map_err(|e| Error::Parse { line, msg: format!("field {k}: {e}") })?;
            if v >= manifest.n_states {
                return Err(Error::Parse { line, msg: format!("state {v} outside 0..{}", manifest.n_states) });
            }
            Ok(v)
        };
        let (from, to) = (idx(0)?, idx(1)?);
        let feats = (2..t + 2)
            .map(|k| {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line, msg: format!("feature {:?} is not a finite number", &rec[k]) })
            })
            .collect::<Result<Vec<f64>>>()?;
        edges.push((from, to));
        rows.push((from, to, feats));
    }
    let kernel = TransitionKernel::deterministic(manifest.n_states, &edges)?;
    let features = FeatureTensor::from_rows(manifest.n_states, manifest.features.clone(), &rows)?;
    Mdp::new(kernel, features)
}

pub fn write_network(dir: &Path, mdp: &Mdp, manifest: &NetworkManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_network_csv(BufWriter::new(File::create(dir.join(NETWORK_CSV))?), mdp)?;
    let mut f = BufWriter::new(File::create(dir.join(NETWORK_MANIFEST))?);
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_network(dir: &Path) -> Result<(Mdp, NetworkManifest)> {
    let manifest: NetworkManifest = serde_json::from_reader(BufReader::new(File::open(dir.join(NETWORK_MANIFEST))?))?;
    let mdp = read_network_csv(File::open(dir.join(NETWORK_CSV))?, &manifest)?;
    Ok((mdp, manifest))
}

pub fn manifest_for(mdp: &Mdp) -> NetworkManifest {
    NetworkManifest { features: mdp.features().specs().to_vec(), n_states: mdp.n_states(), generator: None, run_manifest: None }
}
