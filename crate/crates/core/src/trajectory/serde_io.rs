//! JSON-Lines dataset files: manifest object on line 0, one trajectory per
//! following line. Numeric payloads travel as f64; the value round-trip is
//! exact for both scalar lanes because serde_json prints shortest-round-trip
//! decimals.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ActionValue, Dataset, DatasetManifest, Trajectory, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ActionWire {
    Discrete(u64),
    Continuous(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
struct TrajectoryWire {
    t: Vec<usize>,
    s: Vec<Vec<f64>>,
    a: Vec<ActionWire>,
    delta: Vec<Vec<f64>>,
    r: Vec<f64>,
    rtg: Vec<f64>,
    wadv: Vec<Option<f64>>,
}

fn to_wire<F: Scalar>(traj: &Trajectory<F>) -> TrajectoryWire {
    let n = traj.records.len();
    let mut wire = TrajectoryWire {
        t: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        delta: Vec::with_capacity(n),
        r: Vec::with_capacity(n),
        rtg: Vec::with_capacity(n),
        wadv: Vec::with_capacity(n),
    };
    for rec in &traj.records {
        wire.t.push(rec.t);
        wire.s.push(rec.state.iter().map(|v| v.to_f64_c()).collect());
        wire.a.push(match &rec.action {
            ActionValue::Discrete(a) => ActionWire::Discrete(*a as u64),
            ActionValue::Continuous(v) => {
                ActionWire::Continuous(v.iter().map(|x| x.to_f64_c()).collect())
            }
        });
        wire.delta.push(rec.delta.iter().map(|v| v.to_f64_c()).collect());
        wire.r.push(rec.reward.to_f64_c());
        wire.rtg.push(rec.returns_to_go.to_f64_c());
        wire.wadv.push(rec.weighted_advantage.map(|v| v.to_f64_c()));
    }
    wire
}

fn from_wire<F: Scalar>(wire: TrajectoryWire, line: usize) -> Result<Trajectory<F>> {
    let n = wire.t.len();
    if [wire.s.len(), wire.a.len(), wire.delta.len(), wire.r.len(), wire.rtg.len(), wire.wadv.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::Parse { line, msg: "field arrays have mismatched lengths".into() });
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        records.push(TrajectoryRecord {
            t: wire.t[i],
            state: wire.s[i].iter().map(|&v| F::from_f64_c(v)).collect(),
            action: match &wire.a[i] {
                ActionWire::Discrete(a) => ActionValue::Discrete(*a as usize),
                ActionWire::Continuous(v) => {
                    ActionValue::Continuous(v.iter().map(|&x| F::from_f64_c(x)).collect())
                }
            },
            delta: wire.delta[i].iter().map(|&v| F::from_f64_c(v)).collect(),
            reward: F::from_f64_c(wire.r[i]),
            returns_to_go: F::from_f64_c(wire.rtg[i]),
            weighted_advantage: wire.wadv[i].map(F::from_f64_c),
        });
    }
    Ok(Trajectory { records })
}

pub fn serialize_dataset<F: Scalar, W: Write>(dataset: &Dataset<F>, mut writer: W) -> Result<()> {
    dataset.manifest.validate()?;
    serde_json::to_writer(&mut writer, &dataset.manifest)?;
    writer.write_all(b"\n")?;
    for traj in &dataset.trajectories {
        serde_json::to_writer(&mut writer, &to_wire(traj))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn deserialize_dataset<F: Scalar, R: BufRead>(reader: R) -> Result<Dataset<F>> {
    let mut lines = reader.lines();
    let manifest_line = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 0, msg: "empty file, expected manifest".into() })??;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_line)
        .map_err(|e| Error::Parse { line: 0, msg: format!("bad manifest: {e}") })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 0,
            msg: format!(
                "schema version {} unsupported (expected {})",
                manifest.schema_version, SCHEMA_VERSION
            ),
        });
    }
    manifest.validate()?;
    let mut trajectories = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let wire: TrajectoryWire = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        trajectories.push(from_wire(wire, line_no)?);
    }
    Ok(Dataset { manifest, trajectories })
}
