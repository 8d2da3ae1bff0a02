//! File formats: the binary field layout, CSV exports and trajectory
//! checkpoints with a JSON manifest.
//!
//! Binary field: `L` as f64 LE, `n` as u32 LE, then `n` samples as f64 LE.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::Trajectory;
use crate::error::{LabError, Result};
use crate::spectral::{make_grid, Field, Grid};

pub fn encode_field(f: &Field) -> Vec<u8> {
    let g = f.grid();
    let mut out = Vec::with_capacity(12 + 8 * g.n_points());
    out.extend_from_slice(&g.half_length().to_le_bytes());
    out.extend_from_slice(&(g.n_points() as u32).to_le_bytes());
    for v in f.samples() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    if bytes.len() < 12 {
        return Err(LabError::Format("field header truncated".into()));
    }
    let l = f64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != 8 * n {
        return Err(LabError::Format(format!(
            "expected {} sample bytes, found {}",
            8 * n,
            body.len()
        )));
    }
    let grid = make_grid(l, n)?;
    let samples = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Field::from_samples(&grid, samples)
}

pub fn write_field(path: &Path, f: &Field) -> Result<()> {
    fs::write(path, encode_field(f))?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<Field> {
    decode_field(&fs::read(path)?)
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Header row plus one line per row, comma separated.
pub fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.into_iter().map(fmt_f64).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// `x,value` rows.
pub fn field_csv(f: &Field) -> String {
    let g = f.grid();
    csv_table(
        &["x", "value"],
        (0..g.n_points()).map(|j| vec![g.x(j), f.samples()[j]]),
    )
}

/// `t,l2,h1,h2,phi_l2` rows, one per step.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let d = &traj.diagnostics;
    csv_table(
        &["t", "l2", "h1", "h2", "phi_l2"],
        (0..d.len()).map(|k| vec![d.t[k], d.l2[k], d.h1[k], d.h2[k], d.phi_l2[k]]),
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub half_length: f64,
    pub n_points: usize,
    pub a: f64,
    pub dt: f64,
    pub steps: usize,
    pub record_every: usize,
    pub times: Vec<f64>,
    /// One file name and SHA-256 per recorded state.
    pub states: Vec<(String, String)>,
}

/// Writes every recorded state as a binary field plus `manifest.json`.
pub fn write_checkpoint(dir: &Path, traj: &Trajectory) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut states = Vec::with_capacity(traj.states.len());
    for (i, s) in traj.states.iter().enumerate() {
        let name = format!("state_{i:05}.bin");
        let bytes = encode_field(s);
        fs::write(dir.join(&name), &bytes)?;
        states.push((name, sha256_hex(&bytes)));
    }
    let manifest = CheckpointManifest {
        seed: traj.seed,
        half_length: traj.grid.half_length(),
        n_points: traj.grid.n_points(),
        a: traj.a,
        dt: traj.dt,
        steps: traj.steps,
        record_every: traj.record_every,
        times: traj.times.clone(),
        states,
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| LabError::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Reads a checkpoint back, verifying every hash.
pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<Field>)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| LabError::Format(e.to_string()))?;
    let grid: Arc<Grid> = make_grid(manifest.half_length, manifest.n_points)?;
    let mut fields = Vec::with_capacity(manifest.states.len());
    for (name, hash) in &manifest.states {
        let bytes = fs::read(dir.join(name))?;
        if &sha256_hex(&bytes) != hash {
            return Err(LabError::Format(format!("hash mismatch for {name}")));
        }
        let f = decode_field(&bytes)?;
        if !f.grid().same_as(&grid) {
            return Err(LabError::GridMismatch);
        }
        fields.push(f);
    }
    Ok((manifest, fields))
}
