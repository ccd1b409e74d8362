//! Model snapshots: a JSON manifest next to a flat little-endian `f64` dump.
//!
//! The binary holds, for each layer in order, `W` (row-major) then `b`;
//! then, if an adapter is present, `A` then `B` for each adapted layer in
//! order. The manifest records everything needed to reshape it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fingerprint, Activation, AdapterParams, Dense, InputLayout, LowRank, Mlp, MlpScore};
use crate::{Error, Result};

pub const SNAPSHOT_FORMAT: &str = "tracelab-mlp/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub rank: usize,
    pub scale: f64,
    /// One flag per layer.
    pub adapted: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotManifest {
    pub format: String,
    pub layout: InputLayout,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub adapter: Option<AdapterManifest>,
    pub param_count: usize,
    /// Hex SHA-256 of the binary payload's values.
    pub sha256: String,
    /// File name of the payload, relative to the manifest.
    pub payload: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub manifest: SnapshotManifest,
    pub model: MlpScore,
}

fn payload_values(model: &MlpScore) -> Vec<f64> {
    let mut v = model.base.flat_params();
    if let Some(ad) = &model.adapter {
        v.extend(ad.flat_params());
    }
    v
}

/// Writes `<stem>.json` and `<stem>.bin`; returns the manifest.
pub fn save_snapshot(
    stem: &Path,
    model: &MlpScore,
    config_hash: Option<&str>,
    seed: Option<u64>,
) -> Result<SnapshotManifest> {
    let values = payload_values(model);
    let bin_path = stem.with_extension("bin");
    let payload = bin_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::config(format!("bad snapshot path {}", stem.display())))?
        .to_string();
    let manifest = SnapshotManifest {
        format: SNAPSHOT_FORMAT.into(),
        layout: model.base.layout,
        widths: model.base.widths(),
        activation: model.base.activation,
        adapter: model.adapter.as_ref().map(|a| AdapterManifest {
            rank: a.rank,
            scale: a.scale,
            adapted: a.layers.iter().map(Option::is_some).collect(),
        }),
        param_count: values.len(),
        sha256: fingerprint(&values),
        payload,
        config_hash: config_hash.map(str::to_string),
        seed,
    };
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin_path, bytes)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(stem.with_extension("json"), json + "\n")?;
    Ok(manifest)
}

/// Reads a snapshot given its manifest path.
pub fn load_snapshot(manifest_path: &Path) -> Result<Snapshot> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: SnapshotManifest =
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    if manifest.format != SNAPSHOT_FORMAT {
        return Err(Error::Serde(format!("unknown snapshot format {:?}", manifest.format)));
    }
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
    let bytes = fs::read(dir.join(&manifest.payload))?;
    if bytes.len() != 8 * manifest.param_count {
        return Err(Error::Serde(format!(
            "payload holds {} bytes, manifest expects {} values",
            bytes.len(),
            manifest.param_count
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if fingerprint(&values) != manifest.sha256 {
        return Err(Error::Serde("snapshot payload checksum mismatch".into()));
    }
    let w = &manifest.widths;
    if w.len() < 2 || w[0] != manifest.layout.width() || *w.last().unwrap() != manifest.layout.data_dim {
        return Err(Error::Serde("snapshot widths disagree with the input layout".into()));
    }
    let mut layers: Vec<Dense> = w
        .windows(2)
        .map(|p| Dense {
            n_in: p[0],
            n_out: p[1],
            w: vec![0.0; p[0] * p[1]],
            b: vec![0.0; p[1]],
        })
        .collect();
    let mut base = Mlp {
        layout: manifest.layout,
        activation: manifest.activation,
        layers: std::mem::take(&mut layers),
    };
    let n_base = base.param_count();
    if n_base > values.len() {
        return Err(Error::Serde("payload shorter than the base network".into()));
    }
    base.set_flat_params(&values[..n_base])?;
    let adapter = match &manifest.adapter {
        None => None,
        Some(am) => {
            if am.adapted.len() != base.layers.len() {
                return Err(Error::Serde("adapter flags disagree with the layer count".into()));
            }
            let mut ad = AdapterParams {
                rank: am.rank,
                scale: am.scale,
                layers: base
                    .layers
                    .iter()
                    .zip(&am.adapted)
                    .map(|(l, &on)| {
                        on.then(|| LowRank {
                            a: vec![0.0; l.n_out * am.rank],
                            b: vec![0.0; am.rank * l.n_in],
                        })
                    })
                    .collect(),
            };
            ad.set_flat_params(&values[n_base..])?;
            Some(ad)
        }
    };
    let model = MlpScore { base, adapter };
    if payload_values(&model).len() != values.len() {
        return Err(Error::Serde("payload longer than the described model".into()));
    }
    Ok(Snapshot { manifest, model })
}
