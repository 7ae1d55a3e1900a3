//! Network checkpoints: a JSON header next to a little-endian `f64` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shallow_net::NetworkParams;

const LAYOUT: &str = "per-neuron (beta, alpha, c_1..c_d), f64 little-endian";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub n: usize,
    pub d: usize,
    pub delta: f64,
    pub clip_radius: f64,
    pub seed: u64,
    pub layout: String,
    pub payload: String,
    pub payload_bytes: usize,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save(net: &NetworkParams, seed: u64, stem: &Path) -> Result<CheckpointHeader> {
    let (json_path, bin_path) = paths(stem);
    let theta = net.flat();
    let mut bytes = Vec::with_capacity(theta.len() * 8);
    for v in &theta {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let header = CheckpointHeader {
        n: net.width(),
        d: net.dim(),
        delta: net.delta(),
        clip_radius: net.clip_radius(),
        seed,
        layout: LAYOUT.to_string(),
        payload: bin_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        payload_bytes: bytes.len(),
    };
    fs::write(&bin_path, &bytes)?;
    fs::write(&json_path, serde_json::to_string_pretty(&header)?)?;
    Ok(header)
}

/// Reads a checkpoint written by [`save`]. `stem` may carry either extension.
pub fn load(stem: &Path) -> Result<(NetworkParams, CheckpointHeader)> {
    let (json_path, _) = paths(stem);
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    let bin_path = json_path.with_file_name(&header.payload);
    let bytes = fs::read(&bin_path)?;
    let expected = header.n * (2 + header.d) * 8;
    if bytes.len() != expected || header.payload_bytes != expected {
        return Err(Error::MissingData(format!(
            "checkpoint payload has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let theta: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().expect("8-byte chunk")))
        .collect();
    let stride = 2 + header.d;
    let neurons = theta
        .chunks_exact(stride)
        .map(|ch| crate::shallow_net::NeuronParams {
            beta: ch[0],
            alpha: ch[1],
            c: ch[2..].to_vec(),
        })
        .collect();
    let net = NetworkParams::new(header.d, neurons, header.delta, header.clip_radius)?;
    Ok((net, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shallow_net::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = init_params(37, 2, 0.7, 3.0, 99).unwrap();
        net.neurons[0].beta = f64::MIN_POSITIVE / 3.0;
        net.neurons[1].c[1] = -0.0;
        let stem = dir.path().join("net");
        save(&net, 99, &stem).unwrap();
        let (back, header) = load(&stem).unwrap();
        assert_eq!(header.seed, 99);
        let a: Vec<u64> = net.flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.delta().to_bits(), net.delta().to_bits());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = init_params(8, 1, 0.75, 2.0, 1).unwrap();
        let stem = dir.path().join("n");
        save(&net, 1, &stem).unwrap();
        let bin = stem.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&bin, bytes).unwrap();
        assert!(load(&stem).is_err());
    }
}
