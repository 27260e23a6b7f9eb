//! SKJ sequence files: one JSON header line, then little-endian `f32`
//! coordinates in `(t, n, m, c)` order.

use std::fs;
use std::path::Path;

use psumnet_core::skeleton::{ActionSequence, SkeletonTopology, COORDS};
use psumnet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SKJ_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkjHeader {
    pub skj: u32,
    pub topology: String,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "N")]
    pub joints: usize,
    #[serde(rename = "M")]
    pub persons: usize,
    pub label: usize,
}

pub fn encode(seq: &ActionSequence, topology: &str) -> Vec<u8> {
    let (t, n, m) = (seq.frames(), seq.joints(), seq.persons());
    let header = SkjHeader {
        skj: SKJ_VERSION,
        topology: topology.into(),
        frames: t,
        joints: n,
        persons: m,
        label: seq.label,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(t * n * m * COORDS * 4);
    let d = seq.coords.data();
    for ti in 0..t {
        for j in 0..n {
            for p in 0..m {
                for c in 0..COORDS {
                    out.extend_from_slice(&d[((c * t + ti) * n + j) * m + p].to_le_bytes());
                }
            }
        }
    }
    out
}

/// Parses SKJ bytes; errors are plain messages for the caller to attach a
/// path to.
pub fn decode(bytes: &[u8]) -> std::result::Result<(SkjHeader, ActionSequence), String> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header line")?;
    let header: SkjHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| format!("bad header: {e}"))?;
    if header.skj != SKJ_VERSION {
        return Err(format!("unsupported SKJ version {}", header.skj));
    }
    let (t, n, m) = (header.frames, header.joints, header.persons);
    if t == 0 || n == 0 || m == 0 {
        return Err("T, N and M must be positive".into());
    }
    let body = &bytes[nl + 1..];
    let want = t * n * m * COORDS * 4;
    if body.len() != want {
        return Err(format!("expected {want} payload bytes, found {}", body.len()));
    }
    let vals: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let coords = Tensor::from_fn(&[COORDS, t, n, m], |i| {
        let (c, r) = (i / (t * n * m), i % (t * n * m));
        let (ti, r) = (r / (n * m), r % (n * m));
        let (j, p) = (r / m, r % m);
        vals[((ti * n + j) * m + p) * COORDS + c]
    });
    let seq = ActionSequence::new(coords, header.label).map_err(|e| e.to_string())?;
    Ok((header, seq))
}

pub fn write_skj(path: &Path, seq: &ActionSequence, topology: &str) -> Result<()> {
    fs::write(path, encode(seq, topology)).map_err(|e| Error::io(path, e))
}

/// Reads a sequence and checks it against `topology` when given.
pub fn read_skj(path: &Path, topology: Option<&SkeletonTopology>) -> Result<(SkjHeader, ActionSequence)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, seq) = decode(&bytes).map_err(|m| Error::format(path, m))?;
    if let Some(topo) = topology {
        if header.topology != topo.name || header.joints != topo.num_joints() {
            return Err(Error::format(
                path,
                format!(
                    "topology {} with {} joints, expected {} with {}",
                    header.topology,
                    header.joints,
                    topo.name,
                    topo.num_joints()
                ),
            ));
        }
    }
    Ok((header, seq))
}
