//! Parameter and multiply-accumulate counts.
//!
//! Operation counts are multiply-accumulates for one person over a window
//! of `T` frames. Elementwise work, normalisation, pooling and the
//! modality generator are not counted.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, Stream, StreamNet};
use crate::nn::{Pointwise, TemporalConv};
use crate::skeleton::Part;
use crate::strb::{BranchLayers, Residual, Samg, Strb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamBudget {
    pub part: Part,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBudget {
    pub window: usize,
    pub streams: Vec<StreamBudget>,
    pub total_params: usize,
    pub total_macs: u64,
}

/// MACs of a `kt x 1` temporal convolution producing `t_out` frames on `n`
/// joints.
pub fn conv_macs(cin: usize, cout: usize, kt: usize, t_out: usize, n: usize) -> u64 {
    (cin * cout * kt * t_out * n) as u64
}

fn pointwise_macs(p: &Pointwise, t: usize, n: usize) -> u64 {
    conv_macs(p.cin, p.cout, 1, t, n)
}

fn temporal_macs(c: &TemporalConv, t: usize, n: usize) -> Result<(u64, usize)> {
    let t_out = c.spec.out_len(t, c.kt)?;
    Ok((conv_macs(c.cin, c.cout, c.kt, t_out, n), t_out))
}

fn samg_macs(s: &Samg, t: usize, n: usize) -> u64 {
    // phi, psi and theta see every frame; the map path runs on pooled
    // features over joint pairs.
    let mut m = pointwise_macs(&s.phi, t, n) + pointwise_macs(&s.psi, t, n) + pointwise_macs(&s.theta, t, n);
    if let Some(sq) = &s.squash {
        m += pointwise_macs(sq, n, n);
    }
    m += pointwise_macs(&s.expand, n, n);
    m + (s.theta.cout * t * n * n) as u64
}

fn block_macs(b: &Strb, t: usize, n: usize) -> Result<(u64, usize)> {
    let mut m = samg_macs(&b.samg, t, n);
    for layers in &b.trm.branches {
        m += match layers {
            BranchLayers::Conv { reduce, conv, .. } => temporal_macs(reduce, t, n)?.0 + temporal_macs(conv, t, n)?.0,
            BranchLayers::MaxPool { reduce, .. } => temporal_macs(reduce, t, n)?.0,
            BranchLayers::Pointwise { conv, .. } => temporal_macs(conv, t, n)?.0,
        };
    }
    if let Residual::Projection { conv, .. } = &b.residual {
        m += temporal_macs(conv, t, n)?.0;
    }
    Ok((m, b.trm.config.out_len(t, b.trm.stride)?))
}

pub fn stream_macs(net: &StreamNet, window: usize) -> Result<u64> {
    let n = net.joints();
    let (mut total, mut t) = (0u64, window);
    for b in &net.strm.blocks {
        let (m, t_out) = block_macs(b, t, n)?;
        total += m;
        t = t_out;
    }
    Ok(total + (net.fc.cin * net.fc.cout) as u64)
}

pub fn stream_budget(stream: &Stream, window: usize) -> Result<StreamBudget> {
    Ok(StreamBudget {
        part: stream.part(),
        params: stream.params.count_params(),
        macs: stream_macs(&stream.net, window)?,
    })
}

pub fn model_budget(model: &Model, window: usize) -> Result<ModelBudget> {
    let streams = model
        .streams
        .iter()
        .map(|s| stream_budget(s, window))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelBudget {
        window,
        total_params: streams.iter().map(|s| s.params).sum(),
        total_macs: streams.iter().map(|s| s.macs).sum(),
        streams,
    })
}
