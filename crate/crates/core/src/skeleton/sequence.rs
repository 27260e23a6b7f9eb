use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::parts::{JointGraph, Part, PartGroupSpec};
use super::topology::SkeletonTopology;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const COORDS: usize = 3;
pub const DEFAULT_WINDOW: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub subject: Option<u32>,
    pub camera: Option<u32>,
}

/// One labelled clip, `coords[c, t, n, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence {
    pub coords: Tensor<f32>,
    pub label: usize,
    pub meta: SequenceMeta,
}

impl ActionSequence {
    pub fn new(coords: Tensor<f32>, label: usize) -> Result<Self> {
        let s = coords.shape();
        if s.len() != 4 || s[0] != COORDS {
            return Err(Error::shape("action sequence", s, &[COORDS, 0, 0, 0]));
        }
        coords.ensure_finite("sequence coordinates")?;
        Ok(Self {
            coords,
            label,
            meta: SequenceMeta::default(),
        })
    }

    pub fn frames(&self) -> usize {
        self.coords.dim(1)
    }

    pub fn joints(&self) -> usize {
        self.coords.dim(2)
    }

    pub fn persons(&self) -> usize {
        self.coords.dim(3)
    }

    /// Whether person `m` has any nonzero coordinate.
    pub fn person_present(&self, m: usize) -> bool {
        let persons = self.persons();
        self.coords
            .data()
            .iter()
            .skip(m)
            .step_by(persons)
            .any(|&v| v != 0.0)
    }

    /// Zero-pads or drops persons to exactly `m`.
    pub fn with_persons(&self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("person count must be positive"));
        }
        let s = self.coords.shape();
        let coords = Tensor::from_fn(&[s[0], s[1], s[2], m], |i| {
            let (rest, p) = (i / m, i % m);
            if p < s[3] {
                self.coords.data()[rest * s[3] + p]
            } else {
                0.0
            }
        });
        Ok(Self {
            coords,
            label: self.label,
            meta: self.meta.clone(),
        })
    }

    fn with_coords(&self, coords: Tensor<f32>) -> Self {
        Self {
            coords,
            label: self.label,
            meta: self.meta.clone(),
        }
    }

    /// Keeps the frames listed in `frames`, in order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self> {
        Ok(self.with_coords(self.coords.index_select(1, frames)?))
    }

    /// First `ceil(fraction * T)` frames. At least two frames must remain.
    pub fn truncate(&self, fraction: f64) -> Result<Self> {
        let keep = truncated_len(self.frames(), fraction)?;
        let frames: Vec<usize> = (0..keep).collect();
        self.select_frames(&frames)
    }
}

/// Frames kept by [`ActionSequence::truncate`].
pub fn truncated_len(frames: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
    }
    let keep = num_traits::Float::ceil(fraction * frames as f64 - 1e-9) as usize;
    let keep = keep.clamp(1, frames);
    if keep < 2 {
        return Err(Error::config(format!(
            "fraction {fraction} of {frames} frames leaves fewer than 2"
        )));
    }
    Ok(keep)
}

/// Source frame for each of `window` output frames: cyclic repetition for
/// short clips, uniform subsampling for long ones.
pub fn window_indices(frames: usize, window: usize) -> Vec<usize> {
    if frames <= window {
        (0..window).map(|i| i % frames).collect()
    } else {
        (0..window).map(|i| i * frames / window).collect()
    }
}

/// How clips shorter than the window are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePad {
    /// Repeat the clip from its start.
    #[default]
    Loop,
    /// Append all-zero frames.
    Zero,
}

/// Translates each present person so the first frame's center joint sits
/// at the origin, then fits the clip to `window` frames by looping.
pub fn normalize_sequence(seq: &ActionSequence, topology: &SkeletonTopology, window: usize) -> Result<ActionSequence> {
    normalize_sequence_padded(seq, topology, window, FramePad::Loop)
}

pub fn normalize_sequence_padded(
    seq: &ActionSequence,
    topology: &SkeletonTopology,
    window: usize,
    pad: FramePad,
) -> Result<ActionSequence> {
    if seq.joints() != topology.num_joints() {
        return Err(Error::shape(
            "normalize_sequence joints",
            &[seq.joints()],
            &[topology.num_joints()],
        ));
    }
    if window == 0 {
        return Err(Error::config("window must be positive"));
    }
    let [_, t, n, m] = seq.coords.shape()[..] else {
        unreachable!()
    };
    let mut coords = seq.coords.clone();
    for p in 0..m {
        if !seq.person_present(p) {
            continue;
        }
        let origin: Vec<f32> = (0..COORDS)
            .map(|c| seq.coords.get(&[c, 0, topology.center, p]))
            .collect();
        let d = coords.data_mut();
        for (c, &o) in origin.iter().enumerate() {
            for ti in 0..t {
                for j in 0..n {
                    d[((c * t + ti) * n + j) * m + p] -= o;
                }
            }
        }
    }
    let centered = seq.with_coords(coords);
    if pad == FramePad::Zero && t < window {
        let inner = n * m;
        let src = centered.coords.data();
        let padded = Tensor::from_fn(&[COORDS, window, n, m], |i| {
            let (c, rest) = (i / (window * inner), i % (window * inner));
            let (ti, e) = (rest / inner, rest % inner);
            if ti < t {
                src[(c * t + ti) * inner + e]
            } else {
                0.0
            }
        });
        return Ok(seq.with_coords(padded));
    }
    centered.select_frames(&window_indices(t, window))
}

/// Per-stream views of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorized {
    pub body: Option<ActionSequence>,
    pub hands: Option<ActionSequence>,
    pub legs: Option<ActionSequence>,
}

impl Factorized {
    pub fn get(&self, part: Part) -> Option<&ActionSequence> {
        match part {
            Part::Body => self.body.as_ref(),
            Part::Hands => self.hands.as_ref(),
            Part::Legs => self.legs.as_ref(),
        }
    }
}

/// Selects each group's joints, in group order, without moving them:
/// all groups share the sequence's coordinate frame. Empty groups give
/// `None`.
pub fn factorize_parts(seq: &ActionSequence, spec: &PartGroupSpec) -> Result<Factorized> {
    let pick = |part: Part| -> Result<Option<ActionSequence>> {
        let joints = spec.group(part);
        if joints.is_empty() {
            return Ok(None);
        }
        Ok(Some(seq.with_coords(seq.coords.index_select(2, joints)?)))
    };
    Ok(Factorized {
        body: pick(Part::Body)?,
        hands: pick(Part::Hands)?,
        legs: pick(Part::Legs)?,
    })
}

/// Re-expresses every joint relative to the root of its component, frame by
/// frame. `x` is `[C, T, N, M]` over the graph's joints.
pub fn to_local_frame<S: Scalar>(x: &Tensor<S>, graph: &JointGraph) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != graph.len() {
        return Err(Error::shape("to_local_frame", s, &[COORDS, 0, graph.len(), 0]));
    }
    let (c, t, n, m) = (s[0], s[1], s[2], s[3]);
    let root = graph.component_root();
    let src = x.data();
    let mut out = src.to_vec();
    for ct in 0..c * t {
        for j in 0..n {
            for p in 0..m {
                let at = |jj: usize| (ct * n + jj) * m + p;
                out[at(j)] = src[at(j)] - src[at(root[j])];
            }
        }
    }
    Tensor::new(s, out)
}

/// Stacks sequences into a network batch `[B * M, C, T, N]` with persons
/// innermost, plus a presence flag per row.
pub fn stack_batch<S: Scalar>(seqs: &[&ActionSequence]) -> Result<(Tensor<S>, Vec<bool>)> {
    let first = seqs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let shape = first.coords.shape().to_vec();
    let (c, t, n, m) = (shape[0], shape[1], shape[2], shape[3]);
    let mut data = Vec::with_capacity(seqs.len() * shape.iter().product::<usize>());
    let mut valid = Vec::with_capacity(seqs.len() * m);
    for s in seqs {
        if s.coords.shape() != &shape[..] {
            return Err(Error::shape("stack_batch", s.coords.shape(), &shape));
        }
        let d = s.coords.data();
        for p in 0..m {
            valid.push(s.person_present(p));
            for ci in 0..c {
                for ti in 0..t {
                    for j in 0..n {
                        data.push(S::from_f64_lossy(d[((ci * t + ti) * n + j) * m + p] as f64));
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[seqs.len() * m, c, t, n], data)?, valid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, n: usize, m: usize, f: impl FnMut(usize) -> f32) -> ActionSequence {
        ActionSequence::new(Tensor::from_fn(&[3, t, n, m], f), 0).unwrap()
    }

    #[test]
    fn loop_padding_repeats_cyclically() {
        let idx = window_indices(10, 64);
        assert_eq!(idx.len(), 64);
        for (i, &k) in idx.iter().enumerate() {
            assert_eq!(k, i % 10);
        }
        assert_eq!(window_indices(8, 4), vec![0, 2, 4, 6]);
        assert_eq!(window_indices(5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn constant_translation_removed() {
        let topo = SkeletonTopology::new("chain", vec![0, 0, 1], 1).unwrap();
        let base = seq(4, 3, 1, |i| (i as f32 * 0.37).sin());
        let shifted = seq(4, 3, 1, |i| (i as f32 * 0.37).sin() + [1.5, -2.0, 0.25][i / 12]);
        let a = normalize_sequence(&base, &topo, 4).unwrap();
        let b = normalize_sequence(&shifted, &topo, 4).unwrap();
        assert!(a.coords.max_abs_diff(&b.coords).unwrap() < 1e-5);
        for c in 0..3 {
            assert_eq!(a.coords.get(&[c, 0, 1, 0]), 0.0);
        }
    }

    #[test]
    fn absent_person_stays_zero() {
        let topo = SkeletonTopology::new("pair", vec![0, 0], 0).unwrap();
        let s = seq(3, 2, 2, |i| if i % 2 == 0 { 1.0 + i as f32 } else { 0.0 });
        assert!(s.person_present(0) && !s.person_present(1));
        let out = normalize_sequence(&s, &topo, 3).unwrap();
        assert!(out.coords.data().iter().skip(1).step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn truncation_lengths() {
        assert_eq!(truncated_len(32, 0.2).unwrap(), 7);
        assert_eq!(truncated_len(32, 1.0).unwrap(), 32);
        assert_eq!(truncated_len(10, 0.3).unwrap(), 3);
        assert!(truncated_len(5, 0.1).is_err());
        assert!(truncated_len(5, 0.0).is_err());
        let lens: Vec<usize> = [0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .map(|&p| truncated_len(64, p).unwrap())
            .collect();
        assert!(lens.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn factorized_groups_share_coordinates() {
        let spec = PartGroupSpec::standard("ntu25").unwrap();
        let s = seq(2, 25, 1, |i| i as f32 * 0.01);
        let f = factorize_parts(&s, &spec).unwrap();
        assert_eq!(f.body.as_ref().unwrap().joints(), 25);
        assert_eq!(f.hands.as_ref().unwrap().joints(), 13);
        assert_eq!(f.legs.as_ref().unwrap().joints(), 9);
        let hands = f.hands.unwrap();
        for (k, &j) in spec.hands.iter().enumerate() {
            let a = hands.coords.index_select(2, &[k]).unwrap();
            let b = s.coords.index_select(2, &[j]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn local_frame_zeroes_component_roots() {
        let topo = SkeletonTopology::ntu25();
        let spec = PartGroupSpec::disjoint("ntu25").unwrap();
        let g = spec.subgraph(&topo, Part::Legs).unwrap();
        let x = Tensor::<f64>::from_fn(&[3, 2, 8, 1], |i| 1.0 + i as f64);
        let y = to_local_frame(&x, &g).unwrap();
        for r in g.roots() {
            for ct in 0..6 {
                assert_eq!(y.data()[ct * 8 + r], 0.0);
            }
        }
    }

    #[test]
    fn batch_layout_puts_persons_innermost() {
        let s = seq(2, 3, 2, |i| i as f32);
        let (x, valid) = stack_batch::<f64>(&[&s, &s]).unwrap();
        assert_eq!(x.shape(), &[4, 3, 2, 3]);
        assert_eq!(valid, vec![true, true, true, true]);
        // row 1 is person 1 of sample 0
        assert_eq!(x.get(&[1, 0, 0, 0]), 1.0);
        assert_eq!(x.get(&[0, 0, 0, 1]), 2.0);
    }
}
