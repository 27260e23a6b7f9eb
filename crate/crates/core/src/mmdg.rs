//! Multi-modality input generation: joints, bones, and their frame-to-frame
//! velocities, concatenated along the channel axis.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_at_axis, Tensor};

/// Which modalities feed a stream. Channel order is always
/// joint, bone, joint velocity, bone velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySelection {
    pub joint: bool,
    pub bone: bool,
    pub joint_vel: bool,
    pub bone_vel: bool,
}

impl Default for ModalitySelection {
    fn default() -> Self {
        Self::ALL
    }
}

impl ModalitySelection {
    pub const ALL: Self = Self {
        joint: true,
        bone: true,
        joint_vel: true,
        bone_vel: true,
    };
    pub const JOINT: Self = Self {
        joint: true,
        bone: false,
        joint_vel: false,
        bone_vel: false,
    };
    pub const BONE: Self = Self {
        joint: false,
        bone: true,
        joint_vel: false,
        bone_vel: false,
    };
    pub const JOINT_VEL: Self = Self {
        joint: false,
        bone: false,
        joint_vel: true,
        bone_vel: false,
    };
    pub const BONE_VEL: Self = Self {
        joint: false,
        bone: false,
        joint_vel: false,
        bone_vel: true,
    };

    pub fn count(&self) -> usize {
        [self.joint, self.bone, self.joint_vel, self.bone_vel]
            .iter()
            .filter(|&&f| f)
            .count()
    }

    /// Output channel count for `coord_channels` input channels.
    pub fn channels(&self, coord_channels: usize) -> usize {
        coord_channels * self.count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::config("modality selection is empty"));
        }
        Ok(())
    }
}

/// Axis roles of a skeleton tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub channel: usize,
    pub time: usize,
    pub joint: usize,
}

impl Layout {
    /// Stored sequences: `[C, T, N, M]`.
    pub const SEQUENCE: Self = Self {
        channel: 0,
        time: 1,
        joint: 2,
    };
    /// Network batches: `[B, C, T, N]`.
    pub const BATCH: Self = Self {
        channel: 1,
        time: 2,
        joint: 3,
    };
}

fn check_parent(parent: &[usize], n: usize) -> Result<()> {
    if parent.len() != n {
        return Err(Error::shape("bone: parent table", &[parent.len()], &[n]));
    }
    if let Some(&bad) = parent.iter().find(|&&p| p >= n) {
        return Err(Error::Index {
            what: "parent joint",
            index: bad,
            len: n,
        });
    }
    Ok(())
}

fn bone_kernel<S: Scalar>(x: &[S], shape: &[usize], axis: usize, parent: &[usize]) -> Vec<S> {
    let (outer, n, inner) = split_at_axis(shape, axis);
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        let block = &x[o * n * inner..(o + 1) * n * inner];
        for (i, &p) in parent.iter().enumerate() {
            let (xi, xp) = (&block[i * inner..(i + 1) * inner], &block[p * inner..(p + 1) * inner]);
            out.extend(xi.iter().zip(xp).map(|(&a, &b)| a - b));
        }
    }
    out
}

fn velocity_kernel<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, t, inner) = split_at_axis(shape, axis);
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        let base = o * t * inner;
        for ti in 0..t - 1 {
            let (cur, next) = (base + ti * inner, base + (ti + 1) * inner);
            for e in 0..inner {
                out[cur + e] = x[next + e] - x[cur + e];
            }
        }
    }
    out
}

/// `out[.., i, ..] = x[.., i, ..] - x[.., parent[i], ..]` along `joint_axis`.
/// The root (its own parent) gets a zero bone.
pub fn compute_bone<S: Scalar>(x: &Tensor<S>, parent: &[usize], joint_axis: usize) -> Result<Tensor<S>> {
    check_parent(parent, x.dim(joint_axis))?;
    Tensor::new(x.shape(), bone_kernel(x.data(), x.shape(), joint_axis, parent))
}

/// Forward difference along `time_axis`; the last frame is zero.
pub fn compute_velocity<S: Scalar>(x: &Tensor<S>, time_axis: usize) -> Result<Tensor<S>> {
    if x.dim(time_axis) < 2 {
        return Err(Error::Data(alloc::format!(
            "velocity needs at least 2 frames, got {}",
            x.dim(time_axis)
        )));
    }
    Tensor::new(x.shape(), velocity_kernel(x.data(), x.shape(), time_axis))
}

/// Concatenates the selected modalities along the channel axis.
pub fn assemble<S: Scalar>(
    x: &Tensor<S>,
    parent: &[usize],
    selection: ModalitySelection,
    layout: Layout,
) -> Result<Tensor<S>> {
    selection.validate()?;
    let mut parts: Vec<Tensor<S>> = Vec::with_capacity(4);
    let bone = if selection.bone || selection.bone_vel {
        Some(compute_bone(x, parent, layout.joint)?)
    } else {
        None
    };
    if selection.joint {
        parts.push(x.clone());
    }
    if selection.bone {
        parts.push(bone.clone().unwrap());
    }
    if selection.joint_vel {
        parts.push(compute_velocity(x, layout.time)?);
    }
    if selection.bone_vel {
        parts.push(compute_velocity(bone.as_ref().unwrap(), layout.time)?);
    }
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    Tensor::concat(&refs, layout.channel)
}

impl<S: Scalar> Tape<S> {
    pub fn bone(&mut self, x: Var, parent: &[usize], joint_axis: usize) -> Result<Var> {
        let out = compute_bone(self.value(x), parent, joint_axis)?;
        let parent = parent.to_vec();
        self.push(
            "bone",
            out,
            &[x],
            Box::new(move |args| {
                let shape = args.inputs[0].shape();
                let (outer, n, inner) = split_at_axis(shape, joint_axis);
                let g = args.grad.data();
                let mut gx = g.to_vec();
                for o in 0..outer {
                    let base = o * n * inner;
                    for (i, &p) in parent.iter().enumerate() {
                        for e in 0..inner {
                            let v = g[base + i * inner + e];
                            gx[base + p * inner + e] = gx[base + p * inner + e] - v;
                        }
                    }
                }
                vec![Some(Tensor::new(shape, gx).unwrap())]
            }),
        )
    }

    pub fn velocity(&mut self, x: Var, time_axis: usize) -> Result<Var> {
        let out = compute_velocity(self.value(x), time_axis)?;
        self.push(
            "velocity",
            out,
            &[x],
            Box::new(move |args| {
                let shape = args.inputs[0].shape();
                let (outer, t, inner) = split_at_axis(shape, time_axis);
                let g = args.grad.data();
                let mut gx = vec![S::zero(); g.len()];
                for o in 0..outer {
                    let base = o * t * inner;
                    for ti in 0..t - 1 {
                        for e in 0..inner {
                            let v = g[base + ti * inner + e];
                            let (cur, next) = (base + ti * inner + e, base + (ti + 1) * inner + e);
                            gx[next] = gx[next] + v;
                            gx[cur] = gx[cur] - v;
                        }
                    }
                }
                vec![Some(Tensor::new(shape, gx).unwrap())]
            }),
        )
    }

    /// Differentiable [`assemble`].
    pub fn assemble_modalities(
        &mut self,
        x: Var,
        parent: &[usize],
        selection: ModalitySelection,
        layout: Layout,
    ) -> Result<Var> {
        selection.validate()?;
        let bone = if selection.bone || selection.bone_vel {
            Some(self.bone(x, parent, layout.joint)?)
        } else {
            None
        };
        let mut parts = Vec::with_capacity(4);
        if selection.joint {
            parts.push(x);
        }
        if selection.bone {
            parts.push(bone.unwrap());
        }
        if selection.joint_vel {
            parts.push(self.velocity(x, layout.time)?);
        }
        if selection.bone_vel {
            parts.push(self.velocity(bone.unwrap(), layout.time)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.concat(&parts, layout.channel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `[3, T=1, N=3, M=1]` chain 0-1-2.
    fn chain() -> (Tensor<f64>, Vec<usize>) {
        // coords laid out [c][t][n][m]
        let x = Tensor::from_f64(&[3, 1, 3, 1], &[0., 1., 1., 0., 0., 1., 0., 0., 0.]).unwrap();
        (x, vec![0, 0, 1])
    }

    #[test]
    fn chain_bones() {
        let (x, parent) = chain();
        let b = compute_bone(&x, &parent, Layout::SEQUENCE.joint).unwrap();
        // joint 0: (0,0,0); joint 1: (1,0,0); joint 2: (0,1,0)
        assert_eq!(b.data(), &[0., 1., 0., 0., 0., 1., 0., 0., 0.]);
    }

    #[test]
    fn translation_leaves_bones_unchanged() {
        let (x, parent) = chain();
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + [3.0, -2.0, 0.5][i / 3]);
        let a = compute_bone(&x, &parent, 2).unwrap();
        let b = compute_bone(&shifted, &parent, 2).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn linear_motion_velocity() {
        // x(t) = t * (1, 0, 0), one joint, one person, T = 4
        let t = 4;
        let x = Tensor::from_fn(&[3, t, 1, 1], |i| if i < t { i as f64 } else { 0.0 });
        let v = compute_velocity(&x, 1).unwrap();
        assert_eq!(&v.data()[..t], &[1., 1., 1., 0.]);
        assert!(v.data()[t..].iter().all(|&z| z == 0.0));
    }

    #[test]
    fn single_frame_velocity_rejected() {
        let x = Tensor::<f64>::zeros(&[3, 1, 2, 1]);
        assert!(compute_velocity(&x, 1).is_err());
    }

    #[test]
    fn default_selection_has_twelve_channels() {
        let x = Tensor::from_fn(&[3, 5, 3, 2], |i| (i as f64).sin());
        let out = assemble(&x, &[0, 0, 1], ModalitySelection::default(), Layout::SEQUENCE).unwrap();
        assert_eq!(out.shape(), &[12, 5, 3, 2]);
        let joint_only = assemble(&x, &[0, 0, 1], ModalitySelection::JOINT, Layout::SEQUENCE).unwrap();
        assert_eq!(joint_only, x);
    }

    #[test]
    fn empty_selection_rejected() {
        let x = Tensor::<f64>::zeros(&[3, 2, 1, 1]);
        let none = ModalitySelection {
            joint: false,
            bone: false,
            joint_vel: false,
            bone_vel: false,
        };
        assert!(assemble(&x, &[0], none, Layout::SEQUENCE).is_err());
    }
}
