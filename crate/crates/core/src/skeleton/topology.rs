use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A joint tree. `parent[root] == root`; every other joint reaches the root
/// by following parents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub name: String,
    pub parent: Vec<usize>,
    /// Joint whose first-frame position becomes the origin when a sequence
    /// is normalised.
    pub center: usize,
}

/// Kinect v2 joints, 0-based; rooted at the spine-shoulder ("throat") joint.
const NTU25_PARENT: [usize; 25] = [
    1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 20, 22, 7, 24, 11,
];

/// OpenPose BODY_25 rooted at the neck.
const BODY25_PARENT: [usize; 25] = [
    1, 1, 1, 2, 3, 1, 5, 6, 1, 8, 9, 10, 8, 12, 13, 0, 0, 15, 16, 14, 19, 14, 11, 22, 11,
];

pub(crate) const NTUX_LEFT_HAND: usize = 25;
pub(crate) const NTUX_RIGHT_HAND: usize = 46;
const BODY25_LEFT_WRIST: usize = 7;
const BODY25_RIGHT_WRIST: usize = 4;

/// Parent of joint `j` within a 21-joint hand whose wrist is `wrist`.
fn hand_parent(j: usize, wrist: usize, base: usize) -> usize {
    match j {
        0 => wrist,
        1 | 5 | 9 | 13 | 17 => base,
        _ => base + j - 1,
    }
}

impl SkeletonTopology {
    pub fn new(name: impl Into<String>, parent: Vec<usize>, center: usize) -> Result<Self> {
        let t = Self {
            name: name.into(),
            parent,
            center,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parent.len();
        if n == 0 {
            return Err(Error::Data("topology has no joints".to_string()));
        }
        if let Some(&bad) = self.parent.iter().find(|&&p| p >= n) {
            return Err(Error::Index {
                what: "parent joint",
                index: bad,
                len: n,
            });
        }
        if self.center >= n {
            return Err(Error::Index {
                what: "center joint",
                index: self.center,
                len: n,
            });
        }
        let roots = (0..n).filter(|&i| self.parent[i] == i).count();
        if roots != 1 {
            return Err(Error::Data(format!(
                "topology {} must have exactly one root, found {roots}",
                self.name
            )));
        }
        for start in 0..n {
            let mut j = start;
            let mut steps = 0;
            while self.parent[j] != j {
                j = self.parent[j];
                steps += 1;
                if steps > n {
                    return Err(Error::Data(format!(
                        "topology {} has a cycle through joint {start}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> usize {
        (0..self.parent.len()).find(|&i| self.parent[i] == i).unwrap()
    }

    /// Undirected `(child, parent)` pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        tree_edges(&self.parent)
    }

    /// Kinect v2 skeleton used by the NTU RGB+D datasets.
    pub fn ntu25() -> Self {
        Self::new("ntu25", NTU25_PARENT.to_vec(), 1).unwrap()
    }

    /// OpenPose BODY_25 followed by the left hand (25..46) and the right
    /// hand (46..67).
    pub fn ntux67() -> Self {
        let mut parent = BODY25_PARENT.to_vec();
        parent.extend((0..21).map(|j| hand_parent(j, BODY25_LEFT_WRIST, NTUX_LEFT_HAND)));
        parent.extend((0..21).map(|j| hand_parent(j, BODY25_RIGHT_WRIST, NTUX_RIGHT_HAND)));
        Self::new("ntux67", parent, 8).unwrap()
    }

    /// 22-joint hand: wrist, palm, then four joints per finger from thumb to
    /// little finger.
    pub fn shrec22() -> Self {
        let mut parent = vec![0, 0];
        for finger in 0..5 {
            let base = 2 + finger * 4;
            parent.push(1);
            parent.extend(base..base + 3);
        }
        Self::new("shrec22", parent, 1).unwrap()
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ntu25" => Ok(Self::ntu25()),
            "ntux67" => Ok(Self::ntux67()),
            "shrec22" => Ok(Self::shrec22()),
            other => Err(Error::config(format!(
                "unknown topology {other:?} (expected ntu25, ntux67 or shrec22)"
            ))),
        }
    }
}

pub(crate) fn tree_edges(parent: &[usize]) -> Vec<(usize, usize)> {
    parent
        .iter()
        .enumerate()
        .filter(|&(i, &p)| i != p)
        .map(|(i, &p)| (i, p))
        .collect()
}

fn component_count(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut root: Vec<usize> = (0..n).collect();
    fn find(root: &mut [usize], mut i: usize) -> usize {
        while root[i] != i {
            root[i] = root[root[i]];
            i = root[i];
        }
        i
    }
    let mut count = n;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut root, a), find(&mut root, b));
        if ra != rb {
            root[ra] = rb;
            count -= 1;
        }
    }
    count
}

/// `D^{-1/2} (A + I) D^{-1/2}` for an undirected graph on `n` joints, where
/// `D` is the degree matrix of `A + I`.
///
/// Fails when the graph is not connected, unless `allow_disconnected`.
pub fn build_adjacency<S: Scalar>(n: usize, edges: &[(usize, usize)], allow_disconnected: bool) -> Result<Tensor<S>> {
    if n == 0 {
        return Err(Error::Data("adjacency of an empty graph".to_string()));
    }
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(Error::Index {
            what: "edge endpoint",
            index: a.max(b),
            len: n,
        });
    }
    let parts = component_count(n, edges);
    if parts > 1 && !allow_disconnected {
        return Err(Error::Disconnected(format!("{n} joints form {parts} components")));
    }
    let mut raw = vec![0.0f64; n * n];
    for i in 0..n {
        raw[i * n + i] = 1.0;
    }
    for &(a, b) in edges {
        if a != b {
            raw[a * n + b] = 1.0;
            raw[b * n + a] = 1.0;
        }
    }
    let inv_sqrt: Vec<f64> = raw
        .chunks(n)
        .map(|row| 1.0 / num_traits::Float::sqrt(row.iter().sum::<f64>()))
        .collect();
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            S::from_f64_lossy(inv_sqrt[i] * raw[k] * inv_sqrt[j])
        })
        .collect();
    Tensor::new(&[n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_sizes() {
        assert_eq!(SkeletonTopology::ntu25().num_joints(), 25);
        assert_eq!(SkeletonTopology::ntux67().num_joints(), 67);
        assert_eq!(SkeletonTopology::shrec22().num_joints(), 22);
        assert_eq!(SkeletonTopology::ntu25().root(), 20);
        assert_eq!(SkeletonTopology::ntux67().root(), 1);
    }

    #[test]
    fn hand_chains() {
        let t = SkeletonTopology::ntux67();
        assert_eq!(t.parent[NTUX_LEFT_HAND], BODY25_LEFT_WRIST);
        assert_eq!(t.parent[NTUX_RIGHT_HAND], BODY25_RIGHT_WRIST);
        assert_eq!(t.parent[NTUX_LEFT_HAND + 4], NTUX_LEFT_HAND + 3);
        assert_eq!(t.parent[NTUX_RIGHT_HAND + 17], NTUX_RIGHT_HAND);
        let s = SkeletonTopology::shrec22();
        assert_eq!(&s.parent[..7], &[0, 0, 1, 2, 3, 4, 1]);
    }

    #[test]
    fn cycles_and_forests_rejected() {
        assert!(SkeletonTopology::new("c", vec![1, 2, 1], 0).is_err());
        assert!(SkeletonTopology::new("f", vec![0, 1], 0).is_err());
        assert!(SkeletonTopology::new("o", vec![0, 5], 0).is_err());
    }

    #[test]
    fn chain_adjacency_values() {
        let a = build_adjacency::<f64>(3, &[(1, 0), (2, 1)], false).unwrap();
        let d = a.data();
        assert!((d[0] - 0.5).abs() < 1e-15);
        assert!((d[1] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((d[4] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn single_joint_and_disconnected() {
        assert_eq!(build_adjacency::<f64>(1, &[], false).unwrap().data(), &[1.0]);
        assert!(matches!(
            build_adjacency::<f64>(2, &[], false),
            Err(Error::Disconnected(_))
        ));
        assert!(build_adjacency::<f64>(2, &[], true).is_ok());
    }

    #[test]
    fn builtin_adjacency_is_symmetric() {
        for t in [
            SkeletonTopology::ntu25(),
            SkeletonTopology::ntux67(),
            SkeletonTopology::shrec22(),
        ] {
            let n = t.num_joints();
            let a = build_adjacency::<f64>(n, &t.edges(), false).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(a.get(&[i, j]), a.get(&[j, i]));
                }
            }
        }
    }
}
