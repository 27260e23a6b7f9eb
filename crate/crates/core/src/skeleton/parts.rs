use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::topology::{build_adjacency, tree_edges, SkeletonTopology, NTUX_LEFT_HAND, NTUX_RIGHT_HAND};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Body,
    Hands,
    Legs,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Body, Part::Hands, Part::Legs];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Body => "body",
            Part::Hands => "hands",
            Part::Legs => "legs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(Part::Body),
            "hands" => Ok(Part::Hands),
            "legs" => Ok(Part::Legs),
            other => Err(Error::config(format!("unknown part {other:?}"))),
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Joint subsets of a topology, one per part stream. Groups may share
/// joints. An empty group means the stream is absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartGroupSpec {
    pub body: Vec<usize>,
    pub hands: Vec<usize>,
    pub legs: Vec<usize>,
    /// Joint the arms hang from; must belong to `hands`.
    pub throat_anchor: Option<usize>,
    /// Joint the legs hang from; must belong to `legs`.
    pub hip_anchor: Option<usize>,
    /// Each connected component is expressed relative to its own root and
    /// groups may fall apart into several components. Used by the
    /// disjoint-parts ablation; the default keeps every group in the shared
    /// global frame and requires it to be connected.
    #[serde(default)]
    pub local_frame: bool,
}

// ntu25 (0-based Kinect v2 joints):
//   0 spine base, 1 spine mid, 2 neck, 3 head, 4-7 left arm (shoulder, elbow,
//   wrist, hand), 8-11 right arm, 12-15 left leg (hip, knee, ankle, foot),
//   16-19 right leg, 20 spine shoulder (throat), 21/22 left hand tip/thumb,
//   23/24 right hand tip/thumb.
const NTU25_HANDS: [usize; 13] = [20, 4, 5, 6, 7, 21, 22, 8, 9, 10, 11, 23, 24];
const NTU25_LEGS: [usize; 9] = [0, 12, 13, 14, 15, 16, 17, 18, 19];
const NTU25_THROAT: usize = 20;
const NTU25_HIP: usize = 0;

const NTU25_DISJOINT_BODY: [usize; 9] = [20, 1, 0, 2, 3, 4, 8, 12, 16];
const NTU25_DISJOINT_HANDS: [usize; 12] = [4, 5, 6, 7, 21, 22, 8, 9, 10, 11, 23, 24];
const NTU25_DISJOINT_LEGS: [usize; 8] = [12, 13, 14, 15, 16, 17, 18, 19];

// ntux67: BODY_25 (0 nose, 1 neck, 2-4 right arm, 5-7 left arm, 8 mid hip,
// 9-11 right leg, 12-14 left leg, 15-18 eyes and ears, 19-24 feet), then two
// 21-joint hands (wrist, then four joints per finger, tips at 4/8/12/16/20).
const NTUX_NECK: usize = 1;
const NTUX_MID_HIP: usize = 8;
const HAND_KEEP_IN_BODY: [usize; 6] = [0, 4, 8, 12, 16, 20];
const NTUX_HANDS_ARM: [usize; 6] = [1, 0, 2, 3, 5, 6];
const NTUX_LEGS: [usize; 13] = [8, 9, 10, 11, 12, 13, 14, 19, 20, 21, 22, 23, 24];

impl PartGroupSpec {
    /// Overlapping, globally registered groups shipped for each built-in
    /// topology.
    pub fn standard(topology: &str) -> Result<Self> {
        match topology {
            "ntu25" => Ok(Self {
                body: (0..25).collect(),
                hands: NTU25_HANDS.to_vec(),
                legs: NTU25_LEGS.to_vec(),
                throat_anchor: Some(NTU25_THROAT),
                hip_anchor: Some(NTU25_HIP),
                local_frame: false,
            }),
            "ntux67" => {
                let mut body: Vec<usize> = (0..25).collect();
                for base in [NTUX_LEFT_HAND, NTUX_RIGHT_HAND] {
                    body.extend(HAND_KEEP_IN_BODY.iter().map(|j| base + j));
                }
                let mut hands = NTUX_HANDS_ARM.to_vec();
                hands.extend(NTUX_LEFT_HAND..NTUX_RIGHT_HAND + 21);
                Ok(Self {
                    body,
                    hands,
                    legs: NTUX_LEGS.to_vec(),
                    throat_anchor: Some(NTUX_NECK),
                    hip_anchor: Some(NTUX_MID_HIP),
                    local_frame: false,
                })
            }
            "shrec22" => Ok(Self {
                body: Vec::new(),
                hands: (0..22).collect(),
                legs: Vec::new(),
                throat_anchor: None,
                hip_anchor: None,
                local_frame: false,
            }),
            other => Err(Error::config(format!("no part groups defined for topology {other:?}"))),
        }
    }

    /// Small, unconnected groups in per-component local frames: the torso,
    /// the two arms and the two legs.
    pub fn disjoint(topology: &str) -> Result<Self> {
        match topology {
            "ntu25" => Ok(Self {
                body: NTU25_DISJOINT_BODY.to_vec(),
                hands: NTU25_DISJOINT_HANDS.to_vec(),
                legs: NTU25_DISJOINT_LEGS.to_vec(),
                throat_anchor: None,
                hip_anchor: None,
                local_frame: true,
            }),
            other => Err(Error::config(format!("no disjoint part groups defined for topology {other:?}"))),
        }
    }

    pub fn group(&self, part: Part) -> &[usize] {
        match part {
            Part::Body => &self.body,
            Part::Hands => &self.hands,
            Part::Legs => &self.legs,
        }
    }

    /// Parts with a non-empty group.
    pub fn present(&self) -> Vec<Part> {
        Part::ALL.into_iter().filter(|&p| !self.group(p).is_empty()).collect()
    }

    /// Checks indices, anchors and connectivity against `topology`.
    pub fn validate(&self, topology: &SkeletonTopology) -> Result<()> {
        for part in self.present() {
            self.subgraph(topology, part)?;
        }
        let anchors = [(self.throat_anchor, Part::Hands, "throat"), (self.hip_anchor, Part::Legs, "hip")];
        for (anchor, part, what) in anchors {
            if let Some(a) = anchor {
                if !self.group(part).contains(&a) {
                    return Err(Error::config(format!("{what} anchor {a} is not in the {part} group")));
                }
            }
        }
        Ok(())
    }

    /// The tree induced on `part`'s joints: each joint links to its nearest
    /// ancestor inside the group.
    pub fn subgraph(&self, topology: &SkeletonTopology, part: Part) -> Result<JointGraph> {
        JointGraph::induced(topology, self.group(part), self.local_frame)
    }
}

/// A joint subset with parents in local indices. Joints without an
/// in-group ancestor are their own parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointGraph {
    /// Global joint index of each local joint.
    pub joints: Vec<usize>,
    pub parent: Vec<usize>,
}

impl JointGraph {
    /// The whole topology.
    pub fn full(topology: &SkeletonTopology) -> Self {
        Self {
            joints: (0..topology.num_joints()).collect(),
            parent: topology.parent.clone(),
        }
    }

    /// Restricts `topology` to `joints`. More than one local root is an
    /// error unless `allow_forest`.
    pub fn induced(topology: &SkeletonTopology, joints: &[usize], allow_forest: bool) -> Result<Self> {
        let n = topology.num_joints();
        if joints.is_empty() {
            return Err(Error::config("empty joint group"));
        }
        let mut local = alloc::vec![usize::MAX; n];
        for (i, &j) in joints.iter().enumerate() {
            if j >= n {
                return Err(Error::Index {
                    what: "group joint",
                    index: j,
                    len: n,
                });
            }
            if local[j] != usize::MAX {
                return Err(Error::config(format!("joint {j} listed twice in a group")));
            }
            local[j] = i;
        }
        let parent: Vec<usize> = joints
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let mut a = j;
                while topology.parent[a] != a {
                    a = topology.parent[a];
                    if local[a] != usize::MAX {
                        return local[a];
                    }
                }
                i
            })
            .collect();
        let g = Self {
            joints: joints.to_vec(),
            parent,
        };
        let roots = g.roots();
        if roots.len() > 1 && !allow_forest {
            let globals: Vec<usize> = roots.iter().map(|&r| joints[r]).collect();
            return Err(Error::Disconnected(format!(
                "group of {} joints has several roots {globals:?}",
                joints.len()
            )));
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.parent.len()).filter(|&i| self.parent[i] == i).collect()
    }

    /// Local root of the component containing each joint.
    pub fn component_root(&self) -> Vec<usize> {
        (0..self.parent.len())
            .map(|mut i| {
                while self.parent[i] != i {
                    i = self.parent[i];
                }
                i
            })
            .collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        tree_edges(&self.parent)
    }

    /// Normalised adjacency; forests are accepted when `allow_forest`.
    pub fn adjacency<S: Scalar>(&self, allow_forest: bool) -> Result<Tensor<S>> {
        build_adjacency(self.len(), &self.edges(), allow_forest)
    }

    pub fn describe(&self) -> String {
        format!("{} joints, roots {:?}", self.len(), self.roots())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(spec: &PartGroupSpec) -> [usize; 3] {
        [spec.body.len(), spec.hands.len(), spec.legs.len()]
    }

    #[test]
    fn group_counts() {
        assert_eq!(sizes(&PartGroupSpec::standard("ntu25").unwrap()), [25, 13, 9]);
        assert_eq!(sizes(&PartGroupSpec::standard("ntux67").unwrap()), [37, 48, 13]);
        assert_eq!(sizes(&PartGroupSpec::standard("shrec22").unwrap()), [0, 22, 0]);
        assert_eq!(sizes(&PartGroupSpec::disjoint("ntu25").unwrap()), [9, 12, 8]);
    }

    #[test]
    fn builtin_groups_are_valid_and_connected() {
        for name in ["ntu25", "ntux67", "shrec22"] {
            let t = SkeletonTopology::by_name(name).unwrap();
            let spec = PartGroupSpec::standard(name).unwrap();
            spec.validate(&t).unwrap();
            for part in spec.present() {
                assert_eq!(spec.subgraph(&t, part).unwrap().roots().len(), 1, "{name} {part}");
            }
        }
    }

    #[test]
    fn anchors_root_their_groups() {
        let t = SkeletonTopology::ntu25();
        let spec = PartGroupSpec::standard("ntu25").unwrap();
        let hands = spec.subgraph(&t, Part::Hands).unwrap();
        assert_eq!(hands.joints[hands.roots()[0]], NTU25_THROAT);
        let legs = spec.subgraph(&t, Part::Legs).unwrap();
        assert_eq!(legs.joints[legs.roots()[0]], NTU25_HIP);
    }

    #[test]
    fn disjoint_limbs_are_not_connected() {
        let t = SkeletonTopology::ntu25();
        let spec = PartGroupSpec::disjoint("ntu25").unwrap();
        spec.validate(&t).unwrap();
        assert_eq!(spec.subgraph(&t, Part::Body).unwrap().roots().len(), 1);
        assert_eq!(spec.subgraph(&t, Part::Hands).unwrap().roots().len(), 2);
        assert_eq!(spec.subgraph(&t, Part::Legs).unwrap().roots().len(), 2);
        let global = PartGroupSpec {
            local_frame: false,
            ..spec
        };
        assert!(matches!(global.validate(&t), Err(Error::Disconnected(_))));
    }

    #[test]
    fn nearest_ancestor_links() {
        // hand joint 0 of ntux67 skips the excluded body wrist to the elbow
        let t = SkeletonTopology::ntux67();
        let spec = PartGroupSpec::standard("ntux67").unwrap();
        let g = spec.subgraph(&t, Part::Hands).unwrap();
        let left_root = g.joints.iter().position(|&j| j == NTUX_LEFT_HAND).unwrap();
        assert_eq!(g.joints[g.parent[left_root]], 6);
    }

    #[test]
    fn bad_anchor_and_index() {
        let t = SkeletonTopology::ntu25();
        let mut spec = PartGroupSpec::standard("ntu25").unwrap();
        spec.hip_anchor = Some(3);
        assert!(spec.validate(&t).is_err());
        spec.hip_anchor = None;
        spec.legs.push(30);
        assert!(matches!(spec.validate(&t), Err(Error::Index { .. })));
    }
}
