//! Skeleton topologies, part groups, sequences and synthetic data.

mod parts;
mod sequence;
mod synth;
mod topology;

pub use parts::{JointGraph, Part, PartGroupSpec};
pub use sequence::{
    factorize_parts, normalize_sequence, normalize_sequence_padded, stack_batch, to_local_frame, truncated_len, window_indices,
    ActionSequence, Factorized, FramePad, SequenceMeta, COORDS, DEFAULT_WINDOW,
};
pub use synth::{synth_dataset, ClassKind, Split, SynthDataset, SynthSample, SynthSpec};
pub use topology::{build_adjacency, SkeletonTopology};
