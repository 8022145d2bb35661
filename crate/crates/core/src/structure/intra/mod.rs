//! Homogeneous multipartite ordering of the latent elements.

pub mod dynconv;
pub mod schedule;
pub mod topology;
pub mod vimco;

pub use dynconv::{build_mask, dynamic_masked_conv, masked_conv, DynamicKernel, MaskRule, MaskSet};
pub use schedule::{decode_schedule, mask_is_causal, verify_acyclic};
pub use topology::{generate_topology, groups_for, TopologyField, TopologyGenerator, TopologyMode, MAX_PARTITES};
pub use vimco::{vimco, vimco_objective, MonteCarloBatch, VimcoEstimate};
