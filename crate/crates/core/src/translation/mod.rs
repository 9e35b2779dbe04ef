//! Moving released latents between models: closed-form alignment of weight
//! subspaces, affine fits on parallel anchor prompts, and an exact rotated
//! clone used as ground truth for both.

mod clone;
mod map;
mod relative;
mod subspace;

pub use clone::{rotated_clone, CloneRotation};
pub use map::{AlignmentMap, FamilyFit, LatentShape, LinearMap, Paradigm};
pub use relative::{
    fit_procrustes, fit_relative_map, relative_projection, AnchorSet, ProcrustesMap, DEFAULT_ANCHORS, MIN_ANCHORS,
};
pub use subspace::{default_rank, fit_subspace_alignment};

use crate::error::{CrdError, Result};
use crate::tinyformer::ModelConfig;

/// Both paradigms map layer `l` onto layer `l` and carry position-baked keys
/// over unchanged, so depth and positional scheme must agree.
pub(crate) fn check_pair(anchor: &ModelConfig, target: &ModelConfig) -> Result<()> {
    if anchor.n_layers != target.n_layers {
        return Err(CrdError::Compatibility(format!(
            "anchor has {} layers, target has {}",
            anchor.n_layers, target.n_layers
        )));
    }
    if anchor.pos_encoding != target.pos_encoding {
        return Err(CrdError::Compatibility(format!(
            "anchor uses {} positions, target uses {}",
            anchor.pos_encoding, target.pos_encoding
        )));
    }
    if anchor.vocab_size != target.vocab_size {
        return Err(CrdError::Compatibility(format!(
            "vocabularies differ ({} vs {})",
            anchor.vocab_size, target.vocab_size
        )));
    }
    Ok(())
}
