//! Geometry-aware regularization for multimodal representation learning.
//!
//! Embeddings of each modality are projected to the unit sphere, spread out
//! by a dispersive (uniformity) term and tied across modalities by a bounded
//! anchoring term. The two geometry gradients can be mixed by a closed-form
//! min-norm (Pareto) rule before they are added to the task gradient.

pub mod ambiguity;
pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod geom;
pub mod gradcheck;
pub mod losses;
pub mod pareto;
pub mod rng;
pub mod trainer;

pub use error::{DagrError, Result};
