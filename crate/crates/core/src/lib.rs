//! Self-supervised denoising of repeat volumetric acquisitions.
//!
//! The pipeline: pre-filter each repeat slicewise, estimate an unbiased
//! diffeomorphic subject template from the pre-filtered repeats, transport the
//! estimated warps onto the raw repeats, train a Noise2Noise denoiser on
//! co-registered repeat slice pairs, and score results with no-reference
//! quality metrics. Synthetic layered phantoms with known deformations and
//! noise provide ground truth for validation.

pub mod error;
pub mod io;
pub mod n2n;
pub mod phantom;
pub mod pipeline;
pub mod prefilter;
pub mod quality;
pub mod registration;
pub mod template;
pub mod volume;

pub use error::{CoreError, Result};
pub use volume::{FieldKind, Slice2D, SliceProvenance, VectorField3D, Volume3D};
