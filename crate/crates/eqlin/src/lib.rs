//! Next-token predictors viewed through their embedding/unembedding geometry:
//! effective complexity, extended-linear equivalence certificates, detection of
//! linear properties and their transfer between equivalent models.

pub mod equivalence;
pub mod model;
pub mod properties;
pub mod subspace;
pub mod synth;

pub use model::{load_model, save_model, Alphabet, CorpusEntry, ModelError, PredictorTable, SequenceSample};
pub use subspace::{effective_geometry, EffectiveGeometry, Subspace, TolPolicy};
