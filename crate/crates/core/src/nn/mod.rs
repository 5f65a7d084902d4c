//! Separation networks: TCN stacks, attractors, losses and the three model
//! families (DAN, Conv-TasNet, TD-DAN).

pub mod attractor;
pub mod loss;
pub mod model;
pub mod tcn;

pub use attractor::{
    kmeans_attractors, kmeans_attractors_with, oracle_attractors, oracle_attractors_in_graph, selection_weights, ses_masks,
    AttractorMode, AttractorSet, EmbeddingField, KmeansOptions,
};
pub use loss::{columns, concentration_loss, discrimination_loss, recon_loss, repeat_column, si_sdr_in_graph, upit_loss, LossWeights};
pub use model::{Analysis, EncoderKind, Framing, LossNodes, LossTerms, Model, ModelConfig, ModelKind, ReconDomain};
pub use tcn::{NormKind, Tcn, TcnConfig};
