//! Deformable 3D CT registration via compact displacement-cost embeddings:
//! self-similarity descriptors on a strided lattice, Foerstner keypoints,
//! per-keypoint displacement cost maps, truncated PCA codes, graph-Laplacian
//! diffusion, and Gaussian scattered-data extrapolation to a dense field.

pub mod correspondence;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod filter;
pub mod io;
pub mod keypoints;
pub mod pipeline;
pub mod regularize;
pub mod volume;

pub use correspondence::{
    build_cost_maps, hard_argmin, soft_argmin, CostMapSet, DisplacementLattice, SparseDisplacements,
};
pub use embedding::{decode, encode, fit_pca, Embedding};
pub use error::{Error, Result};
pub use evaluation::{gen_phantom, gen_synthetic_case, tre, SyntheticCase, TreReport};
pub use features::{compute_mind, preprocess_ct, DescriptorField, Neighborhood};
pub use keypoints::{foerstner_scores, select_keypoints, KeypointSet};
pub use pipeline::{
    lung_mask_fallback, register, register_full, EmbedDim, PipelineConfig, RegisterExtras, RunLog,
};
pub use regularize::{
    build_graph, diffuse, extrapolate_dense, regularize_displacements, warp, KeypointGraph,
    VectorStage,
};
pub use volume::{DenseField, IntensityUnit, LandmarkSet, Volume3};
