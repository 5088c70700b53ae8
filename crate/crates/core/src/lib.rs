//! Document embeddings from multi-layer token embeddings, residual retrieval
//! networks trained with triplet loss, and retrieval metrics.

pub mod aggregate;
pub mod datagen;
pub mod embedstore;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;

pub use aggregate::{
    build_matrix, compute_idf, grid_search, pool_document, EmbeddingMatrix, IdfInjection, IdfTable, LayerWeights,
    TokenLists,
};
pub use datagen::{generate, generate_idf_corpus, SynthCorpus, SynthSpec};
pub use embedstore::{load_store, save_store, slice_document, validate, DocIndex, TokenEmbeddingStore};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use loss::{mine_hard_triplets, triplet_loss, LossKind, TripletBatch};
pub use metrics::{evaluate, pairwise_distances, recall_at_k, DistanceMatrix, EvalReport};
pub use model::{load_checkpoint, save_checkpoint, ModelConfig, ModelKind, RetrievalModel};
pub use train::{make_splits, pipeline_three_stage, train_epochal, RetrievalTask, SplitSpec, TrainConfig};
