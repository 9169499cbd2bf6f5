//! Detailed-patch codebooks, metric embeddings, and candidate retrieval.

mod codebook;
mod embed;
mod search;
pub mod store;

pub use codebook::{build_codebook, coarse_queries, guide_grid, Codebook, QueryWindow};
pub use embed::{
    code_distance, embedding_loss, embedding_loss_gradient, make_triplets, train_embedding,
    Embedder, EmbedderKind, EmbeddingGradient, TrainOptions, TrainedEmbedding, Triplet, TripletOptions,
    DEFAULT_CODE_DIM, DEFAULT_N_RND, DEFAULT_N_TRUE,
};
pub use search::{rank_codebook, retrieve_exact, retrieve_knn, Candidate, ExactOptions, Retrieval, RetrievalSet, DEFAULT_K};
pub use store::{load_database, save_database, Database};
