//! Identifiability checks: sufficient-change assumptions, domain-count
//! bounds, and block structure of the learned-to-true latent map.

pub mod assumptions;
pub mod blocks;

pub use assumptions::{
    check_a3, check_a4, exclusive_latents, numeric_rank, required_domains, score_vectors_w, AssumptionReport, Verdict,
    RANK_RTOL,
};
pub use blocks::{
    check_subspace_blocks, decoder_edge_mass, estimate_h_jacobian, BlockPair, BlockReport, HJacobianEstimate,
    DEFAULT_BLOCK_THRESHOLD,
};
