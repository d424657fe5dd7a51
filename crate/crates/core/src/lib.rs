//! Consent-gated collaborative filtering.
//!
//! A sparse rating matrix and a latent-factor model trained by SGD on the
//! regularized squared error, a simulator that measures how strongly
//! recommendations stay inside planted communities, and a signed
//! hash-chained ledger through which users grant or revoke the use of their
//! ratings, earn token credits, and carry their history elsewhere.

pub mod cli;
pub mod error;
pub mod keys;
pub mod ledger;
pub mod model;
pub mod ratings;
pub mod rng;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
pub use keys::{Keystore, UserKey};
pub use ledger::{
    verify_chain, ChainStatus, ImportedAccount, InvalidReason, Ledger, LedgerBlock, PayloadType,
    PortableProfile, Registry, UserAccount,
};
pub use model::FactorModel;
pub use ratings::{Rating, RatingMatrix};
pub use sim::{
    engagement_round, fragmentation_index, synth_community_matrix, top_k, CommunityLabels,
    RecommendationList, RoundMetrics, SimulationConfig,
};
pub use trainer::{gradient_at, rmse, sgd_step, train, TrainConfig, TrainReport};
