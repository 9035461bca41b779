//! Integrated ad auction and allocation for feeds.
//!
//! The crate enumerates candidate allocations (one ad inserted into an
//! ordered organic list), predicts per-slot CTR and GMV with a list-wise
//! attention model, selects the allocation with a learned affine maximizer
//! auction and charges its exact per-click payment. The scoring networks are
//! trained end to end through a softmax relaxation of winner selection.
//! Baselines (GSP with fixed or payment-driven positions, VCG), metrics and
//! IC/IR audits live in [`bench`]; [`simgen`] produces synthetic markets with
//! a ground-truth click model.

pub mod aam;
pub mod bench;
pub mod domain;
pub mod dsm;
pub mod epm;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod simgen;

pub use domain::{
    allocations_excluding, enumerate_allocations, AdCandidate, AdPlacement, Allocation, EnumerationOptions,
    ItemFeatures, OrganicItem, Request, Slot,
};
pub use error::{Error, Result};
