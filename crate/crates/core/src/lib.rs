//! Privacy-preserving global model training for federated learning in
//! peer-to-peer networks.
//!
//! A group of peers without a central aggregator trains a shared model by
//! walking a noise-masked running sum of encoded local updates along a
//! depth-first route through the overlay graph. Pairwise link keys come from
//! a modified Eschenauer-Gligor key pre-distribution, transport is
//! authenticated (AEAD + signed, timestamped envelopes), and a deposit game
//! makes collusion irrational. Everything runs inside a deterministic
//! single-threaded simulator so experiments replay bit-exactly from a seed.

pub mod adversary;
pub mod crypto;
pub mod error;
pub mod fixed;
pub mod keying;
pub mod model;
pub mod protocol;
pub mod scenario;
pub mod topology;

pub use error::{Error, Result};
pub use fixed::{FixedParams, ParameterVector};
pub use model::EncodedUpdate;
