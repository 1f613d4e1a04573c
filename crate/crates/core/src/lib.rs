//! One-class representation learning for presentation attack detection.
//!
//! The toolkit trains a small multi-channel embedding network with a combined
//! binary cross-entropy and one-class contrastive objective, fits a one-class
//! Gaussian mixture on the bonafide embeddings, and scores known and unseen
//! attacks with ISO/IEC 30107-3 error rates.
//!
//! Modules, bottom-up:
//!
//! - [`diffnet`]: feed-forward multi-channel network with analytic gradients and Adam.
//! - [`losses`]: BCE, center loss, distance to the bonafide center, the one-class
//!   contrastive loss and the combined objective.
//! - [`ocgmm`]: full-covariance Gaussian mixture fitted by EM, log-likelihood scoring.
//! - [`protocol`]: synthetic data, the `.ocds` dataset format, MAD normalization
//!   and identity-disjoint protocol splits.
//! - [`metrics`]: APCER/BPCER/ACER, BPCER-anchored thresholds, EER and DET points.
//! - [`pipeline`]: end-to-end training, embedding extraction, GMM fitting,
//!   evaluation and the binary artifact formats.
//! - [`cli`]: the `occl` command-line front end.

pub mod cli;
pub mod diffnet;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod ocgmm;
pub mod pipeline;
pub mod protocol;

pub use error::{Error, Result};
pub use protocol::Label;
