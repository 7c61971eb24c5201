//! Privacy-preserving truth discovery for vehicular air-quality crowdsensing.
//!
//! The crate is organised around the parties of the protocol and the numerical
//! solvers they run:
//!
//! - [`geo`]: grid geometry and the Gaussian-kernel spatial correlation table.
//! - [`temporal`]: inverse-distance weighting of historical weights and truths.
//! - [`truthdisc`]: plaintext solvers (ST, SST, and the CRH-style baseline).
//! - [`secmask`]: fixed-point one-time-pad masking and the masked-domain ST solver.
//! - [`privacy`]: grid perturbation (drop / imitate) and Laplace value perturbation.
//! - [`parties`]: trusted manager, pseudonyms, RSUs, and the EAirQ data handling.
//! - [`synth`]: dataset ingestion and synthetic world generation.
//! - [`metrics`]: RMSE, valid-estimation counts, and daily RMSE differences.
//! - [`harness`]: experiment configuration, orchestration and output tables.

pub mod error;
pub mod geo;
pub mod harness;
pub mod ids;
pub mod metrics;
pub mod parties;
pub mod privacy;
pub mod rng;
pub mod secmask;
pub mod synth;
pub mod temporal;
pub mod truthdisc;

pub use error::{Error, Result};
pub use ids::{Cycle, GridId, SourceId, SourceKey};
