//! Additive masking with one-time pads and the ST solver over masked sums.
//!
//! A vehicle turns each of its per-grid sequences (`theta*v`, `theta*v^2`,
//! `theta`) into ring elements, blinds them with pairwise masks it draws
//! itself, and uploads the result. The server sums each sequence, which
//! cancels the masks exactly, and runs ST on the three sums.

mod fixed;
mod mask;
mod report;
mod solver;

pub use fixed::{Codec, Fixed};
pub use mask::{mask_sequence, MaskState, ValueKind};
pub use report::{
    aggregate_chi, aggregate_reports, build_masked_report, read_masked_jsonl, write_masked_jsonl, Chi, ChiSums,
    MaskedEntry, MaskedReport, RawChi,
};
pub use solver::{
    masked_update_truths, masked_update_weights, run_airq, solve_masked, InitMode, InitRule, RANDOM_INIT_MAX,
};
