//! Command-line driver: configuration, on-disk artifacts, reports.

pub mod artifacts;
pub mod commands;
pub mod report;

use masq_core::MasqError;

pub use commands::{run, Cli, Command};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Numeric failures exit with 3; everything else (bad config, missing or
/// corrupt inputs, I/O) with 2.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<MasqError>(),
            Some(
                MasqError::Numeric(_)
                    | MasqError::NonFinite { .. }
                    | MasqError::RankDeficient { .. }
                    | MasqError::NotSymmetric { .. }
                    | MasqError::RankTooLarge { .. }
                    | MasqError::DimensionMismatch { .. }
            )
        )
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}
