pub mod analytics;
pub mod cmc;
pub mod error;
pub mod io;
pub mod mas;
pub mod numerics;
pub mod quantizer;
pub mod runtime;
pub mod smoothing;

pub use error::{MasqError, Result};
pub use numerics::{Matrix, SvdResult};
