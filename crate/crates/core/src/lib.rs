pub mod ablation;
pub mod attrsel;
pub mod error;
mod fsutil;
pub mod losses;
pub mod model;
pub mod retrieval;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use fsutil::{sha256_hex, write_atomic};
