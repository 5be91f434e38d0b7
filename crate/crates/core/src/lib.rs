pub mod adp;
pub mod error;
pub mod error_dynamics;
pub mod jsonio;
pub mod net;
pub mod oracle;
pub mod tasks;

pub use error::{Error, Result};
