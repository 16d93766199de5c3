pub mod error;
pub mod linalg;
pub mod matvar;
pub mod bll_normal;
pub mod bll_t;
pub mod vecform;
pub mod nn;
pub mod em;
pub mod data;
pub mod metrics;

pub use error::{MbllError, Result};
