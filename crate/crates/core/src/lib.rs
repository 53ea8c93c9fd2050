pub mod config;
pub mod error;
pub mod losses;
pub mod lwm;
pub mod pipeline;
pub mod pseudolabel;
pub mod seed;
pub mod synthdata;
pub mod tensorcore;
pub mod trn;

pub use error::{Error, Result};
