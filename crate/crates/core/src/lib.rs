//! Laboratory for model collapse under recursive training on self-generated
//! text, and for the Gram-orthogonality regularizer that counteracts it.

pub mod asnc;
pub mod autophagy;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod perplexity;
pub mod tensor;

pub use error::{Error, Result};
