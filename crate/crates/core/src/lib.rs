pub mod attribution;
pub mod bench;
pub mod corpus;
pub mod counterfactual;
pub mod error;
pub mod imaging;
pub mod io;
pub mod network;
pub mod obfuscation;
pub mod pipeline;
pub mod segmentation;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
