//! Joint aggregation of deep local features into compact global image
//! descriptors.
//!
//! The pipeline contextualizes a `C×H×W` feature map with a non-local
//! self-attention pass, groups local features into `L` visual tokens with a
//! spatial-attention tokenizer, refines the tokens with stacked
//! self-/cross-attention blocks and projects their concatenation to a
//! `d`-dimensional descriptor trained with an additive angular margin loss.
//! Descriptors can be product-quantized, searched exactly or through
//! asymmetric distance tables, and scored with the Revisited Oxford/Paris
//! mAP protocol.

pub mod aggregation;
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod quantization;
pub mod refinement;
pub mod retrieval;
pub mod tensor;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use model::{ModelConfig, ModelParams};
pub use tensor::{Graph, Tensor, Var};
