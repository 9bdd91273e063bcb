//! TGBFormer building blocks: a small reverse-mode tensor engine, the
//! spatial-temporal transformer (global aggregation), the spatial-temporal
//! graph module (local aggregation), the adaptive blender, and the pipeline
//! that ties them together.

pub mod blender;
pub mod error;
pub mod gradcheck;
pub mod oracle;
pub(crate) mod params;
pub mod pipeline;
pub mod rng;
pub mod stgm;
pub mod sttm;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod tzr;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
