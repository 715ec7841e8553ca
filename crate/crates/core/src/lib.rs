pub mod attention;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod oracle;
pub mod runtime;
pub mod selection;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/layout.md")]
    mod layout {}
    #[doc = include_str!("../../../book/src/block-scores.md")]
    mod block_scores {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/sparse-layers.md")]
    mod sparse_layers {}
    #[doc = include_str!("../../../book/src/kv-cache.md")]
    mod kv_cache {}
    #[doc = include_str!("../../../book/src/decode.md")]
    mod decode {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
