//! The guide in `book/` is plain mdbook, which cannot run listings that
//! depend on this workspace. Each chapter is included here as a module doc
//! so `cargo test --doc` compiles and runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}
#[doc = include_str!("../../../book/src/cues.md")]
pub mod cues {}
#[doc = include_str!("../../../book/src/head.md")]
pub mod head {}
#[doc = include_str!("../../../book/src/refinement.md")]
pub mod refinement {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
