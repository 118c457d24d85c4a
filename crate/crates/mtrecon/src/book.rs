//! The guide's chapters, compiled as doc tests.
//!
//! mdbook renders `book/` but cannot run examples against the crate, so
//! every chapter is also included here and `cargo test` runs its code
//! blocks. One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/grids.md")]
pub mod grids {}
#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}
#[doc = include_str!("../../../book/src/registration.md")]
pub mod registration {}
#[doc = include_str!("../../../book/src/tv.md")]
pub mod tv {}
#[doc = include_str!("../../../book/src/joint.md")]
pub mod joint {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
