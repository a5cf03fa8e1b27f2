// The guide's chapters, compiled as doc comments so `cargo test --doc` runs
// every snippet in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}
#[doc = include_str!("../../../book/src/suppression.md")]
mod suppression {}
#[doc = include_str!("../../../book/src/weight-norm.md")]
mod weight_norm {}
#[doc = include_str!("../../../book/src/layers.md")]
mod layers {}
#[doc = include_str!("../../../book/src/adaptation.md")]
mod adaptation {}
#[doc = include_str!("../../../book/src/diagnostics.md")]
mod diagnostics {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
mod reproducibility {}
