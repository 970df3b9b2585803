//! Compiles the guide's Rust listings as doc-tests. One module per chapter
//! so a failure names the chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/sign-solver.md")]
pub mod sign_solver {}
#[doc = include_str!("../../../book/src/rate-distortion.md")]
pub mod rate_distortion {}
#[doc = include_str!("../../../book/src/biased-sgd.md")]
pub mod biased_sgd {}
#[doc = include_str!("../../../book/src/outputs.md")]
pub mod outputs {}
