//! Keeps the guide in `book/` honest: every chapter is included here as
//! documentation, so its code blocks run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/mechanics.md")]
pub mod mechanics {}

#[doc = include_str!("../../../book/src/virtual-systems.md")]
pub mod virtual_systems {}

#[doc = include_str!("../../../book/src/controller.md")]
pub mod controller {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/certification.md")]
pub mod certification {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
