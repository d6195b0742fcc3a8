//! The guide under `book/src`, compiled so that every snippet is checked.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autograd.md")]
pub mod autograd {}

#[doc = include_str!("../../../book/src/frontend.md")]
pub mod frontend {}

#[doc = include_str!("../../../book/src/fsq.md")]
pub mod fsq {}

#[doc = include_str!("../../../book/src/joint-decoding.md")]
pub mod joint_decoding {}

#[doc = include_str!("../../../book/src/lora.md")]
pub mod lora {}

#[doc = include_str!("../../../book/src/streaming.md")]
pub mod streaming {}

#[doc = include_str!("../../../book/src/corpus.md")]
pub mod corpus {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
