//! Per-user personalization heads over a shared, frozen transformer encoder.
//!
//! Each user owns one small encoder block plus a binary output layer. Every
//! C-way classification problem is posed as C `(label, text) -> True/False`
//! questions and decoded by taking the label with the most confident `True`.

pub mod autodiff;
pub mod base_lm;
pub mod codec;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod ph_head;
pub mod registry;
pub mod task_data;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
