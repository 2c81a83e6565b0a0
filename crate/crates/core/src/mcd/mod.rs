//! Masked context distillation: channel dropping, projection heads, losses,
//! multi-crop views and the student/teacher training loop.

pub mod channel_drop;
pub mod heads;
pub mod loss;
pub mod trainer;
pub mod views;
