pub mod augcodec;
pub mod error;
pub mod evalsuite;
pub mod expcli;
pub mod networks;
pub mod objectives;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
