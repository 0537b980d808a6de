pub mod analysis;
pub mod anderson;
pub mod elliptic;
pub mod dump;
pub mod error;
pub mod grid;
pub mod morph;
pub mod nonlocal;
pub mod norm;
pub mod obstacle;
pub mod radial;
pub mod solver;

pub use error::{Error, Result};
