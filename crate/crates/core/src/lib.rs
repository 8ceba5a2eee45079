//! Visible-infrared fusion dehazing.

pub mod backbone;
pub mod data;
pub mod dsfe;
pub mod error;
pub mod fusion;
pub mod haze;
pub mod imaging;
pub mod io;
pub mod nn;
pub mod objective;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Elem, Shape, Tensor};
