pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod forge;
pub mod image;
pub mod mae;
pub mod mask;
pub mod nn;
pub mod prompt;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
pub use image::{Image, Rgb};
pub use mask::{BinaryMask, PatchMask, Rect};
