//! File formats: binary tensors, raster panels, IDX datasets.

pub mod idx;
pub mod image;
pub mod tensor_file;

pub use idx::load_idx;
pub use image::write_image;
pub use tensor_file::{deserialize_tensor, serialize_tensor, serialize_tensor_f32};
