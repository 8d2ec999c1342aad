//! Domain types, preprocessing and the dataset file format.

pub mod augment;
pub mod io;
pub mod preprocess;
pub mod types;

pub use augment::{augment_rotation, random_angle};
pub use io::{load_volume, read_array, save_volume, write_array2, write_array3, Dataset, Manifest};
pub use preprocess::{preprocess_slice, select_slices, Selection};
pub use types::{ImageSlice, LandmarkAnnotation, PreprocessConfig, Volume};
