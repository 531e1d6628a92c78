//! File formats and preprocessing of paired ion/stain data.

pub mod channels;
pub mod ppm;
pub mod tensor_file;
pub mod tiles;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use channels::{
    channel_snr, select_top_k, subset_size, tic_normalize, ChannelManifest, IonNormalizer,
    RankedChannel,
};
pub use ppm::{bytes_to_stain, stain_to_bytes, Ppm};
pub use tensor_file::{read_image, write_image, TensorData, TensorFile};
pub use tiles::{augment, dihedral, meanpool_downsample, tile_pairs, TilePair};

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates `dir` and its parents.
pub fn ensure_dir(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
