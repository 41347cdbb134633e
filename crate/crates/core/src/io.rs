//! Frame files: directory listing, PGM/PNG reading, PGM/PPM writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use thiserror::Error;

use crate::frame::{Frame, FrameError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {reason}", path.display())]
    Read { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no PGM/PNG frames in {}", .0.display())]
    NoFrames(PathBuf),
    #[error("{}: {source}", path.display())]
    Frame {
        path: PathBuf,
        #[source]
        source: FrameError,
    },
}

const FRAME_EXTENSIONS: [&str; 4] = ["pgm", "pnm", "png", "ppm"];

/// Frame files in `dir`, ordered lexicographically by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let entries = std::fs::read_dir(dir).map_err(|e| IoError::Read {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| IoError::Read {
                path: dir.to_path_buf(),
                reason: e.to_string(),
            })?
            .path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(IoError::NoFrames(dir.to_path_buf()));
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(paths)
}

/// Reads an image as 8-bit luminance and normalizes to `[0, 1]`.
pub fn read_frame(path: &Path, index: usize) -> Result<Frame, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Frame::from_u8(index, w, h, img.as_raw()).map_err(|source| IoError::Frame {
        path: path.to_path_buf(),
        source,
    })
}

fn write_pnm(path: &Path, width: usize, height: usize, data: &[u8], subtype: PnmSubtype, color: ExtendedColorType) -> Result<(), IoError> {
    let file = File::create(path).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)
        .map_err(|source| IoError::Encode {
            path: path.to_path_buf(),
            source,
        })
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), IoError> {
    write_pnm(path, width, height, data, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

/// Binary 8-bit PPM (P6) from interleaved RGB.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), IoError> {
    write_pnm(path, width, height, rgb, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}
