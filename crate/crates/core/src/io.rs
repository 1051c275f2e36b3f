//! 8-bit grayscale/RGB PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};
use crate::image::{ImageF, ImageU8};

fn decode_err(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::CorruptPng(io.to_string()),
        other => Error::CorruptPng(other.to_string()),
    }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(decode_err)?;

    let info = reader.info();
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(info.bit_depth as u8));
    }
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedColorType(format!("{other:?}"))),
    };
    if info.trns.is_some() {
        return Err(Error::UnsupportedColorType("transparency chunk".into()));
    }
    let (width, height) = (info.width as usize, info.height as usize);

    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptPng("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err)?;
    buf.truncate(frame.buffer_size());

    // Rows may carry no padding at 8 bits, so the buffer is already packed.
    ImageU8::new(height, width, channels, buf)
}

pub fn save_png(path: impl AsRef<Path>, img: &ImageU8) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        img.width() as u32,
        img.height() as u32,
    );
    encoder.set_color(if img.channels() == 1 {
        ColorType::Grayscale
    } else {
        ColorType::Rgb
    });
    encoder.set_depth(BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(img.data()).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

/// Loads a PNG straight into the float domain.
pub fn load_png_f(path: impl AsRef<Path>) -> Result<ImageF> {
    load_png(path).map(|img| img.to_float())
}

/// Quantizes once and writes.
pub fn save_png_f(path: impl AsRef<Path>, img: &ImageF) -> Result<()> {
    save_png(path, &img.to_u8())
}
