use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder};

use crate::augment::ImageBuffer;
use crate::error::{Error, Result};

/// Encodes a single-channel image as binary PGM (P5).
pub fn encode_pgm(image: &ImageBuffer) -> Result<Vec<u8>> {
    if image.channels() != 1 {
        return Err(Error::Data(format!(
            "PGM holds one channel, image has {}",
            image.channels()
        )));
    }
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            image.data(),
            image.width() as u32,
            image.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| Error::Data(format!("PGM encoding failed: {e}")))?;
    Ok(out)
}

fn to_buffer(img: DynamicImage, path: &Path) -> Result<ImageBuffer> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let gray = matches!(
        img.color(),
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
    );
    let result = if gray {
        ImageBuffer::new(w, h, 1, img.into_luma8().into_raw())
    } else {
        ImageBuffer::new(w, h, 3, img.into_rgb8().into_raw())
    };
    result.map_err(|e| bad(e.to_string()))
}

/// Decodes PGM (or PNG) bytes; grayscale stays single-channel.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    to_buffer(img, path)
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_image(&bytes, path)
}
