use std::path::Path;

use image::{ImageBuffer, Luma};

use super::{CellError, InstanceMask};
use crate::slide::TileAddress;

/// Writes a mask as a 16-bit grayscale PNG. Labels above 65535 are rejected.
pub fn write_mask_png(path: &Path, mask: &InstanceMask) -> Result<(), CellError> {
    let size = mask.size();
    let mut data = Vec::with_capacity(mask.labels().len());
    for &l in mask.labels() {
        let v = u16::try_from(l).map_err(|_| CellError::MaskFile {
            path: path.display().to_string(),
            message: format!("label {l} does not fit in 16 bits"),
        })?;
        data.push(v);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(size, size, data).expect("buffer length matches mask size");
    img.save(path)?;
    Ok(())
}

/// Reads a 16-bit (or 8-bit) grayscale PNG as the instance mask of `tile`.
pub fn read_mask_png(path: &Path, tile: TileAddress) -> Result<InstanceMask, CellError> {
    let bad = |message: String| CellError::MaskFile {
        path: path.display().to_string(),
        message,
    };
    let img = image::open(path)?;
    if img.width() != tile.size || img.height() != tile.size {
        return Err(bad(format!("mask is {}x{}, tile size is {}", img.width(), img.height(), tile.size)));
    }
    // label values are ids, so no bit-depth rescaling
    let labels = match img {
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(i64::from).collect(),
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(i64::from).collect(),
        other => return Err(bad(format!("expected a grayscale mask, got {:?}", other.color()))),
    };
    InstanceMask::new(tile, labels)
}
