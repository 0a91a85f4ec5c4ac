use crate::error::{Error, Result};
use crate::image::{BinaryMask, BoundingBox, Image};

/// ROI side length equivalent to 300 px when the working size stands for
/// 400 px.
pub fn scaled_roi_size(input_size: usize) -> usize {
    ((300.0 * input_size as f64 / 400.0).round() as usize).max(1)
}

/// Masks the image, crops it to the mask's bounding box and resizes the
/// crop to `out_size`². Returns the crop and the box it came from.
pub fn crop_to_roi(image: &Image, mask: &BinaryMask, out_size: usize) -> Result<(Image, BoundingBox)> {
    if image.dims() != mask.dims() {
        return Err(Error::arg(format!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            image.dims()
        )));
    }
    let bb = mask.bounding_box().ok_or(Error::EmptyRoi)?;
    let (x0, y0, x1, y1) = bb;
    let masked = Image::from_fn(x1 - x0 + 1, y1 - y0 + 1, |x, y| {
        if mask.get(x0 + x, y0 + y) {
            image.get(x0 + x, y0 + y)
        } else {
            0.0
        }
    });
    Ok((masked.resize(out_size, out_size), bb))
}

/// Maps a map computed on a crop back into the full frame; pixels outside
/// the box are 0.
pub fn uncrop(map: &Image, bb: BoundingBox, width: usize, height: usize) -> Image {
    let (x0, y0, x1, y1) = bb;
    let inner = map.resize(x1 - x0 + 1, y1 - y0 + 1);
    Image::from_fn(width, height, |x, y| {
        if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
            inner.get(x - x0, y - y0)
        } else {
            0.0
        }
    })
}
