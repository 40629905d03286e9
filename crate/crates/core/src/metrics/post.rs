//! Sharpening, orientation averaging and whole-image inference.

use crate::data::{
    crop_to, pad_to_multiple, rotate90, stitch_patches, tile_image, ImageBuffer, PatchSet,
};
use crate::error::Result;
use crate::model::EraseNet;
use crate::scalar::Scalar;

pub const SHARPEN_KERNEL: [[f32; 3]; 3] = [[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]];

/// 3x3 sharpening with edge replication, clamped to `[0, 1]`. Evaluated as
/// `c + sum(c - n)` over the four neighbours, which is the same kernel and
/// leaves flat regions bit-exact.
pub fn sharpen(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = img.dims();
    let at = |r: isize, c: isize| {
        img.get(
            r.clamp(0, h as isize - 1) as usize,
            c.clamp(0, w as isize - 1) as usize,
        )
    };
    ImageBuffer::from_fn(h, w, |r, c| {
        let (r, c) = (r as isize, c as isize);
        let v = at(r, c);
        v + (v - at(r - 1, c)) + (v - at(r + 1, c)) + (v - at(r, c - 1)) + (v - at(r, c + 1))
    })
}

/// Runs the model on an image whose sides are multiples of its alignment.
pub fn run_model<T: Scalar>(model: &EraseNet<T>, img: &ImageBuffer) -> Result<ImageBuffer> {
    let y = model.predict(&img.to_tensor::<T>())?;
    Ok(ImageBuffer::from_tensor(&y, 0))
}

/// Pads to the model's alignment, runs it and crops back.
pub fn denoise_page<T: Scalar>(model: &EraseNet<T>, img: &ImageBuffer) -> Result<ImageBuffer> {
    let (padded, dims) = pad_to_multiple(img, model.required_multiple());
    crop_to(&run_model(model, &padded)?, dims)
}

/// Denoises `tile x tile` windows independently and stitches them.
pub fn denoise_tiled<T: Scalar>(
    model: &EraseNet<T>,
    img: &ImageBuffer,
    tile: usize,
) -> Result<ImageBuffer> {
    let tiles = tile_image(img, tile)?;
    let patches = tiles
        .patches
        .iter()
        .map(|p| run_model(model, p))
        .collect::<Result<Vec<_>>>()?;
    stitch_patches(&PatchSet { patches, ..tiles })
}

/// Average of `f` applied in the four right-angle orientations, each
/// result rotated back.
pub fn orientation_average(
    img: &ImageBuffer,
    mut f: impl FnMut(&ImageBuffer) -> Result<ImageBuffer>,
) -> Result<ImageBuffer> {
    let mut acc = vec![0.0f64; img.pixels().len()];
    for k in 0..4 {
        let out = rotate90(&f(&rotate90(img, k))?, 4 - k);
        for (a, &v) in acc.iter_mut().zip(out.pixels()) {
            *a += v as f64;
        }
    }
    let w = img.w();
    Ok(ImageBuffer::from_fn(img.h(), w, |r, c| {
        (acc[r * w + c] / 4.0) as f32
    }))
}
