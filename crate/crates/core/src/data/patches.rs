//! Sliding-window tiling, stitching and alignment padding.

use crate::data::image::ImageBuffer;
use crate::error::{Error, Result};

pub const PAGE_ROWS: usize = 1024;
pub const PAGE_COLS: usize = 768;
pub const PATCH_SIZE: usize = 256;
/// Whole-page training input size (rows, cols).
pub const PAGE_INPUT: (usize, usize) = (864, 480);

/// Square tiles of one source image with their top-left origins.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<ImageBuffer>,
    pub origins: Vec<(usize, usize)>,
    pub source: (usize, usize),
    pub tile: usize,
}

/// Splits a canonical `1024 x 768` page into its 12 `256 x 256` tiles,
/// ordered top-left to bottom-right.
pub fn extract_patches(img: &ImageBuffer) -> Result<PatchSet> {
    if img.dims() != (PAGE_ROWS, PAGE_COLS) {
        return Err(Error::pre(
            "extract_patches",
            format!(
                "page must be {PAGE_ROWS}x{PAGE_COLS} (rows x cols), got {}x{}; resize first",
                img.h(),
                img.w()
            ),
        ));
    }
    tile_image(img, PATCH_SIZE)
}

/// Non-overlapping `tile x tile` windows in row-major order.
pub fn tile_image(img: &ImageBuffer, tile: usize) -> Result<PatchSet> {
    if tile == 0 || img.h() % tile != 0 || img.w() % tile != 0 {
        return Err(Error::pre(
            "tile_image",
            format!("{}x{} is not a multiple of {tile}", img.h(), img.w()),
        ));
    }
    let mut patches = Vec::new();
    let mut origins = Vec::new();
    for r in (0..img.h()).step_by(tile) {
        for c in (0..img.w()).step_by(tile) {
            patches.push(img.crop(r, c, tile, tile)?);
            origins.push((r, c));
        }
    }
    Ok(PatchSet {
        patches,
        origins,
        source: img.dims(),
        tile,
    })
}

/// Reassembles tiles by origin. Tiles may come in any order but must cover
/// the source exactly once.
pub fn stitch_patches(ps: &PatchSet) -> Result<ImageBuffer> {
    let (h, w) = ps.source;
    let t = ps.tile;
    let bad = |msg: String| Err(Error::pre("stitch_patches", msg));
    if t == 0 || h % t != 0 || w % t != 0 {
        return bad(format!("{h}x{w} source is not a multiple of tile {t}"));
    }
    if ps.patches.len() != ps.origins.len() {
        return bad(format!(
            "{} patches but {} origins",
            ps.patches.len(),
            ps.origins.len()
        ));
    }
    let (gr, gc) = (h / t, w / t);
    let mut seen = vec![false; gr * gc];
    let mut out = vec![0.0f32; h * w];
    for (p, &(r0, c0)) in ps.patches.iter().zip(&ps.origins) {
        if p.dims() != (t, t) {
            return bad(format!("patch {}x{} is not {t}x{t}", p.h(), p.w()));
        }
        if r0 % t != 0 || c0 % t != 0 || r0 >= h || c0 >= w {
            return bad(format!(
                "origin ({r0}, {c0}) is off the {t}-pixel grid of {h}x{w}"
            ));
        }
        let cell = (r0 / t) * gc + c0 / t;
        if std::mem::replace(&mut seen[cell], true) {
            return bad(format!("origin ({r0}, {c0}) appears twice"));
        }
        for r in 0..t {
            out[(r0 + r) * w + c0..(r0 + r) * w + c0 + t].copy_from_slice(p.row(r));
        }
    }
    if let Some(hole) = seen.iter().position(|s| !s) {
        return bad(format!(
            "no patch at origin ({}, {})",
            hole / gc * t,
            hole % gc * t
        ));
    }
    ImageBuffer::new(h, w, out)
}

/// Pads bottom/right by edge replication up to the next multiple of `m`.
/// Returns the padded image and the original dimensions.
pub fn pad_to_multiple(img: &ImageBuffer, m: usize) -> (ImageBuffer, (usize, usize)) {
    assert!(m > 0, "padding multiple must be positive");
    let (h, w) = img.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return (img.clone(), (h, w));
    }
    (
        ImageBuffer::from_fn(ph, pw, |r, c| img.get(r.min(h - 1), c.min(w - 1))),
        (h, w),
    )
}

/// Top-left `h x w` region; the inverse of [`pad_to_multiple`].
pub fn crop_to(img: &ImageBuffer, dims: (usize, usize)) -> Result<ImageBuffer> {
    img.crop(0, 0, dims.0, dims.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page() -> ImageBuffer {
        ImageBuffer::from_fn(PAGE_ROWS, PAGE_COLS, |r, c| {
            ((r * 31 + c * 17) % 256) as f32 / 255.0
        })
    }

    #[test]
    fn twelve_tiles_in_scan_order() {
        let ps = extract_patches(&page()).unwrap();
        assert_eq!(ps.patches.len(), 12);
        assert_eq!(ps.origins[0], (0, 0));
        assert_eq!(ps.origins[1], (0, 256));
        assert_eq!(*ps.origins.last().unwrap(), (768, 512));
        assert!(extract_patches(&ImageBuffer::filled(768, 1024, 0.5)).is_err());
    }

    #[test]
    fn stitch_inverts_extract_in_any_order() {
        let img = page();
        let mut ps = extract_patches(&img).unwrap();
        assert_eq!(stitch_patches(&ps).unwrap(), img);
        ps.patches.reverse();
        ps.origins.reverse();
        ps.patches.swap(0, 5);
        ps.origins.swap(0, 5);
        assert_eq!(stitch_patches(&ps).unwrap(), img);
    }

    #[test]
    fn stitch_rejects_holes_and_overlaps() {
        let mut ps = extract_patches(&page()).unwrap();
        ps.origins[3] = ps.origins[4];
        let msg = stitch_patches(&ps).unwrap_err().to_string();
        assert!(msg.contains("twice"), "{msg}");
        let mut ps = extract_patches(&page()).unwrap();
        ps.origins.pop();
        ps.patches.pop();
        assert!(stitch_patches(&ps)
            .unwrap_err()
            .to_string()
            .contains("no patch"));
    }

    #[test]
    fn replicate_padding() {
        let img = ImageBuffer::from_fn(250, 250, |r, c| ((r + c) % 2) as f32);
        let (p, orig) = pad_to_multiple(&img, 16);
        assert_eq!(p.dims(), (256, 256));
        assert_eq!(orig, (250, 250));
        assert_eq!(p.get(255, 10), img.get(249, 10));
        assert_eq!(p.get(10, 253), img.get(10, 249));
        assert_eq!(p.get(255, 255), img.get(249, 249));
        assert_eq!(crop_to(&p, orig).unwrap(), img);
        let aligned = ImageBuffer::filled(256, 256, 0.3);
        assert_eq!(pad_to_multiple(&aligned, 16).0, aligned);
    }
}
