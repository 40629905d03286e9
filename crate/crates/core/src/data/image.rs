//! Grayscale raster buffers and file IO (binary PGM and PNG).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Row-major grayscale image with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    h: usize,
    w: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::pre(
                "image",
                format!("dimensions {h}x{w} must be positive"),
            ));
        }
        if pixels.len() != h * w {
            return Err(Error::pre(
                "image",
                format!("{} pixels for {h}x{w}", pixels.len()),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::pre("image", format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self { h, w, pixels })
    }

    /// Builds from a closure, clamping to `[0, 1]`.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(h > 0 && w > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                pixels.push(clamp_unit(f(r, c)));
            }
        }
        Self { h, w, pixels }
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        Self::from_fn(h, w, |_, _| v)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.w + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.pixels[r * self.w..(r + 1) * self.w]
    }

    /// `h x w` window starting at `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || r0 + h > self.h || c0 + w > self.w {
            return Err(Error::pre(
                "crop",
                format!(
                    "window {h}x{w} at ({r0}, {c0}) exceeds {}x{}",
                    self.h, self.w
                ),
            ));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            pixels.extend_from_slice(&self.row(r)[c0..c0 + w]);
        }
        Ok(Self { h, w, pixels })
    }

    /// `1 x 1 x h x w` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let s = Shape {
            n: 1,
            c: 1,
            h: self.h,
            w: self.w,
        };
        Tensor::from_fn(s, |i| T::lit(self.pixels[i] as f64))
    }

    /// Reads sample `n`, channel 0 of a tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Self {
        let s = t.shape();
        let plane = &t.sample(n)[..s.plane()];
        Self {
            h: s.h,
            w: s.w,
            pixels: plane
                .iter()
                .map(|v| clamp_unit(v.as_f64() as f32))
                .collect(),
        }
    }

    /// Quantizes to 8 bits (round half away from zero).
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(h, w, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Luma of an 8-bit RGB triple, in `[0, 1]`.
pub fn luma(r: u8, g: u8, b: u8) -> f32 {
    ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0).min(1.0) as f32
}

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Loads a grayscale, RGB or RGBA raster (PNG or binary PGM) as luma.
pub fn load_grayscale(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        return decode_pgm(&bytes).map_err(|m| image_err(path, format!("PGM: {m}")));
    }
    let img = image::load_from_memory(&bytes).map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(g) => {
            g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        image::DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        image::DynamicImage::ImageRgb8(rgb) => {
            rgb.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect()
        }
        image::DynamicImage::ImageRgba8(rgba) => rgba
            .pixels()
            .map(|p| luma(p.0[0], p.0[1], p.0[2]))
            .collect(),
        other => {
            return Err(image_err(
                path,
                format!(
                    "unsupported pixel format {:?} (need 8-bit gray or RGB)",
                    other.color()
                ),
            ))
        }
    };
    ImageBuffer::new(h, w, pixels).map_err(|e| image_err(path, e.to_string()))
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad header field")?;
    }
    let [w, h, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing separator after header".into());
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or("truncated pixel data")?;
    let scale = maxval as f32;
    ImageBuffer::new(
        h,
        w,
        data.iter().map(|&v| (v as f32 / scale).min(1.0)).collect(),
    )
    .map_err(|e| e.to_string())
}

pub fn encode_pgm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.to_u8());
    out
}

/// Writes 8-bit output; `.png` gets PNG, anything else binary PGM.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let buf = image::GrayImage::from_raw(img.w as u32, img.h as u32, img.to_u8())
            .expect("buffer size matches dims");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_err(path, e.to_string()))
    } else {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&encode_pgm(img))
            .map_err(|e| Error::io(path, e))
    }
}

/// Bilinear resampling with pixel-centre alignment (align-corners off) and
/// edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, out_h: usize, out_w: usize) -> ImageBuffer {
    if (out_h, out_w) == img.dims() {
        return img.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = axis(out_h, img.h);
    let cols = axis(out_w, img.w);
    ImageBuffer::from_fn(out_h, out_w, |r, c| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = img.get(r0, c0) * (1.0 - fc) + img.get(r0, c1) * fc;
        let bot = img.get(r1, c0) * (1.0 - fc) + img.get(r1, c1) * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Rotates by `quarter_turns * 90` degrees counter-clockwise.
pub fn rotate90(img: &ImageBuffer, quarter_turns: u32) -> ImageBuffer {
    let (h, w) = img.dims();
    match quarter_turns % 4 {
        0 => img.clone(),
        1 => ImageBuffer::from_fn(w, h, |r, c| img.get(c, w - 1 - r)),
        2 => ImageBuffer::from_fn(h, w, |r, c| img.get(h - 1 - r, w - 1 - c)),
        _ => ImageBuffer::from_fn(w, h, |r, c| img.get(h - 1 - c, r)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_weights() {
        assert!((luma(255, 0, 0) - 0.299).abs() < 1e-6);
        assert_eq!(luma(255, 255, 255), 1.0);
        assert_eq!(luma(0, 0, 0), 0.0);
    }

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        let bytes: Vec<u8> = (0..=255u8).chain(0..=255u8).collect();
        let img = ImageBuffer::from_u8(16, 32, &bytes).unwrap();
        let enc = encode_pgm(&img);
        let back = decode_pgm(&enc).unwrap();
        assert_eq!(back.to_u8(), bytes);
        assert_eq!(back.get(0, 0), 0.0);
        assert_eq!(back.get(0, 31), 31.0 / 255.0);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut b = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        b.extend([255, 0]);
        let img = decode_pgm(&b).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0]);
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn resize_identity_and_average() {
        let img = ImageBuffer::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2), img);
        assert_eq!(resize_bilinear(&img, 1, 1).pixels(), &[0.5]);
        let up = resize_bilinear(&img, 7, 5);
        assert_eq!(up.dims(), (7, 5));
    }

    #[test]
    fn rotation_moves_corner_marker() {
        let mut px = vec![0.0; 6];
        px[0] = 1.0; // top-left of a 2x3 image
        let img = ImageBuffer::new(2, 3, px).unwrap();
        let r1 = rotate90(&img, 1);
        assert_eq!(r1.dims(), (3, 2));
        assert_eq!(r1.get(2, 0), 1.0); // counter-clockwise: top-left goes bottom-left
        for k in 0..4 {
            assert_eq!(rotate90(&rotate90(&img, k), 4 - k), img);
        }
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(ImageBuffer::new(1, 1, vec![1.5]).is_err());
        assert!(ImageBuffer::new(1, 2, vec![0.5]).is_err());
    }
}
