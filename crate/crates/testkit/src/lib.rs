//! Synthetic document pages with office-style degradations.
//!
//! Clean pages are white with dark pseudo-text lines. Noisy versions add a
//! gray background cast, coffee-like stains, a crease, faded ink and fine
//! grain, roughly in the spirit of scanned office documents.

use std::fs;
use std::path::Path;

use erasenet_core::data::save_image;
use erasenet_core::ImageBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INK: f32 = 0.08;

/// Clean page: text lines of random stroke glyphs on white.
pub fn clean_page(h: usize, w: usize, rng: &mut impl Rng) -> ImageBuffer {
    let mut px = vec![1.0f32; h * w];
    let line_h = rng.random_range(18..26);
    let margin = (w / 12).max(4);
    let mut top = margin;
    while top + line_h + 4 < h - margin {
        let mut x = margin;
        while x + 12 < w - margin {
            let word = rng.random_range(2..8);
            for _ in 0..word {
                if x + 12 >= w - margin {
                    break;
                }
                glyph(&mut px, w, top, x, line_h, rng);
                x += rng.random_range(8..12);
            }
            x += rng.random_range(10..18);
        }
        top += line_h + rng.random_range(8..16);
    }
    ImageBuffer::new(h, w, px).expect("pixels stay in range")
}

fn glyph(px: &mut [f32], w: usize, top: usize, left: usize, line_h: usize, rng: &mut impl Rng) {
    let gh = line_h - rng.random_range(4..10);
    let gw = rng.random_range(5..9);
    let base = top + line_h - gh;
    let thick = rng.random_range(1..3);
    let mut put = |r: usize, c: usize| {
        for dr in 0..thick {
            for dc in 0..thick {
                px[(r + dr) * w + c + dc] = INK;
            }
        }
    };
    for _ in 0..rng.random_range(1..4) {
        match rng.random_range(0..3) {
            0 => {
                let c = left + rng.random_range(0..gw);
                (base..base + gh).for_each(|r| put(r, c));
            }
            1 => {
                let r = base + rng.random_range(0..gh);
                (left..left + gw).for_each(|c| put(r, c));
            }
            _ => {
                for t in 0..gh {
                    put(base + t, left + t * gw / gh);
                }
            }
        }
    }
}

/// Degrades a clean page.
pub fn degrade(clean: &ImageBuffer, rng: &mut impl Rng) -> ImageBuffer {
    let (h, w) = clean.dims();
    let background = rng.random_range(0.72..0.88f32);
    let fade = rng.random_range(0.15..0.35f32);
    let stains: Vec<(f32, f32, f32, f32)> = (0..rng.random_range(2..5))
        .map(|_| {
            (
                rng.random_range(0.0..h as f32),
                rng.random_range(0.0..w as f32),
                rng.random_range(0.08..0.2) * h.min(w) as f32,
                rng.random_range(0.15..0.35),
            )
        })
        .collect();
    let crease_col = rng.random_range(w / 4..3 * w / 4) as f32;
    let crease_slope = rng.random_range(-0.1..0.1f32);
    let grain: Vec<f32> = (0..h * w).map(|_| rng.random_range(-0.06..0.06f32)).collect();
    ImageBuffer::from_fn(h, w, |r, c| {
        let ink = 1.0 - clean.get(r, c);
        let mut v = background;
        for &(sr, sc, rad, depth) in &stains {
            let d2 = ((r as f32 - sr).powi(2) + (c as f32 - sc).powi(2)) / (rad * rad);
            let ring = (-(d2 - 1.0).powi(2) * 8.0).exp();
            v -= depth * (0.5 * (-d2).exp() + 0.5 * ring);
        }
        let dx = c as f32 - (crease_col + crease_slope * r as f32);
        v -= 0.25 * (-(dx * dx) / 6.0).exp();
        v += 0.04 * (-(dx - 3.0).powi(2) / 4.0).exp();
        v = v * (1.0 - ink) + (INK + fade) * ink;
        v + grain[r * w + c]
    })
}

/// `(noisy, clean)` page pair.
pub fn synthetic_pair(h: usize, w: usize, seed: u64) -> (ImageBuffer, ImageBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = clean_page(h, w, &mut rng);
    let noisy = degrade(&clean, &mut rng);
    (noisy, clean)
}

/// Writes `pages` pairs as `<root>/noisy/pageNNN.pgm` and
/// `<root>/clean/pageNNN.pgm`.
pub fn write_corpus(root: &Path, pages: usize, h: usize, w: usize, seed: u64) -> std::io::Result<()> {
    for d in ["noisy", "clean"] {
        fs::create_dir_all(root.join(d))?;
    }
    for i in 0..pages {
        let (noisy, clean) = synthetic_pair(h, w, seed.wrapping_add(i as u64));
        let name = format!("page{i:03}.pgm");
        save_image(&noisy, root.join("noisy").join(&name)).map_err(std::io::Error::other)?;
        save_image(&clean, root.join("clean").join(&name)).map_err(std::io::Error::other)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use erasenet_core::metrics::{mse_metric, Range};

    #[test]
    fn pages_are_deterministic_and_degraded() {
        let (n1, c1) = synthetic_pair(128, 96, 3);
        let (n2, c2) = synthetic_pair(128, 96, 3);
        assert_eq!(n1, n2);
        assert_eq!(c1, c2);
        let ink = c1.pixels().iter().filter(|&&v| v < 0.5).count();
        assert!(ink > 100, "too little text: {ink}");
        assert!(mse_metric(&n1, &c1, Range::Unit).unwrap() > 0.01);
    }
}
