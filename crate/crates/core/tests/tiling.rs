use erasenet_core::data::{extract_patches, PATCH_SIZE};
use erasenet_core::metrics::{denoise_page, denoise_tiled};
use erasenet_core::{EraseNet, Variant};
use erasenet_testkit::synthetic_pair;

/// True when the window of radius `r` around `i` stays inside one tile,
/// ignoring the outer border, which both paths pad the same way.
fn inside_one_tile(i: usize, r: usize, len: usize) -> bool {
    let lo = i.saturating_sub(r);
    let hi = (i + r).min(len - 1);
    lo / PATCH_SIZE == hi / PATCH_SIZE
}

#[test]
fn tiled_inference_matches_the_page_away_from_seams() {
    let model = EraseNet::<f32>::new(Variant::EraseNet3, 0.125, 17).unwrap();
    let radius = model.spec().receptive_radius();
    assert!(radius < PATCH_SIZE / 2);
    let (page, _) = synthetic_pair(1024, 768, 8);
    assert_eq!(extract_patches(&page).unwrap().patches.len(), 12);

    let whole = denoise_page(&model, &page).unwrap();
    let tiled = denoise_tiled(&model, &page, PATCH_SIZE).unwrap();
    assert_eq!(whole.dims(), page.dims());
    assert_eq!(tiled.dims(), page.dims());

    let (h, w) = page.dims();
    let mut interior = 0;
    let mut seam_diff = 0.0f32;
    for r in 0..h {
        for c in 0..w {
            let d = (whole.get(r, c) - tiled.get(r, c)).abs();
            if inside_one_tile(r, radius, h) && inside_one_tile(c, radius, w) {
                interior += 1;
                assert!(d <= 1e-5, "({r}, {c}) differs by {d}");
            } else {
                seam_diff = seam_diff.max(d);
            }
        }
    }
    assert!(interior > 0);
    assert!(seam_diff > 1e-5, "seams should see context from neighbouring tiles");
}
