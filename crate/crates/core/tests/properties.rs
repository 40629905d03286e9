use erasenet_core::data::{crop_to, pad_to_multiple, rotate90, stitch_patches, tile_image};
use erasenet_core::metrics::{mse_metric, sharpen, ssim, Range, SsimParams};
use erasenet_core::nn::{conv2d, conv2d_backward_input, max_pool2d, ConvGeom, Padding};
use erasenet_core::train::{Checkpoint, Entry, PlateauState};
use erasenet_core::{ImageBuffer, Shape, Tensor, Variant};
use proptest::prelude::*;

fn image(max: usize) -> impl Strategy<Value = ImageBuffer> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..=1.0, h * w)
            .prop_map(move |px| ImageBuffer::new(h, w, px).unwrap())
    })
}

fn tensor(s: Shape) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, s.numel()).prop_map(move |v| Tensor::new(s, v).unwrap())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiling_then_stitching_is_identity(gr in 1usize..4, gc in 1usize..4, t in 1usize..9, seed in any::<u32>()) {
        let img = ImageBuffer::from_fn(gr * t, gc * t, |r, c| {
            ((r as u32 * 131 + c as u32 * 71) ^ seed) as f32 % 256.0 / 255.0
        });
        let mut tiles = tile_image(&img, t).unwrap();
        prop_assert_eq!(tiles.patches.len(), gr * gc);
        tiles.patches.reverse();
        tiles.origins.reverse();
        prop_assert_eq!(stitch_patches(&tiles).unwrap(), img);
    }

    #[test]
    fn pad_then_crop_restores(img in image(40), m in prop::sample::select(vec![4usize, 8, 16])) {
        let (padded, dims) = pad_to_multiple(&img, m);
        prop_assert_eq!(dims, img.dims());
        prop_assert_eq!(padded.h() % m, 0);
        prop_assert_eq!(padded.w() % m, 0);
        prop_assert!(padded.h() - img.h() < m && padded.w() - img.w() < m);
        for r in 0..padded.h() {
            for c in 0..padded.w() {
                let src = img.get(r.min(img.h() - 1), c.min(img.w() - 1));
                prop_assert_eq!(padded.get(r, c), src);
            }
        }
        prop_assert_eq!(crop_to(&padded, dims).unwrap(), img);
    }

    #[test]
    fn four_quarter_turns_are_identity(img in image(24)) {
        let once = rotate90(&img, 1);
        prop_assert_eq!(once.dims(), (img.w(), img.h()));
        prop_assert_eq!(rotate90(&once, 3), img.clone());
        prop_assert_eq!(rotate90(&rotate90(&rotate90(&once, 1), 1), 1), img);
    }

    #[test]
    fn ssim_symmetric_bounded_and_reflexive((a, b) in (11usize..30, 11usize..30).prop_flat_map(|(h, w)| {
        let px = prop::collection::vec(0.0f32..=1.0, h * w);
        (px.clone(), px).prop_map(move |(x, y)| {
            (ImageBuffer::new(h, w, x).unwrap(), ImageBuffer::new(h, w, y).unwrap())
        })
    })) {
        let p = SsimParams::default();
        let ab = ssim(&a, &b, &p).unwrap();
        let ba = ssim(&b, &a, &p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mse_is_symmetric_and_scales_by_range(img in image(20), shift in -0.3f32..0.3) {
        let other = ImageBuffer::from_fn(img.h(), img.w(), |r, c| (img.get(r, c) + shift).clamp(0.0, 1.0));
        let unit = mse_metric(&img, &other, Range::Unit).unwrap();
        prop_assert_eq!(unit, mse_metric(&other, &img, Range::Unit).unwrap());
        let byte = mse_metric(&img, &other, Range::EightBit).unwrap();
        prop_assert!((byte - unit * 255.0 * 255.0).abs() <= 1e-6 * byte.max(1.0));
    }

    #[test]
    fn sharpen_output_stays_in_range_and_fixes_constants(img in image(20), v in 0.0f32..=1.0) {
        let s = sharpen(&img);
        prop_assert!(s.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        let flat = ImageBuffer::filled(img.h(), img.w(), v);
        prop_assert_eq!(sharpen(&flat), flat);
    }

    #[test]
    fn plateau_lr_never_increases(losses in prop::collection::vec(0.0f64..1.0, 1..80)) {
        let mut p = PlateauState::default();
        let mut lr = 1e-4;
        for l in losses {
            let next = p.update(l, lr);
            prop_assert!(next <= lr);
            prop_assert!(next >= p.min_lr || next == lr);
            prop_assert!(next == lr || (next - lr * p.factor).abs() < 1e-18 || next == p.min_lr);
            lr = next;
        }
    }

    #[test]
    fn checkpoint_encoding_round_trips(
        entries in prop::collection::vec(("[a-z.]{1,12}", prop::collection::vec(any::<f32>(), 0..20)), 0..6),
        v4 in any::<bool>(),
    ) {
        let ck = Checkpoint {
            variant: if v4 { Variant::EraseNet4 } else { Variant::EraseNet3 },
            entries: entries
                .iter()
                .map(|(name, data)| Entry::floats(name.as_str(), vec![data.len()], data))
                .collect(),
        };
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.encode(), bytes.clone());
        let mut corrupt = bytes;
        let i = corrupt.len() / 2;
        corrupt[i] ^= 0x10;
        prop_assert!(Checkpoint::decode(&corrupt).is_err());
    }

    #[test]
    fn conv_input_gradient_is_the_adjoint(
        (x, w, y, k) in (1usize..4, 1usize..4, prop::sample::select(vec![1usize, 3, 5])).prop_flat_map(|(ci, co, k)| {
            let xs = Shape::new(2, ci, 7, 6).unwrap();
            let ws = Shape::new(co, ci, k, k).unwrap();
            let ys = Shape::new(2, co, 7, 6).unwrap();
            (tensor(xs), tensor(ws), tensor(ys), Just(k))
        })
    ) {
        let g = ConvGeom::new(k, 1, Padding::Same);
        let lhs = dot(&conv2d(&x, &w, None, g).unwrap(), &y);
        let rhs = dot(&x, &conv2d_backward_input(&y, &w, g, 7, 6).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn max_pool_picks_the_window_maximum(x in tensor(Shape::new(1, 2, 6, 8).unwrap())) {
        let (y, _) = max_pool2d(&x).unwrap();
        let s = x.shape();
        for c in 0..2 {
            for r in 0..3 {
                for q in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for dr in 0..2 {
                        for dq in 0..2 {
                            m = m.max(x.data()[(c * s.h + 2 * r + dr) * s.w + 2 * q + dq]);
                        }
                    }
                    prop_assert_eq!(y.data()[(c * 3 + r) * 4 + q], m);
                }
            }
        }
    }
}
