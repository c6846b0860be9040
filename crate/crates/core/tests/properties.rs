use hoi_compose::conditioning::downsample_mask_to_tokens;
use hoi_compose::eval::{mask_iou, region_iou, ssim_bg};
use hoi_compose::geometry::{bbox_of_mask, rasterize_box, BBox, Mask};
use hoi_compose::image::Image;
use hoi_compose::losses::{appearance_from_features, background_loss};
use hoi_compose::record::boxes_within_pixel;
use hoi_compose::region_query::{format_box, parse_box, STAGE_OBJECT_BOX};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.05..1.0f64, 0.05..1.0f64).prop_map(|(x, y, w, h)| {
        BBox::new(x, y, (x + w).min(1.0).max(x + 0.05), (y + h).min(1.0).max(y + 0.05)).unwrap()
    })
}

fn image(side: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0..1.0f64, side * side * 3).prop_map(move |d| Image::new(side, side, 3, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn raster_round_trip_stays_within_a_pixel(b in bbox(), side in 8usize..40) {
        let m = rasterize_box(&b, side, side).unwrap();
        if m.count_nonzero() > 0 {
            let back = bbox_of_mask(&m).unwrap();
            prop_assert!(boxes_within_pixel(&back, &b, side, side));
        }
    }

    #[test]
    fn formatted_boxes_parse_back(b in bbox()) {
        let parsed = parse_box(&format_box(&b), STAGE_OBJECT_BOX, 64, 64).unwrap();
        for (p, q) in parsed.to_array().iter().zip(b.to_array()) {
            prop_assert!((p - q).abs() <= 5e-4);
        }
    }

    #[test]
    fn region_iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (region_iou(&a, &b), region_iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((region_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_average_preserves_mask_mean(bits in proptest::collection::vec(any::<bool>(), 64), g in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let m = Mask::from_values(8, 8, bits.iter().map(|&b| f64::from(b)).collect()).unwrap();
        let t = downsample_mask_to_tokens(&m, (g, g)).unwrap();
        let mean_t = t.iter().sum::<f64>() / t.len() as f64;
        prop_assert!((mean_t - m.sum() / 64.0).abs() < 1e-12);
    }

    #[test]
    fn background_loss_is_zero_only_where_it_should_be(a in image(6), b in image(6), bits in proptest::collection::vec(any::<bool>(), 36)) {
        let mask = Mask::from_values(6, 6, bits.iter().map(|&b| f64::from(b)).collect()).unwrap();
        prop_assert_eq!(background_loss(&a, &a, &mask, false).unwrap(), 0.0);
        let l = background_loss(&a, &b, &mask, false).unwrap();
        prop_assert!(l >= 0.0);
        let empty = Mask::zeros(6, 6).unwrap();
        prop_assert_eq!(background_loss(&a, &b, &empty, false).unwrap(), 0.0);
    }

    #[test]
    fn appearance_is_scale_invariant(p in proptest::collection::vec(0.1..1.0f64, 5), g in proptest::collection::vec(-1.0..1.0f64, 5), s in 0.1..10.0f64) {
        prop_assume!(g.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let scaled: Vec<f64> = p.iter().map(|x| x * s).collect();
        let a = appearance_from_features(&[p.clone()], &[g.clone()]).unwrap();
        let b = appearance_from_features(&[scaled], &[g]).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&a));
    }

    #[test]
    fn background_ssim_is_symmetric_and_at_most_one(a in image(24), b in image(24)) {
        let region = BBox::new(0.7, 0.7, 1.0, 1.0).unwrap();
        let ab = ssim_bg(&a, &b, &region).unwrap();
        let ba = ssim_bg(&b, &a, &region).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn mask_iou_with_itself_is_one(bits in proptest::collection::vec(any::<bool>(), 16)) {
        let m = Mask::from_values(4, 4, bits.iter().map(|&b| f64::from(b)).collect()).unwrap();
        prop_assert_eq!(mask_iou(&m, &m).unwrap(), 1.0);
    }
}
