use dproto::autodiff::kernels::{upsample, upsample_adjoint};
use dproto::dataset::pnm;
use dproto::mdm::cam_from_sum;
use dproto::saliency_eval::{binarize_cam, drop_increase, localization_metrics, top_count};
use dproto::Tensor;
use proptest::prelude::*;

fn masks(n: usize) -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))
}

proptest! {
    #[test]
    fn dice_is_a_function_of_iou((p, t) in masks(64)) {
        let m = localization_metrics(&p, &t).unwrap();
        prop_assert_eq!(m.dice, 2.0 * m.iou / (1.0 + m.iou));
        prop_assert!((0.0..=1.0).contains(&m.iou) && m.dice >= m.iou);
    }

    #[test]
    fn binarization_keeps_the_top_count(values in prop::collection::vec(0.0f64..1.0, 1..200), pct in 0.5f64..100.0) {
        let keep = binarize_cam(&values, pct).unwrap();
        let k = top_count(values.len(), pct);
        prop_assert_eq!(keep.iter().filter(|&&b| b).count(), k);
        let lowest_kept = values.iter().zip(&keep).filter(|p| *p.1).map(|p| *p.0).fold(f64::INFINITY, f64::min);
        prop_assert!(values.iter().zip(&keep).filter(|p| !*p.1).all(|p| *p.0 <= lowest_kept));
    }

    #[test]
    fn drop_is_bounded(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..50)) {
        let r = drop_increase(&pairs);
        prop_assert!((0.0..=100.0).contains(&r.ad));
        prop_assert!((0.0..=100.0).contains(&r.ai));
    }

    #[test]
    fn pnm_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let data: Vec<f64> = (0..h * w * 3)
            .map(|i| (seed.wrapping_mul(i as u64 + 1).wrapping_add(i as u64) % 256) as f64 / 255.0)
            .collect();
        let image = Tensor::new(vec![h, w, 3], data).unwrap();
        let bytes = pnm::encode(&image).unwrap();
        prop_assert_eq!(pnm::decode(&bytes, std::path::Path::new("x.ppm")).unwrap(), image);
    }

    #[test]
    fn upsample_preserves_constants_and_is_adjoint(
        a in 1usize..6, b in 1usize..6, oh in 6usize..20, ow in 6usize..20, c in -2.0f64..2.0,
    ) {
        let up = upsample(&vec![c; a * b], a, b, oh, ow);
        prop_assert!(up.iter().all(|v| (v - c).abs() < 1e-12));
        let g: Vec<f64> = (0..a * b).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut adj = vec![0.0; a * b];
        upsample_adjoint(&y, a, b, oh, ow, &mut adj);
        let lhs: f64 = upsample(&g, a, b, oh, ow).iter().zip(&y).map(|(p, q)| p * q).sum();
        let rhs: f64 = g.iter().zip(&adj).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn cam_values_lie_in_unit_interval(sum in prop::collection::vec(0.0f64..10.0, 16), gamma in 0.0f64..9.0) {
        let cam = cam_from_sum(&sum, gamma, 4, 4, vec![1]);
        prop_assert!(cam.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for ((v, r), s) in cam.values.data().iter().zip(&cam.region).zip(&sum) {
            prop_assert!(*r || *v == 0.0);
            prop_assert!(!*r || *s >= gamma);
        }
    }
}
