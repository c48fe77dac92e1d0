use proptest::prelude::*;
use vtomo_core::geometry::{adjoint_apply, forward_apply};
use vtomo_core::metrics::{psnr, segmentation_metrics};
use vtomo_core::postprocess::{percentile_threshold, remove_small_components, SegmentationConfig};
use vtomo_core::projection::topk_mip;
use vtomo_core::volume::{apply_mask, resample};
use vtomo_core::{Grid, ProjectionGeometry, ProjectionStack, SliceProjector, Volume, VolumeKind};

const DIMS: [usize; 3] = [6, 5, 4];

fn geometry(views: usize) -> ProjectionGeometry {
    ProjectionGeometry::for_dims(DIMS).with_views(views, 0.0, 180.0 / views as f64).unwrap()
}

fn intensities() -> impl Strategy<Value = Volume> {
    prop::collection::vec(0.0f32..4.0, 120).prop_map(|d| Volume::new(DIMS, [1.0; 3], VolumeKind::Intensity, d).unwrap())
}

fn masks() -> impl Strategy<Value = Volume> {
    prop::collection::vec(prop::bool::ANY, 120).prop_map(|b| {
        let d = b.into_iter().map(|x| if x { 1.0 } else { 0.0 }).collect();
        Volume::new(DIMS, [1.0; 3], VolumeKind::BinaryMask, d).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_is_linear(a in intensities(), b in intensities(), s in 0.1f32..3.0) {
        let g = geometry(7);
        let combo: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| s * x + y).collect();
        let combo = Volume::new(DIMS, [1.0; 3], VolumeKind::Intensity, combo).unwrap();
        let p = SliceProjector::new(&g, &Grid::unit(DIMS).unwrap()).unwrap();
        let (pa, pb, pc) = (forward_apply(&p, &a).unwrap(), forward_apply(&p, &b).unwrap(), forward_apply(&p, &combo).unwrap());
        for ((x, y), z) in pa.data().iter().zip(pb.data()).zip(pc.data()) {
            prop_assert!(((s * x + y) - z).abs() <= 1e-4 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn adjoint_identity(x in intensities(), y in prop::collection::vec(-1.0f32..1.0, 7 * 36)) {
        let g = geometry(7);
        let p = SliceProjector::new(&g, &Grid::unit(DIMS).unwrap()).unwrap();
        let ys = ProjectionStack::new(g.clone(), y).unwrap();
        let ax = forward_apply(&p, &x).unwrap();
        let aty = adjoint_apply(&p, &ys).unwrap();
        let lhs: f64 = ax.data().iter().zip(ys.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn topk_channels_descend_and_sum_below_integral(v in intensities(), k in 1usize..8) {
        let g = geometry(5);
        let t = topk_mip(&v, &g, k).unwrap();
        let ip = forward_apply(&SliceProjector::new(&g, &Grid::unit(DIMS).unwrap()).unwrap(), &v).unwrap();
        let sum = t.channel_sum();
        for view in 0..5 {
            for c in 1..k {
                for (hi, lo) in t.channel(view, c - 1).iter().zip(t.channel(view, c)) {
                    prop_assert!(hi >= lo);
                }
            }
        }
        for (s, i) in sum.data().iter().zip(ip.data()) {
            prop_assert!(*s <= i * (1.0 + 1e-5) + 1e-5);
        }
    }

    #[test]
    fn metrics_are_consistent(a in masks(), b in masks()) {
        let ab = segmentation_metrics(&a, &b).unwrap();
        let ba = segmentation_metrics(&b, &a).unwrap();
        prop_assert_eq!(ab.dsc, ba.dsc);
        prop_assert_eq!(ab.iou, ba.iou);
        prop_assert!((ab.dsc - 2.0 * ab.iou / (1.0 + ab.iou)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.dsc) && ab.iou <= ab.dsc);
        prop_assert_eq!(segmentation_metrics(&a, &a).unwrap().dsc, 1.0);
    }

    #[test]
    fn threshold_cleanup_is_nested(v in intensities(), p1 in 50.0f64..99.0, dp in 0.0f64..10.0) {
        let lo = percentile_threshold(&v, p1).unwrap();
        let hi = percentile_threshold(&v, (p1 + dp).min(100.0)).unwrap();
        prop_assert!(hi.count_nonzero() <= lo.count_nonzero());
        let cfg = SegmentationConfig::default();
        let clean = remove_small_components(&lo, &cfg).unwrap();
        for (c, l) in clean.data().iter().zip(lo.data()) {
            prop_assert!(*c <= *l);
        }
    }

    #[test]
    fn mask_ops_preserve_binarity(v in intensities(), m in masks(), nx in 1usize..12, ny in 1usize..12, nz in 1usize..12) {
        let once = apply_mask(&v, &m).unwrap();
        prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        let r = resample(&m, [nx, ny, nz]).unwrap();
        prop_assert!(r.is_mask());
        prop_assert!(r.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn psnr_is_symmetric(a in prop::collection::vec(0.0f32..1.0, 64), b in prop::collection::vec(0.0f32..1.0, 64)) {
        prop_assert_eq!(psnr(&a, &b, Some(1.0)).unwrap(), psnr(&b, &a, Some(1.0)).unwrap());
    }
}
