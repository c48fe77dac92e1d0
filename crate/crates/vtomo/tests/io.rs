use std::fs;

use rand::Rng;
use tempfile::tempdir;
use vtomo::io::{
    export_topk_channel, export_view, header_path, load_stack, load_topk, load_volume, save_stack, save_topk,
    save_volume, write_components_csv, write_trace_csv, Gray8, MetricsRecord,
};
use vtomo::Error;
use vtomo_core::metrics::{full_report, ImageQualityReport};
use vtomo_core::postprocess::{connected_components, Connectivity};
use vtomo_core::projection::{integral_projection, topk_mip};
use vtomo_core::reconstruction::{OptimizerTrace, TraceEntry};
use vtomo_core::rng::seeded;
use vtomo_core::{ProjectionGeometry, ProjectionStack, Volume, VolumeKind};

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = seeded(seed);
    let n = dims.iter().product();
    Volume::new(dims, [0.5, 1.0, 2.0], VolumeKind::Intensity, (0..n).map(|_| rng.random::<f32>() - 0.5).collect())
        .unwrap()
}

fn write_raw(path: &std::path::Path, header: &str, values: &[f32]) {
    fs::write(path, values.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
    fs::write(header_path(path), header).unwrap();
}

#[test]
fn volume_round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let v = random_volume([16; 3], 1);
    let p = dir.path().join("a.vol");
    save_volume(&v, &p).unwrap();
    let back = load_volume(&p).unwrap();
    assert_eq!(back, v);
    assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(fs::metadata(&p).unwrap().len(), 16 * 16 * 16 * 4);

    let m = Volume::mask_from_fn([64; 3], |i, _, _| i % 2 == 0).unwrap();
    let p = dir.path().join("m.vol");
    save_volume(&m, &p).unwrap();
    assert_eq!(fs::metadata(&p).unwrap().len(), 64 * 64 * 64 * 4);
    assert_eq!(load_volume(&p).unwrap(), m);
}

#[test]
fn header_layout() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("one.vol");
    save_volume(&Volume::filled([1, 1, 1], 0.5).unwrap(), &p).unwrap();
    assert_eq!(fs::read(&p).unwrap(), 0.5f32.to_le_bytes());
    let h: serde_json::Value = serde_json::from_str(&fs::read_to_string(header_path(&p)).unwrap()).unwrap();
    assert_eq!(
        h,
        serde_json::json!({"dims": [1, 1, 1], "spacing": [1.0, 1.0, 1.0], "kind": "intensity", "dtype": "f32", "order": "little"})
    );
}

#[test]
fn hand_written_mask_loads() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("m.vol");
    write_raw(&p, r#"{"dims":[2,2,2],"spacing":[1,1,1],"kind":"mask","dtype":"f32","order":"little"}"#, &[1.0; 8]);
    let v = load_volume(&p).unwrap();
    assert!(v.is_mask());
    assert_eq!(v.data(), &[1.0; 8]);
}

#[test]
fn volume_load_errors() {
    let dir = tempdir().unwrap();
    let hdr = |kind: &str, dtype: &str| {
        format!(r#"{{"dims":[2,2,2],"spacing":[1,1,1],"kind":"{kind}","dtype":"{dtype}","order":"little"}}"#)
    };
    let short = dir.path().join("short.vol");
    write_raw(&short, &hdr("intensity", "f32"), &[0.0; 7]);
    let e = load_volume(&short).unwrap_err();
    assert!(matches!(e, Error::Format { .. }) && e.to_string().contains("28 bytes"), "{e}");

    let f64s = dir.path().join("f64.vol");
    write_raw(&f64s, &hdr("intensity", "f64"), &[0.0; 16]);
    assert!(load_volume(&f64s).unwrap_err().to_string().contains("unknown dtype"));

    let nan = dir.path().join("nan.vol");
    write_raw(&nan, &hdr("mask", "f32"), &[0.0, 1.0, f32::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(load_volume(&nan).unwrap_err().to_string().contains("NaN"));

    let two = dir.path().join("two.vol");
    write_raw(&two, &hdr("mask", "f32"), &[2.0; 8]);
    assert_eq!(load_volume(&two).unwrap_err().exit_code(), 2);

    let bare = dir.path().join("bare.vol");
    fs::write(&bare, [0u8; 32]).unwrap();
    let e = load_volume(&bare).unwrap_err();
    assert!(e.to_string().contains("missing header"));
    assert_eq!(e.exit_code(), 2);
    assert_eq!(load_volume(&dir.path().join("absent.vol")).unwrap_err().exit_code(), 2);
}

#[test]
fn stacks_round_trip() {
    let dir = tempdir().unwrap();
    let v = random_volume([8; 3], 2).with_spacing([1.0; 3]).unwrap();
    let g = ProjectionGeometry::for_dims([8; 3]).with_views(12, 0.0, 15.0).unwrap();
    let ip = integral_projection(&v, &g).unwrap();
    let tk = topk_mip(&v, &g, 3).unwrap();
    let (pi, pt) = (dir.path().join("a.stk"), dir.path().join("b.stk"));
    save_stack(&ip, &pi).unwrap();
    save_topk(&tk, &pt).unwrap();
    assert_eq!(load_stack(&pi).unwrap(), ip);
    assert_eq!(load_topk(&pt).unwrap(), tk);
    assert!(load_stack(&pt).is_err());
    assert!(load_topk(&pi).is_err());

    let h: serde_json::Value = serde_json::from_str(&fs::read_to_string(header_path(&pi)).unwrap()).unwrap();
    assert_eq!(h["n_views"], 12);
    assert_eq!(h["nu"], 8);
    assert!(h.get("k").is_none());
    assert_eq!(h["geometry"]["angle_step_deg"], 15.0);
    let h: serde_json::Value = serde_json::from_str(&fs::read_to_string(header_path(&pt)).unwrap()).unwrap();
    assert_eq!(h["k"], 3);
}

fn pgm_pixels(bytes: &[u8]) -> &[u8] {
    // header is three whitespace-terminated tokens after the magic
    let mut fields = 0;
    let mut i = 0;
    while fields < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields += 1;
    }
    &bytes[i + 1..]
}

#[test]
fn image_export() {
    let dir = tempdir().unwrap();
    let g = ProjectionGeometry::for_dims([4, 4, 3]).with_views(2, 0.0, 90.0).unwrap();
    let flat = ProjectionStack::new(g.clone(), vec![7.0; 2 * 16]).unwrap();
    let p = dir.path().join("flat.pgm");
    export_view(&flat, 1, &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm_pixels(&bytes), &[0u8; 16]);

    let e = export_view(&flat, 2, &p).unwrap_err();
    assert!(matches!(e, Error::Core(vtomo_core::Error::ViewOutOfRange { index: 2, n_views: 2 })));

    // v = 0 is the bottom row of the image
    let mut ramp = vec![0.0f32; 32];
    ramp[..4].iter_mut().for_each(|x| *x = 1.0);
    let ramp = ProjectionStack::new(g, ramp).unwrap();
    let img = Gray8::from_detector(ramp.view(0), 4, 4);
    assert_eq!(&img.pixels[12..], &[255; 4]);
    assert_eq!(&img.pixels[..12], &[0; 12]);

    let png = dir.path().join("v.png");
    export_view(&ramp, 0, &png).unwrap();
    assert!(fs::read(&png).unwrap().starts_with(b"\x89PNG"));

    let v = random_volume([4, 4, 3], 3).with_spacing([1.0; 3]).unwrap();
    let tk = topk_mip(&v, ramp.geometry(), 2).unwrap();
    export_topk_channel(&tk, 1, 1, &dir.path().join("t.pgm")).unwrap();
    assert!(export_topk_channel(&tk, 0, 2, &dir.path().join("t.pgm")).is_err());
}

#[test]
fn csv_exports() {
    let dir = tempdir().unwrap();
    let trace = OptimizerTrace {
        entries: vec![
            TraceEntry { iteration: 0, residual: 4.0, step_size: 0.0 },
            TraceEntry { iteration: 1, residual: 1.5, step_size: 0.25 },
        ],
    };
    let p = dir.path().join("t.csv");
    write_trace_csv(&trace, &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(text.lines().next(), Some("iteration,residual,step_size"));
    assert_eq!(rows, vec![vec![0.0, 4.0, 0.0], vec![1.0, 1.5, 0.25]]);

    let m = Volume::mask_from_fn([5, 5, 5], |i, j, k| (i, j, k) == (0, 0, 0) || (i >= 3 && j >= 3 && k >= 3)).unwrap();
    let labels = connected_components(&m, Connectivity::Vertex).unwrap();
    let p = dir.path().join("c.csv");
    write_components_csv(&labels, &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "label,size,centroid_x,centroid_y,centroid_z");
    assert_eq!(lines[1], "1,1,0.0000,0.0000,0.0000");
    assert_eq!(lines[2], "2,8,3.5000,3.5000,3.5000");
}

#[test]
fn metrics_record_json() {
    let m = Volume::mask_from_fn([6, 6, 6], |i, j, k| i == 3 && j == 3 && k > 0).unwrap();
    let r =
        MetricsRecord::new(&full_report(&m, &m).unwrap(), Some(ImageQualityReport { psnr: f64::INFINITY, ssim: 1.0 }));
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["dsc"], 1.0);
    assert_eq!(json["cldice"], 1.0);
    assert_eq!(json["psnr"], "inf");
    assert_eq!(serde_json::from_value::<MetricsRecord>(json).unwrap(), r);
    assert!(r.summary().starts_with("DSC 100.00% clDice 100.00%"));
}
