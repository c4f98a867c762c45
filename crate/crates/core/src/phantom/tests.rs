use super::*;
use crate::ellipse::{fit_model, slice_angle, to_enface};
use crate::imagecore::crop_window;

fn listed(intervals: Vec<DetachmentInterval>) -> PhantomConfig {
    PhantomConfig {
        detachments: DetachmentSpec::Listed(intervals),
        gas_bubble: Some(false),
        ..PhantomConfig::default()
    }
}

fn iv(slice: usize, half: Half, a: f64, b: f64) -> DetachmentInterval {
    DetachmentInterval {
        slice,
        half,
        r_start_mm: a,
        r_end_mm: b,
        depth_mm: 0.4,
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = PhantomConfig::default();
    let a = generate_scan(&cfg, 42).unwrap();
    let b = generate_scan(&cfg, 42).unwrap();
    assert_eq!(a, b);
    let c = generate_scan(&cfg, 43).unwrap();
    assert_ne!(a.slices, c.slices);
    assert_eq!(a.slices.len(), 16);
    assert!(a.angles.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a.angles[0], 0.0);
    assert!((a.angles[1] - 11.25f64.to_radians()).abs() < 1e-12);
}

#[test]
fn no_intervals_no_masks() {
    let scan = generate_scan(&listed(vec![]), 5).unwrap();
    assert!(scan.truth().unwrap().masks.iter().all(Mask::is_empty));
}

#[test]
fn single_interval_marks_only_its_slice() {
    let g = Preset::Desk.geometry();
    let interval = iv(3, Half::Superior, 1.0, 3.0);
    let scan = generate_scan(&listed(vec![interval]), 9).unwrap();
    let truth = scan.truth().unwrap();
    for (i, m) in truth.masks.iter().enumerate() {
        assert_eq!(!m.is_empty(), i == 3, "slice {i}");
    }
    // Column support of the band: the interval widened by the band radius.
    let m = &truth.masks[3];
    let cols: Vec<usize> = (0..m.width()).filter(|&x| (0..m.height()).any(|y| m.get(x, y))).collect();
    let axis = g.axis_column();
    let r = g.band_width as f64 / 2.0;
    let lo = axis + 1.0 / g.pitch_mm() - r;
    let hi = axis + 3.0 / g.pitch_mm() + r;
    // Endpoint rows are fractional, so the extreme cap column may be missed.
    let (first, last) = (*cols.first().unwrap() as f64, *cols.last().unwrap() as f64);
    assert!(first >= lo.ceil() && first <= lo.ceil() + 1.0, "{first} vs {lo}");
    assert!(last <= hi.floor() && last >= hi.floor() - 1.0, "{last} vs {hi}");
    assert!(cols.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn day0_has_bubble_and_no_detachment() {
    let cfg = PhantomConfig {
        gas_bubble: Some(true),
        ..PhantomConfig::default()
    };
    let scan = generate_scan(&cfg, 1).unwrap();
    assert_eq!(scan.visit, Visit::Day0);
    assert!(scan.truth().unwrap().masks.iter().all(Mask::is_empty));
    assert!(scan.truth().unwrap().intervals.is_empty());
}

#[test]
fn sampled_masks_follow_intervals() {
    let cfg = PhantomConfig {
        gas_bubble: Some(false),
        ..PhantomConfig::default()
    };
    for seed in 0..4 {
        let scan = generate_scan(&cfg, seed).unwrap();
        let t = scan.truth().unwrap();
        for i in 0..16 {
            let any = t.intervals.iter().any(|iv| iv.slice == i);
            assert_eq!(!t.masks[i].is_empty(), any);
        }
        for w in t.intervals.windows(2) {
            if (w[0].slice, w[0].half) == (w[1].slice, w[1].half) {
                assert!(w[0].r_end_mm < w[1].r_start_mm);
            }
        }
    }
}

#[test]
fn interval_outside_cornea_is_rejected() {
    let err = generate_scan(&listed(vec![iv(0, Half::Inferior, 3.0, 5.0)]), 0).unwrap_err();
    assert_eq!(err.code(), "InvalidConfig");
    let day0 = PhantomConfig {
        gas_bubble: Some(true),
        ..listed(vec![iv(0, Half::Inferior, 1.0, 2.0)])
    };
    assert_eq!(generate_scan(&day0, 0).unwrap_err().code(), "InvalidConfig");
}

#[test]
fn spur_truth_symmetric_cases() {
    let g = Preset::Full.geometry();
    let circle = EllipseModel::circle(6.0, DepthModel::flat(4.5));
    for k in 0..16 {
        let p = spur_truth(&circle, slice_angle(k), &g).unwrap();
        for q in [p.inferior, p.superior] {
            assert!(((q.0 - g.axis_column()).abs() * g.pitch_mm() - 6.0).abs() < 1e-9);
            assert!((q.1 * g.pitch_mm() - 4.5).abs() < 1e-9);
        }
    }
    let m = EllipseModel::new(0.0, 0.0, 6.2, 5.7, 0.0, DepthModel::flat(4.5)).unwrap();
    let p = spur_truth(&m, 0.0, &g).unwrap();
    assert!((p.inferior.0 - (g.axis_column() - 6.2 / g.pitch_mm())).abs() < 1e-9);
    assert!((p.superior.0 - (g.axis_column() + 6.2 / g.pitch_mm())).abs() < 1e-9);
    let off = EllipseModel::new(9.0, 0.0, 2.0, 1.0, 0.0, DepthModel::flat(4.5)).unwrap();
    assert_eq!(spur_truth(&off, 0.3, &g).unwrap_err().code(), "InfeasibleGeometry");
}

#[test]
fn spur_truth_matches_sampled_curve() {
    // Brute force: walk the ellipse densely and keep the curve points closest
    // to the spoke line on either side.
    let g = Preset::Full.geometry();
    let m = EllipseModel::new(0.3, -0.4, 6.3, 5.6, 1.1, DepthModel::flat(4.5)).unwrap();
    let angle = slice_angle(5);
    let (s, c) = angle.sin_cos();
    let mut best = [(f64::INFINITY, 0.0); 2];
    for k in 0..2_000_000 {
        let p = m.point_at(2.0 * PI * k as f64 / 2_000_000.0);
        let off = (p.1 * c - p.0 * s).abs();
        let t = p.0 * c + p.1 * s;
        let side = (t > 0.0) as usize;
        if off < best[side].0 {
            best[side] = (off, t);
        }
    }
    let pair = spur_truth(&m, angle, &g).unwrap();
    let ti = (pair.inferior.0 - g.axis_column()) * g.pitch_mm();
    let ts = (pair.superior.0 - g.axis_column()) * g.pitch_mm();
    assert!((ti - best[0].1).abs() < 1e-4 && (ts - best[1].1).abs() < 1e-4);
}

#[test]
fn truth_points_recover_generating_model() {
    let g = Preset::Full.geometry();
    for seed in 0..5 {
        let plan = plan_scan(&PhantomConfig::for_preset(Preset::Full), seed).unwrap();
        let pts = to_enface(&plan.spurs, &slice_angles(), &g).unwrap();
        let fit = fit_model(&pts).unwrap();
        let t = plan.model;
        assert!((fit.cx - t.cx).abs() < 1e-6 && (fit.cy - t.cy).abs() < 1e-6);
        assert!((fit.a - t.a).abs() < 1e-6 && (fit.b - t.b).abs() < 1e-6);
        if t.a - t.b > 1e-3 {
            let d = (fit.phi - t.phi).rem_euclid(PI);
            assert!(d.min(PI - d) < 1e-6);
        }
        assert!((fit.depth.c0 - t.depth.c0).abs() < 1e-6);
        assert!((fit.depth.c1 - t.depth.c1).abs() < 1e-6 && (fit.depth.c2 - t.depth.c2).abs() < 1e-6);
    }
}

/// Half-crop transform of a window centered on the scan axis.
fn axis_half(g: &Geometry, slice: usize, half: Half) -> CropTransform {
    let img = Image::new(g.slice_width, g.slice_height, g.pitch_mm());
    let (_, t) = crop_window(&img, g.axis_column(), 700.0, &g.crop);
    CropTransform { slice, ..t }.for_half(half, 2)
}

#[test]
fn truth_projection_cases() {
    let g = Preset::Full.geometry();
    let hw = g.half_crop_width();
    let empty = ScanTruth {
        model: EllipseModel::circle(6.0, DepthModel::flat(4.5)),
        spurs: SpurSet::empty(Frame::FullRes),
        intervals: vec![],
        masks: vec![],
    };
    let t = axis_half(&g, 2, Half::Superior);
    assert!(truth_projection(&empty, &t, hw, &g).unwrap().is_empty());

    let full = ScanTruth {
        intervals: vec![iv(2, Half::Superior, 0.0, 4.0)],
        ..empty.clone()
    };
    let p = truth_projection(&full, &t, hw, &g).unwrap();
    let set: Vec<usize> = (0..hw).filter(|&c| p.bits[c]).map(|c| p.radial_index(c)).collect();
    assert_eq!(set, (0..=266).rev().collect::<Vec<_>>());

    // [2, 4] mm at 0.015 mm per column: radial columns 133 through 266.
    let mid = ScanTruth {
        intervals: vec![iv(2, Half::Superior, 2.0, 4.0)],
        ..empty
    };
    let p = truth_projection(&mid, &t, hw, &g).unwrap();
    let mut ks: Vec<usize> = (0..hw).filter(|&c| p.bits[c]).map(|c| p.radial_index(c)).collect();
    ks.sort();
    assert_eq!(ks, (133..=266).collect::<Vec<_>>());
    assert!((p.pitch_mm - 0.015).abs() < 1e-5);
    let inf = axis_half(&g, 2, Half::Inferior);
    assert!(truth_projection(&mid, &inf, hw, &g).unwrap().is_empty());
}

#[test]
fn scan_dir_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scan = generate_scan(&listed(vec![iv(7, Half::Inferior, 0.5, 2.5)]), 3).unwrap();
    write_scan_dir(&scan, dir.path()).unwrap();
    let back = read_scan_dir(dir.path()).unwrap();
    assert_eq!(back.visit, scan.visit);
    assert_eq!(back.angles, scan.angles);
    let (t, bt) = (scan.truth().unwrap(), back.truth().unwrap());
    assert_eq!(t.masks, bt.masks);
    assert_eq!(t.intervals, bt.intervals);
    assert_eq!(t.spurs, bt.spurs);
    assert_eq!(t.model, bt.model);
    for (a, b) in scan.slices.iter().zip(&back.slices) {
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
    }
}
