//! End-to-end acceptance checks, one line per criterion.
//!
//! Run a subset with `cargo test -p dmek-core --test acceptance -- 2 7`.

use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use dmek_core::biomarkers::{bland_altman, detachment_length, dice_bits, project_horizontal, skeletonize};
use dmek_core::ellipse::{fit_model, refine_spurs, slice_angles, to_enface, EllipseModel};
use dmek_core::imagecore::{draw_band, Mask, MaskFrame};
use dmek_core::locator::{localization_error, locator_spec, predict_batch, samples_from_scan, train_locator, LocatorConfig};
use dmek_core::nn::{gradcheck, mse_loss, weighted_bce_loss, LayerSpec, Loss, NetworkSpec, Tensor};
use dmek_core::phantom::{curve_length_px, detachment_curve, generate_scan, plan_scan, PhantomConfig, Visit};
use dmek_core::pipeline::{self, ModelKind, PipelineConfig, Split};
use dmek_core::segment::{evaluation_crops, predict_masks, projection_dice, sources_from_scan, train_segmenter, unet_spec, SegmenterConfig};
use dmek_core::spur::{SpurPair, SpurSet};
use dmek_core::{Frame, Preset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- gradients

fn layer_nets() -> Vec<(&'static str, NetworkSpec)> {
    let net = |input: Vec<usize>, layers: Vec<LayerSpec>| NetworkSpec { input, layers };
    let strided = LayerSpec::Conv2d {
        in_ch: 2,
        out_ch: 2,
        k: 3,
        stride: 2,
        pad: 1,
    };
    let unet = vec![
        LayerSpec::conv(1, 3, 3),
        LayerSpec::Relu,
        LayerSpec::Maxpool2,
        LayerSpec::conv(3, 4, 3),
        LayerSpec::Relu,
        LayerSpec::Upsample2Nearest,
        LayerSpec::conv(4, 3, 3),
        LayerSpec::SkipConcat { source: 1 },
        LayerSpec::conv(6, 1, 1),
        LayerSpec::Sigmoid,
    ];
    vec![
        ("conv2d", net(vec![2, 5, 4], vec![LayerSpec::conv(2, 3, 3)])),
        ("conv2d strided", net(vec![2, 7, 6], vec![strided])),
        ("relu", net(vec![2, 3, 3], vec![LayerSpec::conv(2, 2, 1), LayerSpec::Relu])),
        ("maxpool2", net(vec![2, 4, 6], vec![LayerSpec::Maxpool2])),
        ("upsample2", net(vec![2, 3, 2], vec![LayerSpec::Upsample2Nearest, LayerSpec::conv(2, 1, 3)])),
        (
            "skip concat",
            net(
                vec![1, 4, 4],
                vec![LayerSpec::conv(1, 2, 3), LayerSpec::conv(2, 2, 3), LayerSpec::SkipConcat { source: 0 }, LayerSpec::conv(4, 1, 1)],
            ),
        ),
        ("global avg pool", net(vec![3, 3, 4], vec![LayerSpec::GlobalAvgPool, LayerSpec::Dense { inp: 3, out: 2 }])),
        ("dense", net(vec![2, 2, 2], vec![LayerSpec::Dense { inp: 8, out: 3 }])),
        ("sigmoid", net(vec![4], vec![LayerSpec::Dense { inp: 4, out: 4 }, LayerSpec::Sigmoid])),
        ("residual block", net(vec![2, 4, 5], vec![LayerSpec::ResidualBlock { ch: 2 }])),
        ("coord channels", net(vec![1, 3, 4], vec![LayerSpec::CoordChannels, LayerSpec::conv(3, 2, 3)])),
        ("soft-argmax", net(vec![2, 3, 5], vec![LayerSpec::conv(2, 2, 3), LayerSpec::SpatialSoftArgmax])),
        ("unet", net(vec![1, 8, 8], unet)),
    ]
}

/// Worst relative error of a loss gradient against central differences.
fn loss_fd_error(pred: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> Loss<f64>) -> f64 {
    const H: f64 = 1e-5;
    let grad = f(pred).grad;
    let mut worst: f64 = 0.0;
    for i in 0..pred.len() {
        let probe = |d: f64| {
            let mut p = pred.clone();
            p.data_mut()[i] += d;
            f(&p).value
        };
        let fd = (probe(H) - probe(-H)) / (2.0 * H);
        let an = grad.data()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}

fn gradients() -> Outcome {
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (name, spec) in layer_nets() {
        for seed in 0..5 {
            let r = gradcheck(&spec, seed).map_err(|e| format!("{name}: {e}"))?;
            checked += r.checked;
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, format!("{name} seed {seed}"));
            }
        }
    }
    let mut loss_worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = vec![2, 1, 3, 4];
        let pred: Vec<f64> = (0..24).map(|_| rng.random_range(0.05..0.95)).collect();
        let soft: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..1.0)).collect();
        let hard: Vec<f64> = (0..24).map(|_| (rng.random::<f64>() < 0.3) as u8 as f64).collect();
        let pred = Tensor::new(shape.clone(), pred).unwrap();
        let soft = Tensor::new(shape.clone(), soft).unwrap();
        let hard = Tensor::new(shape, hard).unwrap();
        loss_worst = loss_worst.max(loss_fd_error(&pred, |p| mse_loss(p, &soft).unwrap()));
        for w in [1.0, 2.0, 5.0] {
            loss_worst = loss_worst.max(loss_fd_error(&pred, |p| weighted_bce_loss(p, &hard, w).unwrap()));
            loss_worst = loss_worst.max(loss_fd_error(&pred, |p| weighted_bce_loss(p, &soft, w).unwrap()));
        }
    }
    check(
        worst.0 < 1e-4 && loss_worst < 1e-4,
        format!(
            "layers max rel err {:.2e} ({}), {checked} coordinates; losses {:.2e}",
            worst.0, worst.1, loss_worst
        ),
    )
}

// -------------------------------------------------------------- conversion

fn conversion() -> Outcome {
    let g = Preset::Full.geometry();
    let mut worst: f64 = 0.0;
    for (px, mm) in [(4.97, 0.155), (2.87, 0.090), (8.79, 0.275), (4.48, 0.140)] {
        worst = worst.max((g.px_to_mm(px, Frame::LocatorRes) - mm).abs());
    }
    check(
        worst <= 0.0005,
        format!("pitch {} mm/px, worst deviation {worst:.5} mm", g.pitch(Frame::LocatorRes)),
    )
}

// ----------------------------------------------------------------- ellipse

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

fn point_error(a: &SpurSet, b: &SpurSet) -> f64 {
    let mut errs = Vec::new();
    for (p, q) in a.pairs.iter().flatten().zip(b.pairs.iter().flatten()) {
        errs.push((p.inferior.0 - q.inferior.0).hypot(p.inferior.1 - q.inferior.1));
        errs.push((p.superior.0 - q.superior.0).hypot(p.superior.1 - q.superior.1));
    }
    mean(&errs)
}

fn ellipse_loop() -> Outcome {
    let cfg = PhantomConfig::for_preset(Preset::Full);
    let g = cfg.geometry();
    let angles = slice_angles();

    let mut exact_worst: f64 = 0.0;
    for seed in 0..100 {
        let plan = plan_scan(&cfg, seed).unwrap();
        let points = to_enface(&plan.spurs, &angles, &g).unwrap();
        assert_eq!(points.len(), 32);
        let fit: EllipseModel = fit_model(&points).map_err(|e| format!("seed {seed}: {e}"))?;
        let t = plan.model;
        let mut errs = vec![(fit.cx - t.cx).abs(), (fit.cy - t.cy).abs(), (fit.a - t.a).abs(), (fit.b - t.b).abs()];
        // The rotation of a circle is undefined.
        if t.a - t.b > 1e-3 {
            errs.push(angle_diff(fit.phi, t.phi));
        }
        exact_worst = errs.into_iter().fold(exact_worst, f64::max);
    }

    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut center_errs = Vec::new();
    for seed in 0..100 {
        let plan = plan_scan(&cfg, 1000 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = to_enface(&plan.spurs, &angles, &g).unwrap();
        for p in &mut points {
            p.x += noise.sample(&mut rng);
            p.y += noise.sample(&mut rng);
        }
        let fit = fit_model(&points).map_err(|e| format!("noisy seed {seed}: {e}"))?;
        center_errs.push((fit.cx - plan.model.cx).hypot(fit.cy - plan.model.cy));
    }
    center_errs.sort_by(f64::total_cmp);
    let median = (center_errs[49] + center_errs[50]) / 2.0;

    let jitter = Normal::new(0.0, 2.0).unwrap();
    let mut improved = 0;
    for seed in 0..100 {
        let plan = plan_scan(&cfg, 2000 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = plan.spurs.clone();
        for p in raw.pairs.iter_mut().flatten() {
            for q in [&mut p.inferior, &mut p.superior] {
                q.0 += jitter.sample(&mut rng);
                q.1 += jitter.sample(&mut rng);
            }
        }
        let slice = rng.random_range(0..angles.len());
        let dir: f64 = rng.random_range(0.0..2.0 * PI);
        let p = raw.pairs[slice].as_mut().unwrap();
        let q = if rng.random::<bool>() { &mut p.inferior } else { &mut p.superior };
        q.0 += 50.0 * dir.cos();
        q.1 += 50.0 * dir.sin();
        let refined = refine_spurs(&raw, &g).map_err(|e| format!("outlier seed {seed}: {e}"))?;
        if point_error(&refined.spurs, &plan.spurs) < point_error(&raw, &plan.spurs) {
            improved += 1;
        }
    }
    check(
        exact_worst < 1e-6 && median < 0.05 && improved >= 95,
        format!("noiseless worst {exact_worst:.1e}, noisy median center error {median:.4} mm, refinement improved {improved}/100"),
    )
}

// ----------------------------------------------------------------- locator

fn scan_sets(n_train: usize, n_test: usize) -> Vec<dmek_core::phantom::RadialScan> {
    let cfg = PhantomConfig::default();
    (0..n_train + n_test).map(|i| generate_scan(&cfg, 1000 + i as u64).unwrap()).collect()
}

fn locator_loop() -> Outcome {
    let geom = Preset::Desk.geometry();
    let scans = scan_sets(40, 10);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in scans.iter().enumerate() {
        let v = samples_from_scan(s, i).unwrap();
        if i < 40 {
            train.extend(v);
        } else {
            test.extend(v);
        }
    }
    let mut m = [0.0; 4];
    for s in &train {
        for (k, v) in s.target.to_array().into_iter().enumerate() {
            m[k] += v / train.len() as f64;
        }
    }
    let constant = SpurPair::from_array(m, Frame::LocatorRes);
    let err = |preds: &[SpurPair]| {
        let e: Vec<f64> = preds
            .iter()
            .zip(&test)
            .flat_map(|(p, s)| localization_error(p, &s.target).unwrap())
            .collect();
        mean(&e)
    };
    let baseline = err(&vec![constant; test.len()]);
    let cfg = LocatorConfig {
        steps: 1000,
        channels: 16,
        ..LocatorConfig::default()
    };
    let state = train_locator(&train, None, &cfg, &geom, None).map_err(|e| e.to_string())?;
    let spec = locator_spec(&geom, cfg.channels).unwrap();
    let images: Vec<_> = test.iter().map(|s| &s.image).collect();
    let preds = predict_batch(&spec, &state.best, &images).unwrap();
    let e = err(&preds);
    check(
        e <= 0.5 * baseline && e <= 10.0,
        format!("test error {e:.3} px vs constant-mean baseline {baseline:.3} px ({:.3}x)", e / baseline),
    )
}

// --------------------------------------------------------------- segmenter

fn segmenter_loop() -> Outcome {
    let geom = Preset::Desk.geometry();
    let scans = scan_sets(40, 10);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in scans.iter().enumerate() {
        let v = sources_from_scan(s, i).unwrap();
        if i < 40 {
            train.extend(v);
        } else {
            test.extend(v);
        }
    }
    let day0_cfg = PhantomConfig {
        gas_bubble: Some(true),
        ..PhantomConfig::default()
    };
    let mut day0 = Vec::new();
    for i in 0..5 {
        let s = generate_scan(&day0_cfg, 5000 + i).unwrap();
        assert_eq!(s.visit, Visit::Day0);
        day0.extend(sources_from_scan(&s, 100 + i as usize).unwrap());
    }

    let cfg = SegmenterConfig {
        steps: 1000,
        ..SegmenterConfig::default()
    };
    let state = train_segmenter(&train, None, &cfg, &geom, None).map_err(|e| e.to_string())?;
    let spec = unet_spec(geom.half_crop_height(), geom.half_crop_width(), cfg.base_channels, cfg.levels).unwrap();
    let crops = evaluation_crops(&test, &geom).unwrap();
    let d = projection_dice(&spec, &state.best, &crops, cfg.threshold, &geom).unwrap();
    let all = mean(&d);
    let nonempty: Vec<f64> = d.iter().zip(&crops).filter(|(_, c)| !c.1.is_empty()).map(|(d, _)| *d).collect();
    if nonempty.is_empty() {
        return Err("no nonempty held-out crops".into());
    }
    let ne = mean(&nonempty);

    let bubble = evaluation_crops(&day0, &geom).unwrap();
    let images: Vec<_> = bubble.iter().map(|c| &c.0).collect();
    let masks = predict_masks(&spec, &state.best, &images, cfg.threshold).unwrap();
    let mut fp = 0;
    for ((_, m), (_, truth)) in masks.iter().zip(&bubble) {
        fp += project_horizontal(m, geom.pitch(Frame::CropHalf), truth.slice, truth.half).unwrap().count();
    }
    let fp_frac = fp as f64 / (bubble.len() * geom.half_crop_width()) as f64;
    check(
        ne >= 0.85 && all >= ne && fp_frac <= 0.10,
        format!(
            "nonempty dice {ne:.3} (n={}), all-slices {all:.3} (n={}), day0 false-positive columns {:.2}%",
            nonempty.len(),
            d.len(),
            100.0 * fp_frac
        ),
    )
}

// ------------------------------------------------------------------ length

fn length_fidelity() -> Outcome {
    let cfg = PhantomConfig {
        gas_bubble: Some(false),
        ..PhantomConfig::for_preset(Preset::Full)
    };
    let g = cfg.geometry();
    assert_eq!(g.band_width, 15);
    let mut ratios = Vec::new();
    let mut seed = 0;
    while ratios.len() < 100 {
        let plan = plan_scan(&cfg, seed).unwrap();
        seed += 1;
        for iv in &plan.intervals {
            let analytic = curve_length_px(&plan.anatomy, iv, &g);
            if analytic < 100.0 || ratios.len() == 100 {
                continue;
            }
            // Rasterize on the curve's bounding box plus the band margin.
            let curve = detachment_curve(&plan.anatomy, iv, &g);
            let margin = g.band_width as f64 + 2.0;
            let x0 = curve.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor() - margin;
            let y0 = curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor() - margin;
            let x1 = curve.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil() + margin;
            let y1 = curve.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil() + margin;
            let local: Vec<(f64, f64)> = curve.iter().map(|p| (p.0 - x0, p.1 - y0)).collect();
            let band = draw_band((x1 - x0) as usize + 1, (y1 - y0) as usize + 1, &local, g.band_width).unwrap();
            let px = detachment_length(&band, g.pitch_mm()).px as f64;
            ratios.push(px / analytic);
        }
    }
    let worst = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    check(
        worst <= 0.10,
        format!("100 curves, skeleton/analytic ratio in [{lo:.3}, {hi:.3}], mean {:.3}", mean(&ratios)),
    )
}

// -------------------------------------------------------------- morphology

/// Two-subiteration thinning written directly from the neighborhood
/// conditions, on a padded row-major grid.
fn thin_oracle(w: usize, h: usize, bits: &[bool]) -> Vec<bool> {
    let (pw, ph) = (w + 2, h + 2);
    let mut g = vec![0u8; pw * ph];
    for y in 0..h {
        for x in 0..w {
            g[(y + 1) * pw + x + 1] = bits[y * w + x] as u8;
        }
    }
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut kill = Vec::new();
            for y in 1..=h {
                for x in 1..=w {
                    if g[y * pw + x] == 0 {
                        continue;
                    }
                    let at = |dx: isize, dy: isize| g[(y as isize + dy) as usize * pw + (x as isize + dx) as usize];
                    // P2..P9 clockwise from north.
                    let p = [at(0, -1), at(1, -1), at(1, 0), at(1, 1), at(0, 1), at(-1, 1), at(-1, 0), at(-1, -1)];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let cond = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        kill.push(y * pw + x);
                    }
                }
            }
            changed |= !kill.is_empty();
            for i in kill {
                g[i] = 0;
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = g[(y + 1) * pw + x + 1] == 1;
        }
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    let w = rng.random_range(1..=64);
    let h = rng.random_range(1..=64);
    let mut bits = vec![false; w * h];
    if rng.random::<bool>() {
        let density: f64 = rng.random_range(0.1..0.9);
        bits.iter_mut().for_each(|b| *b = rng.random::<f64>() < density);
    } else {
        // Unions of discs and bars give thick shapes worth thinning.
        for _ in 0..rng.random_range(1..6) {
            let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let r: f64 = rng.random_range(1.0..16.0);
            let bar = rng.random::<bool>();
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let inside = if bar { dy.abs() <= r / 3.0 && dx.abs() <= 3.0 * r } else { dx.hypot(dy) <= r };
                    bits[y * w + x] |= inside;
                }
            }
        }
    }
    Mask::from_bits(w, h, MaskFrame::FullRes, bits).unwrap()
}

fn morphology() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut removed = 0;
    for case in 0..200 {
        let m = random_mask(&mut rng);
        let sk = skeletonize(&m);
        let oracle = thin_oracle(m.width(), m.height(), m.bits());
        if sk.bits() != oracle.as_slice() {
            return Err(format!("case {case} ({}x{}) differs from the oracle", m.width(), m.height()));
        }
        if skeletonize(&sk) != sk {
            return Err(format!("case {case} is not idempotent"));
        }
        removed += m.count() - sk.count();
    }
    Ok(format!("200 masks bit-exact and idempotent, {removed} pixels thinned"))
}

// ----------------------------------------------------------------- metrics

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for _ in 0..2000 {
        let n = rng.random_range(1..=128);
        let pa: f64 = rng.random();
        let pb: f64 = rng.random();
        let a: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < pa).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < pb).collect();
        let d = dice_bits(&a, &b).unwrap();
        let (na, nb) = (a.iter().filter(|&&x| x).count(), b.iter().filter(|&&x| x).count());
        let both = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let want = if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 };
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (sa, sb): (Vec<bool>, Vec<bool>) = order.iter().map(|&i| (a[i], b[i])).unzip();
        let ok = (d - want).abs() < 1e-12
            && d == dice_bits(&b, &a).unwrap()
            && (0.0..=1.0).contains(&d)
            && dice_bits(&a, &a).unwrap() == 1.0
            && dice_bits(&sa, &sb).unwrap() == d
            && (both == 0) == (d == 0.0 || na + nb == 0);
        if !ok {
            return Err(format!("dice case {a:?} {b:?} gave {d}, expected {want}"));
        }
        if dice_bits(&a, &b[..n - 1]).is_ok() {
            return Err("dice accepted unequal lengths".into());
        }
        cases += 1;
    }
    for _ in 0..1000 {
        let n = rng.random_range(2..50);
        let pairs: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0))).collect();
        let swapped: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        let ab = bland_altman(&pairs).unwrap();
        let ba = bland_altman(&swapped).unwrap();
        let diffs: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
        let bias = mean(&diffs);
        let sd = (diffs.iter().map(|d| (d - bias).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let tol = 1e-9;
        let ok = (ab.bias + ba.bias).abs() < tol
            && (ab.loa_low + ba.loa_high).abs() < tol
            && (ab.loa_high + ba.loa_low).abs() < tol
            && (ab.bias - bias).abs() < tol
            && (ab.sd - sd).abs() < tol
            && (ab.loa_high - (bias + 1.96 * sd)).abs() < tol
            && ab.n == n;
        if !ok {
            return Err(format!("bland-altman case {pairs:?}"));
        }
        cases += 1;
    }
    let hand = bland_altman(&[(1.0, 0.0), (0.0, 1.0)]).unwrap();
    let limit = 1.96 * 2f64.sqrt();
    let ok_hand = hand.bias == 0.0
        && (hand.loa_high - limit).abs() < 1e-12
        && (hand.loa_low + limit).abs() < 1e-12
        && (hand.loa_high - 2.772).abs() < 5e-4;
    let ok_small = bland_altman(&[(1.0, 2.0)]).is_err() && dice_bits(&[], &[]).unwrap() == 1.0;
    check(
        ok_hand && ok_small,
        format!("{cases} randomized cases, {{+1, -1}} limits ±{:.4}", hand.loa_high),
    )
}

// ------------------------------------------------------------- determinism

fn pipeline_run(root: &std::path::Path) -> Result<Vec<u8>, String> {
    let mut cfg = PipelineConfig::default();
    cfg.locator.steps = 20;
    cfg.locator.channels = 4;
    cfg.locator.eval_every = 10;
    cfg.segmenter.steps = 10;
    cfg.segmenter.batch = 2;
    cfg.segmenter.base_channels = 2;
    cfg.segmenter.eval_every = 5;
    let e = |e: dmek_core::Error| e.to_string();
    let data = root.join("data");
    pipeline::generate_dataset(&cfg.phantom, 6, cfg.seed, &data).map_err(e)?;
    pipeline::train_model(ModelKind::Locator, &data, &cfg, root.join("loc")).map_err(e)?;
    pipeline::train_model(ModelKind::Segmenter, &data, &cfg, root.join("seg")).map_err(e)?;
    let (lw, sw) = (root.join("loc/locator.dmekw"), root.join("seg/segmenter.dmekw"));
    pipeline::infer_tree(&data, Some(Split::Test), &lw, &sw, cfg.ellipse_refine, root.join("infer")).map_err(e)?;
    let m = pipeline::evaluate(root.join("infer"), &data, Some(Split::Test)).map_err(e)?;
    pipeline::write_eval(&m, root.join("eval")).map_err(e)?;
    fs::read(root.join("eval/metrics.json")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    std::env::set_var("DMEK_THREADS", "1");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    check(
        first == second,
        format!("metrics.json {} bytes, identical: {}", first.len(), first == second),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("unit conversion", conversion),
        ("ellipse closed loop", ellipse_loop),
        ("locator closed loop", locator_loop),
        ("segmenter closed loop", segmenter_loop),
        ("length fidelity", length_fidelity),
        ("morphology oracle", morphology),
        ("metric properties", metrics),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d}) [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
