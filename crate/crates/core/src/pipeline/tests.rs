use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::phantom::Visit;

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.locator.steps = 4;
    cfg.locator.batch = 2;
    cfg.locator.channels = 4;
    cfg.locator.eval_every = 2;
    cfg.segmenter.steps = 3;
    cfg.segmenter.batch = 1;
    cfg.segmenter.base_channels = 2;
    cfg.segmenter.eval_every = 3;
    cfg
}

#[test]
fn split_sizes() {
    assert_eq!(split_counts(60), [36, 12, 12]);
    assert_eq!(split_counts(0), [0, 0, 0]);
    assert_eq!(split_counts(5), [3, 1, 1]);
    assert_eq!(split_counts(1), [1, 0, 0]);
}

proptest! {
    #[test]
    fn split_sizes_cover_every_scan(n in 0usize..500) {
        let c = split_counts(n);
        prop_assert_eq!(c.iter().sum::<usize>(), n);
    }
}

#[test]
fn empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&PhantomConfig::default(), 0, 3, dir.path()).unwrap();
    assert!(m.scans.is_empty());
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);
}

#[test]
fn dataset_is_reproducible_and_split() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate_dataset(&PhantomConfig::default(), 5, 7, a.path()).unwrap();
    generate_dataset(&PhantomConfig::default(), 5, 7, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_eq!(m.counts[&Split::Train], 3);
    assert_eq!(m.counts[&Split::Val], 1);
    assert_eq!(m.counts[&Split::Test], 1);
    let counted = |s| m.scans.iter().filter(|e| e.split == s).count();
    assert_eq!(counted(Split::Train), 3);
    assert_eq!(counted(Split::Test), 1);
    for e in &m.scans {
        assert!(a.path().join(&e.name).join("scan.json").exists());
    }
}

#[test]
fn self_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&PhantomConfig::default(), 2, 11, dir.path()).unwrap();
    let m = evaluate(dir.path(), dir.path(), None).unwrap();
    assert_eq!(m.n_scans, 2);
    let r = &m.result;
    assert_eq!(r.localization.mean_px, 0.0);
    assert!(r.dice.all_mean == 1.0 && r.dice.n_all == 64);
    assert!(r.dice.nonempty_mean.is_none_or(|d| d == 1.0));
    assert_eq!(r.length_agreement.bias, 0.0);
    assert_eq!((r.length_agreement.loa_low, r.length_agreement.loa_high), (0.0, 0.0));
    assert!(m.refinement.is_none());
    let back: EvalMetrics = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}

/// A second rater who marks only the first detached slice of every scan.
fn second_rater(src: &Path, dst: &Path) {
    for e in Manifest::read(src).unwrap().scans {
        let mut scan = read_scan_dir(src.join(&e.name)).unwrap();
        let t = scan.truth.as_mut().unwrap();
        let mut kept = false;
        for m in &mut t.masks {
            if !m.is_empty() && !kept {
                kept = true;
            } else {
                *m = Mask::new(m.width(), m.height(), m.frame());
            }
        }
        write_scan_dir(&scan, dst.join(&e.name)).unwrap();
    }
}

#[test]
fn rater_swap_negates_bias() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = PhantomConfig {
        gas_bubble: Some(false),
        ..PhantomConfig::default()
    };
    generate_dataset(&cfg, 2, 5, a.path()).unwrap();
    second_rater(a.path(), b.path());
    let ab = evaluate(a.path(), b.path(), None).unwrap();
    let ba = evaluate(b.path(), a.path(), None).unwrap();
    assert!(ab.result.length_agreement.bias > 0.0);
    assert_eq!(ab.result.length_agreement.bias, -ba.result.length_agreement.bias);
    assert_eq!(ab.result.length_agreement.loa_low, -ba.result.length_agreement.loa_high);
}

#[test]
fn mismatched_scan_sets() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate_dataset(&PhantomConfig::default(), 2, 1, a.path()).unwrap();
    let name = &m.scans[0].name;
    let scan = read_scan_dir(a.path().join(name)).unwrap();
    write_scan_dir(&scan, b.path().join(name)).unwrap();
    assert_eq!(evaluate(b.path(), a.path(), None).unwrap_err().code(), "DatasetMismatch");
    assert_eq!(evaluate(a.path(), b.path(), None).unwrap_err().code(), "DatasetMismatch");
    let missing = a.path().join("nope");
    assert_eq!(evaluate(&missing, a.path(), None).unwrap_err().code(), "IoError");
}

#[test]
fn train_infer_eval_round() {
    let root = tempfile::tempdir().unwrap();
    let (data, model) = (root.path().join("data"), root.path().join("model"));
    let m = generate_dataset(&PhantomConfig::default(), 5, 2, &data).unwrap();
    let cfg = tiny_config();
    let loc = train_model(ModelKind::Locator, &data, &cfg, model.join("loc")).unwrap();
    assert_eq!(loc.latest.step, 4);
    let seg = train_model(ModelKind::Segmenter, &data, &cfg, model.join("seg")).unwrap();
    assert_eq!(seg.curve.len(), 3);
    for f in ["locator.dmekw", "latest.dmekw", "curve.csv", "config.json", "state.json"] {
        assert!(model.join("loc").join(f).exists(), "{f}");
    }

    let (lw, sw) = (model.join("loc/locator.dmekw"), model.join("seg/segmenter.dmekw"));
    let out = root.path().join("infer");
    let done = infer_tree(&data, Some(Split::Test), &lw, &sw, true, &out).unwrap();
    assert_eq!(done.len(), 1);
    let test_name = m.names(Split::Test)[0];
    let scan_out = out.join(test_name);
    let masks = fs::read_dir(scan_out.join("masks")).unwrap().count();
    assert_eq!(masks, 32);
    assert!(scan_out.join("map.svg").exists());
    let spurs = SpursFile::read(scan_out.join("spurs.json")).unwrap();
    assert!(spurs.refined && spurs.ellipse.is_some());

    let again = root.path().join("again");
    infer_tree(&data, Some(Split::Test), &lw, &sw, true, &again).unwrap();
    assert_eq!(tree(&out), tree(&again));

    let raw = root.path().join("raw");
    infer_tree(&data.join(test_name), None, &lw, &sw, false, &raw).unwrap();
    assert!(!SpursFile::read(raw.join("spurs.json")).unwrap().refined);
    assert_eq!(
        fs::read(raw.join("spurs.json")).unwrap(),
        fs::read(scan_out.join("spurs_raw.json")).unwrap()
    );

    let ev = evaluate(&out, &data, Some(Split::Test)).unwrap();
    assert_eq!(ev.n_scans, 1);
    assert!(ev.refinement.is_some());
    assert!(ev.report().contains("dice: all"));
    assert_eq!(evaluate(&out, &data, None).unwrap_err().code(), "DatasetMismatch");
    let single = evaluate(&raw, data.join(test_name), None).unwrap();
    assert!(single.refinement.is_none());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    generate_dataset(&PhantomConfig::default(), 3, 4, &data).unwrap();
    let full = tiny_config();
    let mut half = full.clone();
    half.locator.steps = 2;
    let a = train_model(ModelKind::Locator, &data, &full, root.path().join("a")).unwrap();
    train_model(ModelKind::Locator, &data, &half, root.path().join("b")).unwrap();
    let b = train_model(ModelKind::Locator, &data, &full, root.path().join("b")).unwrap();
    assert_eq!(a.latest, b.latest);
    assert_eq!(
        fs::read(root.path().join("a/curve.csv")).unwrap(),
        fs::read(root.path().join("b/curve.csv")).unwrap()
    );
}

#[test]
fn corrupt_weights_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    generate_dataset(&PhantomConfig::default(), 1, 4, &data).unwrap();
    let bad = root.path().join("bad.dmekw");
    fs::write(&bad, b"NOTDMEK").unwrap();
    let err = infer_tree(&data, None, &bad, &bad, false, root.path().join("o")).unwrap_err();
    assert_eq!(err.code(), "FormatError");
}

#[test]
fn config_round_trip_and_checks() {
    let cfg = tiny_config();
    let back: PipelineConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let mut bad = cfg.clone();
    bad.segmenter.batch = 0;
    assert_eq!(bad.validate().unwrap_err().code(), "InvalidConfig");
    let mut bad = cfg;
    bad.segmenter.levels = 5;
    assert_eq!(bad.validate().unwrap_err().code(), "InvalidDimensions");
    let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.segmenter.w_fg, 2.0);
    assert_eq!(partial.locator.batch, 10);
    assert_eq!(partial.segmenter.batch, 8);
}

#[test]
fn day0_scans_have_no_detachment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        gas_bubble: Some(true),
        ..PhantomConfig::default()
    };
    generate_dataset(&cfg, 1, 8, dir.path()).unwrap();
    let scan = read_scan_dir(dir.path().join("scan_000")).unwrap();
    assert_eq!(scan.visit, Visit::Day0);
    assert!(annotation_variant(&scan).unwrap().halves.iter().all(|h| h.projection.is_empty()));
}
