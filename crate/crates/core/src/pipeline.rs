//! End-to-end orchestration: dataset generation, training, inference and
//! evaluation over directory trees.
//!
//! ```text
//! dataset/manifest.json            preset, seed, per-scan seed and split
//! dataset/scan_000/ ...            see phantom::io
//! model/{locator,segmenter}.dmekw  best checkpoint
//! model/latest.dmekw               resume point
//! model/{curve.csv,config.json,state.json}
//! infer/{spurs.json,spurs_raw.json,metrics.json,map.svg,masks/,prob/}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biomarkers::{
    bland_altman, build_map, detachment_length, dice_bits, project_horizontal, render_svg, scan_length_summary,
    AgreementStats, LengthSummary, Projection,
};
use crate::ellipse::refine_spurs;
use crate::error::{Error, Result};
use crate::imagecore::{write_pgm, write_pgm_mask, CropTransform, Half, Image, Mask};
use crate::locator::{self, locator_spec, prepare_input, LocatorConfig, LocatorSample};
use crate::nn::{read_weights, write_weights, NetworkSpec, Weights};
use crate::phantom::{generate_scan, read_json, read_scan_dir, write_json, write_scan_dir, PhantomConfig, RadialScan};
use crate::preset::{Frame, Geometry, Preset, SLICES_PER_SCAN};
use crate::segment::{self, make_crops, predict_masks, unet_spec, SegSource, SegmenterConfig};
use crate::spur::{SpurSet, SpursFile};
use crate::training::{CurveRow, TrainState};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";

/// Every knob of a run, checked into each output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub locator: LocatorConfig,
    pub segmenter: SegmenterConfig,
    pub ellipse_refine: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            phantom: PhantomConfig::default(),
            locator: LocatorConfig::default(),
            segmenter: SegmenterConfig::default(),
            ellipse_refine: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.locator.validate()?;
        self.segmenter.validate()?;
        let g = self.preset.geometry();
        locator_spec(&g, self.locator.channels)?;
        let (w, h) = g.dims(Frame::CropHalf);
        unet_spec(h, w, self.segmenter.base_channels, self.segmenter.levels)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = read_json(path.as_ref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: Preset,
    pub seed: u64,
    pub counts: BTreeMap<Split, usize>,
    pub scans: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")));
        }
        read_json(&dir.join(MANIFEST))
    }

    pub fn names(&self, split: Split) -> Vec<&str> {
        self.scans.iter().filter(|e| e.split == split).map(|e| e.name.as_str()).collect()
    }
}

/// Seed of scan `i` of a dataset.
pub fn scan_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng.next_u64()
}

/// Train/val/test sizes for `n` scans, 60/20/20 with rounding.
pub fn split_counts(n: usize) -> [usize; 3] {
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Worker count from `DMEK_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var("DMEK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run `f` on every index with up to `threads` workers; results keep index order.
fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t..n).step_by(threads).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

/// Generate `n` scans under `out` with a scan-level 60/20/20 split.
pub fn generate_dataset(cfg: &PhantomConfig, n: usize, seed: u64, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = split_counts(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let scans: Vec<ManifestEntry> = (0..n)
        .map(|i| ManifestEntry {
            name: format!("scan_{i:03}"),
            seed: scan_seed(seed, i),
            split: splits[i],
        })
        .collect();
    par_map(n, thread_count(), |i| {
        let scan = generate_scan(cfg, scans[i].seed)?;
        write_scan_dir(&scan, out.join(&scans[i].name))
    })?;
    let mut counts = BTreeMap::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        counts.insert(s, splits.iter().filter(|&&x| x == s).count());
    }
    let manifest = Manifest {
        preset: cfg.preset,
        seed,
        counts,
        scans,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn load_split(data: &Path, manifest: &Manifest, split: Split) -> Result<Vec<(usize, RadialScan)>> {
    manifest
        .scans
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == split)
        .map(|(i, e)| Ok((i, read_scan_dir(data.join(&e.name))?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Locator,
    Segmenter,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Locator => "locator",
            ModelKind::Segmenter => "segmenter",
        }
    }

    pub fn weights_file(self) -> String {
        format!("{}.dmekw", self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateFile {
    best_metric: f64,
    best_step: u64,
}

/// Load a resumable state from `out`, if training there has started.
fn load_state(out: &Path, kind: ModelKind) -> Result<Option<TrainState>> {
    let latest = out.join("latest.dmekw");
    if !latest.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(out.join("curve.csv")).map_err(|e| Error::io(out.join("curve.csv"), e))?;
    let curve: Vec<CurveRow> = TrainState::parse_curve_csv(&text)?;
    let st: StateFile = read_json(&out.join("state.json"))?;
    Ok(Some(TrainState {
        latest: read_weights(&latest)?,
        best: read_weights(out.join(kind.weights_file()))?,
        best_metric: st.best_metric,
        best_step: st.best_step,
        curve,
    }))
}

fn save_state(out: &Path, kind: ModelKind, state: &TrainState) -> Result<()> {
    write_weights(out.join(kind.weights_file()), &state.best)?;
    write_weights(out.join("latest.dmekw"), &state.latest)?;
    let curve = out.join("curve.csv");
    fs::write(&curve, state.curve_csv()).map_err(|e| Error::io(&curve, e))?;
    write_json(
        &out.join("state.json"),
        &StateFile {
            best_metric: state.best_metric,
            best_step: state.best_step,
        },
    )
}

/// Train one model on the manifest's train split, validating on its val
/// split. Training resumes from `out` when a previous run left state there.
pub fn train_model(kind: ModelKind, data: impl AsRef<Path>, cfg: &PipelineConfig, out: impl AsRef<Path>) -> Result<TrainState> {
    let (data, out) = (data.as_ref(), out.as_ref());
    let manifest = Manifest::read(data)?;
    let cfg = PipelineConfig {
        preset: manifest.preset,
        ..cfg.clone()
    };
    cfg.validate()?;
    let geom = manifest.preset.geometry();
    let train = load_split(data, &manifest, Split::Train)?;
    let val = load_split(data, &manifest, Split::Val)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resume = load_state(out, kind)?;
    cfg.write(out.join(CONFIG))?;
    let state = match kind {
        ModelKind::Locator => {
            let collect = |set: &[(usize, RadialScan)]| -> Result<Vec<LocatorSample>> {
                let mut v = Vec::new();
                for (i, s) in set {
                    v.extend(locator::samples_from_scan(s, *i)?);
                }
                Ok(v)
            };
            let (t, v) = (collect(&train)?, collect(&val)?);
            locator::train_locator(&t, (!v.is_empty()).then_some(&v[..]), &cfg.locator, &geom, resume)?
        }
        ModelKind::Segmenter => {
            let collect = |set: &[(usize, RadialScan)]| -> Result<Vec<SegSource>> {
                let mut v = Vec::new();
                for (i, s) in set {
                    v.extend(segment::sources_from_scan(s, *i)?);
                }
                Ok(v)
            };
            let (t, v) = (collect(&train)?, collect(&val)?);
            segment::train_segmenter(&t, (!v.is_empty()).then_some(&v[..]), &cfg.segmenter, &geom, resume)?
        }
    };
    save_state(out, kind, &state)?;
    Ok(state)
}

/// Trained locator and segmenter ready for inference on one preset.
pub struct Models {
    pub geom: Geometry,
    pub locator_spec: NetworkSpec,
    pub locator: Weights<f32>,
    pub segmenter_spec: NetworkSpec,
    pub segmenter: Weights<f32>,
    pub threshold: f64,
}

/// Config stored beside a weights file, or the defaults.
fn sibling_config(weights: &Path) -> Result<PipelineConfig> {
    match weights.parent().map(|d| d.join(CONFIG)) {
        Some(p) if p.exists() => PipelineConfig::read(p),
        _ => Ok(PipelineConfig::default()),
    }
}

impl Models {
    pub fn load(locator: impl AsRef<Path>, segmenter: impl AsRef<Path>, preset: Preset) -> Result<Self> {
        let (lp, sp) = (locator.as_ref(), segmenter.as_ref());
        let (lc, sc) = (sibling_config(lp)?, sibling_config(sp)?);
        let geom = preset.geometry();
        let locator_spec = locator_spec(&geom, lc.locator.channels)?;
        let (w, h) = geom.dims(Frame::CropHalf);
        let segmenter_spec = unet_spec(h, w, sc.segmenter.base_channels, sc.segmenter.levels)?;
        let locator = read_weights(lp)?;
        locator.check(&locator_spec)?;
        let segmenter = read_weights(sp)?;
        segmenter.check(&segmenter_spec)?;
        Ok(Self {
            geom,
            locator_spec,
            locator,
            segmenter_spec,
            segmenter,
            threshold: sc.segmenter.threshold,
        })
    }
}

/// Segmentation of one half crop.
#[derive(Clone, Debug)]
pub struct HalfResult {
    pub slice: usize,
    pub half: Half,
    pub transform: CropTransform,
    pub prob: Option<Vec<f32>>,
    pub mask: Mask,
    pub projection: Projection,
    pub length_px: usize,
}

/// Spurs and half-crop segmentations for one set of spur estimates.
#[derive(Clone, Debug)]
pub struct Variant {
    pub spurs: SpurSet,
    pub halves: Vec<HalfResult>,
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// Final result: refined when refinement ran, raw otherwise.
    pub result: Variant,
    /// Raw-spur result, kept when refinement ran so its effect can be measured.
    pub unrefined: Option<Variant>,
    pub refinement: Option<crate::ellipse::Refinement>,
}

fn half_results(
    pairs: &[crate::spur::SpurPair],
    slices: &[Image],
    masks: Option<&[Mask]>,
    geom: &Geometry,
    predict: Option<(&NetworkSpec, &Weights<f32>, f64)>,
) -> Result<Vec<HalfResult>> {
    let mut crops = Vec::with_capacity(2 * SLICES_PER_SCAN);
    for (i, (pair, img)) in pairs.iter().zip(slices).enumerate() {
        crops.push(make_crops(img, i, pair, masks.map(|m| &m[i]), geom)?);
    }
    let pitch = geom.pitch(Frame::CropHalf);
    let predicted = match predict {
        Some((spec, w, threshold)) => {
            let imgs: Vec<&Image> = crops.iter().flat_map(|c| Half::BOTH.map(|h| c.image(h))).collect();
            Some(predict_masks(spec, w, &imgs, threshold)?)
        }
        None => None,
    };
    let mut out = Vec::with_capacity(2 * crops.len());
    for (i, c) in crops.iter().enumerate() {
        for half in Half::BOTH {
            let (prob, mask) = match &predicted {
                Some(p) => {
                    let (pm, m) = &p[2 * i + half.index()];
                    (Some(pm.data.clone()), m.clone())
                }
                None => (None, c.masks.as_ref().expect("annotated crops")[half.index()].clone()),
            };
            out.push(HalfResult {
                slice: i,
                half,
                transform: c.transforms[half.index()],
                prob,
                projection: project_horizontal(&mask, pitch, i, half)?,
                length_px: detachment_length(&mask, pitch).px,
                mask,
            });
        }
    }
    Ok(out)
}

/// Locate, optionally refine, crop and segment all slices of a scan.
pub fn infer_scan(scan: &RadialScan, models: &Models, refine: bool) -> Result<Inference> {
    scan.validate()?;
    let geom = &models.geom;
    if scan.preset != geom.preset {
        return Err(Error::InvalidConfig(format!("scan is {}, models are {}", scan.preset, geom.preset)));
    }
    let inputs = scan.slices.iter().map(|s| prepare_input(s, geom)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = inputs.iter().collect();
    let pairs = locator::predict_batch(&models.locator_spec, &models.locator, &refs)?;
    let raw = SpurSet::from_pairs(pairs, Frame::LocatorRes)?.to_frame(geom, Frame::FullRes)?;
    let seg = Some((&models.segmenter_spec, &models.segmenter, models.threshold));
    let run = |set: &SpurSet| -> Result<Variant> {
        Ok(Variant {
            spurs: set.clone(),
            halves: half_results(&set.complete_pairs()?, &scan.slices, None, geom, seg)?,
        })
    };
    let raw_variant = run(&raw)?;
    if !refine {
        return Ok(Inference {
            result: raw_variant,
            unrefined: None,
            refinement: None,
        });
    }
    let r = refine_spurs(&raw, geom)?;
    Ok(Inference {
        result: run(&r.spurs)?,
        unrefined: Some(raw_variant),
        refinement: Some(r),
    })
}

/// Annotation of a scan as a [`Variant`]: truth masks cropped at truth spurs.
pub fn annotation_variant(scan: &RadialScan) -> Result<Variant> {
    let truth = scan.truth()?;
    let geom = scan.geometry();
    let spurs = truth.spurs.to_frame(&geom, Frame::FullRes)?;
    Ok(Variant {
        halves: half_results(&spurs.complete_pairs()?, &scan.slices, Some(&truth.masks), &geom, None)?,
        spurs,
    })
}

fn bits_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn parse_bits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::Format(format!("bad projection character `{c}`"))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfRecord {
    pub slice: usize,
    pub half: Half,
    pub transform: CropTransform,
    pub length_px: usize,
    pub length_mm: f64,
    /// Horizontal projection, one `0`/`1` per column from the periphery inward.
    pub projection: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    /// Full-res `[x_inf, y_inf, x_sup, y_sup]` per slice.
    pub spurs: Vec<[f64; 4]>,
    pub lengths: LengthSummary,
    pub halves: Vec<HalfRecord>,
}

impl VariantRecord {
    pub fn from_variant(v: &Variant, geom: &Geometry) -> Result<Self> {
        let pitch = geom.pitch(Frame::CropHalf);
        let mut per_slice = vec![[0usize; 2]; SLICES_PER_SCAN];
        for h in &v.halves {
            per_slice[h.slice][h.half.index()] = h.length_px;
        }
        Ok(Self {
            spurs: v.spurs.complete_pairs()?.iter().map(|p| p.to_array()).collect(),
            lengths: scan_length_summary(&per_slice, pitch),
            halves: v
                .halves
                .iter()
                .map(|h| HalfRecord {
                    slice: h.slice,
                    half: h.half,
                    transform: h.transform,
                    length_px: h.length_px,
                    length_mm: h.length_px as f64 * pitch,
                    projection: bits_string(&h.projection.bits),
                })
                .collect(),
        })
    }

    fn spur_set(&self) -> Result<SpurSet> {
        SpurSet::from_pairs(
            self.spurs.iter().map(|&a| crate::spur::SpurPair::from_array(a, Frame::FullRes)).collect(),
            Frame::FullRes,
        )
    }
}

/// `metrics.json` written by inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferMetrics {
    pub scan: String,
    pub preset: Preset,
    pub refined: bool,
    pub result: VariantRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unrefined: Option<VariantRecord>,
}

/// Write spurs, masks, probability maps, metrics and the detachment map.
pub fn write_inference(inf: &Inference, scan: &RadialScan, name: &str, out: impl AsRef<Path>) -> Result<InferMetrics> {
    let out = out.as_ref();
    let geom = scan.geometry();
    for d in [out.to_path_buf(), out.join("masks"), out.join("prob")] {
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let (model, fallbacks) = match &inf.refinement {
        Some(r) => (Some(r.model), r.fallbacks.clone()),
        None => (None, Vec::new()),
    };
    SpursFile::from_set(&inf.result.spurs, model, fallbacks).write(out.join("spurs.json"))?;
    let raw = inf.unrefined.as_ref().unwrap_or(&inf.result);
    SpursFile::from_set(&raw.spurs, None, Vec::new()).write(out.join("spurs_raw.json"))?;
    let pitch = geom.pitch(Frame::CropHalf);
    for h in &inf.result.halves {
        let stem = format!("{:02}_{}", h.slice, h.half.name());
        write_pgm_mask(out.join("masks").join(format!("mask_{stem}.pgm")), &h.mask)?;
        if let Some(p) = &h.prob {
            let img = Image::from_pixels(h.mask.width(), h.mask.height(), pitch, p.clone())?;
            write_pgm(out.join("prob").join(format!("prob_{stem}.pgm")), &img)?;
        }
    }
    let projections: Vec<Projection> = inf.result.halves.iter().map(|h| h.projection.clone()).collect();
    let map = build_map(&projections)?;
    let truth_map = match &scan.truth {
        Some(t) => {
            let pairs = inf.result.spurs.complete_pairs()?;
            let halves = half_results(&pairs, &scan.slices, Some(&t.masks), &geom, None)?;
            Some(build_map(&halves.into_iter().map(|h| h.projection).collect::<Vec<_>>())?)
        }
        None => None,
    };
    let svg = render_svg(&map, truth_map.as_ref());
    let svg_path = out.join("map.svg");
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    let metrics = InferMetrics {
        scan: name.to_string(),
        preset: scan.preset,
        refined: inf.refinement.is_some(),
        result: VariantRecord::from_variant(&inf.result, &geom)?,
        unrefined: inf.unrefined.as_ref().map(|v| VariantRecord::from_variant(v, &geom)).transpose()?,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Scan directories under `root`: the root itself when it holds `marker`,
/// otherwise its immediate subdirectories that do, restricted to `names`.
fn scan_dirs(root: &Path, marker: &str, names: Option<&[&str]>) -> Result<BTreeMap<String, PathBuf>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")));
    }
    let mut out = BTreeMap::new();
    if root.join(marker).exists() {
        let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.insert(name, root.to_path_buf());
        return Ok(out);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for e in entries {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if p.join(marker).exists() && names.is_none_or(|ns| ns.contains(&name.as_str())) {
            out.insert(name, p);
        }
    }
    Ok(out)
}

fn split_filter(root: &Path, split: Option<Split>) -> Result<Option<Vec<String>>> {
    match split {
        Some(s) if root.join(MANIFEST).exists() => {
            Ok(Some(Manifest::read(root)?.names(s).into_iter().map(String::from).collect()))
        }
        _ => Ok(None),
    }
}

/// Infer every scan under `scans` (a scan directory or a dataset root,
/// optionally restricted to one split).
pub fn infer_tree(
    scans: impl AsRef<Path>,
    split: Option<Split>,
    locator: impl AsRef<Path>,
    segmenter: impl AsRef<Path>,
    refine: bool,
    out: impl AsRef<Path>,
) -> Result<Vec<InferMetrics>> {
    let (root, out) = (scans.as_ref(), out.as_ref());
    let filter = split_filter(root, split)?;
    let names: Option<Vec<&str>> = filter.as_ref().map(|v| v.iter().map(String::as_str).collect());
    let single = root.join("scan.json").exists();
    let dirs = scan_dirs(root, "scan.json", names.as_deref())?;
    let list: Vec<(String, PathBuf)> = dirs.into_iter().collect();
    let first = match list.first() {
        Some((_, p)) => read_scan_dir(p)?,
        None => return Ok(Vec::new()),
    };
    let models = Models::load(locator, segmenter, first.preset)?;
    drop(first);
    par_map(list.len(), thread_count(), |i| {
        let (name, dir) = &list[i];
        let scan = read_scan_dir(dir)?;
        let inf = infer_scan(&scan, &models, refine)?;
        let dest = if single { out.to_path_buf() } else { out.join(name) };
        write_inference(&inf, &scan, name, dest)
    })
}

/// Mean and sample standard deviation.
fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub n_points: usize,
    pub mean_px: f64,
    pub sd_px: f64,
    pub mean_mm: f64,
    pub frame: Frame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub n_all: usize,
    pub all_mean: f64,
    pub all_sd: f64,
    pub n_nonempty: usize,
    /// Over half crops whose truth projection is nonempty; absent when there are none.
    pub nonempty_mean: Option<f64>,
    pub nonempty_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEval {
    pub scan: String,
    pub localization_mean_px: f64,
    pub dice_all_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantEval {
    pub localization: Localization,
    pub dice: DiceSummary,
    pub length_agreement: AgreementStats,
    pub length_within_10px_percent: f64,
    pub per_scan: Vec<ScanEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementDelta {
    pub unrefined: VariantEval,
    /// Refined minus unrefined.
    pub localization_mean_px: f64,
    pub dice_all_mean: f64,
    pub dice_nonempty_mean: Option<f64>,
}

/// `metrics.json` written by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_scans: usize,
    pub preset: Preset,
    pub result: VariantEval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementDelta>,
}

impl EvalMetrics {
    /// Short human-readable report.
    pub fn report(&self) -> String {
        let r = &self.result;
        let mut s = format!(
            "localization: {:.2} px ({:.3} mm), {} points\n",
            r.localization.mean_px, r.localization.mean_mm, r.localization.n_points
        );
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        s += &format!(
            "dice: all {:.3} (± {:.3}, n={}), nonempty {} (± {}, n={})\n",
            r.dice.all_mean,
            r.dice.all_sd,
            r.dice.n_all,
            opt(r.dice.nonempty_mean),
            opt(r.dice.nonempty_sd),
            r.dice.n_nonempty
        );
        s += &format!(
            "length bias: {:.2} px, limits [{:.2}, {:.2}], {:.0}% within 10 px\n",
            r.length_agreement.bias, r.length_agreement.loa_low, r.length_agreement.loa_high, r.length_within_10px_percent
        );
        if let Some(d) = &self.refinement {
            s += &format!(
                "refinement: localization {:+.3} px, dice all {:+.4}, nonempty {}\n",
                d.localization_mean_px,
                d.dice_all_mean,
                d.dice_nonempty_mean.map_or("n/a".to_string(), |v| format!("{v:+.4}"))
            );
        }
        s
    }
}

fn compare(pairs: &[(String, &VariantRecord, &RadialScan)]) -> Result<VariantEval> {
    let mut loc = Vec::new();
    let (mut d_all, mut d_ne) = (Vec::new(), Vec::new());
    let mut lengths = Vec::new();
    let mut per_scan = Vec::new();
    for (name, pred, truth_scan) in pairs {
        let geom = truth_scan.geometry();
        let annot = annotation_variant(truth_scan)?;
        let pred_set = pred.spur_set()?;
        let pred_loc = pred_set.to_frame(&geom, Frame::LocatorRes)?.complete_pairs()?;
        let truth_loc = annot.spurs.to_frame(&geom, Frame::LocatorRes)?.complete_pairs()?;
        let mut scan_loc = Vec::new();
        for (p, t) in pred_loc.iter().zip(&truth_loc) {
            scan_loc.extend(locator::localization_error(p, t)?);
        }
        // Truth masks cropped where the prediction cropped.
        let truth_here = half_results(
            &pred_set.complete_pairs()?,
            &truth_scan.slices,
            Some(&truth_scan.truth()?.masks),
            &geom,
            None,
        )?;
        let mut scan_dice = Vec::new();
        for (h, t) in pred.halves.iter().zip(&truth_here) {
            if (h.slice, h.half) != (t.slice, t.half) {
                return Err(Error::Format(format!("{name}: half records out of order")));
            }
            let d = dice_bits(&parse_bits(&h.projection)?, &t.projection.bits)?;
            scan_dice.push(d);
            if !t.projection.is_empty() {
                d_ne.push(d);
            }
        }
        let annot_rec = VariantRecord::from_variant(&annot, &geom)?;
        for (a, b) in pred.lengths.per_slice_px.iter().zip(&annot_rec.lengths.per_slice_px) {
            lengths.push((*a as f64, *b as f64));
        }
        per_scan.push(ScanEval {
            scan: name.clone(),
            localization_mean_px: mean_sd(&scan_loc).0,
            dice_all_mean: mean_sd(&scan_dice).0,
        });
        loc.extend(scan_loc);
        d_all.extend(scan_dice);
    }
    let geom = pairs[0].2.geometry();
    let (lm, ls) = mean_sd(&loc);
    let (am, asd) = mean_sd(&d_all);
    let (nm, nsd) = if d_ne.is_empty() { (None, None) } else {
        let (m, s) = mean_sd(&d_ne);
        (Some(m), Some(s))
    };
    let agreement = bland_altman(&lengths)?;
    Ok(VariantEval {
        localization: Localization {
            n_points: loc.len(),
            mean_px: lm,
            sd_px: ls,
            mean_mm: geom.px_to_mm(lm, Frame::LocatorRes),
            frame: Frame::LocatorRes,
        },
        dice: DiceSummary {
            n_all: d_all.len(),
            all_mean: am,
            all_sd: asd,
            n_nonempty: d_ne.len(),
            nonempty_mean: nm,
            nonempty_sd: nsd,
        },
        length_within_10px_percent: agreement.percent_within(10.0),
        length_agreement: agreement,
        per_scan,
    })
}

/// Predictions (inference outputs or a second rater's annotated scans) for one scan.
fn load_side(dir: &Path) -> Result<(VariantRecord, Option<VariantRecord>)> {
    if dir.join("metrics.json").exists() {
        let m: InferMetrics = read_json(&dir.join("metrics.json"))?;
        Ok((m.result, m.unrefined))
    } else {
        let scan = read_scan_dir(dir)?;
        Ok((VariantRecord::from_variant(&annotation_variant(&scan)?, &scan.geometry())?, None))
    }
}

/// Compare predictions under `pred` with annotations under `truth`. Either
/// may be a single scan directory or a tree; `split` restricts a dataset
/// root with a manifest. The scan sets must match exactly.
pub fn evaluate(pred: impl AsRef<Path>, truth: impl AsRef<Path>, split: Option<Split>) -> Result<EvalMetrics> {
    let (pred, truth) = (pred.as_ref(), truth.as_ref());
    let tf = split_filter(truth, split)?;
    let tnames: Option<Vec<&str>> = tf.as_ref().map(|v| v.iter().map(String::as_str).collect());
    let truth_dirs = scan_dirs(truth, "scan.json", tnames.as_deref())?;
    let pf = split_filter(pred, split)?;
    let pnames: Option<Vec<&str>> = pf.as_ref().map(|v| v.iter().map(String::as_str).collect());
    let mut pred_dirs = scan_dirs(pred, "metrics.json", pnames.as_deref())?;
    if pred_dirs.is_empty() {
        pred_dirs = scan_dirs(pred, "scan.json", pnames.as_deref())?;
    }
    // Two single-scan directories are paired regardless of their names.
    let is_scan = |d: &Path| d.join("metrics.json").exists() || d.join("scan.json").exists();
    if is_scan(pred) && truth.join("scan.json").exists() {
        pred_dirs = truth_dirs.keys().map(|k| (k.clone(), pred.to_path_buf())).collect();
    }
    if pred_dirs.keys().ne(truth_dirs.keys()) {
        let only_pred: Vec<&String> = pred_dirs.keys().filter(|k| !truth_dirs.contains_key(*k)).collect();
        let only_truth: Vec<&String> = truth_dirs.keys().filter(|k| !pred_dirs.contains_key(*k)).collect();
        return Err(Error::DatasetMismatch(format!(
            "scans only in predictions: {only_pred:?}; only in truth: {only_truth:?}"
        )));
    }
    if truth_dirs.is_empty() {
        return Err(Error::InvalidDataset("no scans to evaluate".into()));
    }
    let mut scans = Vec::new();
    let mut sides = Vec::new();
    let mut unrefined = Vec::new();
    for (name, tdir) in &truth_dirs {
        scans.push((name.clone(), read_scan_dir(tdir)?));
        let (side, u) = load_side(&pred_dirs[name])?;
        sides.push(side);
        unrefined.push(u);
    }
    let preset = scans[0].1.preset;
    if let Some((n, _)) = scans.iter().find(|(_, s)| s.preset != preset) {
        return Err(Error::DatasetMismatch(format!("{n} is not a {preset} scan")));
    }
    let pairs: Vec<(String, &VariantRecord, &RadialScan)> =
        scans.iter().zip(&sides).map(|((n, s), side)| (n.clone(), side, s)).collect();
    let result = compare(&pairs)?;
    let refinement = if unrefined.iter().all(Option::is_some) {
        let upairs: Vec<(String, &VariantRecord, &RadialScan)> = scans
            .iter()
            .zip(&unrefined)
            .map(|((n, s), u)| (n.clone(), u.as_ref().expect("checked"), s))
            .collect();
        let u = compare(&upairs)?;
        Some(RefinementDelta {
            localization_mean_px: result.localization.mean_px - u.localization.mean_px,
            dice_all_mean: result.dice.all_mean - u.dice.all_mean,
            dice_nonempty_mean: result.dice.nonempty_mean.zip(u.dice.nonempty_mean).map(|(a, b)| a - b),
            unrefined: u,
        })
    } else {
        None
    };
    Ok(EvalMetrics {
        n_scans: scans.len(),
        preset,
        result,
        refinement,
    })
}

pub fn write_eval(metrics: &EvalMetrics, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("metrics.json"), metrics)
}

#[cfg(test)]
mod tests;
