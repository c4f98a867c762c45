//! Detachment segmentation in spur-anchored half crops.
//!
//! A slice is cut to a window centered between its two spurs, split at the
//! window center, the superior half mirrored so that both halves run from the
//! periphery (column 0) to the center, and each half downsampled by 2. A
//! U-Net predicts a per-pixel detachment probability on every half.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biomarkers::{dice, project_horizontal, Projection};
use crate::error::{Error, Result};
use crate::imagecore::{
    crop_mask_window, crop_window, downsample2, downsample2_mask, mirror_horizontal, mirror_mask, CropTransform,
    Half, Image, Mask, MaskFrame,
};
use crate::locator::split_scans;
use crate::nn::{forward, weighted_bce_loss, Adam, LayerSpec, NetworkSpec, Tensor, Weights};
use crate::phantom::RadialScan;
use crate::preset::{Frame, Geometry};
use crate::spur::SpurPair;
use crate::training::{self, Schedule, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub eval_every: u64,
    pub w_fg: f64,
    pub threshold: f64,
    /// Spur perturbation bound at full resolution; scaled with the preset.
    pub spur_noise_px: f64,
    pub base_channels: usize,
    pub levels: usize,
    /// Foreground probability the output head starts at.
    pub prior: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 3000,
            batch: 8,
            eval_every: 250,
            w_fg: 2.0,
            threshold: 0.5,
            spur_noise_px: 60.0,
            base_channels: 8,
            levels: 4,
            prior: 0.01,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.base_channels == 0 || self.levels == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("segmenter batch, channels, levels and lr must be positive".into()));
        }
        if !(self.w_fg > 0.0)
            || !(0.0..=1.0).contains(&self.threshold)
            || !(self.spur_noise_px >= 0.0)
            || !(self.prior > 0.0 && self.prior < 1.0)
        {
            return Err(Error::InvalidConfig("segmenter weight, threshold or noise out of range".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!("validation fraction {}", self.val_fraction)));
        }
        Ok(())
    }

    /// Perturbation bound in the preset's slice px.
    pub fn noise_px(&self, geom: &Geometry) -> i64 {
        geom.scale_px(self.spur_noise_px) as i64
    }
}

/// The two half crops of one slice, with their transforms and optional masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub inferior: Image,
    pub superior: Image,
    pub transforms: [CropTransform; 2],
    pub masks: Option<[Mask; 2]>,
}

impl CropPair {
    pub fn image(&self, half: Half) -> &Image {
        match half {
            Half::Inferior => &self.inferior,
            Half::Superior => &self.superior,
        }
    }
}

fn columns(img: &Image, x0: usize, w: usize) -> Result<Image> {
    let mut px = Vec::with_capacity(w * img.height());
    for row in img.pixels().chunks(img.width()) {
        px.extend_from_slice(&row[x0..x0 + w]);
    }
    Image::from_pixels(w, img.height(), img.pitch_mm(), px)
}

fn mask_columns(m: &Mask, x0: usize, w: usize) -> Result<Mask> {
    let mut bits = Vec::with_capacity(w * m.height());
    for row in m.bits().chunks(m.width()) {
        bits.extend_from_slice(&row[x0..x0 + w]);
    }
    Mask::from_bits(w, m.height(), MaskFrame::CropHalf, bits)
}

/// Crop a full-resolution slice (and its mask) into two half crops.
pub fn make_crops(slice: &Image, index: usize, spur: &SpurPair, mask: Option<&Mask>, geom: &Geometry) -> Result<CropPair> {
    if spur.frame != Frame::FullRes {
        return Err(Error::Frame(format!("crop anchors must be full_res, got {}", spur.frame)));
    }
    let (cx, cy) = spur.midpoint();
    let (win, t) = crop_window(slice, cx, cy, &geom.crop);
    let t = CropTransform { slice: index, ..t };
    let hw = geom.crop.width / 2;
    let inferior = downsample2(&columns(&win, 0, hw)?)?;
    let superior = downsample2(&mirror_horizontal(&columns(&win, hw, hw)?))?;
    let masks = match mask {
        Some(m) => {
            let (mw, _) = crop_mask_window(m, cx, cy, &geom.crop);
            Some([
                downsample2_mask(&mask_columns(&mw, 0, hw)?)?,
                downsample2_mask(&mirror_mask(&mask_columns(&mw, hw, hw)?))?,
            ])
        }
        None => None,
    };
    Ok(CropPair {
        inferior,
        superior,
        transforms: [t.for_half(Half::Inferior, 2), t.for_half(Half::Superior, 2)],
        masks,
    })
}

/// Independent uniform integer offsets in `[-bound, bound]` for
/// `(x_inf, y_inf, x_sup, y_sup)`.
pub fn spur_noise(rng: &mut impl Rng, bound: i64) -> [i64; 4] {
    [0; 4].map(|_| rng.random_range(-bound..=bound))
}

/// [`make_crops`] after perturbing both spurs by [`spur_noise`].
pub fn augment_for_training(
    slice: &Image,
    index: usize,
    spur: &SpurPair,
    mask: Option<&Mask>,
    geom: &Geometry,
    bound: i64,
    seed: u64,
) -> Result<CropPair> {
    let d = spur_noise(&mut ChaCha8Rng::seed_from_u64(seed), bound);
    let moved = SpurPair {
        inferior: (spur.inferior.0 + d[0] as f64, spur.inferior.1 + d[1] as f64),
        superior: (spur.superior.0 + d[2] as f64, spur.superior.1 + d[3] as f64),
        frame: spur.frame,
    };
    make_crops(slice, index, &moved, mask, geom)
}

/// U-Net with `levels` poolings, `base` channels at full resolution doubling
/// per level, nearest upsampling followed by a 3×3 conv, and a sigmoid head.
pub fn unet_spec(height: usize, width: usize, base: usize, levels: usize) -> Result<NetworkSpec> {
    let f = 1 << levels;
    if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
        return Err(Error::InvalidDimensions(format!("{width}x{height} is not divisible by {f}")));
    }
    let mut layers = Vec::new();
    let mut skips = Vec::new();
    let mut c_in = 1;
    for l in 0..levels {
        let c = base << l;
        if l > 0 {
            layers.push(LayerSpec::Maxpool2);
        }
        layers.extend([LayerSpec::conv(c_in, c, 3), LayerSpec::Relu, LayerSpec::conv(c, c, 3), LayerSpec::Relu]);
        skips.push((layers.len() - 1, c));
        c_in = c;
    }
    let c = base << levels;
    layers.extend([
        LayerSpec::Maxpool2,
        LayerSpec::conv(c_in, c, 3),
        LayerSpec::Relu,
        LayerSpec::conv(c, c, 3),
        LayerSpec::Relu,
    ]);
    let mut c_cur = c;
    for &(source, cs) in skips.iter().rev() {
        layers.extend([
            LayerSpec::Upsample2Nearest,
            LayerSpec::conv(c_cur, cs, 3),
            LayerSpec::Relu,
            LayerSpec::SkipConcat { source },
            LayerSpec::conv(2 * cs, cs, 3),
            LayerSpec::Relu,
        ]);
        c_cur = cs;
    }
    layers.extend([LayerSpec::conv(c_cur, 1, 1), LayerSpec::Sigmoid]);
    Ok(NetworkSpec {
        input: vec![1, height, width],
        layers,
    })
}

/// He-initialized U-Net whose head bias starts at the log-odds of `cfg.prior`.
/// Detached graft covers a fraction of a percent of a half crop; starting the
/// head near that rate keeps the first updates from silencing the decoder.
pub fn init_weights(spec: &NetworkSpec, cfg: &SegmenterConfig) -> Result<Weights<f32>> {
    let mut w = Weights::init(spec, cfg.seed)?;
    let head = w.params.last_mut().ok_or_else(|| Error::InvalidConfig("segmenter has no parameters".into()))?;
    let logit = (cfg.prior / (1.0 - cfg.prior)).ln() as f32;
    head.data_mut().fill(logit);
    Ok(w)
}

/// Zero-mean, unit-variance copy of a crop's pixels. A constant crop maps to zeros.
pub fn standardize(img: &Image) -> Vec<f32> {
    let px = img.pixels();
    let n = px.len().max(1) as f64;
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    px.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect()
}

/// Per-pixel detachment probability aligned with its half crop.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ProbMap {
    /// Pixels with probability at or above `threshold`.
    pub fn binarize(&self, threshold: f64) -> Mask {
        let bits = self.data.iter().map(|&p| p as f64 >= threshold).collect();
        Mask::from_bits(self.width, self.height, MaskFrame::CropHalf, bits).expect("matching size")
    }

    pub fn from_mask(m: &Mask) -> Self {
        Self {
            width: m.width(),
            height: m.height(),
            data: m.bits().iter().map(|&b| b as u8 as f32).collect(),
        }
    }

    pub fn to_image(&self, pitch_mm: f64) -> Result<Image> {
        Image::from_pixels(self.width, self.height, pitch_mm, self.data.clone())
    }
}

/// Probability maps and thresholded masks for a list of half crops.
pub fn predict_masks(
    spec: &NetworkSpec,
    weights: &Weights<f32>,
    crops: &[&Image],
    threshold: f64,
) -> Result<Vec<(ProbMap, Mask)>> {
    let (h, w) = (spec.input[1], spec.input[2]);
    let mut out = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(8) {
        let mut items = Vec::with_capacity(chunk.len());
        for c in chunk {
            if (c.width(), c.height()) != (w, h) {
                return Err(Error::Shape(format!(
                    "segmenter input must be {w}x{h}, got {}x{}",
                    c.width(),
                    c.height()
                )));
            }
            items.push(standardize(c));
        }
        let refs: Vec<&[f32]> = items.iter().map(|v| v.as_slice()).collect();
        let (y, _) = forward(spec, weights, &Tensor::stack(&refs, &[1, h, w])?)?;
        for plane in y.data().chunks(w * h) {
            let p = ProbMap {
                width: w,
                height: h,
                data: plane.to_vec(),
            };
            let m = p.binarize(threshold);
            out.push((p, m));
        }
    }
    Ok(out)
}

pub fn predict_mask(spec: &NetworkSpec, weights: &Weights<f32>, crop: &Image, threshold: f64) -> Result<(ProbMap, Mask)> {
    Ok(predict_masks(spec, weights, &[crop], threshold)?.remove(0))
}

/// One annotated slice at full resolution.
#[derive(Clone, Debug)]
pub struct SegSource {
    pub scan: usize,
    pub slice: usize,
    pub image: Image,
    pub spur: SpurPair,
    pub mask: Mask,
}

pub fn sources_from_scan(scan: &RadialScan, id: usize) -> Result<Vec<SegSource>> {
    let truth = scan.truth()?;
    let pairs = truth.spurs.complete_pairs()?;
    Ok(scan
        .slices
        .iter()
        .enumerate()
        .map(|(i, img)| SegSource {
            scan: id,
            slice: i,
            image: img.clone(),
            spur: pairs[i],
            mask: truth.masks[i].clone(),
        })
        .collect())
}

/// Half crops of `sources` at their true spurs, with projected truth.
pub fn evaluation_crops(sources: &[SegSource], geom: &Geometry) -> Result<Vec<(Image, Projection)>> {
    let mut out = Vec::with_capacity(2 * sources.len());
    for s in sources {
        let pair = make_crops(&s.image, s.slice, &s.spur, Some(&s.mask), geom)?;
        let masks = pair.masks.as_ref().expect("mask given");
        for half in Half::BOTH {
            let p = project_horizontal(&masks[half.index()], geom.pitch(Frame::CropHalf), s.slice, half)?;
            out.push((pair.image(half).clone(), p));
        }
    }
    Ok(out)
}

/// Mean projection Dice of predictions against truth projections.
pub fn projection_dice(
    spec: &NetworkSpec,
    weights: &Weights<f32>,
    crops: &[(Image, Projection)],
    threshold: f64,
    geom: &Geometry,
) -> Result<Vec<f64>> {
    let images: Vec<&Image> = crops.iter().map(|(i, _)| i).collect();
    let preds = predict_masks(spec, weights, &images, threshold)?;
    preds
        .iter()
        .zip(crops)
        .map(|((_, m), (_, truth))| {
            let p = project_horizontal(m, geom.pitch(Frame::CropHalf), truth.slice, truth.half)?;
            dice(&p, truth)
        })
        .collect()
}

/// Train the segmenter on freshly perturbed crops every step. Without an
/// explicit validation set, scans are split 80/20. The best checkpoint
/// maximizes mean validation projection Dice.
pub fn train_segmenter(
    train: &[SegSource],
    val: Option<&[SegSource]>,
    cfg: &SegmenterConfig,
    geom: &Geometry,
    resume: Option<TrainState>,
) -> Result<TrainState> {
    cfg.validate()?;
    let (w, h) = geom.dims(Frame::CropHalf);
    let spec = unet_spec(h, w, cfg.base_channels, cfg.levels)?;
    if train.is_empty() {
        return Err(Error::InvalidDataset("no segmenter training samples".into()));
    }
    let (train, val): (Vec<&SegSource>, Vec<SegSource>) = match val {
        Some(v) => (train.iter().collect(), v.to_vec()),
        None => {
            let (_, vs) = split_scans(train.iter().map(|s| s.scan), cfg.val_fraction, cfg.seed);
            let (v, t): (Vec<&SegSource>, Vec<&SegSource>) = train.iter().partition(|s| vs.contains(&s.scan));
            if v.is_empty() {
                (t.clone(), t.into_iter().cloned().collect())
            } else {
                (t, v.into_iter().cloned().collect())
            }
        }
    };
    let val_crops = evaluation_crops(&val, geom)?;
    let mut state = match resume {
        Some(s) => {
            s.latest.check(&spec)?;
            s
        }
        None => TrainState::new(init_weights(&spec, cfg)?),
    };
    let bound = cfg.noise_px(geom);
    let schedule = Schedule {
        steps: cfg.steps,
        eval_every: cfg.eval_every,
        opt: Adam {
            lr: cfg.lr,
            ..Adam::default()
        },
    };
    let batch = |step: u64| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut rng = training::step_rng(cfg.seed, step);
        let mut x = Vec::with_capacity(cfg.batch * w * h);
        let mut y = Vec::with_capacity(cfg.batch * w * h);
        for _ in 0..cfg.batch {
            let s = train[rng.random_range(0..train.len())];
            let half = Half::BOTH[rng.random_range(0..2)];
            let pair = augment_for_training(&s.image, s.slice, &s.spur, Some(&s.mask), geom, bound, rng.next_u64())?;
            x.extend(standardize(pair.image(half)));
            let m = &pair.masks.as_ref().expect("mask given")[half.index()];
            y.extend(m.bits().iter().map(|&b| b as u8 as f32));
        }
        Ok((
            Tensor::new(vec![cfg.batch, 1, h, w], x)?,
            Tensor::new(vec![cfg.batch, 1, h, w], y)?,
        ))
    };
    let validate = |weights: &Weights<f32>| -> Result<f64> {
        let d = projection_dice(&spec, weights, &val_crops, cfg.threshold, geom)?;
        Ok(d.iter().sum::<f64>() / d.len().max(1) as f64)
    };
    let w_fg = cfg.w_fg;
    training::run(&spec, &mut state, &schedule, batch, |p, t| weighted_bce_loss(p, t, w_fg), validate)?;
    Ok(state)
}
