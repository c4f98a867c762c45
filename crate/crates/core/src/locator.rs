//! Scleral spur localization.
//!
//! A small fully convolutional regressor maps a downscaled B-scan to two
//! heatmaps, one per spur, and reduces each to its expected position with a
//! spatial soft-argmax. Targets are normalized pixel-center coordinates
//! `((x + 0.5) / W, (y + 0.5) / H)`, ordered inferior then superior.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{resize_area, Image};
use crate::phantom::RadialScan;
use crate::nn::{forward, mse_loss, Adam, LayerSpec, NetworkSpec, Tensor, Weights};
use crate::preset::{Frame, Geometry};
use crate::spur::SpurPair;
use crate::training::{self, Schedule, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocatorConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub eval_every: u64,
    pub rotation_deg: f64,
    /// Translation magnitude at the 512-px-wide locator frame; scaled with
    /// the preset's locator width.
    pub translation_px: f64,
    /// Channels of the stem; deeper stages double it.
    pub channels: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 3000,
            batch: 10,
            eval_every: 250,
            rotation_deg: 5.0,
            translation_px: 20.0,
            channels: 16,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl LocatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.channels == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("locator batch, channels and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!("validation fraction {}", self.val_fraction)));
        }
        Ok(())
    }
}

/// Network for a preset's locator frame: coordinate channels, a conv stem,
/// residual stages with pooling, and a two-map soft-argmax head on a grid
/// 32 cells wide.
pub fn locator_spec(geom: &Geometry, channels: usize) -> Result<NetworkSpec> {
    let (w, h) = (geom.locator_width, geom.locator_height);
    let mut pools = 0;
    while w >> pools > 32 {
        pools += 1;
    }
    if pools < 2 || w % (1 << pools) != 0 || h % (1 << pools) != 0 {
        return Err(Error::InvalidDimensions(format!("locator input {w}x{h}")));
    }
    let c = channels;
    let mut layers = vec![LayerSpec::CoordChannels, LayerSpec::conv(3, c, 3), LayerSpec::Relu];
    for _ in 2..pools {
        layers.extend([LayerSpec::Maxpool2, LayerSpec::conv(c, c, 3), LayerSpec::Relu]);
    }
    layers.extend([
        LayerSpec::Maxpool2,
        LayerSpec::ResidualBlock { ch: c },
        LayerSpec::conv(c, 2 * c, 3),
        LayerSpec::Relu,
        LayerSpec::Maxpool2,
        LayerSpec::ResidualBlock { ch: 2 * c },
        LayerSpec::ResidualBlock { ch: 2 * c },
        LayerSpec::conv(2 * c, 2, 1),
        LayerSpec::SpatialSoftArgmax,
    ]);
    Ok(NetworkSpec {
        input: vec![1, h, w],
        layers,
    })
}

pub fn normalize(p: &SpurPair, width: usize, height: usize) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    [
        (p.inferior.0 + 0.5) / w,
        (p.inferior.1 + 0.5) / h,
        (p.superior.0 + 0.5) / w,
        (p.superior.1 + 0.5) / h,
    ]
}

/// Inverse of [`normalize`]; keeps the output order (no re-sorting).
pub fn denormalize(v: [f64; 4], width: usize, height: usize, frame: Frame) -> SpurPair {
    let (w, h) = (width as f64, height as f64);
    SpurPair {
        inferior: (v[0] * w - 0.5, v[1] * h - 0.5),
        superior: (v[2] * w - 0.5, v[3] * h - 0.5),
        frame,
    }
}

/// Downscale a full-resolution slice to the locator frame.
pub fn prepare_input(slice: &Image, geom: &Geometry) -> Result<Image> {
    resize_area(slice, geom.locator_width, geom.locator_height)
}

/// Rotate by `rot_deg` about the image center, then translate by `(tx, ty)`.
/// The image is resampled bilinearly with zero fill; the target is mapped by
/// the same transform.
pub fn augment(img: &Image, target: &SpurPair, rot_deg: f64, tx: f64, ty: f64) -> Result<(Image, SpurPair)> {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = rot_deg.to_radians().sin_cos();
    let fwd = |p: (f64, f64)| {
        let (dx, dy) = (p.0 - cx, p.1 - cy);
        (c * dx - s * dy + cx + tx, s * dx + c * dy + cy + ty)
    };
    if rot_deg == 0.0 && tx == 0.0 && ty == 0.0 {
        return Ok((img.clone(), *target));
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx - tx, y as f64 - cy - ty);
            let (sx, sy) = (c * dx + s * dy + cx, -s * dx + c * dy + cy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = |xx: i64, yy: i64| img.get_or_zero(xx, yy);
            let top = v(x0, y0) + (v(x0 + 1, y0) - v(x0, y0)) * fx;
            let bot = v(x0, y0 + 1) + (v(x0 + 1, y0 + 1) - v(x0, y0 + 1)) * fx;
            out[y * w + x] = top + (bot - top) * fy;
        }
    }
    let moved = SpurPair {
        inferior: fwd(target.inferior),
        superior: fwd(target.superior),
        frame: target.frame,
    };
    Ok((Image::from_pixels(w, h, img.pitch_mm(), out)?, moved))
}

/// One training image in the locator frame with its spur pair.
#[derive(Clone, Debug)]
pub struct LocatorSample {
    /// Scan identifier; validation splits never separate slices of one scan.
    pub scan: usize,
    pub image: Image,
    pub target: SpurPair,
}

/// Locator samples for every slice of a scan with ground truth.
pub fn samples_from_scan(scan: &RadialScan, id: usize) -> Result<Vec<LocatorSample>> {
    let geom = scan.geometry();
    let truth = scan.truth()?.spurs.to_frame(&geom, Frame::LocatorRes)?;
    let pairs = truth.complete_pairs()?;
    scan.slices
        .iter()
        .zip(pairs)
        .map(|(img, target)| {
            Ok(LocatorSample {
                scan: id,
                image: prepare_input(img, &geom)?,
                target,
            })
        })
        .collect()
}

/// Split scan ids into (train, validation) at `fraction`, at least one scan
/// each when there are two or more.
pub fn split_scans(ids: impl IntoIterator<Item = usize>, fraction: f64, seed: u64) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut all: Vec<usize> = ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (all.len() as f64 * fraction).round() as usize;
    if all.len() >= 2 {
        n_val = n_val.clamp(1, all.len() - 1);
    } else {
        n_val = 0;
    }
    let val = all[..n_val].iter().copied().collect();
    let train = all[n_val..].iter().copied().collect();
    (train, val)
}

fn check_samples(samples: &[LocatorSample], geom: &Geometry) -> Result<()> {
    for s in samples {
        if (s.image.width(), s.image.height()) != (geom.locator_width, geom.locator_height) {
            return Err(Error::Shape(format!(
                "locator input must be {}x{}, got {}x{}",
                geom.locator_width,
                geom.locator_height,
                s.image.width(),
                s.image.height()
            )));
        }
        if s.target.frame != Frame::LocatorRes {
            return Err(Error::Frame(format!("locator targets must be in locator_res, got {}", s.target.frame)));
        }
    }
    Ok(())
}

fn batch_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let (w, h) = (images[0].width(), images[0].height());
    let items: Vec<&[f32]> = images.iter().map(|i| i.pixels()).collect();
    Tensor::stack(&items, &[1, h, w])
}

/// Train the locator. Without an explicit validation set, scans are split
/// 80/20. Returns the final state; `best` holds the lowest-validation-error
/// weights. Pass a previous state to resume.
pub fn train_locator(
    train: &[LocatorSample],
    val: Option<&[LocatorSample]>,
    cfg: &LocatorConfig,
    geom: &Geometry,
    resume: Option<TrainState>,
) -> Result<TrainState> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidDataset("no locator training samples".into()));
    }
    check_samples(train, geom)?;
    let (train, val): (Vec<&LocatorSample>, Vec<&LocatorSample>) = match val {
        Some(v) => {
            check_samples(v, geom)?;
            (train.iter().collect(), v.iter().collect())
        }
        None => {
            let (_, vs) = split_scans(train.iter().map(|s| s.scan), cfg.val_fraction, cfg.seed);
            let (v, t): (Vec<_>, Vec<_>) = train.iter().partition(|s| vs.contains(&s.scan));
            if v.is_empty() {
                (t.clone(), t)
            } else {
                (t, v)
            }
        }
    };
    let spec = locator_spec(geom, cfg.channels)?;
    let mut state = match resume {
        Some(s) => {
            s.latest.check(&spec)?;
            s
        }
        None => TrainState::new(Weights::init(&spec, cfg.seed)?),
    };
    let (w, h) = (geom.locator_width, geom.locator_height);
    let shift = cfg.translation_px * w as f64 / 512.0;
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
        let mut images = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::with_capacity(4 * cfg.batch);
        for _ in 0..cfg.batch {
            let s = train[rng.random_range(0..train.len())];
            let rot = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
            let tx = rng.random_range(-shift..=shift);
            let ty = rng.random_range(-shift..=shift);
            let (img, t) = augment(&s.image, &s.target, rot, tx, ty)?;
            targets.extend(normalize(&t, w, h).map(|v| v as f32));
            images.push(img);
        }
        let refs: Vec<&Image> = images.iter().collect();
        Ok((batch_tensor(&refs)?, Tensor::new(vec![cfg.batch, 4], targets)?))
    };
    let validate = |weights: &Weights<f32>| -> Result<f64> {
        let images: Vec<&Image> = val.iter().map(|s| &s.image).collect();
        let preds = predict_batch(&spec, weights, &images)?;
        let mut total = 0.0;
        for (p, s) in preds.iter().zip(&val) {
            let [a, b] = localization_error(p, &s.target)?;
            total += a + b;
        }
        Ok(-total / (2 * val.len()) as f64)
    };
    training::run(&spec, &mut state, &schedule, batch, |p, t| mse_loss(p, t), validate)?;
    Ok(state)
}

/// Predict spur pairs for images already in the locator frame. Outputs are
/// clamped to the raster.
pub fn predict_batch(spec: &NetworkSpec, weights: &Weights<f32>, images: &[&Image]) -> Result<Vec<SpurPair>> {
    let (h, w) = (spec.input[1], spec.input[2]);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        for img in chunk {
            if (img.width(), img.height()) != (w, h) {
                return Err(Error::Shape(format!("locator input must be {w}x{h}")));
            }
        }
        let (y, _) = forward(spec, weights, &batch_tensor(chunk)?)?;
        for v in y.data().chunks(4) {
            let v = [v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64];
            let p = denormalize(v, w, h, Frame::LocatorRes);
            let clamp = |q: (f64, f64)| (q.0.clamp(0.0, w as f64 - 1.0), q.1.clamp(0.0, h as f64 - 1.0));
            out.push(SpurPair {
                inferior: clamp(p.inferior),
                superior: clamp(p.superior),
                frame: Frame::LocatorRes,
            });
        }
    }
    Ok(out)
}

pub fn predict_spurs(spec: &NetworkSpec, weights: &Weights<f32>, img: &Image) -> Result<SpurPair> {
    Ok(predict_batch(spec, weights, &[img])?.remove(0))
}

/// Euclidean distance of each point, `[inferior, superior]`, in px.
pub fn localization_error(pred: &SpurPair, truth: &SpurPair) -> Result<[f64; 2]> {
    if pred.frame != truth.frame {
        return Err(Error::Frame(format!("prediction in {}, truth in {}", pred.frame, truth.frame)));
    }
    let d = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    Ok([d(pred.inferior, truth.inferior), d(pred.superior, truth.superior)])
}
