//! Scan directory layout:
//!
//! ```text
//! scan.json              preset, seed, visit, pitch, slice angles
//! slice_00.pgm .. slice_15.pgm
//! truth/mask_00.pgm .. truth/mask_15.pgm
//! truth/spurs.json       full-res spur pairs and the generating ellipse
//! truth/intervals.json   merged detachment intervals, mm
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetachmentInterval, RadialScan, ScanTruth, Visit};
use crate::error::{Error, Result};
use crate::imagecore::{read_pgm, read_pgm_mask, write_pgm, write_pgm_mask, MaskFrame};
use crate::preset::{Preset, SLICES_PER_SCAN};
use crate::spur::SpursFile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub preset: Preset,
    pub seed: u64,
    pub visit: Visit,
    pub pitch_mm: f64,
    pub width: usize,
    pub height: usize,
    pub angles_rad: Vec<f64>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_scan_dir(scan: &RadialScan, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    scan.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let geom = scan.geometry();
    let meta = ScanMeta {
        preset: scan.preset,
        seed: scan.seed,
        visit: scan.visit,
        pitch_mm: geom.pitch_mm(),
        width: geom.slice_width,
        height: geom.slice_height,
        angles_rad: scan.angles.clone(),
    };
    write_json(&dir.join("scan.json"), &meta)?;
    for (i, s) in scan.slices.iter().enumerate() {
        write_pgm(dir.join(format!("slice_{i:02}.pgm")), s)?;
    }
    if let Some(t) = &scan.truth {
        let tdir = dir.join("truth");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        for (i, m) in t.masks.iter().enumerate() {
            write_pgm_mask(tdir.join(format!("mask_{i:02}.pgm")), m)?;
        }
        SpursFile::from_set(&t.spurs, Some(t.model), Vec::new()).write(tdir.join("spurs.json"))?;
        write_json(&tdir.join("intervals.json"), &t.intervals)?;
    }
    Ok(())
}

/// Read a scan directory. Truth is loaded when `truth/` is present.
pub fn read_scan_dir(dir: impl AsRef<Path>) -> Result<RadialScan> {
    let dir = dir.as_ref();
    let meta: ScanMeta = read_json(&dir.join("scan.json"))?;
    let mut slices = Vec::with_capacity(SLICES_PER_SCAN);
    for i in 0.. {
        let p = dir.join(format!("slice_{i:02}.pgm"));
        if !p.exists() {
            break;
        }
        slices.push(read_pgm(&p, meta.pitch_mm)?);
    }
    let tdir = dir.join("truth");
    let truth = if tdir.is_dir() {
        let spurs_file = SpursFile::read(tdir.join("spurs.json"))?;
        let model = spurs_file
            .ellipse
            .ok_or_else(|| Error::Format("truth spurs file lacks the ellipse model".into()))?;
        let masks = (0..slices.len())
            .map(|i| read_pgm_mask(tdir.join(format!("mask_{i:02}.pgm")), MaskFrame::FullRes))
            .collect::<Result<Vec<_>>>()?;
        let intervals: Vec<DetachmentInterval> = read_json(&tdir.join("intervals.json"))?;
        Some(ScanTruth {
            model,
            spurs: spurs_file.to_set()?,
            intervals,
            masks,
        })
    } else {
        None
    };
    let scan = RadialScan {
        preset: meta.preset,
        seed: meta.seed,
        visit: meta.visit,
        angles: meta.angles_rad,
        slices,
        truth,
    };
    scan.validate()?;
    Ok(scan)
}
