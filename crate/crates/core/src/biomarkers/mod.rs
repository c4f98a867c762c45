//! Quantitative outcomes extracted from detachment masks.

mod map;

pub use map::{build_map, render_svg, DetachmentMap, Sector};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{mirror_mask, Half, Mask, MaskFrame};

/// 8-neighbors clockwise from north: P2..P9 of the classical formulation.
const RING: [(i64, i64); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

/// Zhang–Suen thinning. Pixels outside the raster count as background.
///
/// Each pass runs the two sub-iterations in turn; within a sub-iteration all
/// deletions are decided on the state at its start. Passes repeat until
/// neither sub-iteration deletes anything.
pub fn skeletonize(mask: &Mask) -> Mask {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let mut out = mask.clone();
    let mut live: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x as usize, y as usize))
        .collect();
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            doomed.clear();
            for &(x, y) in &live {
                let mut p = [false; 8];
                for (k, (dx, dy)) in RING.iter().enumerate() {
                    p[k] = out.get_or_false(x + dx, y + dy);
                }
                let b = p.iter().filter(|&&v| v).count();
                if !(2..=6).contains(&b) {
                    continue;
                }
                let a = (0..8).filter(|&k| !p[k] && p[(k + 1) % 8]).count();
                if a != 1 {
                    continue;
                }
                // p[0]=P2 (N), p[2]=P4 (E), p[4]=P6 (S), p[6]=P8 (W).
                let delete = if step == 0 {
                    !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
                } else {
                    !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
                };
                if delete {
                    doomed.push((x, y));
                }
            }
            if !doomed.is_empty() {
                changed = true;
                for &(x, y) in &doomed {
                    out.set(x as usize, y as usize, false);
                }
                live.retain(|&(x, y)| out.get(x as usize, y as usize));
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Skeleton pixel count of a mask, with its length in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Length {
    pub px: usize,
    pub mm: f64,
}

pub fn detachment_length(mask: &Mask, pitch_mm: f64) -> Length {
    let px = skeletonize(mask).count();
    Length {
        px,
        mm: px as f64 * pitch_mm,
    }
}

/// Column-wise OR of a half-crop mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub bits: Vec<bool>,
    pub pitch_mm: f64,
    pub slice: usize,
    pub half: Half,
}

impl Projection {
    pub fn empty(width: usize, pitch_mm: f64, slice: usize, half: Half) -> Self {
        Self {
            bits: vec![false; width],
            pitch_mm,
            slice,
            half,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Radial index of column `c`: the periphery sits at column 0 and the crop
    /// center at the last column.
    pub fn radial_index(&self, c: usize) -> usize {
        self.bits.len() - 1 - c
    }

    /// Maximal runs of set columns as radial intervals `[r_lo, r_hi]` in mm,
    /// measured from the crop center to the outer edges of the columns.
    pub fn radial_intervals(&self) -> Vec<(f64, f64)> {
        let n = self.bits.len();
        let mut out = Vec::new();
        let mut k = 0;
        while k < n {
            if self.bits[n - 1 - k] {
                let start = k;
                while k < n && self.bits[n - 1 - k] {
                    k += 1;
                }
                out.push((start as f64 * self.pitch_mm, k as f64 * self.pitch_mm));
            } else {
                k += 1;
            }
        }
        out
    }
}

/// Column `c` of the result is set iff any pixel in column `c` is set.
pub fn project_horizontal(mask: &Mask, pitch_mm: f64, slice: usize, half: Half) -> Result<Projection> {
    if mask.frame() != MaskFrame::CropHalf {
        return Err(Error::Frame("projections are taken on crop-half masks".into()));
    }
    let mut bits = vec![false; mask.width()];
    for y in 0..mask.height() {
        for (x, b) in bits.iter_mut().enumerate() {
            *b |= mask.get(x, y);
        }
    }
    Ok(Projection {
        bits,
        pitch_mm,
        slice,
        half,
    })
}

/// Dice overlap of two equal-length bit vectors; two empty vectors score 1.
pub fn dice_bits(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("dice of lengths {} and {}", a.len(), b.len())));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

pub fn dice(a: &Projection, b: &Projection) -> Result<f64> {
    dice_bits(&a.bits, &b.bits)
}

/// Bland–Altman agreement of paired measurements, differences taken `a − b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n: usize,
    pub bias: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// `(mean of pair, difference)` per pair, for plotting.
    pub points: Vec<(f64, f64)>,
}

impl AgreementStats {
    /// Percentage of pairs whose absolute difference is at most `tol`.
    pub fn percent_within(&self, tol: f64) -> f64 {
        let k = self.points.iter().filter(|p| p.1.abs() <= tol).count();
        100.0 * k as f64 / self.n as f64
    }
}

pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<AgreementStats> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let points: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| ((a + b) / 2.0, a - b)).collect();
    let bias = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let var = points.iter().map(|p| (p.1 - bias).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    Ok(AgreementStats {
        n,
        bias,
        sd,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
        points,
    })
}

/// Per-slice detachment lengths, summing the two halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub per_slice_px: Vec<usize>,
    pub per_slice_mm: Vec<f64>,
    pub total_px: usize,
    pub total_mm: f64,
}

/// `half_lengths[i] = [inferior, superior]` skeleton counts for slice `i`.
pub fn scan_length_summary(half_lengths: &[[usize; 2]], pitch_mm: f64) -> LengthSummary {
    let per_slice_px: Vec<usize> = half_lengths.iter().map(|h| h[0] + h[1]).collect();
    let total_px = per_slice_px.iter().sum();
    LengthSummary {
        per_slice_mm: per_slice_px.iter().map(|&p| p as f64 * pitch_mm).collect(),
        per_slice_px,
        total_px,
        total_mm: total_px as f64 * pitch_mm,
    }
}

/// Reassemble a full-width crop mask from its inferior half and its mirrored
/// superior half.
pub fn recombine_halves(inferior: &Mask, superior: &Mask) -> Result<Mask> {
    if inferior.width() != superior.width() || inferior.height() != superior.height() {
        return Err(Error::Shape("half masks differ in size".into()));
    }
    let (w, h) = (inferior.width(), inferior.height());
    let sup = mirror_mask(superior);
    let mut out = Mask::new(2 * w, h, inferior.frame());
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, inferior.get(x, y));
            out.set(w + x, y, sup.get(x, y));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        let bits = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Mask::from_bits(w, h, MaskFrame::CropHalf, bits).unwrap()
    }

    #[test]
    fn skeleton_trivial_cases() {
        let empty = Mask::new(10, 10, MaskFrame::CropHalf);
        assert!(skeletonize(&empty).is_empty());
        let line = mask_from(30, 5, |_, y| y == 2);
        assert_eq!(skeletonize(&line), line);
        let dot = mask_from(5, 5, |x, y| x == 2 && y == 2);
        assert_eq!(detachment_length(&dot, 0.5).px, 1);
    }

    #[test]
    fn skeleton_of_filled_band() {
        let band = mask_from(120, 25, |x, y| (10..110).contains(&x) && (5..20).contains(&y));
        let n = skeletonize(&band).count();
        // Thinning a rectangle trims about half its thickness from each end.
        assert!((80..=100).contains(&n), "{n}");
    }

    #[test]
    fn projection_cases() {
        let m = Mask::new(6, 4, MaskFrame::CropHalf);
        assert!(project_horizontal(&m, 0.1, 0, Half::Inferior).unwrap().is_empty());
        let full = mask_from(6, 4, |_, _| true);
        assert_eq!(project_horizontal(&full, 0.1, 0, Half::Inferior).unwrap().count(), 6);
        let wrong = Mask::new(6, 4, MaskFrame::FullRes);
        assert_eq!(project_horizontal(&wrong, 0.1, 0, Half::Inferior).unwrap_err().code(), "FrameError");
    }

    #[test]
    fn radial_intervals_count_from_center() {
        let p = Projection {
            bits: vec![false, true, true, false, false, true],
            pitch_mm: 0.5,
            slice: 0,
            half: Half::Superior,
        };
        assert_eq!(p.radial_intervals(), vec![(0.0, 0.5), (1.5, 2.5)]);
    }

    #[test]
    fn dice_cases() {
        let t = [true, true, false];
        assert_eq!(dice_bits(&t, &t).unwrap(), 1.0);
        assert_eq!(dice_bits(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!((dice_bits(&[true, true, false], &[true, false, false]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_bits(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dice_bits(&[false; 4], &[false; 3]).unwrap_err().code(), "ShapeError");
    }

    #[test]
    fn bland_altman_cases() {
        let same = bland_altman(&[(1.0, 1.0), (5.0, 5.0), (7.0, 7.0)]).unwrap();
        assert_eq!((same.bias, same.loa_low, same.loa_high), (0.0, 0.0, 0.0));
        let s = bland_altman(&[(3.0, 2.0), (2.0, 3.0)]).unwrap();
        assert_eq!(s.bias, 0.0);
        assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.loa_high - 2.772).abs() < 1e-3 && (s.loa_low + 2.772).abs() < 1e-3);
        assert_eq!(s.percent_within(1.0), 100.0);
        assert_eq!(bland_altman(&[(1.0, 2.0)]).unwrap_err().code(), "InsufficientData");
    }

    #[test]
    fn length_summary() {
        let s = scan_length_summary(&[[0, 0], [40, 60]], 0.01);
        assert_eq!(s.per_slice_px, vec![0, 100]);
        assert_eq!(s.total_px, 100);
        assert!((s.total_mm - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn skeleton_is_subset_and_idempotent(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
            let m = mask_from(w, h, |x, y| (seed.rotate_left((x * 7 + y * 13) as u32 % 64) & 3) != 0);
            let s = skeletonize(&m);
            prop_assert!(s.bits().iter().zip(m.bits()).all(|(&a, &b)| !a || b));
            prop_assert_eq!(skeletonize(&s), s);
        }

        #[test]
        fn projection_of_union(w in 1usize..20, h in 1usize..20, sa in any::<u64>(), sb in any::<u64>()) {
            let a = mask_from(w, h, |x, y| (sa >> ((x + 3 * y) % 64)) & 1 == 1);
            let b = mask_from(w, h, |x, y| (sb >> ((2 * x + y) % 64)) & 1 == 1);
            let pu = project_horizontal(&a.union(&b).unwrap(), 1.0, 0, Half::Inferior).unwrap();
            let pa = project_horizontal(&a, 1.0, 0, Half::Inferior).unwrap();
            let pb = project_horizontal(&b, 1.0, 0, Half::Inferior).unwrap();
            let or: Vec<bool> = pa.bits.iter().zip(&pb.bits).map(|(x, y)| x | y).collect();
            prop_assert_eq!(pu.bits, or);
        }

        #[test]
        fn recombined_length_matches_halves(seed in any::<u64>()) {
            // Regions clear of the seam: the border trims skeleton ends, the seam does not.

            let inf = mask_from(40, 20, |x, y| y >= 8 && y < 13 && x > 5 + (seed % 7) as usize && x < 32);
            let sup = mask_from(40, 20, |x, y| y >= 6 && y < 11 && x > 10 + (seed % 5) as usize && x < 35);
            let sum = detachment_length(&inf, 1.0).px + detachment_length(&sup, 1.0).px;
            let whole = detachment_length(&recombine_halves(&inf, &sup).unwrap(), 1.0).px;
            prop_assert!((whole as i64 - sum as i64).abs() <= 2, "{} vs {}", whole, sum);
        }
    }
}
