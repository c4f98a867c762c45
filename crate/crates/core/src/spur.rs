//! Scleral spur point pairs and per-scan spur sets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ellipse::EllipseModel;

use crate::error::{Error, Result};
use crate::preset::{Frame, Geometry, SLICES_PER_SCAN};

pub type Point = (f64, f64);

/// The two spurs of one B-scan. `inferior` is the leftmost point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpurPair {
    pub inferior: Point,
    pub superior: Point,
    pub frame: Frame,
}

impl SpurPair {
    /// Build a pair, ordering the points left to right.
    pub fn new(a: Point, b: Point, frame: Frame) -> Self {
        let (inferior, superior) = if b.0 < a.0 { (b, a) } else { (a, b) };
        Self {
            inferior,
            superior,
            frame,
        }
    }

    pub fn midpoint(&self) -> Point {
        (
            (self.inferior.0 + self.superior.0) / 2.0,
            (self.inferior.1 + self.superior.1) / 2.0,
        )
    }

    pub fn to_frame(&self, geom: &Geometry, frame: Frame) -> Result<SpurPair> {
        Ok(SpurPair {
            inferior: geom.frame_convert(self.inferior, self.frame, frame)?,
            superior: geom.frame_convert(self.superior, self.frame, frame)?,
            frame,
        })
    }

    /// Coordinates as `[x_inf, y_inf, x_sup, y_sup]`.
    pub fn to_array(&self) -> [f64; 4] {
        [self.inferior.0, self.inferior.1, self.superior.0, self.superior.1]
    }

    pub fn from_array(v: [f64; 4], frame: Frame) -> Self {
        Self::new((v[0], v[1]), (v[2], v[3]), frame)
    }
}

/// Per-slice spur estimates of one radial scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpurSet {
    pub frame: Frame,
    /// True once the estimates have been replaced by ellipse intersections.
    pub refined: bool,
    pub pairs: Vec<Option<SpurPair>>,
    /// 1 where a pair was annotated or predicted, 0 where absent.
    pub confidence: Vec<f64>,
}

impl SpurSet {
    pub fn empty(frame: Frame) -> Self {
        Self {
            frame,
            refined: false,
            pairs: vec![None; SLICES_PER_SCAN],
            confidence: vec![0.0; SLICES_PER_SCAN],
        }
    }

    pub fn from_pairs(pairs: Vec<SpurPair>, frame: Frame) -> Result<Self> {
        if pairs.len() != SLICES_PER_SCAN {
            return Err(Error::IncompleteScan(format!(
                "{} spur pairs, expected {SLICES_PER_SCAN}",
                pairs.len()
            )));
        }
        if let Some(p) = pairs.iter().find(|p| p.frame != frame) {
            return Err(Error::Frame(format!("pair in {} inside a {frame} set", p.frame)));
        }
        Ok(Self {
            frame,
            refined: false,
            confidence: vec![1.0; pairs.len()],
            pairs: pairs.into_iter().map(Some).collect(),
        })
    }

    pub fn set(&mut self, slice: usize, pair: SpurPair, confidence: f64) {
        self.pairs[slice] = Some(pair);
        self.confidence[slice] = confidence;
    }

    pub fn get(&self, slice: usize) -> Option<&SpurPair> {
        self.pairs.get(slice).and_then(Option::as_ref)
    }

    pub fn is_complete(&self) -> bool {
        self.pairs.len() == SLICES_PER_SCAN && self.pairs.iter().all(Option::is_some)
    }

    /// All pairs, failing if any slice is missing.
    pub fn complete_pairs(&self) -> Result<Vec<SpurPair>> {
        if self.pairs.len() != SLICES_PER_SCAN {
            return Err(Error::IncompleteScan(format!("{} slices in spur set", self.pairs.len())));
        }
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| Error::IncompleteScan(format!("no spur estimate for slice {i}"))))
            .collect()
    }

    pub fn to_frame(&self, geom: &Geometry, frame: Frame) -> Result<SpurSet> {
        let pairs = self
            .pairs
            .iter()
            .map(|p| p.map(|p| p.to_frame(geom, frame)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(SpurSet {
            frame,
            pairs,
            ..self.clone()
        })
    }
}

/// One slice entry of `spurs.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSpurs {
    pub slice: usize,
    pub inferior: Option<Point>,
    pub superior: Option<Point>,
    pub confidence: f64,
}

/// On-disk form of a [`SpurSet`], optionally with the fitted ellipse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpursFile {
    pub frame: Frame,
    pub refined: bool,
    pub slices: Vec<SliceSpurs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipse: Option<EllipseModel>,
    /// Slices that kept their raw estimate during refinement.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallbacks: Vec<usize>,
}

impl SpursFile {
    pub fn from_set(set: &SpurSet, ellipse: Option<EllipseModel>, fallbacks: Vec<usize>) -> Self {
        let slices = set
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| SliceSpurs {
                slice: i,
                inferior: p.map(|p| p.inferior),
                superior: p.map(|p| p.superior),
                confidence: set.confidence[i],
            })
            .collect();
        Self {
            frame: set.frame,
            refined: set.refined,
            slices,
            ellipse,
            fallbacks,
        }
    }

    pub fn to_set(&self) -> Result<SpurSet> {
        let mut set = SpurSet::empty(self.frame);
        set.refined = self.refined;
        for s in &self.slices {
            if s.slice >= SLICES_PER_SCAN {
                return Err(Error::Format(format!("slice index {} in spurs file", s.slice)));
            }
            match (s.inferior, s.superior) {
                (Some(a), Some(b)) => set.set(s.slice, SpurPair::new(a, b, self.frame), s.confidence),
                (None, None) => {}
                _ => return Err(Error::Format(format!("slice {} has a single spur", s.slice))),
            }
        }
        Ok(set)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path.as_ref(), text + "\n").map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
