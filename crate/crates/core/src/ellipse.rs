//! En-face ellipse model of the scleral spur ring.
//!
//! The ring is represented as an ellipse in the en-face plane (scan axis at
//! the origin) plus a first-harmonic depth profile
//! `z(θ) = c0 + c1·cos θ + c2·sin θ`, where `θ` is the polar angle of the
//! spoke a point lies on. Spur estimates from all 16 slices are lifted into
//! this plane, fitted, and re-intersected with every spoke.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::Half;
use crate::preset::{Frame, Geometry, SLICES_PER_SCAN};
use crate::spur::{SpurPair, SpurSet};

/// Angle of radial slice `i`: slices are evenly spread over half a turn.
pub fn slice_angle(i: usize) -> f64 {
    i as f64 * PI / SLICES_PER_SCAN as f64
}

pub fn slice_angles() -> Vec<f64> {
    (0..SLICES_PER_SCAN).map(slice_angle).collect()
}

/// A spur lifted into the en-face plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnfacePoint {
    pub x: f64,
    pub y: f64,
    /// Depth below the top of the B-scan, mm.
    pub z: f64,
    pub slice: usize,
    pub half: Half,
    /// Polar angle of the spoke carrying the point: the slice angle on the
    /// superior side, the slice angle plus π on the inferior side.
    pub theta: f64,
}

/// Polar angle of the spoke through `half` of a slice at `angle`.
pub fn spoke_angle(angle: f64, half: Half) -> f64 {
    match half {
        Half::Superior => angle,
        Half::Inferior => angle + PI,
    }
}

/// Implicit conic `A x² + B xy + C y² + D x + E y + F = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conic(pub [f64; 6]);

impl Conic {
    pub fn discriminant(&self) -> f64 {
        let [a, b, c, ..] = self.0;
        b * b - 4.0 * a * c
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let [a, b, c, d, e, f] = self.0;
        a * x * x + b * x * y + c * y * y + d * x + e * y + f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthModel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl DepthModel {
    pub fn flat(z: f64) -> Self {
        Self { c0: z, c1: 0.0, c2: 0.0 }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        self.c0 + self.c1 * theta.cos() + self.c2 * theta.sin()
    }
}

/// Geometric ellipse in the en-face plane plus depth profile. Lengths in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseModel {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    /// Rotation of the major axis from +x, in `[0, π)`.
    pub phi: f64,
    pub depth: DepthModel,
}

impl EllipseModel {
    /// Build from possibly unordered axes, normalizing so `a ≥ b` and `φ ∈ [0, π)`.
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, phi: f64, depth: DepthModel) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) || ![cx, cy, a, b, phi].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid ellipse axes ({a}, {b})")));
        }
        let (a, b, phi) = if a >= b { (a, b, phi) } else { (b, a, phi + PI / 2.0) };
        Ok(Self {
            cx,
            cy,
            a,
            b,
            phi: phi.rem_euclid(PI),
            depth,
        })
    }

    pub fn circle(r: f64, depth: DepthModel) -> Self {
        Self {
            cx: 0.0,
            cy: 0.0,
            a: r,
            b: r,
            phi: 0.0,
            depth,
        }
    }

    pub fn conic(&self) -> Conic {
        let (s, c) = self.phi.sin_cos();
        let (a2, b2) = (self.a * self.a, self.b * self.b);
        let aa = c * c / a2 + s * s / b2;
        let bb = 2.0 * s * c * (1.0 / a2 - 1.0 / b2);
        let cc = s * s / a2 + c * c / b2;
        let dd = -2.0 * aa * self.cx - bb * self.cy;
        let ee = -bb * self.cx - 2.0 * cc * self.cy;
        let ff = aa * self.cx * self.cx + bb * self.cx * self.cy + cc * self.cy * self.cy - 1.0;
        Conic([aa, bb, cc, dd, ee, ff])
    }

    /// Point on the curve at eccentric anomaly `t`.
    pub fn point_at(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.phi.sin_cos();
        let (u, v) = (self.a * t.cos(), self.b * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    /// Whether the scan axis lies strictly inside the ellipse.
    pub fn contains_origin(&self) -> bool {
        self.conic().eval(0.0, 0.0) < 0.0
    }
}

/// Extract geometric parameters from an ellipse conic.
pub fn conic_to_model(conic: &Conic, depth: DepthModel) -> Result<EllipseModel> {
    let [a, b, c, d, e, f] = conic.0;
    let disc = conic.discriminant();
    if !(disc < 0.0) {
        return Err(Error::DegenerateFit(format!("conic is not an ellipse (B²-4AC = {disc:e})")));
    }
    let den = -disc;
    let cx = (b * e - 2.0 * c * d) / den;
    let cy = (b * d - 2.0 * a * e) / den;
    // Value of the conic at the center; the ellipse is Q(x-c) = -f0.
    let f0 = f + (d * cx + e * cy) / 2.0;
    let root = ((a - c) * (a - c) + b * b).sqrt();
    let l1 = (a + c - root) / 2.0;
    let l2 = (a + c + root) / 2.0;
    let (s1, s2) = (-f0 / l1, -f0 / l2);
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::DegenerateFit("conic describes an imaginary ellipse".into()));
    }
    // Eigenvector of the quadratic form for the smaller eigenvalue is the major axis.
    let phi = if b.abs() < 1e-300 && a <= c {
        0.0
    } else if b.abs() < 1e-300 {
        PI / 2.0
    } else {
        (l1 - a).atan2(b / 2.0)
    };
    EllipseModel::new(cx, cy, s1.sqrt(), s2.sqrt(), phi, depth)
}

fn invert3(m: &Matrix3<f64>, what: &str) -> Result<Matrix3<f64>> {
    let scale = m.abs().max();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateFit(format!("{what} is zero")));
    }
    let svd = m.svd(false, false);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if smin <= smax * 1e-12 {
        return Err(Error::DegenerateFit(format!("{what} is singular")));
    }
    m.try_inverse().ok_or_else(|| Error::DegenerateFit(format!("{what} is singular")))
}

/// Direct least-squares ellipse fit to `(x, y)` points.
///
/// Minimizes the algebraic distance subject to `4AC − B² = 1`, solved in the
/// numerically stable block form of the generalized eigenproblem. Points are
/// shifted and scaled to unit spread first.
pub fn fit_conic_direct(points: &[(f64, f64)]) -> Result<Conic> {
    if points.len() < 5 {
        return Err(Error::InsufficientData {
            needed: 5,
            got: points.len(),
        });
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::NumericalFailure("non-finite point in ellipse fit".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let spread = (points.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n).sqrt();
    if !(spread > 0.0) {
        return Err(Error::DegenerateFit("all points coincide".into()));
    }
    let k = 1.0 / spread;

    let mut s1 = Matrix3::zeros();
    let mut s2 = Matrix3::zeros();
    let mut s3 = Matrix3::zeros();
    for p in points {
        let (x, y) = ((p.0 - mx) * k, (p.1 - my) * k);
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let t = -invert3(&s3, "linear scatter matrix")? * s2.transpose();
    let m = s1 + s2 * t;
    // Premultiply by the inverse of the 3×3 constraint block.
    let mc = Matrix3::from_rows(&[
        (m.row(2) / 2.0).into_owned(),
        (-m.row(1)).into_owned(),
        (m.row(0) / 2.0).into_owned(),
    ]);

    let eig = mc.complex_eigenvalues();
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in eig.iter() {
        if !lambda.re.is_finite() || lambda.im.abs() > 1e-9 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let Some(v) = null_vector(&(mc - Matrix3::identity() * lambda.re)) else {
            continue;
        };
        let cons = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cons <= 0.0 {
            continue;
        }
        // Algebraic residual per unit constraint: the fitted ellipse minimizes it.
        let resid = (v.transpose() * m * v)[0] / cons;
        if best.as_ref().is_none_or(|(r, _)| resid < *r) {
            best = Some((resid, v));
        }
    }
    let (_, a1) = best.ok_or_else(|| Error::DegenerateFit("no eigenvector satisfies the ellipse constraint".into()))?;
    let a2 = t * a1;

    // Undo the normalization x' = k (x - mx).
    let (a, b, c) = (a1[0] * k * k, a1[1] * k * k, a1[2] * k * k);
    let (d0, e0, f0) = (a2[0] * k, a2[1] * k, a2[2]);
    let d = d0 - 2.0 * a * mx - b * my;
    let e = e0 - b * mx - 2.0 * c * my;
    let f = a * mx * mx + b * mx * my + c * my * my - d0 * mx - e0 * my + f0;
    let mut coeffs = [a, b, c, d, e, f];
    let norm = (4.0 * a * c - b * b).abs().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::NumericalFailure("ellipse fit produced a degenerate conic".into()));
    }
    for v in &mut coeffs {
        *v /= norm;
    }
    let conic = Conic(coeffs);
    if !(conic.discriminant() < 0.0) {
        return Err(Error::NumericalFailure("fitted conic is not an ellipse".into()));
    }
    Ok(conic)
}

/// Unit null vector of a rank-2 3×3 matrix: the largest cross product of row pairs.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let r: Vec<Vector3<f64>> = (0..3).map(|i| m.row(i).transpose()).collect();
    let v = [r[0].cross(&r[1]), r[0].cross(&r[2]), r[1].cross(&r[2])]
        .into_iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))?;
    let n = v.norm();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

/// Fit the en-face part of the model. Depth is left flat at zero.
pub fn fit_ellipse_direct(points: &[EnfacePoint]) -> Result<EllipseModel> {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.y)).collect();
    let conic = fit_conic_direct(&xy)?;
    conic_to_model(&conic, DepthModel::flat(0.0))
}

/// Least-squares fit of `z = c0 + c1 cos θ + c2 sin θ`.
pub fn fit_depth(thetas: &[f64], z: &[f64]) -> Result<DepthModel> {
    if thetas.len() != z.len() {
        return Err(Error::Shape(format!("{} angles vs {} depths", thetas.len(), z.len())));
    }
    if thetas.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: thetas.len(),
        });
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (&t, &zi) in thetas.iter().zip(z) {
        let row = Vector3::new(1.0, t.cos(), t.sin());
        ata += row * row.transpose();
        atb += row * zi;
    }
    let inv = invert3(&ata, "depth normal matrix")?;
    let c = inv * atb;
    Ok(DepthModel {
        c0: c[0],
        c1: c[1],
        c2: c[2],
    })
}

/// Intersect the spoke line `t·(cos θ, sin θ)` with the ellipse.
/// Returns `[inferior, superior]` (negative root first).
pub fn intersect_slice(model: &EllipseModel, angle: f64) -> Result<[EnfacePoint; 2]> {
    let [a, b, c, d, e, f] = model.conic().0;
    let (s, co) = angle.sin_cos();
    let qa = a * co * co + b * co * s + c * s * s;
    let qb = d * co + e * s;
    let qc = f;
    let disc = qb * qb - 4.0 * qa * qc;
    // qa > 0 for an ellipse, so roots of opposite sign need qc < 0.
    if !(disc >= 0.0) || !(qa > 0.0) || !(qc < 0.0) {
        return Err(Error::NoIntersection { angle_rad: angle });
    }
    let sq = disc.sqrt();
    // Stable quadratic roots.
    let q = -0.5 * (qb + qb.signum() * sq);
    let q = if q == 0.0 { -0.5 * sq } else { q };
    let (r1, r2) = (q / qa, qc / q);
    let (t_neg, t_pos) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
    let make = |t: f64, half: Half| {
        let theta = spoke_angle(angle, half);
        EnfacePoint {
            x: t * co,
            y: t * s,
            z: model.depth.eval(theta),
            slice: 0,
            half,
            theta,
        }
    };
    Ok([make(t_neg, Half::Inferior), make(t_pos, Half::Superior)])
}

/// Lift one slice-frame point into the en-face plane.
pub fn point_to_enface(p: (f64, f64), slice: usize, angle: f64, geom: &Geometry) -> EnfacePoint {
    let pitch = geom.pitch_mm();
    let u = p.0 - geom.axis_column();
    let r = u * pitch;
    let half = if u < 0.0 { Half::Inferior } else { Half::Superior };
    let (s, c) = angle.sin_cos();
    EnfacePoint {
        x: r * c,
        y: r * s,
        z: p.1 * pitch,
        slice,
        half,
        theta: spoke_angle(angle, half),
    }
}

/// Map an en-face point back onto the slice at `angle`: `(x px, y px)`.
pub fn point_to_slice(p: &EnfacePoint, angle: f64, geom: &Geometry) -> (f64, f64) {
    let pitch = geom.pitch_mm();
    let (s, c) = angle.sin_cos();
    let r = p.x * c + p.y * s;
    (geom.axis_column() + r / pitch, p.z / pitch)
}

/// Lift every spur of a full-resolution set; slices without an estimate are skipped.
pub fn to_enface(spurs: &SpurSet, angles: &[f64], geom: &Geometry) -> Result<Vec<EnfacePoint>> {
    if spurs.frame != Frame::FullRes {
        return Err(Error::Frame(format!("spurs must be in full_res, got {}", spurs.frame)));
    }
    if angles.len() != spurs.pairs.len() {
        return Err(Error::Shape(format!("{} angles for {} slices", angles.len(), spurs.pairs.len())));
    }
    let mut out = Vec::with_capacity(2 * angles.len());
    for (i, (pair, &angle)) in spurs.pairs.iter().zip(angles).enumerate() {
        if let Some(pair) = pair {
            let mut inf = point_to_enface(pair.inferior, i, angle, geom);
            let mut sup = point_to_enface(pair.superior, i, angle, geom);
            // The half is fixed by position in the pair, not by the sign of u.
            inf.half = Half::Inferior;
            inf.theta = spoke_angle(angle, Half::Inferior);
            sup.half = Half::Superior;
            sup.theta = spoke_angle(angle, Half::Superior);
            out.push(inf);
            out.push(sup);
        }
    }
    Ok(out)
}

/// Fit the full model (en-face ellipse plus depth) to lifted points.
pub fn fit_model(points: &[EnfacePoint]) -> Result<EllipseModel> {
    let mut model = fit_ellipse_direct(points)?;
    let thetas: Vec<f64> = points.iter().map(|p| p.theta).collect();
    let z: Vec<f64> = points.iter().map(|p| p.z).collect();
    model.depth = fit_depth(&thetas, &z)?;
    Ok(model)
}

/// Spur pair at the intersection of the model with slice `angle`, in full-res px.
pub fn model_spurs(model: &EllipseModel, angle: f64, geom: &Geometry) -> Result<SpurPair> {
    let [inf, sup] = intersect_slice(model, angle)?;
    Ok(SpurPair {
        inferior: point_to_slice(&inf, angle, geom),
        superior: point_to_slice(&sup, angle, geom),
        frame: Frame::FullRes,
    })
}

/// Outcome of refining a scan's spur estimates.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub spurs: SpurSet,
    pub model: EllipseModel,
    /// Slices that kept their raw estimate because the spoke missed the ellipse.
    pub fallbacks: Vec<usize>,
}

/// Replace every slice's spur pair with the intersection of the fitted model.
pub fn refine_spurs(raw: &SpurSet, geom: &Geometry) -> Result<Refinement> {
    raw.complete_pairs()?;
    let angles = slice_angles();
    let points = to_enface(raw, &angles, geom)?;
    let model = fit_model(&points)?;
    let mut spurs = raw.clone();
    spurs.refined = true;
    let mut fallbacks = Vec::new();
    for (i, &angle) in angles.iter().enumerate() {
        match model_spurs(&model, angle, geom) {
            Ok(pair) => spurs.pairs[i] = Some(pair),
            Err(Error::NoIntersection { .. }) => fallbacks.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok(Refinement {
        spurs,
        model,
        fallbacks,
    })
}
