//! Motion and intensity error metrics.
//!
//! Motion metrics are in voxels. PSNR of identical inputs is capped at
//! [`PSNR_CAP`] dB.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rigid::{self, Correspondence, RigidTransform};
use crate::warp::MotionStack;

pub const PSNR_CAP: f64 = 300.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: Option<f64>,
    pub epe: Option<f64>,
    pub epe_compensated: Option<f64>,
    pub ape: Option<f64>,
    pub psnr_slices: Option<f64>,
    pub psnr_volume: Option<f64>,
}

fn check_pair(u: &MotionStack, v: &MotionStack, mask: Option<&[bool]>) -> Result<()> {
    if u.geometry != v.geometry {
        return Err(Error::GeometryMismatch("motion stacks have different geometry".into()));
    }
    if let Some(m) = mask {
        if m.len() != u.geometry.len() {
            return Err(Error::LengthMismatch { expected: u.geometry.len(), got: m.len() });
        }
    }
    Ok(())
}

fn masked_mean(n: usize, mask: Option<&[bool]>, mut f: impl FnMut(usize) -> f64) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        if mask.is_none_or(|m| m[i]) {
            sum += f(i);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Mean squared displacement difference per point.
pub fn motion_mse(u: &MotionStack, v: &MotionStack, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(u, v, mask)?;
    let (a, b) = (u.vectors(), v.vectors());
    masked_mean(a.len(), mask, |i| dist2(a[i], b[i]))
}

/// Mean end-point distance over a point correspondence, optionally after
/// rigidly aligning `v`'s point cloud onto `u`'s. The compensating transform
/// is the fitted rigid map or the identity, whichever gives the lower error,
/// so compensation never increases the error.
pub fn epe_points(c: &Correspondence, compensate: bool) -> Result<(f64, RigidTransform)> {
    if c.is_empty() {
        return Err(Error::EmptyMask);
    }
    let raw = (0..c.len()).map(|i| dist2(c.u[i], c.v[i]).sqrt()).sum::<f64>() / c.len() as f64;
    if !compensate {
        return Ok((raw, RigidTransform::identity()));
    }
    let (_, rigid) = rigid::compensated_loss_points(c)?;
    let mut sum = 0.0;
    for i in 0..c.len() {
        let p = c.p[i];
        let x = [c.v[i][0] + p[0], c.v[i][1] + p[1], c.v[i][2] + p[2]];
        let y = [c.u[i][0] + p[0], c.u[i][1] + p[1], c.u[i][2] + p[2]];
        sum += dist2(rigid.apply(x), y).sqrt();
    }
    let fitted = sum / c.len() as f64;
    Ok(if fitted <= raw { (fitted, rigid) } else { (raw, RigidTransform::identity()) })
}

pub fn epe(u: &MotionStack, v: &MotionStack, mask: Option<&[bool]>, compensate: bool) -> Result<f64> {
    check_pair(u, v, mask)?;
    if !compensate {
        let (a, b) = (u.vectors(), v.vectors());
        return masked_mean(a.len(), mask, |i| dist2(a[i], b[i]).sqrt());
    }
    Ok(epe_points(&Correspondence::from_stacks(u, v, mask)?, true)?.0)
}

/// Anchor pixel coordinates `(h, w)` of a slice: center, bottom-left, bottom-right.
pub fn anchors(height: usize, width: usize) -> [(f64, f64); 3] {
    let (h1, w1) = ((height - 1) as f64, (width - 1) as f64);
    [(h1 / 2.0, w1 / 2.0), (0.0, 0.0), (0.0, w1)]
}

fn bilinear(field: &[f64], height: usize, width: usize, h: f64, w: f64) -> f64 {
    let (h0, w0) = ((h.floor() as usize).min(height - 2), (w.floor() as usize).min(width - 2));
    let (fh, fw) = (h - h0 as f64, w - w0 as f64);
    let at = |a: usize, b: usize| field[a * width + b];
    (1.0 - fh) * ((1.0 - fw) * at(h0, w0) + fw * at(h0, w0 + 1)) + fh * ((1.0 - fw) * at(h0 + 1, w0) + fw * at(h0 + 1, w0 + 1))
}

/// Mean over slices of the mean anchor-point distance between the end points
/// of `u` and `v`. Displacements at the fractional center anchor are
/// interpolated bilinearly within the slice.
pub fn ape(u: &MotionStack, v: &MotionStack) -> Result<f64> {
    check_pair(u, v, None)?;
    let g = u.geometry;
    if g.height < 2 || g.width < 2 {
        return Err(Error::InvalidDims(format!("anchors need slices of at least 2x2, got {}x{}", g.height, g.width)));
    }
    let n = g.pixels_per_slice();
    let anchors = anchors(g.height, g.width);
    let mut total = 0.0;
    for k in 0..g.slices {
        let (su, sv) = (u.slice(k), v.slice(k));
        let mut per = 0.0;
        for &(h, w) in &anchors {
            let mut d2 = 0.0;
            for c in 0..3 {
                let a = bilinear(&su[c * n..(c + 1) * n], g.height, g.width, h, w);
                let b = bilinear(&sv[c * n..(c + 1) * n], g.height, g.width, h, w);
                d2 += (a - b).powi(2);
            }
            per += d2.sqrt();
        }
        total += per / anchors.len() as f64;
    }
    Ok(total / g.slices as f64)
}

/// `10 log10(peak² / MSE)` over masked elements, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], mask: Option<&[bool]>, peak: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::LengthMismatch { expected: a.len(), got: m.len() });
        }
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidConfig(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = masked_mean(a.len(), mask, |i| (a[i] - b[i]).powi(2))?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// PSNR with the peak taken as the maximum of the reference `b` over the mask.
pub fn psnr_ref(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let peak = b
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m.get(*i).copied().unwrap_or(false)))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Err(Error::EmptyMask);
    }
    psnr(a, b, mask, if peak > 0.0 { peak } else { 1.0 })
}
