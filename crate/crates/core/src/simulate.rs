//! Synthetic acquisition of motion-corrupted slice stacks.
//!
//! Per-slice rigid motion is drawn as `knots` independent uniform control
//! points (Euler angles within `±euler_max` degrees, translations within
//! `±trans_max` voxels) and smoothed with a clamped uniform cubic B-spline
//! evaluated at one parameter per slice. With `interleave` the first half of
//! that temporal sequence is assigned to even slice indices and the second
//! half to odd ones (two-shot acquisition).
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`);
//! Gaussian noise uses `rand_distr::StandardNormal`. Draw order per stack:
//! knot count, then for each knot the three angles followed by the three
//! translations, then (in [`acquire`]) one normal deviate per pixel in stack
//! order when noise is enabled, then the gamma exponent.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, Dims, Volume};
use crate::rigid::euler_zyx_degrees;
use crate::warp::{self, Axis, MotionStack, Psf, SliceGeometry, SliceStack};

pub type SimRng = ChaCha8Rng;

/// The generator used for every simulation.
pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Euler angles (degrees, intrinsic Z-Y-X) and a translation (voxels).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub euler: [f64; 3],
    pub trans: [f64; 3],
}

impl RigidParams {
    fn as_array(&self) -> [f64; 6] {
        let [a, b, c] = self.euler;
        let [x, y, z] = self.trans;
        [a, b, c, x, y, z]
    }

    fn from_array(v: [f64; 6]) -> Self {
        Self { euler: [v[0], v[1], v[2]], trans: [v[3], v[4], v[5]] }
    }

    pub fn is_identity(&self) -> bool {
        self.as_array().iter().all(|&x| x == 0.0)
    }
}

/// Rigid parameters for every slice of a stack, rotating about `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceTrajectory {
    pub params: Vec<RigidParams>,
    pub center: [f64; 3],
}

impl SliceTrajectory {
    pub fn identity(slices: usize, center: [f64; 3]) -> Self {
        Self { params: vec![RigidParams::default(); slices], center }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub axis: Axis,
    pub knots_min: usize,
    pub knots_max: usize,
    pub euler_max: f64,
    pub trans_max: f64,
    pub psf_width: usize,
    pub stride: usize,
    pub noise_sigma: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub interleave: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            axis: Axis::Z,
            knots_min: 32,
            knots_max: 64,
            euler_max: 20.0,
            trans_max: 26.0,
            psf_width: 4,
            stride: 4,
            noise_sigma: 0.01,
            gamma_lo: 0.9,
            gamma_hi: 1.0,
            interleave: true,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Motion-free, noise-free acquisition with the given PSF and stride.
    pub fn still(axis: Axis, psf_width: usize, stride: usize) -> Self {
        Self {
            axis,
            euler_max: 0.0,
            trans_max: 0.0,
            psf_width,
            stride,
            noise_sigma: 0.0,
            gamma_lo: 1.0,
            gamma_hi: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.euler_max.is_finite() && self.euler_max >= 0.0) {
            return bad("euler_max must be >= 0");
        }
        if !(self.trans_max.is_finite() && self.trans_max >= 0.0) {
            return bad("trans_max must be >= 0");
        }
        if self.psf_width < 1 {
            return bad("psf_width must be >= 1");
        }
        if self.stride < 1 {
            return bad("stride must be >= 1");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.gamma_lo > 0.0 && self.gamma_lo <= self.gamma_hi && self.gamma_hi.is_finite()) {
            return bad("gamma range must satisfy 0 < gamma_lo <= gamma_hi");
        }
        if self.knots_min < 4 || self.knots_min > self.knots_max {
            return bad("knot range must satisfy 4 <= knots_min <= knots_max");
        }
        Ok(())
    }
}

/// Clamped uniform cubic B-spline through `control` evaluated at `t ∈ [0, 1]`
/// (de Boor's algorithm). Needs at least 4 control points.
pub fn bspline_eval<const D: usize>(control: &[[f64; D]], t: f64) -> [f64; D] {
    const P: usize = 3;
    let n = control.len();
    assert!(n > P, "cubic B-spline needs at least 4 control points");
    let spans = (n - P) as f64;
    let knot = |i: usize| -> f64 { (i.saturating_sub(P) as f64).min(spans) / spans };
    let t = t.clamp(0.0, 1.0);
    // knot span index s with knot(s) <= t < knot(s+1), s in P..n-1
    let s = ((t * spans).floor() as usize + P).min(n - 1);
    let mut d: Vec<[f64; D]> = (0..=P).map(|j| control[j + s - P]).collect();
    for r in 1..=P {
        for j in (r..=P).rev() {
            let i = j + s - P;
            let denom = knot(i + P + 1 - r) - knot(i);
            let alpha = if denom > 0.0 { (t - knot(i)) / denom } else { 0.0 };
            for c in 0..D {
                d[j][c] = (1.0 - alpha) * d[j - 1][c] + alpha * d[j][c];
            }
        }
    }
    d[P]
}

/// Two-shot reordering: the first `ceil(K/2)` entries of a temporal sequence
/// go to even slice indices, the rest to odd ones.
pub fn interleave<T: Clone>(temporal: &[T]) -> Vec<T> {
    let k = temporal.len();
    let first = k.div_ceil(2);
    (0..k).map(|slot| if slot % 2 == 0 { temporal[slot / 2].clone() } else { temporal[first + slot / 2].clone() }).collect()
}

/// Inverse of [`interleave`]: even slices followed by odd slices.
pub fn deinterleave<T: Clone>(slices: &[T]) -> Vec<T> {
    slices.iter().step_by(2).chain(slices.iter().skip(1).step_by(2)).cloned().collect()
}

/// Samples a smooth random per-slice rigid trajectory.
pub fn gen_trajectory(slices: usize, cfg: &SimConfig, center: [f64; 3], rng: &mut SimRng) -> Result<SliceTrajectory> {
    cfg.validate()?;
    if slices < 2 {
        return Err(Error::InvalidConfig(format!("trajectory needs at least 2 slices, got {slices}")));
    }
    let knots = rng.random_range(cfg.knots_min..=cfg.knots_max);
    let control: Vec<[f64; 6]> = (0..knots)
        .map(|_| {
            let mut c = [0.0; 6];
            for (i, x) in c.iter_mut().enumerate() {
                let amp = if i < 3 { cfg.euler_max } else { cfg.trans_max };
                let u: f64 = rng.random();
                *x = amp * (2.0 * u - 1.0);
            }
            c
        })
        .collect();
    let temporal: Vec<RigidParams> = (0..slices)
        .map(|j| RigidParams::from_array(bspline_eval(&control, j as f64 / (slices - 1) as f64)))
        .collect();
    let params = if cfg.interleave { interleave(&temporal) } else { temporal };
    Ok(SliceTrajectory { params, center })
}

/// Dense displacement `R_k (q - c) + c + t_k - q` at every nominal pixel
/// position `q` of the stack.
pub fn rasterize_motion(traj: &SliceTrajectory, geometry: &SliceGeometry) -> Result<MotionStack> {
    geometry.validate()?;
    if traj.len() != geometry.slices {
        return Err(Error::GeometryMismatch(format!(
            "trajectory has {} slices, stack has {}",
            traj.len(),
            geometry.slices
        )));
    }
    let rot: Vec<_> = traj.params.iter().map(|p| euler_zyx_degrees(p.euler)).collect();
    let c = Vector3::from(traj.center);
    Ok(MotionStack::from_fn(*geometry, |k, q| {
        if traj.params[k].is_identity() {
            return [0.0; 3];
        }
        let q = Vector3::from(q);
        let t = Vector3::from(traj.params[k].trans);
        let y = rot[k] * (q - c) + c + t;
        (y - q).into()
    }))
}

/// Simulates one stack from `vol`: rigid motion from `traj`, boxcar PSF of
/// `psf_width` voxels, one slice every `stride` voxels along `cfg.axis`,
/// additive Gaussian noise, then `x -> max * (x / max)^gamma` with one gamma
/// per stack (`max` is the stack maximum; negative values clip to zero).
pub fn acquire(vol: &Volume, traj: &SliceTrajectory, cfg: &SimConfig, rng: &mut SimRng) -> Result<(SliceStack, MotionStack)> {
    cfg.validate()?;
    let geometry = SliceGeometry::for_volume(vol.dims(), cfg.axis, cfg.stride, cfg.psf_width)?;
    let motion = rasterize_motion(traj, &geometry)?;
    let mut stack = warp::slice_pull(vol, &motion, &Psf::boxcar(cfg.psf_width))?;

    if cfg.noise_sigma > 0.0 {
        for x in stack.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *x += cfg.noise_sigma * n;
        }
    }
    let gamma = if cfg.gamma_lo == cfg.gamma_hi { cfg.gamma_lo } else { rng.random_range(cfg.gamma_lo..=cfg.gamma_hi) };
    if gamma != 1.0 {
        let max = stack.max();
        if max > 0.0 {
            for x in stack.data_mut() {
                *x = max * (x.max(0.0) / max).powf(gamma);
            }
        }
    }
    Ok((stack, motion))
}

/// Trajectory plus acquisition from a single seed, as the CLI does it.
pub fn simulate(vol: &Volume, cfg: &SimConfig) -> Result<(SliceStack, MotionStack, SliceTrajectory)> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let geometry = SliceGeometry::for_volume(vol.dims(), cfg.axis, cfg.stride, cfg.psf_width)?;
    let traj = gen_trajectory(geometry.slices, cfg, grid::grid_center(vol.dims()), &mut rng)?;
    let (stack, motion) = acquire(vol, &traj, cfg, &mut rng)?;
    Ok((stack, motion, traj))
}

/// Smooth test object: a sum of `blobs` random isotropic Gaussians inside the
/// central part of the grid, scaled to a maximum of 1.
pub fn blob_phantom(dims: Dims, blobs: usize, seed: u64) -> Volume {
    let mut rng = rng_from_seed(seed);
    let n = *dims.iter().min().unwrap() as f64;
    let c = grid::grid_center(dims);
    let params: Vec<([f64; 3], f64, f64)> = (0..blobs.max(1))
        .map(|_| {
            let mut center = [0.0; 3];
            for (i, x) in center.iter_mut().enumerate() {
                let u: f64 = rng.random();
                *x = c[i] + 0.25 * n * (2.0 * u - 1.0);
            }
            let sigma = n * rng.random_range(0.06..0.12);
            let amp = rng.random_range(0.3..1.0);
            (center, sigma, amp)
        })
        .collect();
    let vol = Volume::from_fn(dims, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        params.iter()
            .map(|(ctr, s, a)| {
                let r2 = (p[0] - ctr[0]).powi(2) + (p[1] - ctr[1]).powi(2) + (p[2] - ctr[2]).powi(2);
                a * (-r2 / (2.0 * s * s)).exp()
            })
            .sum()
    });
    let max = vol.max();
    let data = vol.into_data().into_iter().map(|x| x / max).collect();
    Volume::new(dims, 1.0, data).expect("finite phantom")
}
