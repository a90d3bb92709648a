//! Alternating slice-to-volume reconstruction.
//!
//! Each input stack `i` owns a volume `v_i` and a motion stack `u_i`. The
//! objective is
//!
//! ```text
//! J = Σ_i ‖U_i v_i − f_i‖² + λ Σ_{i<j} ‖v_i − v_j‖² + ε Σ_i ‖v_i‖²
//! ```
//!
//! minimized by block coordinate descent: for every stack, a conjugate
//! gradient solve of the normal equations in `v_i`, then Gauss–Newton steps
//! in `u_i`. Levels of a 2x pyramid are processed coarsest first. The
//! reconstruction PSF of a stack is a boxcar as wide as its slab.

use std::time::Instant;

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, build_pyramid, check_pyramid_depth, half_dims, Dims, Volume};
use crate::metrics;
use crate::rigid::Correspondence;
use crate::warp::{self, Axis, MotionStack, Psf, SliceGeometry, SliceStack, SplatVolume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionBasis {
    /// Per-slice rigid motion, linearized about the volume center.
    #[default]
    Rigid,
    /// One free displacement vector per slice pixel.
    Dense,
}

impl std::str::FromStr for MotionBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(Self::Rigid),
            "dense" => Ok(Self::Dense),
            _ => Err(Error::InvalidConfig(format!("unknown motion basis '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub lambda: f64,
    pub levels: usize,
    pub outer_iters: usize,
    /// v-only sweeps at the start of every level, before any motion update.
    pub v_warmup: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub gn_iters: usize,
    /// Largest displacement change of one u-step, in voxels of the level.
    pub step_max: f64,
    /// Step shrink factor of the u-step line search.
    pub armijo: f64,
    pub max_backtracks: usize,
    pub tikhonov_eps: f64,
    /// Relative objective decrease per sweep below which a level stops early.
    pub tol: f64,
    pub basis: MotionBasis,
    /// Pixels brighter than this fraction of the stack maximum count as
    /// foreground for ground-truth EPE reporting.
    pub fg_threshold: f64,
    /// Reconstruction grid; inferred from the stacks when absent.
    pub dims: Option<Dims>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            levels: 3,
            outer_iters: 20,
            v_warmup: 2,
            cg_iters: 30,
            cg_tol: 1e-4,
            gn_iters: 1,
            step_max: 2.0,
            armijo: 0.5,
            max_backtracks: 10,
            tikhonov_eps: 1e-6,
            tol: 1e-6,
            basis: MotionBasis::Rigid,
            fg_threshold: 0.05,
            dims: None,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if self.levels < 1 {
            return bad("levels must be >= 1");
        }
        if self.cg_iters < 1 || !(self.cg_tol > 0.0) {
            return bad("cg_iters and cg_tol must be positive");
        }
        if !(self.step_max > 0.0) {
            return bad("step_max must be positive");
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad("armijo must lie in (0, 1)");
        }
        if !(self.tikhonov_eps.is_finite() && self.tikhonov_eps >= 0.0) {
            return bad("tikhonov_eps must be >= 0");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(0.0..1.0).contains(&self.fg_threshold) {
            return bad("fg_threshold must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Reconstruction PSF of a stack.
pub fn stack_psf(g: &SliceGeometry) -> Psf {
    Psf::boxcar(g.slab)
}

fn data_term(stack: &SliceStack, v: &Volume, u: &MotionStack) -> Result<f64> {
    let pred = warp::slice_pull(v, u, &stack_psf(&stack.geometry))?;
    let n = stack.geometry.pixels_per_slice();
    let per: Vec<f64> = pred
        .data()
        .par_chunks(n)
        .zip(stack.data().par_chunks(n))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect();
    Ok(per.iter().sum())
}

/// `J` for the given per-stack volumes and motions.
pub fn objective(stacks: &[SliceStack], volumes: &[Volume], motions: &[MotionStack], lambda: f64, eps: f64) -> Result<f64> {
    if stacks.len() != volumes.len() || stacks.len() != motions.len() {
        return Err(Error::GeometryMismatch(format!(
            "{} stacks, {} volumes, {} motions",
            stacks.len(),
            volumes.len(),
            motions.len()
        )));
    }
    let mut total = 0.0;
    for ((f, v), u) in stacks.iter().zip(volumes).zip(motions) {
        if f.geometry != u.geometry {
            return Err(Error::GeometryMismatch("stack and motion geometry differ".into()));
        }
        total += data_term(f, v, u)?;
    }
    if lambda > 0.0 {
        for i in 0..volumes.len() {
            for j in i + 1..volumes.len() {
                if volumes[i].dims() != volumes[j].dims() {
                    return Err(Error::GeometryMismatch("volumes differ in size".into()));
                }
                let d: f64 = volumes[i].data().iter().zip(volumes[j].data()).map(|(a, b)| (a - b) * (a - b)).sum();
                total += lambda * d;
            }
        }
    }
    if eps > 0.0 {
        total += eps * volumes.iter().map(|v| v.dot(v)).sum::<f64>();
    }
    Ok(total)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    /// Final `‖b − Ax‖ / ‖b‖`.
    pub residual: f64,
    pub converged: bool,
}

/// Solves `(U*U + (coupling + ε) I) v = U*f + coupling · v̄` by conjugate
/// gradients, starting from `init` (or `v̄`). `coupling` is λ times the number
/// of partner stacks.
pub fn v_update(
    stack: &SliceStack,
    motion: &MotionStack,
    vbar: &Volume,
    coupling: f64,
    cfg: &ReconConfig,
    init: Option<&Volume>,
) -> Result<(Volume, CgReport)> {
    let shift = coupling + cfg.tikhonov_eps;
    if !(coupling >= 0.0 && shift > 0.0) {
        return Err(Error::InvalidConfig("v-update needs lambda > 0 or tikhonov_eps > 0".into()));
    }
    if stack.geometry != motion.geometry {
        return Err(Error::GeometryMismatch("stack and motion geometry differ".into()));
    }
    let dims = vbar.dims();
    motion.geometry.check_volume(dims)?;
    let psf = stack_psf(&stack.geometry);
    let apply = |x: &[f64]| -> Vec<f64> {
        let vol = Volume::from_parts_unchecked(dims, 1.0, x.to_vec());
        let pulled = warp::slice_pull(&vol, motion, &psf).expect("checked geometry");
        let mut y = warp::adjoint(pulled.data(), motion, &psf, dims).into_data();
        y.par_iter_mut().zip(x.par_iter()).for_each(|(a, b)| *a += shift * b);
        y
    };

    let mut b = warp::adjoint(stack.data(), motion, &psf, dims).into_data();
    if coupling > 0.0 {
        b.par_iter_mut().zip(vbar.data().par_iter()).for_each(|(a, v)| *a += coupling * v);
    }
    let mut x = match init {
        Some(v) if v.dims() == dims => v.data().to_vec(),
        Some(_) => return Err(Error::GeometryMismatch("initial volume has the wrong size".into())),
        None => vbar.data().to_vec(),
    };
    let bnorm = grid::dot(&b, &b).sqrt();
    let spacing = vbar.spacing();
    if bnorm == 0.0 {
        let zero = Volume::from_parts_unchecked(dims, spacing, vec![0.0; x.len()]);
        return Ok((zero, CgReport { iterations: 0, residual: 0.0, converged: true }));
    }

    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = grid::dot(&r, &r);
    let mut iterations = 0;
    while iterations < cfg.cg_iters && rr.sqrt() > cfg.cg_tol * bnorm {
        let ap = apply(&p);
        let pap = grid::dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        x.par_iter_mut().zip(p.par_iter()).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(ap.par_iter()).for_each(|(r, a)| *r -= alpha * a);
        let rr_new = grid::dot(&r, &r);
        let beta = rr_new / rr;
        p.par_iter_mut().zip(r.par_iter()).for_each(|(p, r)| *p = r + beta * *p);
        rr = rr_new;
        iterations += 1;
    }
    let residual = rr.sqrt() / bnorm;
    let converged = residual <= cfg.cg_tol;
    if !converged {
        log::debug!("cg stopped after {iterations} iterations at relative residual {residual:.3e}");
    }
    Ok((Volume::from_parts_unchecked(dims, spacing, x), CgReport { iterations, residual, converged }))
}

/// Basis fields of linearized rigid motion at position `q`: rotations about
/// the x, y, z axes through `c`, then unit translations along x, y, z.
pub fn rigid_columns(q: [f64; 3], c: [f64; 3]) -> [[f64; 3]; 6] {
    let r = [q[0] - c[0], q[1] - c[1], q[2] - c[2]];
    [
        [0.0, -r[2], r[1]],
        [r[2], 0.0, -r[0]],
        [-r[1], r[0], 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]
}

/// Residual and Jacobian of one slice at the current motion.
struct SliceLinearization {
    residual: Vec<f64>,
    /// PSF-weighted gradient of the interpolated volume per pixel, i.e. the
    /// derivative of the pulled value w.r.t. the pixel's displacement.
    jac: Vec<[f64; 3]>,
}

fn linearize(stack: &SliceStack, v: &Volume, u: &MotionStack, k: usize) -> SliceLinearization {
    let g = &stack.geometry;
    let psf = stack_psf(g);
    let n = g.pixels_per_slice();
    let dims = v.dims();
    let mut pred = vec![0.0; n];
    let disp = u.slice(k);
    warp::pull_slice(v, g, &psf, k, disp, &mut pred);
    let residual = stack.slice(k).iter().zip(&pred).map(|(f, p)| f - p).collect();
    let mut jac = vec![[0.0; 3]; n];
    for h in 0..g.height {
        for w in 0..g.width {
            let pix = h * g.width + w;
            let d = warp::slice_disp(disp, n, pix);
            let mut acc = [0.0; 3];
            for (t, &tw) in psf.weights().iter().enumerate() {
                let p = warp::tap_position(g, k, h, w, psf.offset(t), d);
                let s = warp::sample_gradient(dims, v.data(), p);
                for a in 0..3 {
                    acc[a] += tw * s[a];
                }
            }
            jac[pix] = acc;
        }
    }
    SliceLinearization { residual, jac }
}

/// Damped Gauss–Newton displacement step (before clipping and line search)
/// for slice `k`, laid out like one slice of a [`MotionStack`]. `None` when
/// the slice carries no gradient information.
pub fn gauss_newton_step(stack: &SliceStack, v: &Volume, u: &MotionStack, k: usize, basis: MotionBasis) -> Option<Vec<f64>> {
    let lin = linearize(stack, v, u, k);
    gn_from_linearization(&stack.geometry, k, &lin, basis, grid::grid_center(v.dims()))
}

fn gn_from_linearization(g: &SliceGeometry, k: usize, lin: &SliceLinearization, basis: MotionBasis, center: [f64; 3]) -> Option<Vec<f64>> {
    let n = g.pixels_per_slice();
    let mut step = vec![0.0; 3 * n];
    match basis {
        MotionBasis::Rigid => {
            let mut a = Matrix6::<f64>::zeros();
            let mut b = Vector6::<f64>::zeros();
            for h in 0..g.height {
                for w in 0..g.width {
                    let pix = h * g.width + w;
                    let cols = rigid_columns(g.pixel_position(k, h, w), center);
                    let jg = lin.jac[pix];
                    let row = Vector6::from_fn(|c, _| cols[c][0] * jg[0] + cols[c][1] * jg[1] + cols[c][2] * jg[2]);
                    a += row * row.transpose();
                    b += row * lin.residual[pix];
                }
            }
            let trace = a.trace();
            if !(trace > 0.0) {
                return None;
            }
            a += Matrix6::identity() * (1e-6 * trace / 6.0);
            let delta = a.cholesky()?.solve(&b);
            for h in 0..g.height {
                for w in 0..g.width {
                    let pix = h * g.width + w;
                    let cols = rigid_columns(g.pixel_position(k, h, w), center);
                    for c in 0..3 {
                        step[c * n + pix] = (0..6).map(|j| cols[j][c] * delta[j]).sum();
                    }
                }
            }
        }
        MotionBasis::Dense => {
            let trace: f64 = lin.jac.iter().map(|j| j.iter().map(|x| x * x).sum::<f64>()).sum();
            if !(trace > 0.0) {
                return None;
            }
            let mu = 1e-6 * trace / (3 * n) as f64;
            for pix in 0..n {
                let jg = lin.jac[pix];
                // (g gᵀ + μI)⁻¹ g r = g r / (|g|² + μ)
                let s = lin.residual[pix] / (jg[0] * jg[0] + jg[1] * jg[1] + jg[2] * jg[2] + mu);
                for c in 0..3 {
                    step[c * n + pix] = jg[c] * s;
                }
            }
        }
    }
    Some(step)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UReport {
    /// Slices whose step was taken (possibly shortened).
    pub accepted: usize,
    /// Slices left unchanged because no step lowered their data term.
    pub rejected: usize,
    /// Slices without usable gradient information.
    pub flagged: Vec<usize>,
}

/// One Gauss–Newton update of every slice's motion against volume `v`.
pub fn u_update(stack: &SliceStack, v: &Volume, u: &MotionStack, cfg: &ReconConfig) -> Result<(MotionStack, UReport)> {
    let g = stack.geometry;
    if g != u.geometry {
        return Err(Error::GeometryMismatch("stack and motion geometry differ".into()));
    }
    g.check_volume(v.dims())?;
    let psf = stack_psf(&g);
    let n = g.pixels_per_slice();
    let center = grid::grid_center(v.dims());
    let mut out = u.clone();

    enum Outcome {
        Accepted,
        Rejected,
        Flagged,
    }
    let outcomes: Vec<Outcome> = out
        .data_mut()
        .par_chunks_mut(3 * n)
        .enumerate()
        .map(|(k, disp)| {
            let lin = linearize(stack, v, u, k);
            let Some(mut step) = gn_from_linearization(&g, k, &lin, cfg.basis, center) else {
                return Outcome::Flagged;
            };
            let peak = step.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if peak > cfg.step_max {
                let s = cfg.step_max / peak;
                step.iter_mut().for_each(|x| *x *= s);
            }
            let f = stack.slice(k);
            let before: f64 = lin.residual.iter().map(|r| r * r).sum();
            let base = disp.to_vec();
            let mut pred = vec![0.0; n];
            let mut alpha = 1.0;
            for _ in 0..=cfg.max_backtracks {
                let cand: Vec<f64> = base.iter().zip(&step).map(|(d, s)| d + alpha * s).collect();
                warp::pull_slice(v, &g, &psf, k, &cand, &mut pred);
                let after: f64 = f.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum();
                if after <= before {
                    disp.copy_from_slice(&cand);
                    return Outcome::Accepted;
                }
                alpha *= cfg.armijo;
            }
            Outcome::Rejected
        })
        .collect();

    let mut report = UReport::default();
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            Outcome::Accepted => report.accepted += 1,
            Outcome::Rejected => report.rejected += 1,
            Outcome::Flagged => report.flagged.push(k),
        }
    }
    Ok((out, report))
}

/// The reconstruction grid implied by a set of stacks.
pub fn infer_dims(stacks: &[SliceStack]) -> Result<Dims> {
    let mut dims: [Option<usize>; 3] = [None; 3];
    let mut set = |a: usize, n: usize, what: &str| -> Result<()> {
        match dims[a] {
            Some(m) if m != n => Err(Error::GeometryMismatch(format!(
                "stacks disagree on the {} extent: {m} vs {n} ({what})",
                Axis::from_index(a as u32).unwrap()
            ))),
            _ => {
                dims[a] = Some(n);
                Ok(())
            }
        }
    };
    for s in stacks {
        let g = &s.geometry;
        let (row, col) = g.axis.in_plane();
        set(row, g.height, "in-plane")?;
        set(col, g.width, "in-plane")?;
    }
    for s in stacks {
        let g = &s.geometry;
        let a = g.axis.index();
        if dims[a].is_none() {
            dims[a] = Some(g.through_plane_extent());
        }
    }
    Ok(dims.map(|d| d.expect("every axis is covered by a stack")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// `"v"` or `"u"`.
    pub kind: String,
    pub stack: usize,
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub dims: Dims,
    pub initial_objective: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub steps: Vec<Step>,
    pub cg: Vec<CgReport>,
    pub sweeps: usize,
    pub flagged_slices: usize,
    /// Rigid-compensated EPE against ground truth, in finest-grid voxels.
    pub epe: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub stacks: usize,
    pub dims: Dims,
    pub levels: Vec<LevelReport>,
    pub holes: usize,
    pub final_epe: Option<f64>,
    pub seconds: f64,
}

impl ReconReport {
    /// True when no accepted step raised the objective at any level.
    pub fn monotone(&self) -> bool {
        self.levels.iter().all(|l| l.objective_trace.windows(2).all(|w| w[1] <= w[0]))
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub motions: Vec<MotionStack>,
    /// Per-stack volumes at the finest level.
    pub volumes: Vec<Volume>,
    pub fused: Volume,
    pub holes: Vec<bool>,
    pub report: ReconReport,
}

impl Reconstruction {
    /// Voxel-wise mean of the per-stack volumes. Unlike `fused`, these are
    /// deconvolved by the CG solves, so noiseless data gives a sharper
    /// estimate; with noise the splat average is usually better.
    pub fn consensus(&self) -> Volume {
        let m = self.volumes.len() as f64;
        let dims = self.volumes[0].dims();
        let data = (0..self.volumes[0].len()).map(|x| self.volumes.iter().map(|v| v.data()[x]).sum::<f64>() / m).collect();
        Volume::from_parts_unchecked(dims, self.volumes[0].spacing(), data)
    }
}

fn mean_of_others(volumes: &[Volume], i: usize) -> Option<Volume> {
    let others: Vec<&Volume> = volumes.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).collect();
    if others.is_empty() {
        return None;
    }
    let dims = others[0].dims();
    let m = others.len() as f64;
    let data = (0..others[0].len()).map(|x| others.iter().map(|v| v.data()[x]).sum::<f64>() / m).collect();
    Some(Volume::from_parts_unchecked(dims, others[0].spacing(), data))
}

/// Normalized splat of all stacks under their motions.
pub fn fuse(stacks: &[SliceStack], motions: &[MotionStack], dims: Dims) -> Result<(Volume, Vec<bool>)> {
    let mut acc: Option<SplatVolume> = None;
    for (s, u) in stacks.iter().zip(motions) {
        let sp = warp::splat_push(s, u, &stack_psf(&s.geometry), dims)?;
        match acc.as_mut() {
            Some(a) => a.accumulate(&sp),
            None => acc = Some(sp),
        }
    }
    let acc = acc.ok_or_else(|| Error::InvalidConfig("no stacks".into()))?;
    Ok(warp::normalize_splat(&acc, warp::default_hole_eps(&acc)))
}

fn initial_volumes(stacks: &[SliceStack], motions: &[MotionStack], dims: Dims) -> Result<Vec<Volume>> {
    let (joint, _) = fuse(stacks, motions, dims)?;
    stacks
        .iter()
        .zip(motions)
        .map(|(s, u)| {
            let sp = warp::splat_push(s, u, &stack_psf(&s.geometry), dims)?;
            let (own, holes) = warp::normalize_splat(&sp, warp::default_hole_eps(&sp));
            let data = own.data().iter().zip(&holes).zip(joint.data()).map(|((&o, &h), &j)| if h { j } else { o }).collect();
            Volume::new(dims, 1.0, data)
        })
        .collect()
}

fn foreground(stack: &SliceStack, threshold: f64) -> Vec<bool> {
    let cut = threshold * stack.max();
    stack.data().iter().map(|&x| x > cut).collect()
}

/// Rigid-compensated EPE of the finest-level motions against ground truth,
/// pooled over all stacks.
pub fn pooled_epe(estimates: &[MotionStack], truth: &[MotionStack], masks: &[Vec<bool>]) -> Result<f64> {
    let mut c = Correspondence::default();
    for ((u, t), m) in estimates.iter().zip(truth).zip(masks) {
        c.push_stacks(u, t, Some(m))?;
    }
    Ok(metrics::epe_points(&c, true)?.0)
}

fn upsample_to_finest(u: &MotionStack, geoms: &[SliceGeometry], level: usize) -> Result<MotionStack> {
    let mut cur = u.clone();
    for l in (0..level).rev() {
        cur = cur.upsample(&geoms[l])?;
    }
    Ok(cur)
}

/// Full coarse-to-fine reconstruction from 1–3 stacks. `truth`, when given,
/// holds the ground-truth motion of every stack and enables EPE reporting.
pub fn reconstruct(stacks: &[SliceStack], cfg: &ReconConfig, truth: Option<&[MotionStack]>) -> Result<Reconstruction> {
    let t0 = Instant::now();
    cfg.validate()?;
    if stacks.is_empty() || stacks.len() > 3 {
        return Err(Error::InvalidConfig(format!("need 1 to 3 stacks, got {}", stacks.len())));
    }
    let dims = match cfg.dims {
        Some(d) => d,
        None => infer_dims(stacks)?,
    };
    grid::check_dims(dims)?;
    for s in stacks {
        s.geometry.check_volume(dims)?;
    }
    if let Some(t) = truth {
        if t.len() != stacks.len() || t.iter().zip(stacks).any(|(m, s)| m.geometry != s.geometry) {
            return Err(Error::GeometryMismatch("ground-truth motion does not match the stacks".into()));
        }
    }
    check_pyramid_depth(&dims, cfg.levels)?;
    let pyramids = stacks.iter().map(|s| build_pyramid(s, cfg.levels)).collect::<Result<Vec<_>>>()?;
    let mut level_dims = vec![dims];
    for _ in 1..cfg.levels {
        level_dims.push(half_dims(*level_dims.last().unwrap()));
    }
    let geoms: Vec<Vec<SliceGeometry>> = pyramids.iter().map(|p| p.levels.iter().map(|s| s.geometry).collect()).collect();
    let masks: Vec<Vec<bool>> = stacks.iter().map(|s| foreground(s, cfg.fg_threshold)).collect();

    let m = stacks.len();
    let coupling = cfg.lambda * (m - 1) as f64;
    let mut motions: Vec<MotionStack> = Vec::new();
    let mut volumes: Vec<Volume> = Vec::new();
    let mut levels = Vec::new();

    for level in (0..cfg.levels).rev() {
        let tl = Instant::now();
        let ldims = level_dims[level];
        let lstacks: Vec<SliceStack> = pyramids.iter().map(|p| p.levels[level].clone()).collect();
        for s in &lstacks {
            s.geometry.check_volume(ldims)?;
        }
        motions = if motions.is_empty() {
            lstacks.iter().map(|s| MotionStack::zeros(s.geometry)).collect()
        } else {
            motions.iter().zip(&lstacks).map(|(u, s)| u.upsample(&s.geometry)).collect::<Result<_>>()?
        };
        volumes = initial_volumes(&lstacks, &motions, ldims)?;

        let obj = |vols: &[Volume], mots: &[MotionStack]| objective(&lstacks, vols, mots, cfg.lambda, cfg.tikhonov_eps);
        let mut current = obj(&volumes, &motions)?;
        let mut report = LevelReport {
            level,
            dims: ldims,
            initial_objective: current,
            objective_trace: vec![current],
            steps: Vec::new(),
            cg: Vec::new(),
            sweeps: 0,
            flagged_slices: 0,
            epe: None,
            seconds: 0.0,
        };

        for sweep in 0..cfg.v_warmup + cfg.outer_iters {
            let start = current;
            for i in 0..m {
                let vbar = mean_of_others(&volumes, i);
                let (cand, cg) = v_update(&lstacks[i], &motions[i], vbar.as_ref().unwrap_or(&volumes[i]), coupling, cfg, Some(&volumes[i]))?;
                report.cg.push(cg);
                let old = std::mem::replace(&mut volumes[i], cand);
                let value = obj(&volumes, &motions)?;
                let accepted = value <= current;
                if accepted {
                    current = value;
                    report.objective_trace.push(current);
                } else {
                    volumes[i] = old;
                }
                report.steps.push(Step { kind: "v".into(), stack: i, objective: value, accepted });

                let gn = if sweep < cfg.v_warmup { 0 } else { cfg.gn_iters };
                for _ in 0..gn {
                    let (cand, ur) = u_update(&lstacks[i], &volumes[i], &motions[i], cfg)?;
                    report.flagged_slices += ur.flagged.len();
                    let old = std::mem::replace(&mut motions[i], cand);
                    let value = obj(&volumes, &motions)?;
                    let accepted = value <= current;
                    if accepted {
                        current = value;
                        report.objective_trace.push(current);
                    } else {
                        motions[i] = old;
                    }
                    report.steps.push(Step { kind: "u".into(), stack: i, objective: value, accepted });
                }
            }
            report.sweeps += 1;
            if sweep >= cfg.v_warmup && start - current <= cfg.tol * start.abs() {
                break;
            }
        }

        if let Some(t) = truth {
            let fine: Vec<MotionStack> = motions.iter().enumerate().map(|(i, u)| upsample_to_finest(u, &geoms[i], level)).collect::<Result<_>>()?;
            report.epe = pooled_epe(&fine, t, &masks).ok();
        }
        report.seconds = tl.elapsed().as_secs_f64();
        log::info!(
            "level {level} {:?}: objective {:.6e} -> {:.6e} in {} sweeps",
            ldims,
            report.initial_objective,
            current,
            report.sweeps
        );
        levels.push(report);
    }

    let (fused, holes) = fuse(stacks, &motions, dims)?;
    let final_epe = levels.last().and_then(|l: &LevelReport| l.epe);
    let report = ReconReport {
        stacks: m,
        dims,
        holes: holes.iter().filter(|&&h| h).count(),
        levels,
        final_epe,
        seconds: t0.elapsed().as_secs_f64(),
    };
    Ok(Reconstruction { motions, volumes, fused, holes, report })
}
