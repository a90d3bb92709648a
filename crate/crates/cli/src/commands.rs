use std::path::{Path, PathBuf};

use serde_json::json;
use svr_core::metrics::{self, MetricReport};
use svr_core::rigid::Correspondence;
use svr_core::simulate::{blob_phantom, simulate as run_simulation};
use svr_core::solver::{self, stack_psf};
use svr_core::warp::{self, splat_push};
use svr_core::{io, Axis, MotionStack, SliceStack, SplatVolume};

use crate::config::{JobConfig, Overrides};
use crate::{EvaluateArgs, Failure, InpaintArgs, PhantomArgs, ReconstructArgs, SimulateArgs, SplatArgs};

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::usage(format!("missing {flag}")))
}

fn parse_geometry(text: Option<&str>) -> Result<Option<(Axis, f64, usize)>, Failure> {
    let Some(s) = text else { return Ok(None) };
    let bad = || Failure::usage(format!("stack geometry '{s}': expected axis,spacing,slab"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [axis, spacing, slab] = parts[..] else { return Err(bad()) };
    Ok(Some((axis.parse()?, spacing.parse().map_err(|_| bad())?, slab.parse().map_err(|_| bad())?)))
}

fn read_stacks(paths: &[PathBuf], geometry: Option<&str>) -> Result<Vec<SliceStack>, Failure> {
    let fallback = parse_geometry(geometry)?;
    paths.iter().map(|p| Ok(io::read_stack(p, fallback)?)).collect()
}

fn read_motions(paths: &[PathBuf]) -> Result<Vec<MotionStack>, Failure> {
    paths.iter().map(|p| Ok(io::read_motion(p)?)).collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let mut flags = Overrides::default();
    flags
        .set("in", a.input)
        .set("out_stack", a.out_stack)
        .set("out_motion", a.out_motion)
        .set("sidecar", a.sidecar)
        .set("axis", a.axis)
        .set("seed", a.seed)
        .set("knots_min", a.knots_min)
        .set("knots_max", a.knots_max)
        .set("euler_max", a.euler_max)
        .set("trans_max", a.trans_max)
        .set("psf_width", a.psf)
        .set("stride", a.stride)
        .set("noise_sigma", a.noise)
        .set("gamma_lo", a.gamma_lo)
        .set("gamma_hi", a.gamma_hi)
        .set("interleave", a.interleave);
    let job = JobConfig::resolve(a.config.as_deref(), flags)?;
    let input = require(&job.paths.input, "input volume (--in)")?;
    let out_stack = require(&job.paths.out_stack, "--out-stack")?;
    let out_motion = require(&job.paths.out_motion, "--out-motion")?;

    let vol = io::read_volume(input)?;
    let (stack, motion, trajectory) = run_simulation(&vol, &job.sim)?;
    io::write_stack(out_stack, &stack)?;
    io::write_motion(out_motion, &motion)?;
    let sidecar = job.paths.sidecar.clone().unwrap_or_else(|| out_stack.with_extension("json"));
    write_json(
        &sidecar,
        &json!({
            "config": job.resolved,
            "seed": job.sim.seed,
            "geometry": stack.geometry,
            "trajectory": trajectory,
        }),
    )?;
    println!("{}", json!({ "stack": out_stack, "motion": out_motion, "sidecar": sidecar, "slices": stack.geometry.slices }));
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> Result<(), Failure> {
    let mut flags = Overrides::default();
    flags
        .set_list("stacks", &a.stacks)
        .set_list("truth_motion", &a.truth_motion)
        .set("out_dir", a.out_dir)
        .set("stack_geometry", a.stack_geometry)
        .set("lambda", a.lambda)
        .set("levels", a.levels)
        .set("outer_iters", a.outer_iters)
        .set("v_warmup", a.v_warmup)
        .set("cg_iters", a.cg_iters)
        .set("cg_tol", a.cg_tol)
        .set("gn_iters", a.gn_iters)
        .set("step_max", a.step_max)
        .set("armijo", a.armijo)
        .set("max_backtracks", a.max_backtracks)
        .set("tikhonov_eps", a.tikhonov_eps)
        .set("tol", a.tol)
        .set("basis", a.basis)
        .set("fg_threshold", a.fg_threshold)
        .set("dims", a.dims);
    let job = JobConfig::resolve(a.config.as_deref(), flags)?;
    let p = &job.paths;
    if p.stacks.is_empty() {
        return Err(Failure::usage("no input stacks (--stack)"));
    }
    if !p.truth_motion.is_empty() && p.truth_motion.len() != p.stacks.len() {
        return Err(Failure::usage(format!("{} stacks but {} truth motions", p.stacks.len(), p.truth_motion.len())));
    }
    let out_dir = require(&p.out_dir, "--out-dir")?;
    let stacks = read_stacks(&p.stacks, p.stack_geometry.as_deref())?;
    let truth = read_motions(&p.truth_motion)?;

    let rec = solver::reconstruct(&stacks, &job.recon, (!truth.is_empty()).then_some(&truth[..]))?;
    std::fs::create_dir_all(out_dir)?;
    io::write_volume(out_dir.join("fused.nii"), &rec.fused)?;
    io::write_volume(out_dir.join("consensus.nii"), &rec.consensus())?;
    io::write_mask(out_dir.join("holes.nii"), rec.fused.dims(), &rec.holes)?;
    for (i, u) in rec.motions.iter().enumerate() {
        io::write_motion(out_dir.join(format!("motion_{i}.svrm")), u)?;
    }
    let hole_fraction = rec.report.holes as f64 / rec.holes.len() as f64;
    write_json(
        &out_dir.join("report.json"),
        &json!({ "config": job.resolved, "hole_fraction": hole_fraction, "report": rec.report }),
    )?;
    println!(
        "{}",
        json!({
            "stacks": stacks.len(),
            "dims": rec.report.dims,
            "holes": rec.report.holes,
            "hole_fraction": hole_fraction,
            "final_epe": rec.report.final_epe,
            "monotone": rec.report.monotone(),
            "seconds": rec.report.seconds,
        })
    );
    Ok(())
}

pub fn splat(a: SplatArgs) -> Result<(), Failure> {
    let stacks = read_stacks(&a.stacks, a.stack_geometry.as_deref())?;
    let motions = if a.motions.is_empty() {
        stacks.iter().map(|s| MotionStack::zeros(s.geometry)).collect()
    } else if a.motions.len() == stacks.len() {
        read_motions(&a.motions)?
    } else {
        return Err(Failure::usage(format!("{} stacks but {} motions", stacks.len(), a.motions.len())));
    };
    let dims = match a.dims {
        Some(d) => d,
        None => solver::infer_dims(&stacks)?,
    };
    let mut acc: Option<SplatVolume> = None;
    for (s, u) in stacks.iter().zip(&motions) {
        let sp = splat_push(s, u, &stack_psf(&s.geometry), dims)?;
        match acc.as_mut() {
            Some(total) => total.accumulate(&sp),
            None => acc = Some(sp),
        }
    }
    let acc = acc.expect("at least one stack");
    let (vol, holes) = warp::normalize_splat(&acc, warp::default_hole_eps(&acc));
    io::write_volume(&a.out, &vol)?;
    if let Some(p) = &a.out_holes {
        io::write_mask(p, dims, &holes)?;
    }
    let n = holes.iter().filter(|&&h| h).count();
    println!("{}", json!({ "dims": dims, "holes": n, "hole_fraction": n as f64 / holes.len() as f64 }));
    Ok(())
}

pub fn inpaint(a: InpaintArgs) -> Result<(), Failure> {
    let vol = io::read_volume(&a.input)?;
    let (dims, holes) = io::read_mask(&a.holes)?;
    if dims != vol.dims() {
        return Err(svr_core::Error::GeometryMismatch(format!("mask is {dims:?}, volume is {:?}", vol.dims())).into());
    }
    let filled = svr_core::inpaint::fill_holes(&vol, &holes, a.passes)?;
    io::write_volume(&a.out, &filled)?;
    println!("{}", json!({ "filled": holes.iter().filter(|&&h| h).count() }));
    Ok(())
}

fn motion_metrics(
    est: &[MotionStack],
    truth: &[MotionStack],
    masks: Option<&[Vec<bool>]>,
    report: &mut MetricReport,
) -> Result<(), Failure> {
    let mut c = Correspondence::default();
    let (mut ape_sum, mut slices) = (0.0, 0usize);
    for (i, (u, v)) in est.iter().zip(truth).enumerate() {
        c.push_stacks(u, v, masks.map(|m| &m[i][..]))?;
        let g = u.geometry;
        if g.height >= 2 && g.width >= 2 {
            ape_sum += metrics::ape(u, v)? * g.slices as f64;
            slices += g.slices;
        }
    }
    if c.is_empty() {
        return Err(svr_core::Error::EmptyMask.into());
    }
    let n = c.len() as f64;
    let mse = (0..c.len()).map(|i| (0..3).map(|a| (c.u[i][a] - c.v[i][a]).powi(2)).sum::<f64>()).sum::<f64>() / n;
    report.mse = Some(mse);
    report.epe = Some(metrics::epe_points(&c, false)?.0);
    report.epe_compensated = match metrics::epe_points(&c, true) {
        Ok((e, _)) => Some(e),
        Err(svr_core::Error::DegenerateFit(_)) => None,
        Err(e) => return Err(e.into()),
    };
    report.ape = (slices > 0).then(|| ape_sum / slices as f64);
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let mut report = MetricReport::default();
    let est = read_motions(&a.motions)?;
    let stacks = read_stacks(&a.stacks, a.stack_geometry.as_deref())?;
    if !stacks.is_empty() && stacks.len() != est.len() {
        return Err(Failure::usage(format!("{} stacks but {} motions", stacks.len(), est.len())));
    }
    let masks: Option<Vec<Vec<bool>>> = match a.fg_threshold {
        Some(t) if !(0.0..1.0).contains(&t) => return Err(Failure::usage("--fg-threshold must lie in [0, 1)")),
        Some(_) if stacks.is_empty() => return Err(Failure::usage("--fg-threshold needs --stack")),
        Some(t) => Some(stacks.iter().map(|s| s.data().iter().map(|&x| x > t * s.max()).collect()).collect()),
        None => None,
    };
    if !a.truth_motion.is_empty() {
        if a.truth_motion.len() != est.len() {
            return Err(Failure::usage(format!("{} motions but {} truth motions", est.len(), a.truth_motion.len())));
        }
        motion_metrics(&est, &read_motions(&a.truth_motion)?, masks.as_deref(), &mut report)?;
    }
    let volume = a.volume.as_ref().map(io::read_volume).transpose()?;
    if let (Some(v), Some(t)) = (&volume, &a.truth_volume) {
        let truth = io::read_volume(t)?;
        if truth.dims() != v.dims() {
            return Err(svr_core::Error::GeometryMismatch(format!("volume {:?} vs reference {:?}", v.dims(), truth.dims())).into());
        }
        let mask = a.mask.as_ref().map(io::read_mask).transpose()?.map(|(_, m)| m);
        report.psnr_volume = Some(metrics::psnr_ref(v.data(), truth.data(), mask.as_deref())?);
    }
    if let (Some(v), false) = (&volume, stacks.is_empty()) {
        let (mut acquired, mut resliced) = (Vec::new(), Vec::new());
        for (s, u) in stacks.iter().zip(&est) {
            acquired.extend_from_slice(s.data());
            resliced.extend_from_slice(warp::slice_pull(v, u, &stack_psf(&s.geometry))?.data());
        }
        report.psnr_slices = Some(metrics::psnr_ref(&resliced, &acquired, None)?);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn phantom(a: PhantomArgs) -> Result<(), Failure> {
    svr_core::grid::check_dims(a.dims)?;
    io::write_volume(&a.out, &blob_phantom(a.dims, a.blobs, a.seed))?;
    Ok(())
}
