//! Hole filling for normalized splat reconstructions.
//!
//! Known voxels and their indicator weights are block-summed level by level
//! until a level has no empty cell. Coming back up, hole voxels of each level
//! are initialized by clamped trilinear interpolation of the coarser estimate
//! and then relaxed with `passes` Jacobi sweeps of 6-neighbour averaging.
//! Known voxels are never touched, and every filled value is a convex
//! combination of known values.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{block_sum2, linear_index, voxel_count, Dims, Volume};

pub const DEFAULT_PASSES: usize = 8;

struct Level {
    dims: Dims,
    values: Vec<f64>,
    known: Vec<bool>,
}

fn clamped_trilinear(dims: Dims, data: &[f64], p: [f64; 3]) -> f64 {
    let mut idx = [[0usize; 2]; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let x = p[a].clamp(0.0, hi);
        let f = x.floor().min((dims[a].max(2) - 2) as f64).max(0.0);
        idx[a] = [f as usize, (f as usize + 1).min(dims[a] - 1)];
        t[a] = x - f;
    }
    let mut acc = 0.0;
    for (dz, wz) in [1.0 - t[2], t[2]].into_iter().enumerate() {
        for (dy, wy) in [1.0 - t[1], t[1]].into_iter().enumerate() {
            for (dx, wx) in [1.0 - t[0], t[0]].into_iter().enumerate() {
                let w = wx * wy * wz;
                if w != 0.0 {
                    acc += w * data[linear_index(dims, idx[0][dx], idx[1][dy], idx[2][dz])];
                }
            }
        }
    }
    acc
}

fn relax(dims: Dims, values: &mut Vec<f64>, known: &[bool], passes: usize) {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    for _ in 0..passes {
        let src = &*values;
        let next: Vec<f64> = (0..src.len())
            .into_par_iter()
            .map(|i| {
                if known[i] {
                    return src[i];
                }
                let (x, y, z) = (i % nx, (i / nx) % ny, i / plane);
                let mut s = 0.0;
                let mut n = 0.0;
                let mut add = |j: usize| {
                    s += src[j];
                    n += 1.0;
                };
                if x > 0 {
                    add(i - 1);
                }
                if x + 1 < nx {
                    add(i + 1);
                }
                if y > 0 {
                    add(i - nx);
                }
                if y + 1 < ny {
                    add(i + nx);
                }
                if z > 0 {
                    add(i - plane);
                }
                if z + 1 < nz {
                    add(i + plane);
                }
                if n > 0.0 { s / n } else { src[i] }
            })
            .collect();
        *values = next;
    }
}

/// Fills `holes` of `vol`; see the module docs. `holes` must have one entry
/// per voxel.
pub fn fill_holes(vol: &Volume, holes: &[bool], passes: usize) -> Result<Volume> {
    if holes.len() != vol.len() {
        return Err(Error::LengthMismatch { expected: vol.len(), got: holes.len() });
    }
    if passes < 1 {
        return Err(Error::InvalidConfig("passes must be >= 1".into()));
    }
    if !holes.contains(&true) {
        return Ok(vol.clone());
    }
    if holes.iter().all(|&h| h) {
        return Err(Error::AllHoles);
    }

    let mut levels = vec![Level {
        dims: vol.dims(),
        values: vol.data().iter().zip(holes).map(|(&v, &h)| if h { 0.0 } else { v }).collect(),
        known: holes.iter().map(|h| !h).collect(),
    }];
    while levels.last().unwrap().known.contains(&false) {
        let top = levels.last().unwrap();
        let w: Vec<f64> = top.known.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let (dims, ws, _) = block_sum2(top.dims, &w);
        let (_, vs, _) = block_sum2(top.dims, &top.values);
        let values = vs.iter().zip(&ws).map(|(&v, &w)| if w > 0.0 { v / w } else { 0.0 }).collect();
        let known = ws.iter().map(|&w| w > 0.0).collect();
        levels.push(Level { dims, values, known });
    }

    for l in (0..levels.len() - 1).rev() {
        let (coarse, fine) = {
            let (lo, hi) = levels.split_at_mut(l + 1);
            (&hi[0], &mut lo[l])
        };
        let dims = fine.dims;
        let init: Vec<f64> = (0..voxel_count(dims))
            .into_par_iter()
            .map(|i| {
                if fine.known[i] {
                    return fine.values[i];
                }
                let (x, y, z) = (i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]));
                let p = [x, y, z].map(|f| (f as f64 - 0.5) / 2.0);
                clamped_trilinear(coarse.dims, &coarse.values, p)
            })
            .collect();
        fine.values = init;
        relax(dims, &mut fine.values, &fine.known, passes);
    }

    let filled = levels.swap_remove(0).values;
    // Known voxels are copied from the input so they stay bit-identical.
    let data = vol.data().iter().zip(holes).zip(filled).map(|((&v, &h), f)| if h { f } else { v }).collect();
    Volume::new(vol.dims(), vol.spacing(), data)
}
