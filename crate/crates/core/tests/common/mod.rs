//! Shared generators and reference operators for the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svr_core::grid::voxel_count;
use svr_core::{Axis, Dims, MotionStack, SliceGeometry, SliceStack, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn random_dims(rng: &mut ChaCha8Rng, max: usize) -> Dims {
    [0; 3].map(|_| rng.random_range(2..=max))
}

pub fn random_volume(rng: &mut ChaCha8Rng, dims: Dims) -> Volume {
    Volume::new(dims, 1.0, (0..voxel_count(dims)).map(|_| uniform(rng, -1.0, 1.0)).collect()).unwrap()
}

pub fn random_geometry(rng: &mut ChaCha8Rng, dims: Dims) -> SliceGeometry {
    let axis = Axis::ALL[rng.random_range(0..3)];
    let n = dims[axis.index()];
    let stride = rng.random_range(1..=n.min(3));
    let slab = rng.random_range(1..=4);
    SliceGeometry::for_volume(dims, axis, stride, slab).unwrap()
}

/// Per-pixel displacements with every vector shorter than `max_norm`.
pub fn random_motion(rng: &mut ChaCha8Rng, g: SliceGeometry, max_norm: f64) -> MotionStack {
    let c = max_norm / 3f64.sqrt() * 0.999;
    MotionStack::from_fn(g, |_, _| [0; 3].map(|_| uniform(rng, -c, c)))
}

pub fn random_stack(rng: &mut ChaCha8Rng, g: SliceGeometry) -> SliceStack {
    SliceStack::new(g, (0..g.len()).map(|_| uniform(rng, -1.0, 1.0)).collect()).unwrap()
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = Quaternion::new(
        uniform(rng, -1.0, 1.0),
        uniform(rng, -1.0, 1.0),
        uniform(rng, -1.0, 1.0),
        uniform(rng, -1.0, 1.0),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Slicing operator as explicit `(row, column, weight)` triplets, built
/// from first principles: every PSF tap of every pixel contributes the eight
/// trilinear corner weights of its displaced position, dropping corners
/// outside the grid.
pub struct OperatorMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl OperatorMatrix {
    pub fn build(g: SliceGeometry, motion: &MotionStack, psf_weights: &[f64], dims: Dims) -> Self {
        let a = g.axis.index();
        let width = psf_weights.len();
        let mut entries = Vec::new();
        let mut row = 0;
        for k in 0..g.slices {
            for h in 0..g.height {
                for w in 0..g.width {
                    let d = motion.displacement(k, h, w);
                    let base = g.pixel_position(k, h, w);
                    for (t, &pw) in psf_weights.iter().enumerate() {
                        let mut p = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
                        p[a] += t as f64 - (width as f64 - 1.0) / 2.0;
                        let f = p.map(f64::floor);
                        for corner in 0..8 {
                            let mut q = [0i64; 3];
                            let mut wt = pw;
                            for ax in 0..3 {
                                let bit = (corner >> ax) & 1;
                                let frac = p[ax] - f[ax];
                                q[ax] = f[ax] as i64 + bit as i64;
                                wt *= if bit == 1 { frac } else { 1.0 - frac };
                            }
                            let inside = (0..3).all(|ax| q[ax] >= 0 && q[ax] < dims[ax] as i64);
                            if inside && wt != 0.0 {
                                let col = q[0] as usize + dims[0] * (q[1] as usize + dims[1] * q[2] as usize);
                                entries.push((row, col, wt));
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Self { rows: g.len(), cols: voxel_count(dims), entries }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for &(r, c, w) in &self.entries {
            y[r] += w * x[c];
        }
        y
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols];
        for &(r, c, w) in &self.entries {
            x[c] += w * y[r];
        }
        x
    }

    pub fn dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.rows, self.cols);
        for &(r, c, w) in &self.entries {
            m[(r, c)] += w;
        }
        m
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
