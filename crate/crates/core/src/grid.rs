//! Volumes, coordinate lattices, gradients and factor-2 pyramids.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Voxel counts `(nx, ny, nz)`.
pub type Dims = [usize; 3];

/// Number of voxels of a grid.
#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Linear index of voxel `(i, j, k)`, x fastest.
#[inline]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

/// Geometric center of a grid in voxel coordinates.
pub fn grid_center(dims: Dims) -> [f64; 3] {
    [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ]
}

/// A 3D scalar grid with isotropic voxel spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: f64,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: f64, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidDims(format!("voxel spacing {spacing} must be positive")));
        }
        let expected = voxel_count(dims);
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(dims.iter().all(|&n| n >= 1), "dims must be positive");
        Self { dims, spacing: 1.0, data: vec![value; voxel_count(dims)] }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        assert!(dims.iter().all(|&n| n >= 1), "dims must be positive");
        let mut data = Vec::with_capacity(voxel_count(dims));
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, spacing: 1.0, data }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        assert!(spacing.is_finite() && spacing > 0.0);
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the samples. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dot(&self, other: &Volume) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        dot(&self.data, &other.data)
    }

    pub(crate) fn from_parts_unchecked(dims: Dims, spacing: f64, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), voxel_count(dims));
        Self { dims, spacing, data }
    }
}

/// Rejects grids with a zero extent.
pub fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&n| n == 0) {
        return Err(Error::InvalidDims(format!("{dims:?} has a zero component")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Voxel coordinates of every grid point, in linear (x-fastest) order.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordLattice {
    pub dims: Dims,
    pub points: Vec<[f64; 3]>,
}

impl CoordLattice {
    pub fn new(dims: Dims) -> Self {
        let mut points = Vec::with_capacity(voxel_count(dims));
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    points.push([i as f64, j as f64, k as f64]);
                }
            }
        }
        Self { dims, points }
    }
}

/// Finite-difference gradient along x, y and z.
///
/// Central differences inside the grid, one-sided at the faces. A dimension of
/// extent 1 has zero derivative.
pub fn gradient(vol: &Volume) -> (Volume, Volume, Volume) {
    let dims = vol.dims;
    let g = |axis: usize| {
        let mut out = vec![0.0; vol.len()];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let n = dims[axis];
        let plane = dims[0] * dims[1];
        out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let idx = linear_index(dims, i, j, k);
                    let pos = [i, j, k][axis];
                    let d = vol.data.as_slice();
                    slab[i + dims[0] * j] = if n == 1 {
                        0.0
                    } else if pos == 0 {
                        d[idx + stride] - d[idx]
                    } else if pos == n - 1 {
                        d[idx] - d[idx - stride]
                    } else {
                        0.5 * (d[idx + stride] - d[idx - stride])
                    };
                }
            }
        });
        Volume::from_parts_unchecked(dims, vol.spacing, out)
    };
    (g(0), g(1), g(2))
}

/// `ceil(n / 2)` for every component.
pub fn half_dims(dims: Dims) -> Dims {
    [dims[0].div_ceil(2), dims[1].div_ceil(2), dims[2].div_ceil(2)]
}

/// Sums (and counts) `src` over 2x2x2 blocks. Returns `(sums, counts)` on the
/// half-resolution grid.
pub(crate) fn block_sum2(dims: Dims, src: &[f64]) -> (Dims, Vec<f64>, Vec<f64>) {
    let out_dims = half_dims(dims);
    let mut sums = vec![0.0; voxel_count(out_dims)];
    let mut counts = vec![0.0; voxel_count(out_dims)];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let o = linear_index(out_dims, i / 2, j / 2, k / 2);
                sums[o] += src[linear_index(dims, i, j, k)];
                counts[o] += 1.0;
            }
        }
    }
    (out_dims, sums, counts)
}

/// Halves the resolution by averaging 2x2x2 blocks. Blocks cut by an odd
/// dimension are averaged over the voxels they contain.
pub fn downsample2(vol: &Volume) -> Volume {
    let (out_dims, mut sums, counts) = block_sum2(vol.dims, &vol.data);
    for (s, c) in sums.iter_mut().zip(&counts) {
        *s /= c;
    }
    Volume::from_parts_unchecked(out_dims, vol.spacing * 2.0, sums)
}

/// Something that can be coarsened by a factor of two.
pub trait Pyramidal: Sized {
    fn downsample2(&self) -> Self;
    /// The extents that shrink under [`Pyramidal::downsample2`].
    fn extents(&self) -> Vec<usize>;
}

impl Pyramidal for Volume {
    fn downsample2(&self) -> Self {
        downsample2(self)
    }

    fn extents(&self) -> Vec<usize> {
        self.dims.to_vec()
    }
}

/// Multi-resolution stack, level 0 finest.
#[derive(Clone, Debug)]
pub struct Pyramid<T> {
    pub levels: Vec<T>,
    pub factor: usize,
}

impl<T> Pyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> &T {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &T {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Extent of `n` after `levels - 1` halvings.
pub fn coarsest_extent(n: usize, levels: usize) -> usize {
    (1..levels).fold(n, |m, _| m.div_ceil(2))
}

/// Checks that `levels` halvings of every extent stay at or above 4.
pub fn check_pyramid_depth(extents: &[usize], levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
    }
    for (dim, &n) in extents.iter().enumerate() {
        let size = coarsest_extent(n, levels);
        if size < 4 {
            return Err(Error::PyramidTooDeep { levels, dim, size });
        }
    }
    Ok(())
}

/// Builds a pyramid whose level `l` is `downsample2` applied `l` times.
pub fn build_pyramid<T: Pyramidal + Clone>(base: &T, levels: usize) -> Result<Pyramid<T>> {
    check_pyramid_depth(&base.extents(), levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(base.clone());
    for _ in 1..levels {
        let next = out.last().unwrap().downsample2();
        out.push(next);
    }
    Ok(Pyramid { levels: out, factor: 2 })
}
