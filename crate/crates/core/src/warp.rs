//! Slice geometry and the slicing / splatting operator pair.
//!
//! A slice pixel `(k, h, w)` sits at a nominal 3D position on the
//! reconstruction grid (see [`SliceGeometry::pixel_position`]). Each pixel is
//! read through a 1D PSF along the slicing axis: tap `t` is offset by
//! `psf.offset(t)` voxels from the slice plane. The per-pixel displacement of
//! the [`MotionStack`] is added to every tap, and the volume is sampled with
//! trilinear weights. Samples outside the grid read zero; in the adjoint the
//! corresponding weight is dropped, so `slice_pull` and `splat_push` are exact
//! transposes of each other.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, Dims, Pyramidal, Volume};

/// Axis along which slices are stacked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// Index of the through-plane direction (0 = x, 1 = y, 2 = z).
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: u32) -> Option<Axis> {
        match i {
            0 => Some(Axis::X),
            1 => Some(Axis::Y),
            2 => Some(Axis::Z),
            _ => None,
        }
    }

    /// Grid axes spanned by slice rows and columns: `(row, col)`.
    ///
    /// z-slices: rows along y, columns along x. y-slices: rows along z,
    /// columns along x. x-slices: rows along z, columns along y.
    pub fn in_plane(self) -> (usize, usize) {
        match self {
            Axis::X => (2, 1),
            Axis::Y => (2, 0),
            Axis::Z => (1, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            _ => Err(Error::InvalidConfig(format!("unknown axis '{s}' (expected x, y or z)"))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Placement of a stack of slices on the reconstruction grid.
///
/// Slice `k` lies on the plane `offset + k * spacing` along `axis`. Stacks
/// built with [`SliceGeometry::new`] use `offset = (slab - 1) / 2`, so the
/// taps of a `slab`-wide boxcar land on whole voxels `k*spacing ..
/// k*spacing + slab - 1`. Coarsened geometries carry the rescaled offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGeometry {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub axis: Axis,
    pub spacing: f64,
    pub slab: usize,
    pub offset: f64,
}

impl SliceGeometry {
    pub fn new(
        slices: usize,
        height: usize,
        width: usize,
        axis: Axis,
        spacing: f64,
        slab: usize,
    ) -> Result<Self> {
        let g = Self { slices, height, width, axis, spacing, slab, offset: default_offset(slab) };
        g.validate()?;
        Ok(g)
    }

    /// Geometry of a stack sampled every `stride` voxels from a volume of
    /// `dims`. A trailing partial stride is dropped.
    pub fn for_volume(dims: Dims, axis: Axis, stride: usize, slab: usize) -> Result<Self> {
        grid::check_dims(dims)?;
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be at least 1".into()));
        }
        let (row, col) = axis.in_plane();
        let slices = dims[axis.index()] / stride;
        if slices == 0 {
            return Err(Error::GeometryMismatch(format!(
                "axis {axis} has {} voxels, fewer than the stride {stride}",
                dims[axis.index()]
            )));
        }
        Self::new(slices, dims[row], dims[col], axis, stride as f64, slab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidDims(format!(
                "stack {}x{}x{} has a zero extent",
                self.slices, self.height, self.width
            )));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(Error::InvalidConfig(format!("slice spacing {} must be positive", self.spacing)));
        }
        if self.slab == 0 {
            return Err(Error::InvalidConfig("slab must be at least 1".into()));
        }
        if !self.offset.is_finite() {
            return Err(Error::InvalidConfig("slice offset must be finite".into()));
        }
        Ok(())
    }

    pub fn pixels_per_slice(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.slices * self.pixels_per_slice()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of the slice plane along the slicing axis.
    pub fn plane(&self, k: usize) -> f64 {
        self.offset + k as f64 * self.spacing
    }

    /// Nominal position of pixel `(k, h, w)` in voxel coordinates.
    #[inline]
    pub fn pixel_position(&self, k: usize, h: usize, w: usize) -> [f64; 3] {
        let (row, col) = self.axis.in_plane();
        let mut p = [0.0; 3];
        p[row] = h as f64;
        p[col] = w as f64;
        p[self.axis.index()] = self.plane(k);
        p
    }

    /// Nominal positions of every pixel, slice-major then row-major.
    pub fn positions(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.slices {
            for h in 0..self.height {
                for w in 0..self.width {
                    out.push(self.pixel_position(k, h, w));
                }
            }
        }
        out
    }

    /// Checks that the in-plane extents agree with a volume of `dims`.
    pub fn check_volume(&self, dims: Dims) -> Result<()> {
        let (row, col) = self.axis.in_plane();
        if dims[row] != self.height || dims[col] != self.width {
            return Err(Error::GeometryMismatch(format!(
                "{}-stack of {}x{} pixels does not fit volume {:?}",
                self.axis, self.height, self.width, dims
            )));
        }
        Ok(())
    }

    /// Volume extent along the slicing axis implied by the stack.
    pub fn through_plane_extent(&self) -> usize {
        let last = self.plane(self.slices - 1) + (self.slab as f64 - 1.0) / 2.0;
        (last.floor() as usize + 1).max((self.slices as f64 * self.spacing).round() as usize)
    }

    /// The geometry of this stack on a grid with half the resolution.
    pub fn coarsen(&self) -> Self {
        Self {
            slices: self.slices,
            height: self.height.div_ceil(2),
            width: self.width.div_ceil(2),
            axis: self.axis,
            spacing: self.spacing / 2.0,
            slab: self.slab.div_ceil(2),
            offset: (self.offset - 0.5) / 2.0,
        }
    }

    fn same_as(&self, other: &Self, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!("{what}: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

fn default_offset(slab: usize) -> f64 {
    (slab.max(1) as f64 - 1.0) / 2.0
}

/// K acquired slices of `height x width` pixels, slice-major, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub geometry: SliceGeometry,
    data: Vec<f64>,
}

impl SliceStack {
    pub fn new(geometry: SliceGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::LengthMismatch { expected: geometry.len(), got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: SliceGeometry) -> Self {
        Self { geometry, data: vec![0.0; geometry.len()] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.geometry.pixels_per_slice();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn from_parts_unchecked(geometry: SliceGeometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), geometry.len());
        Self { geometry, data }
    }
}

impl Pyramidal for SliceStack {
    fn downsample2(&self) -> Self {
        let g = self.geometry;
        let c = g.coarsen();
        let mut data = vec![0.0; c.len()];
        for k in 0..g.slices {
            let (sums, counts) = block_mean_2d(self.slice(k), g.height, g.width);
            let out = &mut data[k * c.pixels_per_slice()..(k + 1) * c.pixels_per_slice()];
            for ((o, s), n) in out.iter_mut().zip(&sums).zip(&counts) {
                *o = s / n;
            }
        }
        Self { geometry: c, data }
    }

    fn extents(&self) -> Vec<usize> {
        vec![self.geometry.height, self.geometry.width]
    }
}

fn block_mean_2d(src: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let (ch, cw) = (height.div_ceil(2), width.div_ceil(2));
    let mut sums = vec![0.0; ch * cw];
    let mut counts = vec![0.0; ch * cw];
    for h in 0..height {
        for w in 0..width {
            let o = (h / 2) * cw + w / 2;
            sums[o] += src[h * width + w];
            counts[o] += 1.0;
        }
    }
    (sums, counts)
}

/// Per-slice dense displacement fields on the slice lattice.
///
/// Layout: slice-major, then component (x, y, z), then row-major pixels.
/// Displacements are in voxel units of the reconstruction grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionStack {
    pub geometry: SliceGeometry,
    data: Vec<f64>,
}

impl MotionStack {
    pub fn new(geometry: SliceGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        let expected = 3 * geometry.len();
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: SliceGeometry) -> Self {
        Self { geometry, data: vec![0.0; 3 * geometry.len()] }
    }

    /// Builds a field by evaluating `f(k, position)` at every nominal pixel
    /// position.
    pub fn from_fn(geometry: SliceGeometry, mut f: impl FnMut(usize, [f64; 3]) -> [f64; 3]) -> Self {
        let mut m = Self::zeros(geometry);
        for k in 0..geometry.slices {
            for h in 0..geometry.height {
                for w in 0..geometry.width {
                    let d = f(k, geometry.pixel_position(k, h, w));
                    m.set(k, h, w, d);
                }
            }
        }
        m
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The `3 x height x width` block of slice `k`.
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = 3 * self.geometry.pixels_per_slice();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = 3 * self.geometry.pixels_per_slice();
        &mut self.data[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn displacement(&self, k: usize, h: usize, w: usize) -> [f64; 3] {
        let n = self.geometry.pixels_per_slice();
        let base = 3 * n * k + h * self.geometry.width + w;
        [self.data[base], self.data[base + n], self.data[base + 2 * n]]
    }

    pub fn set(&mut self, k: usize, h: usize, w: usize, d: [f64; 3]) {
        let n = self.geometry.pixels_per_slice();
        let base = 3 * n * k + h * self.geometry.width + w;
        self.data[base] = d[0];
        self.data[base + n] = d[1];
        self.data[base + 2 * n] = d[2];
    }

    /// Displacements in pixel order (slice-major, row-major) as 3-vectors.
    pub fn vectors(&self) -> Vec<[f64; 3]> {
        let g = self.geometry;
        let mut out = Vec::with_capacity(g.len());
        for k in 0..g.slices {
            for h in 0..g.height {
                for w in 0..g.width {
                    out.push(self.displacement(k, h, w));
                }
            }
        }
        out
    }

    /// Resamples a field defined on `fine.coarsen()` onto `fine`: bilinear in
    /// the slice plane (linearly extrapolated at the borders, so affine fields
    /// are reproduced exactly), displacements scaled by 2.
    pub fn upsample(&self, fine: &SliceGeometry) -> Result<Self> {
        self.geometry.same_as(&fine.coarsen(), "upsample target is not the refinement of this field")?;
        let c = self.geometry;
        let mut out = Self::zeros(*fine);
        let interp_axis = |pos: usize, n: usize| -> (usize, usize, f64) {
            let x = (pos as f64 - 0.5) / 2.0;
            if n == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (x.floor().max(0.0) as usize).min(n - 2);
            (i0, i0 + 1, x - i0 as f64)
        };
        let cn = c.pixels_per_slice();
        for k in 0..fine.slices {
            let src = self.slice(k);
            for h in 0..fine.height {
                let (h0, h1, th) = interp_axis(h, c.height);
                for w in 0..fine.width {
                    let (w0, w1, tw) = interp_axis(w, c.width);
                    let mut d = [0.0; 3];
                    for (comp, dc) in d.iter_mut().enumerate() {
                        let f = |hh: usize, ww: usize| src[comp * cn + hh * c.width + ww];
                        let top = (1.0 - tw) * f(h0, w0) + tw * f(h0, w1);
                        let bot = (1.0 - tw) * f(h1, w0) + tw * f(h1, w1);
                        *dc = 2.0 * ((1.0 - th) * top + th * bot);
                    }
                    out.set(k, h, w, d);
                }
            }
        }
        Ok(out)
    }
}

impl Pyramidal for MotionStack {
    /// Block-averages each displacement component in-plane and halves it.
    fn downsample2(&self) -> Self {
        let g = self.geometry;
        let c = g.coarsen();
        let (n, cn) = (g.pixels_per_slice(), c.pixels_per_slice());
        let mut data = vec![0.0; 3 * c.len()];
        for k in 0..g.slices {
            for comp in 0..3 {
                let src = &self.data[3 * n * k + comp * n..3 * n * k + (comp + 1) * n];
                let (sums, counts) = block_mean_2d(src, g.height, g.width);
                let out = &mut data[3 * cn * k + comp * cn..3 * cn * k + (comp + 1) * cn];
                for ((o, s), m) in out.iter_mut().zip(&sums).zip(&counts) {
                    *o = 0.5 * s / m;
                }
            }
        }
        Self { geometry: c, data }
    }

    fn extents(&self) -> Vec<usize> {
        vec![self.geometry.height, self.geometry.width]
    }
}

/// Through-plane point spread function: `width` taps at voxel offsets
/// `-(width-1)/2, ..., (width-1)/2` from the slice plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    weights: Vec<f64>,
}

impl Psf {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidConfig("PSF needs at least one tap".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("PSF weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("PSF weights sum to {sum}, expected 1")));
        }
        Ok(Self { weights })
    }

    /// Uniform boxcar of `width` taps.
    pub fn boxcar(width: usize) -> Self {
        assert!(width >= 1, "boxcar width must be at least 1");
        Self { weights: vec![1.0 / width as f64; width] }
    }

    pub fn width(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn offset(&self, tap: usize) -> f64 {
        tap as f64 - (self.width() as f64 - 1.0) / 2.0
    }

    fn taps(&self) -> Vec<(f64, f64)> {
        (0..self.width()).map(|t| (self.offset(t), self.weights[t])).collect()
    }
}

/// Accumulated splat: intensity sums and the matching weight sums.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatVolume {
    pub values: Volume,
    pub weights: Volume,
}

impl SplatVolume {
    pub fn dims(&self) -> Dims {
        self.values.dims()
    }

    /// Adds another splat on the same grid.
    pub fn accumulate(&mut self, other: &SplatVolume) {
        assert_eq!(self.dims(), other.dims());
        for (a, b) in self.values.data_mut().iter_mut().zip(other.values.data()) {
            *a += b;
        }
        for (a, b) in self.weights.data_mut().iter_mut().zip(other.weights.data()) {
            *a += b;
        }
    }
}

/// Calls `f(index, weight)` for every in-bounds trilinear corner of `p`
/// carrying nonzero weight.
#[inline]
pub(crate) fn for_each_corner(dims: Dims, p: [f64; 3], mut f: impl FnMut(usize, f64)) {
    let fx = p[0].floor();
    let fy = p[1].floor();
    let fz = p[2].floor();
    let (tx, ty, tz) = (p[0] - fx, p[1] - fy, p[2] - fz);
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (nx, ny, nz) = (dims[0] as i64, dims[1] as i64, dims[2] as i64);
    if ix < -1 || iy < -1 || iz < -1 || ix >= nx || iy >= ny || iz >= nz {
        return;
    }
    let wz = [1.0 - tz, tz];
    let wy = [1.0 - ty, ty];
    let wx = [1.0 - tx, tx];
    for (dz, &az) in wz.iter().enumerate() {
        let z = iz + dz as i64;
        if az == 0.0 || z < 0 || z >= nz {
            continue;
        }
        for (dy, &ay) in wy.iter().enumerate() {
            let y = iy + dy as i64;
            if ay == 0.0 || y < 0 || y >= ny {
                continue;
            }
            let row = (z * ny + y) * nx;
            let ayz = az * ay;
            for (dx, &ax) in wx.iter().enumerate() {
                let x = ix + dx as i64;
                if ax == 0.0 || x < 0 || x >= nx {
                    continue;
                }
                f((row + x) as usize, ayz * ax);
            }
        }
    }
}

/// Trilinear sample with zero padding.
#[inline]
pub fn sample(vol: &Volume, p: [f64; 3]) -> f64 {
    let data = vol.data();
    let mut acc = 0.0;
    for_each_corner(vol.dims(), p, |i, w| acc += w * data[i]);
    acc
}

/// Gradient of the zero-padded trilinear interpolant of `data` at `p`.
/// On a cell face the cell above is used.
#[inline]
pub(crate) fn sample_gradient(dims: Dims, data: &[f64], p: [f64; 3]) -> [f64; 3] {
    let f = p.map(f64::floor);
    let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
    let base = f.map(|x| x as i64);
    let mut c = [0.0; 8];
    let mut any = false;
    for (n, cv) in c.iter_mut().enumerate() {
        let q = [base[0] + (n & 1) as i64, base[1] + ((n >> 1) & 1) as i64, base[2] + ((n >> 2) & 1) as i64];
        if (0..3).all(|a| q[a] >= 0 && q[a] < dims[a] as i64) {
            *cv = data[grid::linear_index(dims, q[0] as usize, q[1] as usize, q[2] as usize)];
            any = true;
        }
    }
    if !any {
        return [0.0; 3];
    }
    let w = |a: usize, bit: usize| if bit == 1 { t[a] } else { 1.0 - t[a] };
    let mut g = [0.0; 3];
    for (n, &cv) in c.iter().enumerate() {
        let bits = [n & 1, (n >> 1) & 1, n >> 2];
        for a in 0..3 {
            let sign = if bits[a] == 1 { 1.0 } else { -1.0 };
            let mut prod = sign;
            for o in 0..3 {
                if o != a {
                    prod *= w(o, bits[o]);
                }
            }
            g[a] += prod * cv;
        }
    }
    g
}

/// The sample point of tap `offset` for pixel `(k, h, w)` under `disp`.
#[inline]
pub(crate) fn tap_position(g: &SliceGeometry, k: usize, h: usize, w: usize, offset: f64, disp: [f64; 3]) -> [f64; 3] {
    let mut q = g.pixel_position(k, h, w);
    q[g.axis.index()] += offset;
    [q[0] + disp[0], q[1] + disp[1], q[2] + disp[2]]
}

#[inline]
pub(crate) fn slice_disp(slice: &[f64], n: usize, pix: usize) -> [f64; 3] {
    [slice[pix], slice[n + pix], slice[2 * n + pix]]
}

/// Slices volume `vol` at slice `k` under the displacements `disp`
/// (`3 x height x width`), writing `height x width` values into `out`.
pub(crate) fn pull_slice(vol: &Volume, g: &SliceGeometry, psf: &Psf, k: usize, disp: &[f64], out: &mut [f64]) {
    let taps = psf.taps();
    let n = g.pixels_per_slice();
    let dims = vol.dims();
    let data = vol.data();
    for h in 0..g.height {
        for w in 0..g.width {
            let pix = h * g.width + w;
            let d = slice_disp(disp, n, pix);
            let mut acc = 0.0;
            for &(off, tw) in &taps {
                let p = tap_position(g, k, h, w, off, d);
                let mut s = 0.0;
                for_each_corner(dims, p, |i, cw| s += cw * data[i]);
                acc += tw * s;
            }
            out[pix] = acc;
        }
    }
}

fn check_pull(dims: Dims, motion: &MotionStack) -> Result<()> {
    motion.geometry.validate()?;
    motion.geometry.check_volume(dims)
}

/// Slicing operator `f = H U v`: samples `vol` at every displaced PSF tap of
/// every slice pixel.
pub fn slice_pull(vol: &Volume, motion: &MotionStack, psf: &Psf) -> Result<SliceStack> {
    check_pull(vol.dims(), motion)?;
    let g = motion.geometry;
    let n = g.pixels_per_slice();
    let mut data = vec![0.0; g.len()];
    data.par_chunks_mut(n).enumerate().for_each(|(k, out)| {
        pull_slice(vol, &g, psf, k, motion.slice(k), out);
    });
    Ok(SliceStack::from_parts_unchecked(g, data))
}

/// Number of independent accumulators used by the splat. Depends only on the
/// problem size so the summation order never depends on the thread pool.
fn splat_groups(slices: usize, voxels: usize) -> usize {
    const BUDGET: usize = 1 << 26; // f64 accumulator entries
    let by_memory = (BUDGET / (2 * voxels.max(1))).max(1);
    slices.min(8).min(by_memory).max(1)
}

fn push_impl(stack: &[f64], motion: &MotionStack, psf: &Psf, dims: Dims, with_weights: bool) -> (Vec<f64>, Vec<f64>) {
    let g = motion.geometry;
    let taps = psf.taps();
    let n = g.pixels_per_slice();
    let voxels = grid::voxel_count(dims);
    let groups = splat_groups(g.slices, voxels);
    let per_group = g.slices.div_ceil(groups);

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..groups)
        .into_par_iter()
        .map(|grp| {
            let mut values = vec![0.0; voxels];
            let mut weights = if with_weights { vec![0.0; voxels] } else { Vec::new() };
            let ks = grp * per_group..((grp + 1) * per_group).min(g.slices);
            for k in ks {
                let disp = motion.slice(k);
                let f = &stack[k * n..(k + 1) * n];
                for h in 0..g.height {
                    for w in 0..g.width {
                        let pix = h * g.width + w;
                        let d = slice_disp(disp, n, pix);
                        let val = f[pix];
                        for &(off, tw) in &taps {
                            let p = tap_position(&g, k, h, w, off, d);
                            if with_weights {
                                for_each_corner(dims, p, |i, cw| {
                                    let a = tw * cw;
                                    values[i] += val * a;
                                    weights[i] += a;
                                });
                            } else {
                                for_each_corner(dims, p, |i, cw| values[i] += val * (tw * cw));
                            }
                        }
                    }
                }
            }
            (values, weights)
        })
        .collect();

    let mut it = partials.into_iter();
    let (mut values, mut weights) = it.next().expect("at least one group");
    for (v, w) in it {
        values.par_iter_mut().zip(v.par_iter()).for_each(|(a, b)| *a += b);
        if with_weights {
            weights.par_iter_mut().zip(w.par_iter()).for_each(|(a, b)| *a += b);
        }
    }
    (values, weights)
}

fn check_push(stack: &SliceStack, motion: &MotionStack, dims: Dims) -> Result<()> {
    grid::check_dims(dims)?;
    stack.geometry.same_as(&motion.geometry, "stack and motion geometry differ")?;
    check_pull(dims, motion)
}

/// Splatting operator: the adjoint of [`slice_pull`]. Every pixel/tap sample
/// scatters `value * psf_weight * trilinear_weight` into `values` and
/// `psf_weight * trilinear_weight` into `weights`.
pub fn splat_push(stack: &SliceStack, motion: &MotionStack, psf: &Psf, dims: Dims) -> Result<SplatVolume> {
    check_push(stack, motion, dims)?;
    let (values, weights) = push_impl(stack.data(), motion, psf, dims, true);
    Ok(SplatVolume {
        values: Volume::from_parts_unchecked(dims, 1.0, values),
        weights: Volume::from_parts_unchecked(dims, 1.0, weights),
    })
}

/// `U* f` only, without the weight accumulator.
pub(crate) fn adjoint(stack: &[f64], motion: &MotionStack, psf: &Psf, dims: Dims) -> Volume {
    let (values, _) = push_impl(stack, motion, psf, dims, false);
    Volume::from_parts_unchecked(dims, 1.0, values)
}

/// Hole threshold used when none is configured: `1e-3` of the largest
/// accumulated weight.
pub fn default_hole_eps(splat: &SplatVolume) -> f64 {
    let max = splat.weights.max();
    if max > 0.0 {
        1e-3 * max
    } else {
        f64::MIN_POSITIVE
    }
}

/// Divides splatted values by their weights. Voxels with weight below `eps`
/// are set to zero and reported in the returned hole mask.
pub fn normalize_splat(splat: &SplatVolume, eps: f64) -> (Volume, Vec<bool>) {
    assert!(eps > 0.0, "hole threshold must be positive");
    let (out, holes): (Vec<f64>, Vec<bool>) = splat
        .values
        .data()
        .iter()
        .zip(splat.weights.data())
        .map(|(&v, &w)| if w >= eps { (v / w, false) } else { (0.0, true) })
        .unzip();
    (Volume::from_parts_unchecked(splat.dims(), splat.values.spacing(), out), holes)
}

/// Adds a residual field to a coarse one, component by component.
pub fn compose_motion(coarse: &MotionStack, residual: &MotionStack) -> Result<MotionStack> {
    coarse.geometry.same_as(&residual.geometry, "cannot compose motion stacks")?;
    let data = coarse.data.iter().zip(&residual.data).map(|(a, b)| a + b).collect();
    Ok(MotionStack { geometry: coarse.geometry, data })
}
