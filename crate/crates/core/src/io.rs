//! File formats.
//!
//! Volumes and slice stacks are single-file NIfTI-1 (`.nii`), little-endian
//! float32, no compression, with qform/sform set to the identity scaled by
//! the voxel spacing. A stack is stored as a `width x height x slices` image
//! whose `descrip` field carries `svr-stack axis=<x|y|z> spacing=<s> slab=<n>`.
//!
//! Motion stacks use `.svrm`:
//!
//! ```text
//! offset  type      field
//! 0       [u8; 4]   magic "SVRM"
//! 4       u32       version (1)
//! 8       u32       K (slices)
//! 12      u32       H (rows)
//! 16      u32       W (columns)
//! 20      u32       axis (0 = x, 1 = y, 2 = z)
//! 24      u32       slab
//! 28      f32       slice spacing
//! 32      f32[K*3*H*W] displacements, slice-major, then component (x, y, z),
//!                   then row-major, in reconstruction-grid voxels
//! ```
//!
//! All multi-byte values are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{voxel_count, Dims, Volume};
use crate::warp::{Axis, MotionStack, SliceGeometry, SliceStack};

const NIFTI_HEADER: usize = 348;
const NIFTI_OFFSET: usize = 352;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

const SVRM_MAGIC: &[u8; 4] = b"SVRM";
const SVRM_VERSION: u32 = 1;
const SVRM_HEADER: usize = 32;

/// Format description printed by `svr formats`.
pub const FORMATS: &str = "\
volume / stack (.nii): NIfTI-1 single file, little-endian, datatype 16 (float32),
  348-byte header + 4 zero extension bytes, data at offset 352, x fastest.
  qform_code = sform_code = 1, affine = diag(pixdim[1..3]).
  Stacks are width x height x slices images; descrip holds
  \"svr-stack axis=<x|y|z> spacing=<s> slab=<n>\".
  Readers also accept uint8, int16, int32 and float64 data with scl_slope/scl_inter.
motion (.svrm): \"SVRM\", then u32 version=1, u32 K, u32 H, u32 W,
  u32 axis (0=x, 1=y, 2=z), u32 slab, f32 spacing (32-byte header);
  payload K*3*H*W float32, slice-major, component (x, y, z), row-major,
  displacements in reconstruction-grid voxels. Little-endian throughout.
";

fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(with_path(path))?).read_to_end(&mut bytes).map_err(with_path(path))?;
    Ok(bytes)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(with_path(path))?))
}

fn fmt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn put_i16(h: &mut [u8], at: usize, v: i16) {
    h[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(h: &mut [u8], at: usize, v: i32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], at: usize, v: f32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(h: &[u8], at: usize, swap: bool) -> i16 {
    let b = [h[at], h[at + 1]];
    if swap { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
}

fn get_i32(h: &[u8], at: usize, swap: bool) -> i32 {
    let b = [h[at], h[at + 1], h[at + 2], h[at + 3]];
    if swap { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }
}

fn get_f32(h: &[u8], at: usize, swap: bool) -> f32 {
    f32::from_bits(get_i32(h, at, swap) as u32)
}

fn nifti_header(dims: Dims, pixdim: [f64; 3], descrip: &str) -> Result<Vec<u8>> {
    let mut h = vec![0u8; NIFTI_OFFSET];
    put_i32(&mut h, 0, NIFTI_HEADER as i32);
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for (a, &n) in dims.iter().enumerate() {
        let n = i16::try_from(n).map_err(|_| Error::InvalidDims(format!("extent {n} does not fit a NIfTI-1 header")))?;
        put_i16(&mut h, 42 + 2 * a, n);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0); // qfac
    for (a, &p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * a, p as f32);
    }
    put_f32(&mut h, 108, NIFTI_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    h[123] = 2; // mm
    let d = descrip.as_bytes();
    h[148..148 + d.len().min(79)].copy_from_slice(&d[..d.len().min(79)]);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for (row, &p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 280 + 16 * row + 4 * row, p as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_nifti(path: &Path, dims: Dims, pixdim: [f64; 3], descrip: &str, data: &[f64]) -> Result<()> {
    let header = nifti_header(dims, pixdim, descrip)?;
    let mut out = create(path)?;
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(4 * data.len());
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Nifti {
    dims: Dims,
    pixdim: [f64; 3],
    descrip: String,
    data: Vec<f64>,
}

fn read_nifti(path: &Path) -> Result<Nifti> {
    let bytes = open(path)?;
    if bytes.len() < NIFTI_HEADER {
        return Err(fmt_err(path, "file shorter than a NIfTI-1 header"));
    }
    let swap = match (i32::from_le_bytes(bytes[0..4].try_into().unwrap()), i32::from_be_bytes(bytes[0..4].try_into().unwrap())) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(fmt_err(path, "not a NIfTI-1 file (sizeof_hdr != 348)")),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(fmt_err(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let ndim = get_i16(&bytes, 40, swap);
    if !(1..=7).contains(&ndim) {
        return Err(fmt_err(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..ndim as usize {
        let n = get_i16(&bytes, 42 + 2 * a, swap);
        if n < 1 {
            return Err(fmt_err(path, format!("invalid extent dim[{}] = {n}", a + 1)));
        }
        if a < 3 {
            dims[a] = n as usize;
        } else if n != 1 {
            return Err(fmt_err(path, "only 3D images are supported"));
        }
    }
    let datatype = get_i16(&bytes, 70, swap);
    let mut pixdim = [1.0; 3];
    for (a, p) in pixdim.iter_mut().enumerate() {
        let v = get_f32(&bytes, 80 + 4 * a, swap) as f64;
        *p = if v.is_finite() && v > 0.0 { v } else { 1.0 };
    }
    let offset = get_f32(&bytes, 108, swap);
    if !(offset >= NIFTI_OFFSET as f32) {
        return Err(fmt_err(path, format!("invalid vox_offset {offset}")));
    }
    let offset = offset as usize;
    let slope = get_f32(&bytes, 112, swap) as f64;
    let inter = get_f32(&bytes, 116, swap) as f64;
    let scale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let descrip = String::from_utf8_lossy(&bytes[148..228]).trim_end_matches('\0').to_string();

    let n = voxel_count(dims);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(fmt_err(path, format!("unsupported datatype {other}"))),
    };
    let payload = bytes.get(offset..offset + n * width).ok_or_else(|| fmt_err(path, "truncated image data"))?;
    let mut data: Vec<f64> = payload
        .chunks_exact(width)
        .map(|c| match datatype {
            DT_UINT8 => c[0] as f64,
            DT_INT16 => get_i16(c, 0, swap) as f64,
            DT_INT32 => get_i32(c, 0, swap) as f64,
            DT_FLOAT32 => get_f32(c, 0, swap) as f64,
            _ => {
                let b: [u8; 8] = c.try_into().unwrap();
                if swap { f64::from_be_bytes(b) } else { f64::from_le_bytes(b) }
            }
        })
        .collect();
    if scale {
        data.iter_mut().for_each(|x| *x = *x * slope + inter);
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(Nifti { dims, pixdim, descrip, data })
}

/// Writes a volume as float32 NIfTI-1.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let s = vol.spacing();
    write_nifti(path.as_ref(), vol.dims(), [s, s, s], "", vol.data())
}

/// Reads a 3D NIfTI-1 image. The spacing is taken from `pixdim[1]`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let n = read_nifti(path.as_ref())?;
    Volume::new(n.dims, n.pixdim[0], n.data)
}

/// Writes a boolean mask as a 0/1 float32 volume.
pub fn write_mask(path: impl AsRef<Path>, dims: Dims, mask: &[bool]) -> Result<()> {
    let data: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_nifti(path.as_ref(), dims, [1.0; 3], "", &data)
}

/// Reads a mask volume; nonzero voxels are `true`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(Dims, Vec<bool>)> {
    let n = read_nifti(path.as_ref())?;
    Ok((n.dims, n.data.iter().map(|&x| x != 0.0).collect()))
}

fn stack_descrip(g: &SliceGeometry) -> String {
    format!("svr-stack axis={} spacing={} slab={}", g.axis, g.spacing, g.slab)
}

/// Parses the stack tag written by [`write_stack`].
pub fn parse_stack_descrip(descrip: &str) -> Option<(Axis, f64, usize)> {
    let mut words = descrip.split_whitespace();
    if words.next()? != "svr-stack" {
        return None;
    }
    let (mut axis, mut spacing, mut slab) = (None, None, None);
    for w in words {
        let (k, v) = w.split_once('=')?;
        match k {
            "axis" => axis = v.parse().ok(),
            "spacing" => spacing = v.parse().ok(),
            "slab" => slab = v.parse().ok(),
            _ => {}
        }
    }
    Some((axis?, spacing?, slab?))
}

pub fn write_stack(path: impl AsRef<Path>, stack: &SliceStack) -> Result<()> {
    let g = &stack.geometry;
    write_nifti(path.as_ref(), [g.width, g.height, g.slices], [1.0, 1.0, g.spacing], &stack_descrip(g), stack.data())
}

/// Reads a slice stack. Geometry comes from the file's stack tag, or from
/// `fallback = (axis, spacing, slab)` for untagged images.
pub fn read_stack(path: impl AsRef<Path>, fallback: Option<(Axis, f64, usize)>) -> Result<SliceStack> {
    let path = path.as_ref();
    let n = read_nifti(path)?;
    let (axis, spacing, slab) = parse_stack_descrip(&n.descrip)
        .or(fallback)
        .ok_or_else(|| fmt_err(path, "no slice-stack tag in descrip; pass the stack geometry explicitly"))?;
    let [w, h, k] = n.dims;
    SliceStack::new(SliceGeometry::new(k, h, w, axis, spacing, slab)?, n.data)
}

pub fn write_motion(path: impl AsRef<Path>, motion: &MotionStack) -> Result<()> {
    let path = path.as_ref();
    let g = &motion.geometry;
    let u32_of = |n: usize| u32::try_from(n).map_err(|_| Error::InvalidDims(format!("extent {n} exceeds u32")));
    let mut buf = Vec::with_capacity(SVRM_HEADER + 4 * motion.data().len());
    buf.extend_from_slice(SVRM_MAGIC);
    for v in [SVRM_VERSION, u32_of(g.slices)?, u32_of(g.height)?, u32_of(g.width)?, g.axis.index() as u32, u32_of(g.slab)?] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(g.spacing as f32).to_le_bytes());
    for &x in motion.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut out = create(path)?;
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_motion(path: impl AsRef<Path>) -> Result<MotionStack> {
    let path = path.as_ref();
    let bytes = open(path)?;
    if bytes.len() < SVRM_HEADER || &bytes[0..4] != SVRM_MAGIC {
        return Err(fmt_err(path, "not an .svrm motion file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != SVRM_VERSION {
        return Err(fmt_err(path, format!("unsupported .svrm version {}", word(0))));
    }
    let (k, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let axis = Axis::from_index(word(4)).ok_or_else(|| fmt_err(path, format!("invalid axis code {}", word(4))))?;
    let slab = word(5) as usize;
    let spacing = f32::from_le_bytes(bytes[28..32].try_into().unwrap()) as f64;
    let g = SliceGeometry::new(k, h, w, axis, spacing, slab)?;
    let expected = SVRM_HEADER + 4 * 3 * g.len();
    if bytes.len() != expected {
        return Err(fmt_err(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let data = bytes[SVRM_HEADER..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    MotionStack::new(g, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_volume(dims: Dims) -> Volume {
        Volume::from_fn(dims, |i, j, k| ((i * 31 + j * 7 + k * 3) as f32 * 0.173f32 - 2.0) as f64).with_spacing(1.5)
    }

    #[test]
    fn volume_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let v = f32_volume([5, 4, 3]);
        write_volume(&p, &v).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 352 + 4 * 60);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(i16::from_le_bytes([bytes[70], bytes[71]]), 16);
        let r = read_volume(&p).unwrap();
        assert_eq!(r, v);
        let q = dir.path().join("w.nii");
        write_volume(&q, &r).unwrap();
        assert_eq!(std::fs::read(&q).unwrap(), bytes);
    }

    #[test]
    fn affine_is_scaled_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        write_volume(&p, &f32_volume([2, 2, 2])).unwrap();
        let b = std::fs::read(&p).unwrap();
        let f = |at: usize| f32::from_le_bytes(b[at..at + 4].try_into().unwrap());
        assert_eq!([f(280), f(284), f(288), f(292)], [1.5, 0.0, 0.0, 0.0]);
        assert_eq!([f(296), f(300), f(304), f(308)], [0.0, 1.5, 0.0, 0.0]);
        assert_eq!([f(312), f(316), f(320), f(324)], [0.0, 0.0, 1.5, 0.0]);
        assert_eq!(i16::from_le_bytes([b[252], b[253]]), 1);
        assert_eq!(i16::from_le_bytes([b[254], b[255]]), 1);
    }

    #[test]
    fn stack_round_trip_keeps_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        let g = SliceGeometry::new(3, 4, 5, Axis::Y, 4.0, 4).unwrap();
        let s = SliceStack::new(g, (0..g.len()).map(|i| i as f64 * 0.25).collect()).unwrap();
        write_stack(&p, &s).unwrap();
        assert_eq!(read_stack(&p, None).unwrap(), s);
        // untagged images need the geometry
        let q = dir.path().join("plain.nii");
        write_volume(&q, &Volume::zeros([5, 4, 3])).unwrap();
        assert!(read_stack(&q, None).is_err());
        let r = read_stack(&q, Some((Axis::Z, 2.0, 1))).unwrap();
        assert_eq!((r.geometry.slices, r.geometry.height, r.geometry.width), (3, 4, 5));
    }

    #[test]
    fn motion_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.svrm");
        let g = SliceGeometry::new(2, 3, 4, Axis::X, 4.0, 4).unwrap();
        let m = MotionStack::from_fn(g, |k, q| [k as f64 + 0.5, q[1] * 0.25, -q[2]]);
        write_motion(&p, &m).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"SVRM");
        assert_eq!(bytes.len(), 32 + 4 * 3 * g.len());
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 4.0);
        // first payload value: slice 0, x component, pixel 0
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 0.5);
        let r = read_motion(&p).unwrap();
        assert_eq!(r, m);
        let q = dir.path().join("n.svrm");
        write_motion(&q, &r).unwrap();
        assert_eq!(std::fs::read(&q).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"SVRM\x02\0\0\0").unwrap();
        assert!(matches!(read_motion(&p), Err(Error::Format(_))));
        std::fs::write(&p, vec![0u8; 400]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format(_))));
        let m = MotionStack::zeros(SliceGeometry::new(1, 2, 2, Axis::Z, 1.0, 1).unwrap());
        write_motion(&p, &m).unwrap();
        let mut b = std::fs::read(&p).unwrap();
        b.pop();
        std::fs::write(&p, &b).unwrap();
        assert!(read_motion(&p).is_err());
        assert!(matches!(read_volume(dir.path().join("missing.nii")), Err(Error::Io(_))));
    }

    #[test]
    fn reads_other_datatypes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i16.nii");
        let mut h = nifti_header([2, 2, 1], [1.0; 3], "").unwrap();
        put_i16(&mut h, 70, DT_INT16);
        put_i16(&mut h, 72, 16);
        put_f32(&mut h, 112, 0.5);
        put_f32(&mut h, 116, 1.0);
        for v in [0i16, 2, -4, 10] {
            h.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&p, &h).unwrap();
        assert_eq!(read_volume(&p).unwrap().data(), &[1.0, 2.0, -1.0, 6.0]);
    }

    #[test]
    fn descrip_parsing() {
        assert_eq!(parse_stack_descrip("svr-stack axis=z spacing=4 slab=4"), Some((Axis::Z, 4.0, 4)));
        assert_eq!(parse_stack_descrip("other"), None);
        assert_eq!(parse_stack_descrip("svr-stack axis=q spacing=4 slab=4"), None);
    }
}
