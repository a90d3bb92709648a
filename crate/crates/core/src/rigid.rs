//! Global rigid alignment of motion fields.
//!
//! Point clouds are rows: a motion field `u` on slice positions `p` defines
//! the cloud `u + p`, and a rigid transform acts as `x -> x R + t`. The
//! rigid-compensated loss between `u` and `v` is
//!
//! ```text
//! min_{R, t} (1/N) || (u + p) - (v + p) R - t ||^2
//! ```
//!
//! solved by an unconstrained affine least-squares fit followed by projecting
//! the linear part onto the rotations with a polar decomposition.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::warp::MotionStack;

/// `x -> x R + t` on row vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    #[inline]
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.rotation, &self.translation, x)
    }

    /// Max-abs deviation of `RᵀR` from the identity and `det R`.
    pub fn orthogonality(&self) -> (f64, f64) {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        (e.amax(), self.rotation.determinant())
    }
}

#[inline]
fn apply_affine(a: &Matrix3<f64>, b: &Vector3<f64>, x: [f64; 3]) -> [f64; 3] {
    let mut y = [0.0; 3];
    for (j, yj) in y.iter_mut().enumerate() {
        *yj = x[0] * a[(0, j)] + x[1] * a[(1, j)] + x[2] * a[(2, j)] + b[j];
    }
    y
}

/// Rotation and symmetric stretch with `rotation * stretch = input` (for
/// inputs with positive determinant).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarFactors {
    pub rotation: Matrix3<f64>,
    pub stretch: Matrix3<f64>,
    /// Smallest singular value is negligible relative to the largest; the
    /// rotation is then not unique.
    pub ill_conditioned: bool,
}

/// Polar decomposition through the SVD `M = U Σ Vᵀ`:
/// `rotation = U D Vᵀ`, `stretch = V D Σ Vᵀ`, with
/// `D = diag(1, 1, det(U Vᵀ))` applied on the smallest singular value so the
/// rotation is proper. The rotation is the closest rotation to `M` in the
/// Frobenius norm.
pub fn polar_decompose(m: &Matrix3<f64>) -> PolarFactors {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd computes U");
    let vt = svd.v_t.expect("svd computes Vᵀ");
    let sigma = svd.singular_values;

    let imin = sigma.imin();
    let mut d = Vector3::repeat(1.0);
    if (u * vt).determinant() < 0.0 {
        d[imin] = -1.0;
    }
    let dm = Matrix3::from_diagonal(&d);
    let rotation = u * dm * vt;
    let stretch = vt.transpose() * dm * Matrix3::from_diagonal(&sigma) * vt;
    let stretch = 0.5 * (stretch + stretch.transpose());

    let smax = sigma.max();
    let ill_conditioned = !(sigma[imin] > 1e-12 * smax);
    if ill_conditioned {
        log::warn!("polar decomposition of a (near-)singular matrix: singular values {sigma:?}");
    }
    PolarFactors { rotation, stretch, ill_conditioned }
}

/// Paired point sets: predicted displacements `u`, reference displacements
/// `v` and their common nominal positions `p`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Correspondence {
    pub u: Vec<[f64; 3]>,
    pub v: Vec<[f64; 3]>,
    pub p: Vec<[f64; 3]>,
}

impl Correspondence {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Appends the masked pixels of a pair of motion stacks.
    pub fn push_stacks(&mut self, u: &MotionStack, v: &MotionStack, mask: Option<&[bool]>) -> Result<()> {
        if u.geometry != v.geometry {
            return Err(Error::GeometryMismatch("motion stacks have different geometry".into()));
        }
        if let Some(m) = mask {
            if m.len() != u.geometry.len() {
                return Err(Error::LengthMismatch { expected: u.geometry.len(), got: m.len() });
            }
        }
        let p = u.geometry.positions();
        let (uu, vv) = (u.vectors(), v.vectors());
        for i in 0..p.len() {
            if mask.is_none_or(|m| m[i]) {
                self.u.push(uu[i]);
                self.v.push(vv[i]);
                self.p.push(p[i]);
            }
        }
        Ok(())
    }

    pub fn from_stacks(u: &MotionStack, v: &MotionStack, mask: Option<&[bool]>) -> Result<Self> {
        let mut c = Self::default();
        c.push_stacks(u, v, mask)?;
        Ok(c)
    }

    fn clouds(&self) -> impl Iterator<Item = ([f64; 3], [f64; 3])> + '_ {
        (0..self.len()).map(move |i| {
            let (u, v, p) = (self.u[i], self.v[i], self.p[i]);
            ([v[0] + p[0], v[1] + p[1], v[2] + p[2]], [u[0] + p[0], u[1] + p[1], u[2] + p[2]])
        })
    }

    fn centroids(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.len() as f64;
        let (mut cx, mut cy) = (Vector3::zeros(), Vector3::zeros());
        for (x, y) in self.clouds() {
            cx += Vector3::from(x);
            cy += Vector3::from(y);
        }
        (cx / n, cy / n)
    }
}

/// Least-squares `(u + p) ≈ (v + p) A + b` over the correspondence.
pub fn fit_affine_points(c: &Correspondence) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if c.is_empty() {
        return Err(Error::EmptyMask);
    }
    if c.len() < 4 {
        return Err(Error::DegenerateFit(format!("{} points, need at least 4", c.len())));
    }
    let (mx, my) = c.centroids();
    let mut cxx = Matrix3::zeros();
    let mut cxy = Matrix3::zeros();
    for (x, y) in c.clouds() {
        let dx = Vector3::from(x) - mx;
        let dy = Vector3::from(y) - my;
        cxx += dx * dx.transpose();
        cxy += dx * dy.transpose();
    }
    let eig = cxx.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0 && lo > 1e-10 * hi) {
        return Err(Error::DegenerateFit(format!(
            "point cloud is (nearly) coplanar: covariance eigenvalues {lo:.3e}..{hi:.3e}"
        )));
    }
    let chol = cxx
        .cholesky()
        .ok_or_else(|| Error::DegenerateFit("covariance is not positive definite".into()))?;
    let a = chol.solve(&cxy);
    let b = my - a.transpose() * mx;
    Ok((a, b))
}

/// Affine fit between two motion stacks over the masked pixels.
pub fn fit_affine(u: &MotionStack, v: &MotionStack, mask: Option<&[bool]>) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    fit_affine_points(&Correspondence::from_stacks(u, v, mask)?)
}

/// Rigid-compensated mean squared error and the compensating transform.
///
/// The translation is re-solved for the projected rotation (difference of
/// centroids), which can only lower the loss compared to keeping the affine
/// offset.
pub fn compensated_loss_points(c: &Correspondence) -> Result<(f64, RigidTransform)> {
    let (a, _) = fit_affine_points(c)?;
    let rotation = polar_decompose(&a).rotation;
    let (mx, my) = c.centroids();
    let translation = my - rotation.transpose() * mx;
    let rigid = RigidTransform { rotation, translation };
    let mut sum = 0.0;
    for (x, y) in c.clouds() {
        let z = rigid.apply(x);
        sum += (y[0] - z[0]).powi(2) + (y[1] - z[1]).powi(2) + (y[2] - z[2]).powi(2);
    }
    Ok((sum / c.len() as f64, rigid))
}

pub fn compensated_loss(u: &MotionStack, v: &MotionStack, mask: Option<&[bool]>) -> Result<(f64, RigidTransform)> {
    compensated_loss_points(&Correspondence::from_stacks(u, v, mask)?)
}

/// The field whose point cloud is `(field + p) R + t`, i.e. returns
/// `(field + p) R + t - p`.
pub fn apply_rigid(field: &MotionStack, rigid: &RigidTransform) -> MotionStack {
    let g = field.geometry;
    let mut out = MotionStack::zeros(g);
    for k in 0..g.slices {
        for h in 0..g.height {
            for w in 0..g.width {
                let p = g.pixel_position(k, h, w);
                let d = field.displacement(k, h, w);
                // d R + (p R + t - p): exact for the identity transform
                let dr = apply_affine(&rigid.rotation, &Vector3::zeros(), d);
                let pr = rigid.apply(p);
                out.set(k, h, w, [dr[0] + (pr[0] - p[0]), dr[1] + (pr[1] - p[1]), dr[2] + (pr[2] - p[2])]);
            }
        }
    }
    out
}

/// Rotation matrix for intrinsic Z-Y-X Euler angles in degrees:
/// `Rz(a) * Ry(b) * Rx(c)` acting on column vectors.
pub fn euler_zyx_degrees(euler: [f64; 3]) -> Matrix3<f64> {
    let [a, b, c] = euler.map(f64::to_radians);
    let rz = Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c.cos(), -c.sin(), 0.0, c.sin(), c.cos());
    rz * ry * rx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{Axis, SliceGeometry};
    use proptest::prelude::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed ^ 0xD1B5_4A32_D192_ED03;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn geom() -> SliceGeometry {
        SliceGeometry::new(8, 8, 8, Axis::Z, 1.0, 1).unwrap()
    }

    fn random_field(seed: u64, scale: f64) -> MotionStack {
        let mut r = lcg(seed);
        MotionStack::from_fn(geom(), |_, _| [scale * r(), scale * r(), scale * r()])
    }

    #[test]
    fn affine_fit_of_identical_fields() {
        let u = random_field(1, 1.0);
        let (a, b) = fit_affine(&u, &u, None).unwrap();
        assert!((a - Matrix3::identity()).amax() < 1e-12);
        assert!(b.amax() < 1e-10);
    }

    #[test]
    fn affine_fit_recovers_construction() {
        let mut r = lcg(7);
        let a0 = Matrix3::from_fn(|i, j| if i == j { 1.0 } else { 0.0 } + 0.3 * r());
        let b0 = Vector3::new(2.0 * r(), 2.0 * r(), 2.0 * r());
        let v = random_field(2, 0.8);
        let u = MotionStack::from_fn(geom(), |k, p| {
            let h = p[1] as usize;
            let w = p[0] as usize;
            let d = v.displacement(k, h, w);
            let y = apply_affine(&a0, &b0, [d[0] + p[0], d[1] + p[1], d[2] + p[2]]);
            [y[0] - p[0], y[1] - p[1], y[2] - p[2]]
        });
        let (a, b) = fit_affine(&u, &v, None).unwrap();
        assert!((a - a0).amax() < 1e-8);
        assert!((b - b0).amax() < 1e-8);
    }

    #[test]
    fn coplanar_cloud_is_degenerate() {
        let g = SliceGeometry::new(1, 6, 6, Axis::Z, 1.0, 1).unwrap();
        let z = MotionStack::zeros(g);
        assert!(matches!(fit_affine(&z, &z, None), Err(Error::DegenerateFit(_))));
        let g = geom();
        let mask: Vec<bool> = (0..g.len()).map(|i| i < 3).collect();
        let z = MotionStack::zeros(g);
        assert!(matches!(fit_affine(&z, &z, Some(&mask)), Err(Error::DegenerateFit(_))));
        assert!(matches!(fit_affine(&z, &z, Some(&vec![false; g.len()])), Err(Error::EmptyMask)));
    }

    #[test]
    fn polar_of_identity_and_scaling() {
        let f = polar_decompose(&Matrix3::identity());
        assert!((f.rotation - Matrix3::identity()).amax() < 1e-14);
        assert!((f.stretch - Matrix3::identity()).amax() < 1e-14);
        let f = polar_decompose(&(Matrix3::identity() * 2.0));
        assert!((f.rotation - Matrix3::identity()).amax() < 1e-14);
        assert!((f.stretch - Matrix3::identity() * 2.0).amax() < 1e-14);
        assert!(!f.ill_conditioned);
    }

    #[test]
    fn polar_recovers_constructed_factors() {
        let q = euler_zyx_degrees([30.0, 0.0, 0.0]);
        let p = Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 4.0));
        let f = polar_decompose(&(q * p));
        assert!((f.rotation - q).amax() < 1e-8);
        assert!((f.stretch - p).amax() < 1e-8);
    }

    #[test]
    fn polar_handles_reflections_and_singular_input() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, -3.0));
        let f = polar_decompose(&m);
        assert!((f.rotation.determinant() - 1.0).abs() < 1e-12);
        assert!((f.rotation * f.stretch - m).amax() < 1e-12);
        let f = polar_decompose(&Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)));
        assert!(f.ill_conditioned);
        assert!((f.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_singular_values_do_not_change_the_product() {
        // Σ = (2, 2, 1): U and V are only defined up to a rotation in the
        // repeated subspace
        let q = euler_zyx_degrees([10.0, -20.0, 35.0]);
        let w = euler_zyx_degrees([-40.0, 15.0, 5.0]);
        let m = q * w * Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0)) * w.transpose();
        let f = polar_decompose(&m);
        assert!((f.rotation * f.stretch - m).amax() < 1e-12);
        assert!((f.rotation - q).amax() < 1e-12);
    }

    #[test]
    fn loss_of_rigidly_related_fields_is_zero() {
        let v = random_field(3, 1.0);
        let (l, r) = compensated_loss(&v, &v, None).unwrap();
        assert!(l < 1e-20);
        assert!((r.rotation - Matrix3::identity()).amax() < 1e-12);

        let rigid = RigidTransform {
            rotation: euler_zyx_degrees([12.0, -7.0, 3.0]).transpose(),
            translation: Vector3::new(1.0, -2.0, 0.5),
        };
        let u = apply_rigid(&v, &rigid);
        let (l, r) = compensated_loss(&u, &v, None).unwrap();
        assert!(l < 1e-8 * 1e-8, "{l}");
        assert!((r.rotation - rigid.rotation).amax() < 1e-10);
    }

    #[test]
    fn loss_below_plain_mse() {
        for seed in 0..20 {
            let u = random_field(100 + seed, 1.0);
            let v = random_field(200 + seed, 1.0);
            let (l, _) = compensated_loss(&u, &v, None).unwrap();
            let mse = u.data().iter().zip(v.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / geom().len() as f64;
            assert!(l <= mse + 1e-9, "{l} > {mse}");
        }
    }

    #[test]
    fn apply_rigid_cases() {
        let v = random_field(5, 1.0);
        assert_eq!(apply_rigid(&v, &RigidTransform::identity()).data(), v.data());
        let t = RigidTransform { rotation: Matrix3::identity(), translation: Vector3::new(1.5, -2.0, 0.25) };
        let out = apply_rigid(&MotionStack::zeros(geom()), &t);
        for d in out.vectors() {
            assert!((d[0] - 1.5).abs() < 1e-12 && (d[1] + 2.0).abs() < 1e-12 && (d[2] - 0.25).abs() < 1e-12);
        }
        let r = RigidTransform { rotation: euler_zyx_degrees([5.0, 6.0, 7.0]), translation: Vector3::new(0.1, 0.2, 0.3) };
        let out = apply_rigid(&v, &r);
        let g = geom();
        for k in 0..g.slices {
            for h in 0..g.height {
                for w in 0..g.width {
                    let p = g.pixel_position(k, h, w);
                    let d = v.displacement(k, h, w);
                    let x = [d[0] + p[0], d[1] + p[1], d[2] + p[2]];
                    let mut e = [0.0; 3];
                    for j in 0..3 {
                        e[j] = (0..3).map(|i| x[i] * r.rotation[(i, j)]).sum::<f64>() + r.translation[j] - p[j];
                    }
                    let o = out.displacement(k, h, w);
                    for j in 0..3 {
                        assert!((o[j] - e[j]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn euler_z_quarter_turn() {
        let r = euler_zyx_degrees([90.0, 0.0, 0.0]);
        let y = r * Vector3::new(1.0, 0.0, 0.0);
        assert!((y - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-15);
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix3<f64>> {
        proptest::collection::vec(-3.0f64..3.0, 9).prop_map(|v| Matrix3::from_column_slice(&v))
    }

    proptest! {
        #[test]
        fn polar_invariants(m in matrix_strategy()) {
            prop_assume!(m.determinant() > 1e-3);
            let f = polar_decompose(&m);
            let r = f.rotation;
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((r * f.stretch - m).amax() < 1e-8);
            prop_assert!((f.stretch - f.stretch.transpose()).amax() < 1e-9);
        }

        #[test]
        fn loss_invariant_to_rigid_offsets(seed in 0u64..1000, a in -30.0f64..30.0, b in -30.0f64..30.0, c in -30.0f64..30.0) {
            let u = random_field(seed, 1.0);
            let v = random_field(seed + 7919, 1.0);
            let off = RigidTransform { rotation: euler_zyx_degrees([a, b, c]), translation: Vector3::new(a / 10.0, b / 10.0, -c / 10.0) };
            let (l0, _) = compensated_loss(&u, &v, None).unwrap();
            let (l1, _) = compensated_loss(&u, &apply_rigid(&v, &off), None).unwrap();
            let (l2, _) = compensated_loss(&apply_rigid(&u, &off), &v, None).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-8);
            prop_assert!((l0 - l2).abs() < 1e-8);
        }
    }
}
