//! Exact Lorentz-model primitives in 64-bit arithmetic.
//!
//! Points live on the upper sheet `{x : <x,x>_L = 1/k, x_0 > 0}` of the
//! hyperboloid with curvature `k < 0`. Coordinate 0 is the time axis.
//!
//! Everything here is a pure function of its inputs. The differentiable
//! counterparts used for training live in [`crate::engine`] and are checked
//! against these.

use crate::error::{Error, Result};

/// Residual tolerance for every manifold and tangency check.
pub const MANIFOLD_TOL: f64 = 1e-8;

/// Below this geodesic length `exp_map` uses the first-order series `x + v`.
pub const EXP_SERIES_THRESHOLD: f64 = 1e-7;

/// Below `1 + LOG_SERIES_THRESHOLD` the `log_map` coefficient
/// `arcosh(b)/sqrt(b^2-1)` is evaluated by its series around `b = 1`.
pub const LOG_SERIES_THRESHOLD: f64 = 1e-7;

/// Strictly negative sectional curvature.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(kappa: f64) -> Result<Self> {
        if kappa < 0.0 && kappa.is_finite() {
            Ok(Self(kappa))
        } else {
            Err(Error::InvalidCurvature(kappa))
        }
    }

    /// Curvature `-exp(theta)`, the trainable parametrization.
    pub fn from_log_magnitude(theta: f64) -> Result<Self> {
        Self::new(-theta.exp())
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `sqrt(|k|)`.
    pub fn sqrt_abs(self) -> f64 {
        (-self.0).sqrt()
    }

    /// Time coordinate of the origin, `sqrt(-1/k)`.
    pub fn origin_time(self) -> f64 {
        (-1.0 / self.0).sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(-1.0)
    }
}

/// A point on the upper hyperboloid sheet.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
}

impl LorentzPoint {
    /// Validates `coords` against the hyperboloid of curvature `kappa`.
    pub fn new(coords: Vec<f64>, kappa: Curvature) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidDimension(format!(
                "a Lorentz point needs at least 2 coordinates, got {}",
                coords.len()
            )));
        }
        if !check_on_manifold(&coords, kappa, MANIFOLD_TOL) {
            return Err(Error::NotOnManifold {
                residual: manifold_residual(&coords, kappa),
            });
        }
        Ok(Self { coords })
    }

    /// Wraps coordinates without validation. Callers own the invariant.
    pub fn from_coords_unchecked(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    /// Point with the given spatial part, time coordinate recomputed so the
    /// result lies exactly (up to rounding) on the hyperboloid.
    pub fn from_spatial(spatial: &[f64], kappa: Curvature) -> Self {
        let sq: f64 = spatial.iter().map(|s| s * s).sum();
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.push((sq - 1.0 / kappa.value()).sqrt());
        coords.extend_from_slice(spatial);
        Self { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn time(&self) -> f64 {
        self.coords[0]
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }

    /// Manifold dimension `n` (the point has `n + 1` coordinates).
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: LorentzPoint,
    vec: Vec<f64>,
}

impl TangentVector {
    /// Validates tangency `<vec, base>_L = 0`, scaled by the magnitudes
    /// involved so that far-from-origin bases are not rejected for rounding.
    pub fn new(base: LorentzPoint, vec: Vec<f64>) -> Result<Self> {
        let ip = lorentz_inner(&vec, base.coords())?;
        let scale = euclid_norm(&vec) * euclid_norm(base.coords());
        if ip.abs() > MANIFOLD_TOL * scale.max(1.0) {
            return Err(Error::InvalidTangent(ip));
        }
        Ok(Self { base, vec })
    }

    pub fn from_parts_unchecked(base: LorentzPoint, vec: Vec<f64>) -> Self {
        Self { base, vec }
    }

    /// The zero vector at `base`.
    pub fn zero(base: LorentzPoint) -> Self {
        let vec = vec![0.0; base.coords().len()];
        Self { base, vec }
    }

    pub fn base(&self) -> &LorentzPoint {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vec
    }
}

fn euclid_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `-x_0 y_0 + sum_{i>=1} x_i y_i`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidDimension(format!(
            "lorentz_inner needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(minkowski_dot(x, y))
}

/// Unchecked Lorentzian scalar product. Lengths must match.
#[inline]
pub(crate) fn minkowski_dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let spatial: f64 = x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum();
    spatial - x[0] * y[0]
}

/// `sqrt(|<v,v>_L|)`.
pub fn lorentz_norm(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    minkowski_dot(v, v).abs().sqrt()
}

/// `(sqrt(-1/k), 0, ..., 0)` in `n + 1` coordinates.
pub fn origin(kappa: Curvature, n: usize) -> LorentzPoint {
    let mut coords = vec![0.0; n + 1];
    coords[0] = kappa.origin_time();
    LorentzPoint { coords }
}

/// `<x,x>_L - 1/k`.
pub fn manifold_residual(x: &[f64], kappa: Curvature) -> f64 {
    if x.len() < 2 {
        return f64::INFINITY;
    }
    minkowski_dot(x, x) - 1.0 / kappa.value()
}

pub fn check_on_manifold(x: &[f64], kappa: Curvature, tol: f64) -> bool {
    x.len() >= 2 && x[0] > 0.0 && manifold_residual(x, kappa).abs() <= tol
}

/// Input validation for maps that consume points. The tolerance grows with
/// `|k| x_0^2`, the scale at which the residual itself is rounded.
fn require_on_manifold(x: &LorentzPoint, kappa: Curvature) -> Result<()> {
    let c = x.coords();
    let scale = (c.first().copied().unwrap_or(0.0).powi(2) * -kappa.value()).max(1.0);
    if check_on_manifold(c, kappa, MANIFOLD_TOL * scale) {
        Ok(())
    } else {
        Err(Error::NotOnManifold {
            residual: manifold_residual(x.coords(), kappa),
        })
    }
}

/// Orthogonal projection of an ambient vector onto the tangent space at `x`:
/// `w - k<x,w>_L x`.
pub fn project_to_tangent(x: &LorentzPoint, w: &[f64], kappa: Curvature) -> Result<TangentVector> {
    let ip = lorentz_inner(x.coords(), w)?;
    let k = kappa.value();
    let vec = w
        .iter()
        .zip(x.coords())
        .map(|(wi, xi)| wi - k * ip * xi)
        .collect();
    Ok(TangentVector::from_parts_unchecked(x.clone(), vec))
}

/// `cosh(a) x + sinh(a) v / a` with `a = sqrt(-k <v,v>_L)`.
///
/// The time coordinate of the result is recomputed from its spatial part,
/// which keeps the residual at rounding level for long geodesics.
pub fn exp_map(x: &LorentzPoint, v: &TangentVector, kappa: Curvature) -> Result<LorentzPoint> {
    if v.base().coords().len() != x.coords().len() || v.vec().len() != x.coords().len() {
        return Err(Error::InvalidDimension(format!(
            "exp_map base has {} coordinates, tangent has {}",
            x.coords().len(),
            v.vec().len()
        )));
    }
    let vv = minkowski_dot(v.vec(), v.vec());
    if vv < -MANIFOLD_TOL {
        return Err(Error::InvalidTangent(vv));
    }
    let alpha = (-kappa.value() * vv.max(0.0)).sqrt();
    if alpha < EXP_SERIES_THRESHOLD {
        let coords = x.coords().iter().zip(v.vec()).map(|(a, b)| a + b).collect();
        return Ok(LorentzPoint::from_coords_unchecked(coords));
    }
    let c = alpha.cosh();
    let s = alpha.sinh() / alpha;
    let spatial: Vec<f64> = x.spatial()
        .iter()
        .zip(&v.vec()[1..])
        .map(|(a, b)| c * a + s * b)
        .collect();
    Ok(LorentzPoint::from_spatial(&spatial, kappa))
}

/// `arcosh(b)/sqrt(b^2-1) (y - b x)` with `b = k <x,y>_L`.
pub fn log_map(x: &LorentzPoint, y: &LorentzPoint, kappa: Curvature) -> Result<TangentVector> {
    if x.coords().len() != y.coords().len() {
        return Err(Error::InvalidDimension(format!(
            "log_map points have {} and {} coordinates",
            x.coords().len(),
            y.coords().len()
        )));
    }
    require_on_manifold(x, kappa)?;
    require_on_manifold(y, kappa)?;
    let beta = kappa.value() * minkowski_dot(x.coords(), y.coords());
    if beta < 1.0 - MANIFOLD_TOL {
        return Err(Error::NumericalDomain(format!(
            "k<x,y>_L = {beta} is below 1"
        )));
    }
    let coef = arcosh_ratio(beta);
    let vec = y
        .coords()
        .iter()
        .zip(x.coords())
        .map(|(yi, xi)| coef * (yi - beta * xi))
        .collect();
    Ok(TangentVector::from_parts_unchecked(x.clone(), vec))
}

/// `arcosh(b)/sqrt(b^2-1)`, continuous at `b = 1` where it equals 1.
pub(crate) fn arcosh_ratio(beta: f64) -> f64 {
    let d = beta - 1.0;
    if d < LOG_SERIES_THRESHOLD {
        // Expansion in d = b - 1; the linear term is -d/3.
        let d = d.max(0.0);
        1.0 - d / 3.0 + 2.0 * d * d / 15.0
    } else {
        beta.acosh() / (beta * beta - 1.0).sqrt()
    }
}

/// `arcosh(k <x,y>_L)` with the argument clamped to at least 1.
///
/// This is the anomaly score and training loss; it carries no `1/sqrt(-k)`
/// factor, so it is the geodesic length measured in units of the curvature
/// radius.
pub fn lorentz_distance(x: &LorentzPoint, y: &LorentzPoint, kappa: Curvature) -> Result<f64> {
    if x.coords().len() != y.coords().len() {
        return Err(Error::InvalidDimension(format!(
            "lorentz_distance points have {} and {} coordinates",
            x.coords().len(),
            y.coords().len()
        )));
    }
    require_on_manifold(x, kappa)?;
    require_on_manifold(y, kappa)?;
    let beta = kappa.value() * minkowski_dot(x.coords(), y.coords());
    Ok(beta.max(1.0).acosh())
}

/// `v / (sqrt(|k|) ||v||_L)` for a future-timelike `v`.
pub fn project_unit_hyperboloid(v: &[f64], kappa: Curvature) -> Result<LorentzPoint> {
    if v.len() < 2 {
        return Err(Error::InvalidDimension(format!(
            "projection needs at least 2 coordinates, got {}",
            v.len()
        )));
    }
    let vv = minkowski_dot(v, v);
    if !(vv < 0.0) || !(v[0] > 0.0) {
        return Err(Error::NotTimelike(vv));
    }
    let denom = kappa.sqrt_abs() * (-vv).sqrt();
    Ok(LorentzPoint::from_coords_unchecked(
        v.iter().map(|a| a / denom).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k(v: f64) -> Curvature {
        Curvature::new(v).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn curvature_rejects_non_negative() {
        assert!(matches!(Curvature::new(0.0), Err(Error::InvalidCurvature(_))));
        assert!(matches!(Curvature::new(0.5), Err(Error::InvalidCurvature(_))));
        assert!(Curvature::new(f64::NAN).is_err());
        assert_eq!(Curvature::from_log_magnitude(0.0).unwrap().value(), -1.0);
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(lorentz_inner(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let x = [1f64.cosh(), 1f64.sinh(), 0.0];
        let y = [2f64.cosh(), 2f64.sinh(), 0.0];
        let ip = lorentz_inner(&x, &y).unwrap();
        assert!(close(ip, -1f64.cosh(), 1e-12));
        assert!(close(ip, -1.543081, 1e-6));
        assert!(matches!(
            lorentz_inner(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::InvalidDimension(_))
        ));
        assert!(lorentz_inner(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn norm_examples() {
        assert_eq!(lorentz_norm(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(lorentz_norm(&[0.0, 3.0, 4.0]), 5.0);
        assert!(close(lorentz_norm(&[1f64.cosh(), 1f64.sinh(), 0.0]), 1.0, 1e-12));
    }

    #[test]
    fn origin_examples() {
        assert_eq!(origin(k(-1.0), 2).coords(), &[1.0, 0.0, 0.0]);
        assert_eq!(origin(k(-4.0), 2).coords(), &[0.5, 0.0, 0.0]);
        assert_eq!(origin(k(-0.25), 3).coords(), &[2.0, 0.0, 0.0, 0.0]);
        for kv in [-0.25, -1.0, -4.0] {
            let o = origin(k(kv), 5);
            assert_eq!(manifold_residual(o.coords(), k(kv)), 0.0);
        }
    }

    #[test]
    fn exp_map_examples() {
        let kk = k(-1.0);
        let o = origin(kk, 2);
        let z = exp_map(&o, &TangentVector::zero(o.clone()), kk).unwrap();
        assert_eq!(z, o);

        let v = TangentVector::new(o.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        let z = exp_map(&o, &v, kk).unwrap();
        assert!(close(z.coords()[0], 1.543081, 1e-6));
        assert!(close(z.coords()[1], 1.175201, 1e-6));
        assert!(close(z.coords()[0], 1f64.cosh(), 1e-14));
        assert_eq!(z.coords()[2], 0.0);

        let v = TangentVector::new(o.clone(), vec![0.0, 0.6, 0.8]).unwrap();
        let z = exp_map(&o, &v, kk).unwrap();
        let s = 1f64.sinh();
        assert!(close(z.coords()[0], 1f64.cosh(), 1e-12));
        assert!(close(z.coords()[1], 0.6 * s, 1e-12));
        assert!(close(z.coords()[2], 0.8 * s, 1e-12));
        assert!(manifold_residual(z.coords(), kk).abs() < 1e-10);
    }

    #[test]
    fn exp_map_rejects_timelike_tangent() {
        let kk = k(-1.0);
        let o = origin(kk, 2);
        let v = TangentVector::from_parts_unchecked(o.clone(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(exp_map(&o, &v, kk), Err(Error::InvalidTangent(_))));
    }

    #[test]
    fn tangent_constructor_checks_orthogonality() {
        let o = origin(k(-1.0), 2);
        assert!(matches!(
            TangentVector::new(o, vec![0.5, 1.0, 0.0]),
            Err(Error::InvalidTangent(_))
        ));
    }

    #[test]
    fn log_map_examples() {
        let kk = k(-1.0);
        let o = origin(kk, 2);
        let v = log_map(&o, &o, kk).unwrap();
        assert_eq!(v.vec(), &[0.0, 0.0, 0.0]);

        let y = LorentzPoint::new(vec![1f64.cosh(), 1f64.sinh(), 0.0], kk).unwrap();
        let v = log_map(&o, &y, kk).unwrap();
        assert!(close(v.vec()[0], 0.0, 1e-12));
        assert!(close(v.vec()[1], 1.0, 1e-12));
        assert!(close(v.vec()[2], 0.0, 1e-12));
    }

    #[test]
    fn log_map_rejects_off_manifold() {
        let kk = k(-1.0);
        let o = origin(kk, 2);
        let bad = LorentzPoint::from_coords_unchecked(vec![1.1, 0.0, 0.0]);
        assert!(matches!(log_map(&o, &bad, kk), Err(Error::NotOnManifold { .. })));
        assert!(matches!(
            lorentz_distance(&bad, &o, kk),
            Err(Error::NotOnManifold { .. })
        ));
    }

    #[test]
    fn distance_examples() {
        let kk = k(-1.0);
        let o = origin(kk, 2);
        let y = LorentzPoint::new(vec![2f64.cosh(), 2f64.sinh(), 0.0], kk).unwrap();
        assert_eq!(lorentz_distance(&y, &y, kk).unwrap(), 0.0);
        assert!(close(lorentz_distance(&o, &y, kk).unwrap(), 2.0, 1e-12));
    }

    #[test]
    fn projection_examples() {
        let p = project_unit_hyperboloid(&[2.0, 0.0, 0.0], k(-1.0)).unwrap();
        assert_eq!(p.coords(), &[1.0, 0.0, 0.0]);
        let p = project_unit_hyperboloid(&[2.0, 0.0, 0.0], k(-4.0)).unwrap();
        assert_eq!(p.coords(), &[0.5, 0.0, 0.0]);
        assert!(matches!(
            project_unit_hyperboloid(&[0.0, 1.0, 0.0], k(-1.0)),
            Err(Error::NotTimelike(_))
        ));
        assert!(matches!(
            project_unit_hyperboloid(&[-2.0, 0.0, 0.0], k(-1.0)),
            Err(Error::NotTimelike(_))
        ));
    }

    #[test]
    fn manifold_check_examples() {
        let kk = k(-1.0);
        assert!(check_on_manifold(&[1.0, 0.0, 0.0], kk, 1e-9));
        assert!(!check_on_manifold(&[-1.0, 0.0, 0.0], kk, 1e-9));
        assert!(!check_on_manifold(&[1.1, 0.0, 0.0], kk, 1e-9));
    }

    #[test]
    fn log_map_series_branch_is_continuous() {
        let b = 1.0 + LOG_SERIES_THRESHOLD;
        let exact = b.acosh() / (b * b - 1.0).sqrt();
        let lo = arcosh_ratio(b - 1e-15);
        assert!((exact - lo).abs() < 1e-8);
        assert_eq!(arcosh_ratio(1.0), 1.0);
        assert_eq!(arcosh_ratio(0.9999999999), 1.0);
    }

    fn curvature_strategy() -> impl Strategy<Value = Curvature> {
        prop_oneof![Just(k(-0.25)), Just(k(-1.0)), Just(k(-4.0))]
    }

    /// Point `exp_o(v)` for a spatial vector of geodesic length `radius`.
    fn point_at(dir: &[f64], radius: f64, kappa: Curvature) -> LorentzPoint {
        let n = euclid_norm(dir).max(1e-12);
        let o = origin(kappa, dir.len());
        let mut vec = vec![0.0];
        vec.extend(dir.iter().map(|d| d / n * radius / kappa.sqrt_abs()));
        exp_map(&o, &TangentVector::from_parts_unchecked(o.clone(), vec), kappa).unwrap()
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(
            kappa in curvature_strategy(),
            base_dir in prop::collection::vec(-1.0f64..1.0, 3),
            base_r in 0.0f64..2.0,
            w in prop::collection::vec(-1.0f64..1.0, 4),
            norm in 0.01f64..5.0,
        ) {
            let x = point_at(&base_dir, base_r, kappa);
            let t = project_to_tangent(&x, &w, kappa).unwrap();
            let tn = lorentz_norm(t.vec());
            prop_assume!(tn > 1e-6);
            let v: Vec<f64> = t.vec().iter().map(|a| a / tn * norm).collect();
            let v = TangentVector::new(x.clone(), v).unwrap();
            let y = exp_map(&x, &v, kappa).unwrap();
            // Residual evaluation itself rounds at ~eps * x0^2 this far out.
            let scale = y.time() * y.time() * (-kappa.value());
            prop_assert!(manifold_residual(y.coords(), kappa).abs() <= MANIFOLD_TOL * scale.max(1.0));
            let back = log_map(&x, &y, kappa).unwrap();
            let err: f64 = back.vec().iter().zip(v.vec()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err / euclid_norm(v.vec()) < 1e-8, "rel err {}", err / euclid_norm(v.vec()));
            // tangency of the log map
            let ip = lorentz_inner(back.vec(), x.coords()).unwrap();
            prop_assert!(ip.abs() < 1e-9 * euclid_norm(x.coords()).max(1.0) * euclid_norm(back.vec()).max(1.0));
            // geodesic consistency of the distance
            let d = lorentz_distance(&x, &y, kappa).unwrap();
            let alpha = (-kappa.value() * minkowski_dot(v.vec(), v.vec())).sqrt();
            prop_assert!((d - alpha).abs() < 1e-8 * alpha.max(1.0));
        }

        #[test]
        fn triangle_inequality(
            a in prop::collection::vec(-1.0f64..1.0, 3),
            b in prop::collection::vec(-1.0f64..1.0, 3),
            c in prop::collection::vec(-1.0f64..1.0, 3),
            ra in 0.0f64..3.0, rb in 0.0f64..3.0, rc in 0.0f64..3.0,
        ) {
            let kk = k(-1.0);
            let (a, b, c) = (point_at(&a, ra, kk), point_at(&b, rb, kk), point_at(&c, rc, kk));
            let dab = lorentz_distance(&a, &b, kk).unwrap();
            let dbc = lorentz_distance(&b, &c, kk).unwrap();
            let dac = lorentz_distance(&a, &c, kk).unwrap();
            prop_assert!(dac <= dab + dbc + 1e-9);
            prop_assert!((dab - lorentz_distance(&b, &a, kk).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn inner_product_is_bilinear(
            x in prop::collection::vec(-3.0f64..3.0, 4),
            y in prop::collection::vec(-3.0f64..3.0, 4),
            z in prop::collection::vec(-3.0f64..3.0, 4),
            a in -2.0f64..2.0, b in -2.0f64..2.0,
        ) {
            let comb: Vec<f64> = x.iter().zip(&z).map(|(xi, zi)| a * xi + b * zi).collect();
            let lhs = lorentz_inner(&comb, &y).unwrap();
            let rhs = a * lorentz_inner(&x, &y).unwrap() + b * lorentz_inner(&z, &y).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()) * 10.0);
            prop_assert_eq!(lorentz_inner(&x, &y).unwrap(), lorentz_inner(&y, &x).unwrap());
        }

        #[test]
        fn attention_numerator_is_negative_squared_distance(
            a in prop::collection::vec(-1.0f64..1.0, 3),
            b in prop::collection::vec(-1.0f64..1.0, 3),
            ra in 0.0f64..2.0, rb in 0.0f64..2.0,
        ) {
            let kk = k(-1.0);
            let (x, y) = (point_at(&a, ra, kk), point_at(&b, rb, kk));
            let diff: Vec<f64> = x.coords().iter().zip(y.coords()).map(|(p, q)| p - q).collect();
            let lhs = 2.0 + 2.0 * lorentz_inner(x.coords(), y.coords()).unwrap();
            let rhs = -lorentz_inner(&diff, &diff).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn projection_of_sum_is_on_manifold(
            a in prop::collection::vec(-1.0f64..1.0, 3),
            b in prop::collection::vec(-1.0f64..1.0, 3),
            ra in 0.0f64..3.0, rb in 0.0f64..3.0,
        ) {
            let kk = k(-1.0);
            let (x, y) = (point_at(&a, ra, kk), point_at(&b, rb, kk));
            let v: Vec<f64> = x.coords().iter().zip(y.coords()).map(|(p, q)| p + q).collect();
            let z = project_unit_hyperboloid(&v, kk).unwrap();
            prop_assert!(manifold_residual(z.coords(), kk).abs() < 1e-10);
            prop_assert!(z.time() > 0.0);
        }
    }
}
