//! Vectors, rays, rigid poses and the line-bundle solvers shared by the
//! reconstruction and gaze stages.
//!
//! Lengths are millimeters and angles crossing the public API are degrees.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type UnitVec3 = Unit<Vector3<f64>>;

/// Tolerance for geometric degeneracy tests.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: UnitVec3,
}

impl Ray {
    pub fn new(origin: Vec3, dir: UnitVec3) -> Self {
        Self { origin, dir }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir.into_inner() * t
    }
}

/// Rigid transform from a local frame into world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose from a raw matrix, checking `RᵀR = I` and `det R = +1`.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > GEOM_EPS {
            return Err(Error::InvalidScene {
                invariant: format!("rotation is orthonormal (|RᵀR - I| = {ortho:e})"),
            });
        }
        if (rotation.determinant() - 1.0).abs() > GEOM_EPS {
            return Err(Error::InvalidScene { invariant: "rotation determinant is +1".into() });
        }
        Ok(Self { rotation: Rotation3::from_matrix_unchecked(rotation), translation })
    }

    /// Camera-style pose at `eye` whose local +z looks at `target`, local +x
    /// to the right and local +y down in the image.
    pub fn look_at(eye: Vec3, target: Vec3, world_up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&world_up).normalize();
        let y = z.cross(&x);
        let m = Matrix3::from_columns(&[x, y, z]);
        Self { rotation: Rotation3::from_matrix_unchecked(m), translation: eye }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    #[inline]
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    #[inline]
    pub fn inverse_transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.inverse() * v
    }

    /// Applies a uniform scale to the translation only (rotation is scale free).
    pub fn scaled(&self, factor: f64) -> Self {
        Self { rotation: self.rotation, translation: self.translation * factor }
    }
}

/// Undirected 3D line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line3 {
    pub point: Vec3,
    pub dir: UnitVec3,
}

impl Line3 {
    pub fn new(point: Vec3, dir: UnitVec3) -> Self {
        Self { point, dir }
    }

    pub fn flipped(&self) -> Self {
        Self { point: self.point, dir: -self.dir }
    }

    pub fn distance_to_point(&self, x: &Vec3) -> f64 {
        let w = x - self.point;
        let d = self.dir.as_ref();
        (w - d * w.dot(d)).norm()
    }

    /// Closest points `(on self, on other)`, or `None` for (near-)parallel lines.
    pub fn closest_points(&self, other: &Line3) -> Option<(Vec3, Vec3)> {
        let d1 = self.dir.as_ref();
        let d2 = other.dir.as_ref();
        let w = self.point - other.point;
        let b = d1.dot(d2);
        let denom = 1.0 - b * b;
        if denom < 1e-12 {
            return None;
        }
        let d = d1.dot(&w);
        let e = d2.dot(&w);
        let s = (b * e - d) / denom;
        let t = (e - b * d) / denom;
        Some((self.point + d1 * s, other.point + d2 * t))
    }

    /// Minimum distance between two lines (parallel lines fall back to the
    /// point-line distance).
    pub fn distance_to_line(&self, other: &Line3) -> f64 {
        let c = self.dir.cross(&other.dir);
        let cn = c.norm();
        if cn < 1e-12 {
            return self.distance_to_point(&other.point);
        }
        ((other.point - self.point).dot(&c) / cn).abs()
    }
}

/// Mirror reflection of an incident direction about a surface normal.
#[inline]
pub fn reflect(d: &UnitVec3, n: &UnitVec3) -> UnitVec3 {
    let r = d.as_ref() - n.as_ref() * (2.0 * d.dot(n));
    // Re-normalize to keep |r| = 1 at machine precision.
    Unit::new_normalize(r)
}

/// Deflectometric surface normal: bisector of the directions from the surface
/// point to the camera and to the observed screen point.
pub fn half_vector_normal(to_camera: &UnitVec3, to_screen: &UnitVec3) -> Result<UnitVec3> {
    let h = to_camera.as_ref() + to_screen.as_ref();
    if h.norm() < GEOM_EPS {
        return Err(Error::DegenerateBisector);
    }
    Ok(Unit::new_normalize(h))
}

/// Both parameters where the line `origin + t·dir` meets the sphere, ascending.
#[inline]
pub fn ray_sphere_roots(ray: &Ray, center: &Vec3, radius: f64) -> Option<(f64, f64)> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable pairing of the two roots.
    let q = if b > 0.0 { -b - sq } else { -b + sq };
    let (mut t0, mut t1) = if q != 0.0 { (q, c / q) } else { (-b, -b) };
    if t0 > t1 {
        std::mem::swap(&mut t0, &mut t1);
    }
    Some((t0, t1))
}

/// Smallest `t > 1e-9` on the ray hitting the sphere.
pub fn intersect_ray_sphere(ray: &Ray, center: &Vec3, radius: f64) -> Option<f64> {
    let (t0, t1) = ray_sphere_roots(ray, center, radius)?;
    if t0 > GEOM_EPS {
        Some(t0)
    } else if t1 > GEOM_EPS {
        Some(t1)
    } else {
        None
    }
}

/// Ray / plane intersection, `None` when parallel or behind the origin.
pub fn intersect_ray_plane(ray: &Ray, plane_point: &Vec3, plane_normal: &Vec3) -> Option<f64> {
    let denom = ray.dir.dot(plane_normal);
    if denom.abs() < GEOM_EPS {
        return None;
    }
    let t = (plane_point - ray.origin).dot(plane_normal) / denom;
    (t > GEOM_EPS).then_some(t)
}

/// Point minimizing the summed squared distance to a bundle of lines, with the
/// RMS distance of the bundle to that point.
pub fn least_squares_point(lines: &[Line3]) -> Result<(Vec3, f64)> {
    if lines.len() < 2 {
        return Err(Error::InsufficientLines { needed: 2, got: lines.len() });
    }
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for line in lines {
        let d = line.dir.as_ref();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * line.point;
    }
    let eig = SymmetricEigen::new(a);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= GEOM_EPS * max {
        return Err(Error::DegenerateBundle(format!(
            "normal matrix eigenvalue ratio {:e} (near-parallel lines)",
            min / max
        )));
    }
    let mut x = Vec3::zeros();
    for k in 0..3 {
        let v = eig.eigenvectors.column(k);
        x += v * (v.dot(&b) / eig.eigenvalues[k]);
    }
    let mean_sq =
        lines.iter().map(|l| l.distance_to_point(&x).powi(2)).sum::<f64>() / lines.len() as f64;
    Ok((x, mean_sq.sqrt()))
}

const MAX_AXIS_PAIRS: usize = 2000;
/// Midpoint spread, relative to the bundle scale, below which lines count as concurrent.
const CONCURRENT_SPREAD: f64 = 1e-3;

/// Axis that best explains a normal bundle of a rotationally symmetric surface.
///
/// Closest-approach midpoints of line pairs are fitted with a principal line,
/// which then seeds a Gauss-Newton refinement of the summed squared
/// line-to-axis distances.
pub fn best_fit_axis(lines: &[Line3]) -> Result<Line3> {
    if lines.len() < 3 {
        return Err(Error::InsufficientLines { needed: 3, got: lines.len() });
    }
    let n = lines.len();
    let total_pairs = n * (n - 1) / 2;
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(total_pairs.min(MAX_AXIS_PAIRS));
    if total_pairs <= MAX_AXIS_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0a11_5eed);
        while pairs.len() < MAX_AXIS_PAIRS {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                pairs.push((i.min(j), i.max(j)));
            }
        }
    }

    // Pairs closer than ~1° to parallel have unstable midpoints.
    let mut mids: Vec<Vec3> = pairs
        .iter()
        .filter(|&&(i, j)| lines[i].dir.cross(&lines[j].dir).norm() > 0.02)
        .filter_map(|&(i, j)| lines[i].closest_points(&lines[j]))
        .map(|(a, b)| (a + b) * 0.5)
        .collect();
    if mids.len() < 3 {
        return Err(Error::DegenerateBundle("too few non-parallel line pairs".into()));
    }

    // Trim far-flung midpoints from almost-parallel pairs.
    let median = component_median(&mids);
    let mut dists: Vec<f64> = mids.iter().map(|m| (m - median).norm()).collect();
    dists.sort_by(f64::total_cmp);
    let cutoff = 3.0 * dists[dists.len() / 2] + GEOM_EPS;
    mids.retain(|m| (m - median).norm() <= cutoff);

    let centroid = mids.iter().sum::<Vec3>() / mids.len() as f64;
    let mut cov = Matrix3::zeros();
    for m in &mids {
        let c = m - centroid;
        cov += c * c.transpose();
    }
    cov /= mids.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s1 = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let s2 = eig.eigenvalues[order[1]].max(0.0).sqrt();
    let scale = lines.iter().map(|l| l.point.norm()).fold(1.0, f64::max);
    // Concurrent lines collapse the midpoints onto a point.
    if s1 < CONCURRENT_SPREAD * scale || s1 < 1.5 * s2 {
        return Err(Error::DegenerateBundle(format!(
            "no dominant principal direction among pair midpoints (s1 = {s1:.3e}, s2 = {s2:.3e})"
        )));
    }
    let dir0 = Unit::new_normalize(eig.eigenvectors.column(order[0]).into_owned());
    let initial = Line3::new(centroid, dir0);
    Ok(refine_axis(lines, initial))
}

fn component_median(points: &[Vec3]) -> Vec3 {
    let mut out = Vec3::zeros();
    for k in 0..3 {
        let mut c: Vec<f64> = points.iter().map(|p| p[k]).collect();
        c.sort_by(f64::total_cmp);
        out[k] = c[c.len() / 2];
    }
    out
}

fn orthonormal_basis(u: &Vec3) -> (Vec3, Vec3) {
    let helper = if u.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = u.cross(&helper).normalize();
    let e2 = u.cross(&e1);
    (e1, e2)
}

fn signed_line_distance(line: &Line3, q: &Vec3, u: &Vec3) -> Option<f64> {
    let c = line.dir.cross(u);
    let cn = c.norm();
    (cn > 0.017).then(|| (line.point - q).dot(&c) / cn)
}

/// Gauss-Newton on the signed line-to-axis distances. Lines within ~1° of the
/// axis direction are skipped (their signed distance is ill-conditioned).
fn refine_axis(lines: &[Line3], initial: Line3) -> Line3 {
    let mut q = initial.point;
    let mut u = initial.dir.into_inner();
    let cost = |q: &Vec3, u: &Vec3| -> f64 {
        lines.iter().filter_map(|l| signed_line_distance(l, q, u)).map(|r| r * r).sum()
    };
    let mut current = cost(&q, &u);
    let mut damping = 1e-6;
    for _ in 0..100 {
        let (e1, e2) = orthonormal_basis(&u);
        let apply = |p: &Vector4<f64>| -> (Vec3, Vec3) {
            let nu = (u + e1 * p[0] + e2 * p[1]).normalize();
            (q + e1 * p[2] + e2 * p[3], nu)
        };
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        let h = 1e-7;
        for line in lines {
            let Some(r0) = signed_line_distance(line, &q, &u) else { continue };
            let mut jrow = Vector4::zeros();
            let mut ok = true;
            for k in 0..4 {
                let mut p = Vector4::zeros();
                p[k] = h;
                let (qp, up) = apply(&p);
                p[k] = -h;
                let (qm, um) = apply(&p);
                match (signed_line_distance(line, &qp, &up), signed_line_distance(line, &qm, &um)) {
                    (Some(a), Some(b)) => jrow[k] = (a - b) / (2.0 * h),
                    _ => ok = false,
                }
            }
            if ok {
                jtj += jrow * jrow.transpose();
                jtr += jrow * r0;
            }
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut m = jtj;
            for k in 0..4 {
                m[(k, k)] += damping * (1.0 + jtj[(k, k)]);
            }
            let Some(step) = m.lu().solve(&(-jtr)) else { break };
            let (nq, nu) = apply(&step);
            let next = cost(&nq, &nu);
            if next <= current {
                let rel = (current - next) / current.max(1e-300);
                q = nq;
                u = nu;
                current = next;
                damping = (damping * 0.3).max(1e-12);
                improved = rel > 1e-15 && step.norm() > 1e-15;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    // Re-anchor the axis point closest to the original centroid.
    let along = (initial.point - q).dot(&u);
    Line3::new(q + u * along, Unit::new_normalize(u))
}

/// Unsigned angle between two unit vectors in degrees.
#[inline]
pub fn angle_between(u: &UnitVec3, v: &UnitVec3) -> f64 {
    u.dot(v).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Rotation by `angle_deg` about `axis` (right-hand rule).
pub fn rotation_about(axis: &UnitVec3, angle_deg: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(axis, angle_deg.to_radians())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assume, proptest, Strategy, TestCaseError};
    use rand_distr::{Distribution, StandardNormal};

    fn unit(x: f64, y: f64, z: f64) -> UnitVec3 {
        Unit::new_normalize(Vec3::new(x, y, z))
    }

    fn random_unit(rng: &mut impl Rng) -> UnitVec3 {
        loop {
            let v = Vec3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            );
            if v.norm() > 1e-3 {
                return Unit::new_normalize(v);
            }
        }
    }

    #[test]
    fn reflect_normal_incidence() {
        let r = reflect(&unit(0.0, 0.0, -1.0), &unit(0.0, 0.0, 1.0));
        assert_abs_diff_eq!(r.into_inner(), Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn reflect_45_degrees() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = reflect(&unit(h, 0.0, -h), &unit(0.0, 0.0, 1.0));
        assert_abs_diff_eq!(r.into_inner(), Vec3::new(h, 0.0, h), epsilon = 1e-15);
    }

    #[test]
    fn half_vector_examples() {
        let n = half_vector_normal(&unit(0.0, 0.0, 1.0), &unit(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(n.into_inner(), Vec3::z(), epsilon = 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let n = half_vector_normal(&unit(1.0, 0.0, 0.0), &unit(0.0, 1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(n.into_inner(), Vec3::new(h, h, 0.0), epsilon = 1e-15);
        assert!(matches!(
            half_vector_normal(&unit(1.0, 0.0, 0.0), &unit(-1.0, 0.0, 0.0)),
            Err(Error::DegenerateBisector)
        ));
    }

    #[test]
    fn ray_sphere_axial_hit_and_miss() {
        let c = Vec3::zeros();
        let hit = Ray::new(Vec3::new(0.0, 0.0, -20.0), unit(0.0, 0.0, 1.0));
        assert_abs_diff_eq!(intersect_ray_sphere(&hit, &c, 12.0).unwrap(), 8.0, epsilon = 1e-12);
        let miss = Ray::new(Vec3::new(0.0, 0.0, -20.0), unit(0.0, 1.0, 0.0));
        assert!(intersect_ray_sphere(&miss, &c, 12.0).is_none());
    }

    #[test]
    fn ray_sphere_from_inside_returns_exit() {
        let ray = Ray::new(Vec3::zeros(), unit(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(
            intersect_ray_sphere(&ray, &Vec3::zeros(), 3.0).unwrap(),
            3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ray_sphere_residual_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0;
        for _ in 0..2000 {
            let origin = Vec3::new(
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
            );
            let center = Vec3::new(rng.random_range(-5.0..5.0), 0.0, rng.random_range(-5.0..5.0));
            let r = rng.random_range(1.0..15.0);
            let aim = center + random_unit(&mut rng).into_inner() * rng.random_range(0.0..20.0);
            let ray = Ray::new(origin, Unit::new_normalize(aim - origin));
            if let Some(t) = intersect_ray_sphere(&ray, &center, r) {
                hits += 1;
                assert!(t > GEOM_EPS);
                assert!(((ray.at(t) - center).norm() - r).abs() < 1e-9);
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn least_squares_point_axes() {
        let lines = [
            Line3::new(Vec3::new(5.0, 0.0, 0.0), unit(1.0, 0.0, 0.0)),
            Line3::new(Vec3::new(0.0, -3.0, 0.0), unit(0.0, 1.0, 0.0)),
        ];
        let (p, rms) = least_squares_point(&lines).unwrap();
        assert_abs_diff_eq!(p, Vec3::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(rms, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn least_squares_point_sphere_normals() {
        let c = Vec3::new(1.0, 2.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lines: Vec<Line3> = (0..100)
            .map(|_| {
                let n = random_unit(&mut rng);
                Line3::new(c + n.as_ref() * 12.0, -n)
            })
            .collect();
        let (p, rms) = least_squares_point(&lines).unwrap();
        assert_abs_diff_eq!(p, c, epsilon = 1e-9);
        assert!(rms < 1e-9);
    }

    #[test]
    fn least_squares_point_parallel_bundle_is_degenerate() {
        let lines: Vec<Line3> = (0..5)
            .map(|i| Line3::new(Vec3::new(i as f64, 0.0, 0.0), unit(0.0, 0.0, 1.0)))
            .collect();
        assert!(matches!(least_squares_point(&lines), Err(Error::DegenerateBundle(_))));
        assert!(matches!(
            least_squares_point(&lines[..1]),
            Err(Error::InsufficientLines { .. })
        ));
    }

    /// Normals of a cone frustum about `axis` through `apex_side`.
    fn frustum_normals(origin: Vec3, axis: UnitVec3) -> Vec<Line3> {
        let (e1, e2) = orthonormal_basis(axis.as_ref());
        let half_angle = 15f64.to_radians();
        let mut out = Vec::new();
        for ring in 0..12 {
            let h = 2.0 * ring as f64;
            let radius = 10.0 - h * half_angle.tan();
            for k in 0..24 {
                let phi = (k as f64 + 0.37 * ring as f64) / 24.0 * std::f64::consts::TAU;
                let radial = e1 * phi.cos() + e2 * phi.sin();
                let p = origin + axis.as_ref() * h + radial * radius;
                let n = radial * half_angle.cos() + axis.as_ref() * half_angle.sin();
                out.push(Line3::new(p, Unit::new_normalize(n)));
            }
        }
        out
    }

    #[test]
    fn best_fit_axis_recovers_frustum_axis() {
        let axis = unit(0.0, 0.0, 1.0);
        let lines = frustum_normals(Vec3::zeros(), axis);
        let fit = best_fit_axis(&lines).unwrap();
        let ang = fit.dir.dot(&axis).abs().clamp(-1.0, 1.0).acos();
        assert!(ang < 1e-6, "axis error {ang} rad");
        assert!(fit.distance_to_point(&Vec3::new(0.0, 0.0, 4.0)) < 1e-6);
    }

    #[test]
    fn best_fit_axis_tilted_frustum() {
        let axis = unit(0.3, -0.2, 1.0);
        let origin = Vec3::new(2.0, -1.0, 0.5);
        let fit = best_fit_axis(&frustum_normals(origin, axis)).unwrap();
        let ang = fit.dir.dot(&axis).abs().clamp(-1.0, 1.0).acos();
        assert!(ang < 1e-6, "axis error {ang} rad");
        assert!(fit.distance_to_point(&origin) < 1e-6);
    }

    #[test]
    fn best_fit_axis_sphere_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lines: Vec<Line3> = (0..200)
            .map(|_| {
                let n = random_unit(&mut rng);
                Line3::new(n.as_ref() * 12.0, n)
            })
            .collect();
        assert!(matches!(best_fit_axis(&lines), Err(Error::DegenerateBundle(_))));
    }

    #[test]
    fn angle_examples() {
        assert_abs_diff_eq!(angle_between(&unit(0.0, 0.0, 1.0), &unit(0.0, 0.0, 1.0)), 0.0);
        assert_abs_diff_eq!(
            angle_between(&unit(1.0, 0.0, 0.0), &unit(0.0, 1.0, 0.0)),
            90.0,
            epsilon = 1e-12
        );
        let v = unit(0.2, 0.5, 0.8);
        let axis = Unit::new_normalize(v.cross(&Vec3::x()));
        let w = Unit::new_normalize(rotation_about(&axis, 3.0) * v.into_inner());
        assert_abs_diff_eq!(angle_between(&v, &w), 3.0, epsilon = 1e-9);
    }

    #[test]
    fn pose_round_trip_and_validation() {
        let pose = RigidPose::look_at(Vec3::new(0.0, -20.0, 40.0), Vec3::zeros(), Vec3::y());
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_abs_diff_eq!(pose.inverse_transform_point(&pose.transform_point(&p)), p, epsilon = 1e-12);
        assert!(RigidPose::from_matrix(Matrix3::identity() * 2.0, Vec3::zeros()).is_err());
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        assert!(RigidPose::from_matrix(flip, Vec3::zeros()).is_err());
    }

    fn arb_unit() -> impl Strategy<Value = UnitVec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 1e-2)
            .prop_map(|(x, y, z)| unit(x, y, z))
    }

    proptest! {
        #[test]
        fn reflect_identities(d in arb_unit(), n in arb_unit()) {
            let r = reflect(&d, &n);
            prop_assert!((r.norm() - 1.0).abs() < 1e-12);
            prop_assert!((r.dot(&n) + d.dot(&n)).abs() < 1e-12);
            // coplanarity: r lies in span(d, n)
            prop_assert!(r.dot(&d.cross(&n)).abs() < 1e-12);
            let back = reflect(&-r, &n);
            prop_assert!((back.into_inner() + d.into_inner()).amax() < 1e-12);
        }

        #[test]
        fn half_vector_symmetric(a in arb_unit(), b in arb_unit()) {
            prop_assume!((a.into_inner() + b.into_inner()).norm() > 1e-6);
            let ab = half_vector_normal(&a, &b).unwrap();
            let ba = half_vector_normal(&b, &a).unwrap();
            prop_assert!((ab.into_inner() - ba.into_inner()).amax() < 1e-15);
        }

        #[test]
        fn concurrent_lines_meet_at_point(
            px in -10.0f64..10.0, py in -10.0f64..10.0, pz in -10.0f64..10.0,
            dirs in proptest::collection::vec(arb_unit(), 3..20),
            offsets in proptest::collection::vec(-20.0f64..20.0, 20),
        ) {
            let p = Vec3::new(px, py, pz);
            let lines: Vec<Line3> = dirs.iter().zip(&offsets)
                .map(|(d, s)| Line3::new(p + d.as_ref() * *s, *d)).collect();
            match least_squares_point(&lines) {
                Ok((x, rms)) => {
                    prop_assert!((x - p).amax() < 1e-9);
                    prop_assert!(rms < 1e-9);
                }
                Err(Error::DegenerateBundle(_)) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn line_ops_ignore_direction_sign(d1 in arb_unit(), d2 in arb_unit(), x in -5.0f64..5.0) {
            let a = Line3::new(Vec3::new(x, 1.0, -2.0), d1);
            let b = Line3::new(Vec3::new(0.5, x, 3.0), d2);
            let q = Vec3::new(1.0, x, 0.0);
            prop_assert!((a.distance_to_point(&q) - a.flipped().distance_to_point(&q)).abs() < 1e-12);
            prop_assert!((a.distance_to_line(&b) - a.flipped().distance_to_line(&b.flipped())).abs() < 1e-9);
        }
    }
}
