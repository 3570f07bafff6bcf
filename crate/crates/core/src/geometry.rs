//! Multi-view geometry kernels: essential matrices, triangulation, absolute
//! pose from three points, and least-squares point-set alignment.

use nalgebra::{DMatrix, Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};

use crate::model::Pose;

/// Essential matrix `E` with `x_bᵀ E x_a = 0` from at least 8 bearing pairs
/// (homogeneous normalized image coordinates).
///
/// Also returns the ratio of the second-smallest to the largest singular
/// value of the design matrix; near zero it signals a solution family rather
/// than a unique `E` (e.g. zero baseline).
pub fn essential_eight_point(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Option<(Matrix3<f64>, f64)> {
    let n = a.len();
    if n < 8 || b.len() != n {
        return None;
    }
    let mut m = DMatrix::<f64>::zeros(n.max(9), 9);
    for i in 0..n {
        let (xa, xb) = (a[i] / a[i].z, b[i] / b[i].z);
        for r in 0..3 {
            for c in 0..3 {
                m[(i, 3 * r + c)] = xb[r] * xa[c];
            }
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t?;
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let smallest = order[8];
    let ambiguity = if s[order[0]] > 0.0 {
        s[order[7]] / s[order[0]]
    } else {
        0.0
    };
    let e = Matrix3::from_fn(|r, c| vt[(smallest, 3 * r + c)]);
    let esvd = e.svd(true, true);
    let (u, vt) = (esvd.u?, esvd.v_t?);
    let e = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt;
    Some((e, ambiguity))
}

/// First-order geometric error of a correspondence under `E`, in normalized
/// image units.
pub fn sampson_distance(e: &Matrix3<f64>, xa: &Vector3<f64>, xb: &Vector3<f64>) -> f64 {
    let (xa, xb) = (xa / xa.z, xb / xb.z);
    let ex = e * xa;
    let etx = e.transpose() * xb;
    let num = xb.dot(&ex);
    let den = ex.x * ex.x + ex.y * ex.y + etx.x * etx.x + etx.y * etx.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

/// Closest point to two rays `o_a + s·d_a`, `o_b + t·d_b`; `None` for
/// (nearly) parallel rays.
pub fn triangulate_midpoint(
    o_a: &Vector3<f64>,
    d_a: &Vector3<f64>,
    o_b: &Vector3<f64>,
    d_b: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    triangulate_rays(&[(*o_a, *d_a), (*o_b, *d_b)])
}

/// Least-squares intersection of rays given as `(origin, direction)`.
pub fn triangulate_rays(rays: &[(Vector3<f64>, Vector3<f64>)]) -> Option<Vector3<f64>> {
    if rays.len() < 2 {
        return None;
    }
    let mut a = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (o, d) in rays {
        let d = d.normalize();
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        rhs += p * o;
    }
    let eig = a.symmetric_eigen();
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if !(min > 1e-12 * max) {
        return None;
    }
    a.lu().solve(&rhs)
}

/// Camera center and world-frame ray direction for a pose and a bearing.
pub fn world_ray(pose: &Pose, bearing: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    (pose.center(), pose.rotation.inverse() * bearing)
}

/// The four `(R, t)` candidates of an essential matrix. `t` has unit norm.
pub fn decompose_essential(e: &Matrix3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned();
    vec![(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Angle between two world rays, radians.
pub fn ray_angle(d_a: &Vector3<f64>, d_b: &Vector3<f64>) -> f64 {
    d_a.normalize().dot(&d_b.normalize()).clamp(-1.0, 1.0).acos()
}

/// Rigid (or similarity) transform `dst ≈ s·R·src + t` minimizing squared
/// error, returned as `(R, t, s)`.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Option<(Matrix3<f64>, Vector3<f64>, f64)> {
    let n = src.len();
    if n == 0 || dst.len() != n {
        return None;
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut sgn = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sgn[(2, 2)] = -1.0;
    }
    let r = u * sgn * vt;
    let scale = if with_scale {
        if var_s <= 0.0 {
            return None;
        }
        (Matrix3::from_diagonal(&svd.singular_values) * sgn).trace() / var_s
    } else {
        1.0
    };
    let t = mu_d - r * mu_s * scale;
    Some((r, t, scale))
}

fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    // c[0] x^4 + c[1] x^3 + c[2] x^2 + c[3] x + c[4]
    if c[0].abs() < 1e-14 * c.iter().map(|v| v.abs()).fold(0.0, f64::max) {
        return Vec::new();
    }
    let mut m = Matrix4::zeros();
    for i in 0..4 {
        m[(0, i)] = -c[i + 1] / c[0];
    }
    m[(1, 0)] = 1.0;
    m[(2, 1)] = 1.0;
    m[(3, 2)] = 1.0;
    let poly = |x: f64| (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
    let dpoly = |x: f64| ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..5 {
                let d = dpoly(x);
                if d == 0.0 {
                    break;
                }
                x -= poly(x) / d;
            }
            x
        })
        .collect()
}

/// Camera-from-world poses consistent with three world points seen along
/// the given bearings (Grunert's solution). Up to four candidates.
pub fn p3p(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let j: Vec<Vector3<f64>> = bearings.iter().map(|b| b.normalize()).collect();
    let a = (world[1] - world[2]).norm();
    let b = (world[0] - world[2]).norm();
    let c = (world[0] - world[1]).norm();
    if a < 1e-12 || b < 1e-12 || c < 1e-12 {
        return Vec::new();
    }
    let ca = j[1].dot(&j[2]);
    let cb = j[0].dot(&j[2]);
    let cg = j[0].dot(&j[1]);
    let (a2, b2, c2) = (a * a, b * b, c * c);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];
    let mut out = Vec::new();
    for v in quartic_roots(coeffs) {
        if !(v > 0.0) {
            continue;
        }
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        if !(u > 0.0) {
            continue;
        }
        let s1sq = b2 / (1.0 + v * v - 2.0 * v * cb);
        if !(s1sq > 0.0) {
            continue;
        }
        let s1 = s1sq.sqrt();
        let cam = [j[0] * s1, j[1] * (u * s1), j[2] * (v * s1)];
        if let Some((r, t, _)) = umeyama(world, &cam, false) {
            let rot = Rotation3::from_matrix_unchecked(r);
            out.push(Pose::new(UnitQuaternion::from_rotation_matrix(&rot), t));
        }
    }
    out
}
