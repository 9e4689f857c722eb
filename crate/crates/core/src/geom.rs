//! Small fixed-size vector and rotation helpers.
//!
//! Matrices are row-major `[[T; 3]; 3]`; `m[r][c]`.

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    let d = sub(a, b);
    dot(d, d)
}

/// Unit vector along `a`, or `None` when `|a|` is zero.
pub fn normalize<T: Real>(a: Vec3<T>) -> Option<Vec3<T>> {
    let n = norm(a);
    (n > T::zero()).then(|| scale(a, T::one() / n))
}

/// `a * (1 - t) + b * t`
#[inline]
pub fn lerp<T: Real>(a: Vec3<T>, b: Vec3<T>, t: T) -> Vec3<T> {
    add(a, scale(sub(b, a), t))
}

pub fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

#[inline]
pub fn mat_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `m^T v`
#[inline]
pub fn mat_t_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = *m;
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[c][r];
        }
    }
    out
}

pub fn det<T: Real>(m: &Mat3<T>) -> T {
    dot(m[0], cross(m[1], m[2]))
}

/// Matrix whose columns are `a`, `b`, `c`.
pub fn from_columns<T: Real>(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Mat3<T> {
    [[a[0], b[0], c[0]], [a[1], b[1], c[1]], [a[2], b[2], c[2]]]
}

pub fn column<T: Real>(m: &Mat3<T>, c: usize) -> Vec3<T> {
    [m[0][c], m[1][c], m[2][c]]
}

/// Rotation by `angle` radians about `axis` (need not be unit; zero axis gives identity).
pub fn axis_angle<T: Real>(axis: Vec3<T>, angle: T) -> Mat3<T> {
    let Some([x, y, z]) = normalize(axis) else {
        return identity();
    };
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Rotation matrix of quaternion `[w, x, y, z]`; the quaternion is normalized first.
pub fn quat_to_mat<T: Real>(q: [T; 4]) -> Option<Mat3<T>> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n.is_nan() || n <= T::zero() {
        return None;
    }
    let [w, x, y, z] = q.map(|v| v / n);
    let two = T::lit(2.0);
    let o = T::one();
    Some([
        [o - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), o - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), o - two * (x * x + y * y)],
    ])
}

/// Unit quaternion `[w, x, y, z]` (with `w >= 0`) of a rotation matrix.
pub fn mat_to_quat<T: Real>(m: &Mat3<T>) -> [T; 4] {
    let one = T::one();
    let quarter = T::lit(0.25);
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > T::zero() {
        let s = (tr + one).sqrt() * T::lit(2.0);
        [quarter * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
        [(m[2][1] - m[1][2]) / s, quarter * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, quarter * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, quarter * s]
    };
    if q[0] < T::zero() {
        q.map(|v| -v)
    } else {
        q
    }
}

/// Largest deviation of `m^T m` from the identity, plus `|det m - 1|`.
pub fn orthonormality_error<T: Real>(m: &Mat3<T>) -> T {
    let mtm = mat_mul(&transpose(m), m);
    let id = identity::<T>();
    let mut err = (det(m) - T::one()).abs();
    for r in 0..3 {
        for c in 0..3 {
            err = err.max((mtm[r][c] - id[r][c]).abs());
        }
    }
    err
}

/// Largest singular value of `m` (square root of the top eigenvalue of `m^T m`).
pub fn spectral_norm<T: Real>(m: &Mat3<T>) -> T {
    let a = mat_mul(&transpose(m), m);
    // power iteration on a symmetric PSD 3x3 matrix
    let mut v = [T::one(), T::lit(0.7), T::lit(0.3)];
    let mut lambda = T::zero();
    for _ in 0..100 {
        let w = mat_vec(&a, v);
        let n = norm(w);
        if n <= T::zero() {
            return T::zero();
        }
        lambda = n;
        v = scale(w, T::one() / n);
    }
    lambda.sqrt()
}

pub fn cast3<T: Real, U: Real>(v: Vec3<T>) -> Vec3<U> {
    v.map(|x| U::lit(x.to_f64_lossless()))
}

pub fn cast_mat<T: Real, U: Real>(m: &Mat3<T>) -> Mat3<U> {
    m.map(cast3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quaternion_round_trip() {
        let r = axis_angle([0.3, -1.0, 0.5], 2.1f64);
        assert!(orthonormality_error(&r) < 1e-12);
        let back = quat_to_mat(mat_to_quat(&r)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[i][j] - r[i][j]).abs() < 1e-12);
            }
        }
        let rz = axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let v = mat_vec(&rz, [1.0, 0.0, 0.0]);
        assert!((v[1] - 1.0).abs() < 1e-15 && v[0].abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = [[2.0, 0.0, 0.0], [0.0, -3.0, 0.0], [0.0, 0.0, 0.5]];
        assert!((spectral_norm(&m) - 3.0f64).abs() < 1e-9);
    }
}
