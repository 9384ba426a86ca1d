//! Pinhole rays, rigid transforms, ray–plane intersection and plane-local
//! coordinates.
//!
//! Camera frames follow the usual computer-vision convention: `+x` right,
//! `+y` down, `+z` along the optical axis. Quaternions are `[w, x, y, z]`.
//! All functions are generic over [`Scalar`] so the same code runs plain or
//! on a tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::kink;
use crate::autodiff::Scalar;
use crate::real::Real;

pub type Vec3<S> = [S; 3];
pub type Quat<S> = [S; 4];

/// Rays more parallel than this (relative to `|d||n|`) miss the plane.
pub const EPS_PARALLEL: f64 = 1e-8;
/// Hits closer than this along the ray are rejected.
pub const EPS_NEAR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width >= 1
            && self.height >= 1
            && (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Invalid(format!(
                "invalid camera intrinsics {self:?}"
            )))
        }
    }

    /// Pixel coordinates of the center of pixel `(col, row)`.
    pub fn pixel_center(col: u32, row: u32) -> [f64; 2] {
        [col as f64 + 0.5, row as f64 + 0.5]
    }

    /// Unnormalized camera-frame direction through pixel coordinates `(u, v)`.
    pub fn unproject(&self, px: [f64; 2]) -> [f64; 3] {
        [
            (px[0] - self.cx) / self.fx,
            (px[1] - self.cy) / self.fy,
            1.0,
        ]
    }

    /// Pixel coordinates of a camera-frame point (`z > 0`).
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        if p[2] <= 0.0 {
            return None;
        }
        Some([
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ])
    }
}

/// A rigid transform mapping local coordinates to world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<S> {
    pub rotation: Quat<S>,
    pub translation: Vec3<S>,
}

impl<S: Copy> Pose<S> {
    pub fn map<T>(&self, f: impl Fn(S) -> T) -> Pose<T> {
        Pose {
            rotation: self.rotation.map(&f),
            translation: self.translation.map(&f),
        }
    }

    /// Flatten as `[w, x, y, z, tx, ty, tz]`.
    pub fn to_array(&self) -> [S; 7] {
        let [w, x, y, z] = self.rotation;
        let [a, b, c] = self.translation;
        [w, x, y, z, a, b, c]
    }

    pub fn from_array(v: [S; 7]) -> Self {
        Pose {
            rotation: [v[0], v[1], v[2], v[3]],
            translation: [v[4], v[5], v[6]],
        }
    }
}

impl Pose<f64> {
    pub fn identity() -> Self {
        Pose {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    /// World-from-local 4×4 matrix, row major.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = quat_to_matrix(self.rotation);
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Self {
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        Pose {
            rotation: matrix_to_quat(&r),
            translation: [m[0][3], m[1][3], m[2][3]],
        }
    }
}

/// A ray `o + l·d`.
#[derive(Clone, Copy, Debug)]
pub struct Ray<S> {
    pub origin: Vec3<S>,
    pub direction: Vec3<S>,
}

/// Everything the shader needs about one ray–plane hit.
#[derive(Clone, Copy, Debug)]
pub struct PlaneSample<S> {
    pub depth: S,
    pub world_point: Vec3<S>,
    /// Plane-local coordinates, `[0,1]²` on the plane.
    pub plane_point: [S; 2],
    /// Normalized spherical view angle.
    pub view_angle: [S; 2],
    pub inside: bool,
}

#[inline]
pub fn dot<R: Real, S: Scalar<R>>(a: &Vec3<S>, b: &Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub<R: Real, S: Scalar<R>>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Hamilton product `a ⊗ b`.
#[inline]
pub fn quat_mul<R: Real, S: Scalar<R>>(a: &Quat<S>, b: &Quat<S>) -> Quat<S> {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotate `v` by the unit quaternion `q`.
#[inline]
pub fn quat_rotate<R: Real, S: Scalar<R>>(q: &Quat<S>, v: &Vec3<S>) -> Vec3<S> {
    let [w, x, y, z] = *q;
    // v + 2w (u × v) + 2 u × (u × v), u = (x, y, z)
    let c = [
        y * v[2] - z * v[1],
        z * v[0] - x * v[2],
        x * v[1] - y * v[0],
    ];
    let cc = [
        y * c[2] - z * c[1],
        z * c[0] - x * c[2],
        x * c[1] - y * c[0],
    ];
    [
        v[0] + (w * c[0] + cc[0]) * R::lit(2.0),
        v[1] + (w * c[1] + cc[1]) * R::lit(2.0),
        v[2] + (w * c[2] + cc[2]) * R::lit(2.0),
    ]
}

/// Rotate `v` by the inverse of the unit quaternion `q`.
#[inline]
pub fn quat_rotate_inv<R: Real, S: Scalar<R>>(q: &Quat<S>, v: &Vec3<S>) -> Vec3<S> {
    quat_rotate(&[q[0], -q[1], -q[2], -q[3]], v)
}

pub fn quat_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Rotation matrix (row major) to unit quaternion with `w ≥ 0`.
pub fn matrix_to_quat(m: &[[f64; 3]; 3]) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(q);
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

pub fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    q.map(|v| v / n)
}

/// Quaternion whose rotation matrix has the given columns.
pub fn quat_from_axes(x: [f64; 3], y: [f64; 3], z: [f64; 3]) -> [f64; 4] {
    matrix_to_quat(&[[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]])
}

/// Spherical interpolation between unit quaternions along the short arc.
pub fn quat_slerp(a: [f64; 4], b: [f64; 4], s: f64) -> [f64; 4] {
    if s == 0.0 {
        return a;
    }
    if s == 1.0 {
        return b;
    }
    let mut d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
    let mut b = b;
    if d < 0.0 {
        d = -d;
        b = b.map(|v| -v);
    }
    if d > 1.0 - 1e-12 {
        let q = [0, 1, 2, 3].map(|i| a[i] + (b[i] - a[i]) * s);
        return quat_normalize(q);
    }
    let theta = d.acos();
    let sin_t = theta.sin();
    let wa = ((1.0 - s) * theta).sin() / sin_t;
    let wb = (s * theta).sin() / sin_t;
    quat_normalize([0, 1, 2, 3].map(|i| wa * a[i] + wb * b[i]))
}

/// Ray through pixel coordinates `px` of a camera with world-from-camera
/// pose `camera`.
pub fn generate_ray<R: Real, S: Scalar<R>>(
    intr: &CameraIntrinsics,
    camera: &Pose<S>,
    px: [f64; 2],
) -> Ray<S> {
    let d = intr.unproject(px);
    let z = camera.translation[0];
    let local = [z.lift(R::lit(d[0])), z.lift(R::lit(d[1])), z.lift(R::one())];
    Ray {
        origin: camera.translation,
        direction: quat_rotate(&camera.rotation, &local),
    }
}

/// Intersect a ray with the infinite plane through `p` with normal `n`.
///
/// Returns the ray parameter and the world point, or `None` for parallel
/// rays, hits behind (or at) the origin.
pub fn intersect_plane_pn<R: Real, S: Scalar<R>>(
    ray: &Ray<S>,
    p: &Vec3<S>,
    n: &Vec3<S>,
) -> Option<(S, Vec3<S>)> {
    let denom = dot(&ray.direction, n);
    let dv = ray.direction.map(|v| v.value().as_f64());
    let nv = n.map(|v| v.value().as_f64());
    let scale = norm(dv) * norm(nv);
    if denom.value().as_f64().abs() <= EPS_PARALLEL * scale {
        return None;
    }
    let l = dot(&sub(p, &ray.origin), n) / denom;
    if l.value().as_f64() <= EPS_NEAR {
        return None;
    }
    let o = &ray.origin;
    let d = &ray.direction;
    Some((l, [o[0] + l * d[0], o[1] + l * d[1], o[2] + l * d[2]]))
}

/// Plane normal (local `+z`) of a pose.
pub fn plane_normal<R: Real, S: Scalar<R>>(pose: &Pose<S>) -> Vec3<S> {
    quat_rotate(&pose.rotation, &unit_z(pose.translation[0]))
}

/// Intersect a ray with the plane of `pose` (through its translation, normal
/// along its local `+z`).
pub fn intersect_plane<R: Real, S: Scalar<R>>(
    ray: &Ray<S>,
    pose: &Pose<S>,
) -> Option<(S, Vec3<S>)> {
    intersect_plane_pn(ray, &pose.translation, &plane_normal(pose))
}

fn unit_z<R: Real, S: Scalar<R>>(like: S) -> Vec3<S> {
    [
        like.lift(R::zero()),
        like.lift(R::zero()),
        like.lift(R::one()),
    ]
}

/// World point to plane coordinates: local in-plane offsets divided by the
/// extent, shifted by one half. `inside` uses the closed unit square.
pub fn plane_coords<R: Real, S: Scalar<R>>(
    world: &Vec3<S>,
    pose: &Pose<S>,
    extent: [f64; 2],
) -> ([S; 2], bool) {
    let local = quat_rotate_inv(&pose.rotation, &sub(world, &pose.translation));
    let x = local[0] / R::lit(extent[0]) + R::lit(0.5);
    let y = local[1] / R::lit(extent[1]) + R::lit(0.5);
    let (xv, yv) = (x.value(), y.value());
    let inside = xv >= R::zero() && xv <= R::one() && yv >= R::zero() && yv <= R::one();
    ([x, y], inside)
}

/// Inverse of [`plane_coords`] for points on the plane.
pub fn plane_to_world(x: [f64; 2], pose: &Pose<f64>, extent: [f64; 2]) -> [f64; 3] {
    let local = [(x[0] - 0.5) * extent[0], (x[1] - 0.5) * extent[1], 0.0];
    let r = quat_rotate(&pose.rotation, &local);
    [
        r[0] + pose.translation[0],
        r[1] + pose.translation[1],
        r[2] + pose.translation[2],
    ]
}

/// Direction in the plane frame as `(θ/π, ψ/(2π) + 0.5)`, θ the inclination
/// from the plane normal and ψ ∈ [−π, π) the azimuth.
pub fn view_angle<R: Real, S: Scalar<R>>(direction: &Vec3<S>, pose: &Pose<S>) -> [S; 2] {
    let d = quat_rotate_inv(&pose.rotation, direction);
    let rho = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let theta = rho.atan2(d[2]);
    let mut psi = d[1].atan2(d[0]);
    let pi = R::PI();
    if psi.value() >= pi {
        psi = psi - pi * R::lit(2.0);
    }
    [theta / pi, psi / (pi * R::lit(2.0)) + R::lit(0.5)]
}

/// Full hit record of a ray against a posed plane of the given extent.
pub fn sample_plane<R: Real, S: Scalar<R>>(
    ray: &Ray<S>,
    pose: &Pose<S>,
    extent: [f64; 2],
) -> Option<PlaneSample<S>> {
    let hit = intersect_plane(ray, pose);
    kink::note(0x10, hit.is_some() as u64);
    let (depth, world_point) = hit?;
    let (plane_point, inside) = plane_coords(&world_point, pose, extent);
    kink::note(0x11, inside as u64);
    let view_angle = view_angle(&ray.direction, pose);
    Some(PlaneSample {
        depth,
        world_point,
        plane_point,
        view_angle,
        inside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident() -> Pose<f64> {
        Pose::identity()
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 1000.0,
            fy: 1000.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    #[test]
    fn principal_ray_follows_the_optical_axis() {
        let r = generate_ray::<f64, f64>(&intr(), &ident(), [320.0, 240.0]);
        assert_eq!(r.direction, [0.0, 0.0, 1.0]);
        assert_eq!(r.origin, [0.0; 3]);
    }

    #[test]
    fn off_axis_slope_matches_similar_triangles() {
        let r = generate_ray::<f64, f64>(&intr(), &ident(), [420.0, 240.0]);
        assert!((r.direction[0] / r.direction[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn translation_moves_origin_only() {
        let mut moved = ident();
        moved.translation = [1.0, 0.0, 0.0];
        let a = generate_ray::<f64, f64>(&intr(), &ident(), [10.0, 20.0]);
        let b = generate_ray::<f64, f64>(&intr(), &moved, [10.0, 20.0]);
        assert_eq!(sub(&b.origin, &a.origin), [1.0, 0.0, 0.0]);
        assert_eq!(a.direction, b.direction);
    }

    #[test]
    fn axis_aligned_hit_parallel_and_behind() {
        let ray = Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
        };
        let (l, p) =
            intersect_plane_pn::<f64, f64>(&ray, &[0.0, 0.0, 5.0], &[0.0, 0.0, -1.0]).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(p, [0.0, 0.0, 5.0]);
        let par = Ray {
            origin: [0.0; 3],
            direction: [1.0, 0.0, 0.0],
        };
        assert!(intersect_plane_pn::<f64, f64>(&par, &[0.0, 0.0, 5.0], &[0.0, 0.0, 1.0]).is_none());
        assert!(
            intersect_plane_pn::<f64, f64>(&ray, &[0.0, 0.0, -5.0], &[0.0, 0.0, -1.0]).is_none()
        );
    }

    #[test]
    fn plane_coordinate_examples() {
        let e = [2.0, 2.0];
        assert_eq!(
            plane_coords::<f64, f64>(&[0.0; 3], &ident(), e),
            ([0.5, 0.5], true)
        );
        assert_eq!(
            plane_coords::<f64, f64>(&[1.0, 1.0, 0.0], &ident(), e),
            ([1.0, 1.0], true)
        );
        assert_eq!(
            plane_coords::<f64, f64>(&[2.0, 0.0, 0.0], &ident(), e),
            ([1.5, 0.5], false)
        );
    }

    #[test]
    fn view_angle_poles_and_equator() {
        let p = ident();
        assert_eq!(view_angle::<f64, f64>(&[0.0, 0.0, 1.0], &p), [0.0, 0.5]);
        assert_eq!(view_angle::<f64, f64>(&[0.0, 0.0, -1.0], &p), [1.0, 0.5]);
        let v = view_angle::<f64, f64>(&[1.0, 0.0, 0.0], &p);
        assert_eq!(v[0], 0.5);
        assert_eq!(v[1], 0.5);
        // ψ = π is wrapped to −π.
        let w = view_angle::<f64, f64>(&[-1.0, 0.0, 0.0], &p);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn matrix_quaternion_round_trip() {
        let q = quat_normalize([0.3, -0.2, 0.9, 0.1]);
        let back = matrix_to_quat(&quat_to_matrix(q));
        for i in 0..4 {
            assert!((q[i] - back[i]).abs() < 1e-12);
        }
        let v = [0.3, -1.0, 2.0];
        let m = quat_to_matrix(q);
        let rv = quat_rotate::<f64, f64>(&q, &v);
        for i in 0..3 {
            let mv = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
            assert!((mv - rv[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let a = [1.0, 0.0, 0.0, 0.0];
        let h = std::f64::consts::FRAC_PI_4;
        let b = [h.cos(), 0.0, 0.0, h.sin()];
        assert_eq!(quat_slerp(a, b, 0.0), a);
        assert_eq!(quat_slerp(a, b, 1.0), b);
        let m = quat_slerp(a, b, 0.5);
        let e = std::f64::consts::PI / 8.0;
        assert!((m[0] - e.cos()).abs() < 1e-12 && (m[3] - e.sin()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pose() -> impl Strategy<Value = Pose<f64>> {
            (
                prop::array::uniform4(-1.0..1.0f64),
                prop::array::uniform3(-5.0..5.0f64),
            )
                .prop_filter("non-degenerate rotation", |(q, _)| {
                    q.iter().map(|v| v * v).sum::<f64>() > 1e-3
                })
                .prop_map(|(q, t)| Pose {
                    rotation: quat_normalize(q),
                    translation: t,
                })
        }

        proptest! {
            #[test]
            fn hits_lie_on_the_plane(p in pose(), o in prop::array::uniform3(-5.0..5.0f64), d in prop::array::uniform3(-1.0..1.0f64)) {
                let ray = Ray { origin: o, direction: d };
                if let Some((l, w)) = intersect_plane::<f64, f64>(&ray, &p) {
                    let n = plane_normal::<f64, f64>(&p);
                    let r: f64 = (0..3).map(|c| (w[c] - p.translation[c]) * n[c]).sum();
                    prop_assert!(l > 0.0);
                    prop_assert!(r.abs() < 1e-9);
                }
            }

            #[test]
            fn plane_coords_round_trip(p in pose(), x in prop::array::uniform2(0.0..=1.0f64), e in prop::array::uniform2(0.05..5.0f64)) {
                let w = plane_to_world(x, &p, e);
                let (back, inside) = plane_coords::<f64, f64>(&w, &p, e);
                prop_assert!(inside);
                prop_assert!((back[0] - x[0]).abs() < 1e-9 && (back[1] - x[1]).abs() < 1e-9);
            }

            #[test]
            fn rotation_preserves_length(q in prop::array::uniform4(-1.0..1.0f64), v in prop::array::uniform3(-3.0..3.0f64)) {
                prop_assume!(q.iter().map(|x| x * x).sum::<f64>() > 1e-3);
                let q = quat_normalize(q);
                let r = quat_rotate::<f64, f64>(&q, &v);
                prop_assert!((norm(r) - norm(v)).abs() < 1e-12);
                let back = quat_rotate_inv::<f64, f64>(&q, &r);
                for c in 0..3 {
                    prop_assert!((back[c] - v[c]).abs() < 1e-12);
                }
            }
        }
    }
}
