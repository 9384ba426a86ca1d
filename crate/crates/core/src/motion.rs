//! Cubic Hermite splines, the rotation-vector exponential map and rigid
//! trajectories made of fixed per-frame base poses plus learned spline
//! offsets.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GroupId, Scalar};
use crate::geometry::{quat_mul, quat_slerp, Pose, Quat, Vec3};
use crate::real::Real;

/// Weights of the control points contributing to a uniform Catmull-Rom
/// Hermite spline with `p` knots at parameter `t` (clamped to `[0, 1]`).
///
/// The spline is linear in its control points, so evaluation is a weighted
/// sum over at most four of them.
pub fn hermite_weights(p: usize, t: f64) -> ([usize; 4], [f64; 4], usize) {
    assert!(p >= 2, "a spline needs at least two control points");
    let s = snap(t.clamp(0.0, 1.0) * (p - 1) as f64);
    let i = (s.floor() as usize).min(p - 2);
    let u = s - i as f64;
    let (u2, u3) = (u * u, u * u * u);
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;

    let mut idx = [0usize; 4];
    let mut w = [0.0f64; 4];
    let mut n = 0;
    let mut add = |k: usize, v: f64| {
        if let Some(j) = idx[..n].iter().position(|&q| q == k) {
            w[j] += v;
        } else {
            idx[n] = k;
            w[n] = v;
            n += 1;
        }
    };
    add(i, h00);
    add(i + 1, h01);
    // Tangent at knot i.
    if i == 0 {
        add(1, h10);
        add(0, -h10);
    } else {
        add(i + 1, 0.5 * h10);
        add(i - 1, -0.5 * h10);
    }
    // Tangent at knot i + 1.
    if i + 1 == p - 1 {
        add(i + 1, h11);
        add(i, -h11);
    } else {
        add(i + 2, 0.5 * h11);
        add(i, -0.5 * h11);
    }
    (idx, w, n)
}

/// Knot parameters like `k/(n−1)·(n−1)` can land a rounding error below the
/// knot; snapping keeps knot evaluation exact.
fn snap(s: f64) -> f64 {
    let r = s.round();
    if (s - r).abs() < 1e-9 {
        r
    } else {
        s
    }
}

/// Evaluate a spline of `dim`-vectors stored control point major.
pub fn hermite_eval<R: Real, S: Scalar<R>>(points: &[S], dim: usize, t: f64) -> Vec<S> {
    let p = points.len() / dim;
    let (idx, w, n) = hermite_weights(p, t);
    (0..dim)
        .map(|c| {
            let mut acc = points[idx[0] * dim + c] * R::lit(w[0]);
            for k in 1..n {
                acc = acc + points[idx[k] * dim + c] * R::lit(w[k]);
            }
            acc
        })
        .collect()
}

/// Axis-angle exponential map to a unit quaternion. Near zero the half-angle
/// terms are replaced by their series in `θ²`, which keeps the map smooth and
/// differentiable at the origin.
pub fn rotvec_to_quat<R: Real, S: Scalar<R>>(v: &Vec3<S>) -> Quat<S> {
    let th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let (w, k) = if th2.value() < R::lit(1e-6) {
        let th4 = th2 * th2;
        let w = th2 * R::lit(-1.0 / 8.0) + th4 * R::lit(1.0 / 384.0) + R::one();
        let k = th2 * R::lit(-1.0 / 48.0) + th4 * R::lit(1.0 / 3840.0) + R::lit(0.5);
        (w, k)
    } else {
        let th = th2.sqrt();
        let half = th * R::lit(0.5);
        (half.cos(), half.sin() / th)
    };
    [w, v[0] * k, v[1] * k, v[2] * k]
}

/// Per-frame base poses plus learnable spline offsets:
/// `T(t) = T̄(t) + η_T·S(t, P_T)` and `R(t) = R̄(t)·q(η_R·S(t, P_R))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTrack {
    pub base_translation: Vec<[f64; 3]>,
    pub base_rotation: Vec<[f64; 4]>,
    pub eta_t: f64,
    pub eta_r: f64,
    /// Number of spline control points per offset track.
    pub control_points: usize,
    /// `6·control_points` values: translation points then rotation-vector
    /// points. `None` for fixed tracks.
    pub offsets: Option<GroupId>,
}

impl RigidTrack {
    pub fn fixed(pose: Pose<f64>, frames: usize) -> Self {
        RigidTrack {
            base_translation: vec![pose.translation; frames],
            base_rotation: vec![pose.rotation; frames],
            eta_t: 0.5,
            eta_r: 0.5,
            control_points: 0,
            offsets: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.base_translation.len()
    }

    /// Base pose at `t ∈ [0, 1]`: linear interpolation of translations and
    /// spherical interpolation of rotations between neighboring frames.
    pub fn base_pose(&self, t: f64) -> Pose<f64> {
        let f = self.frames();
        if f == 1 {
            return Pose {
                rotation: self.base_rotation[0],
                translation: self.base_translation[0],
            };
        }
        let s = snap(t.clamp(0.0, 1.0) * (f - 1) as f64);
        let i = (s.floor() as usize).min(f - 2);
        let u = s - i as f64;
        if u == 0.0 {
            return Pose {
                rotation: self.base_rotation[i],
                translation: self.base_translation[i],
            };
        }
        let (a, b) = (self.base_translation[i], self.base_translation[i + 1]);
        Pose {
            rotation: quat_slerp(self.base_rotation[i], self.base_rotation[i + 1], u),
            translation: [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * u),
        }
    }

    /// Pose at `t` with learned offsets `offsets` (layout as in
    /// [`RigidTrack::offsets`]); `lift` embeds constants.
    pub fn pose<R: Real, S: Scalar<R>>(
        &self,
        offsets: Option<&[S]>,
        lift: impl Fn(R) -> S,
        t: f64,
    ) -> Pose<S> {
        let base = self.base_pose(t);
        let base_t = base.translation.map(|v| lift(R::lit(v)));
        let base_q = base.rotation.map(|v| lift(R::lit(v)));
        let Some(off) = offsets.filter(|o| !o.is_empty()) else {
            return Pose {
                rotation: base_q,
                translation: base_t,
            };
        };
        let p = self.control_points;
        let st = hermite_eval(&off[..3 * p], 3, t);
        let sr = hermite_eval(&off[3 * p..6 * p], 3, t);
        let eta_t = R::lit(self.eta_t);
        let eta_r = R::lit(self.eta_r);
        let translation = [0, 1, 2].map(|c| st[c] * eta_t + R::lit(base.translation[c]));
        let rv = [sr[0] * eta_r, sr[1] * eta_r, sr[2] * eta_r];
        let rotation = quat_mul(&base_q, &rotvec_to_quat(&rv));
        Pose {
            rotation,
            translation,
        }
    }

    /// Plain evaluation with the given parameter values.
    pub fn pose_plain<R: Real>(&self, offsets: Option<&[R]>, t: f64) -> Pose<R> {
        self.pose(offsets, |c| c, t)
    }
}

/// Frame index to normalized time.
pub fn frame_time(frame: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        frame as f64 / (frames - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(points: &[f64], t: f64) -> f64 {
        hermite_eval::<f64, f64>(points, 1, t)[0]
    }

    #[test]
    fn knots_are_interpolated() {
        assert_eq!(eval1(&[0.0, 1.0], 0.0), 0.0);
        assert_eq!(eval1(&[0.0, 1.0], 1.0), 1.0);
        let pts = [0.3, -1.2, 2.5, 0.7, 0.0];
        for (i, &p) in pts.iter().enumerate() {
            assert_eq!(eval1(&pts, i as f64 / 4.0), p);
        }
    }

    #[test]
    fn two_point_midpoint_matches_basis() {
        // One-sided tangents give m0 = m1 = 1.
        let u: f64 = 0.5;
        let h10 = u.powi(3) - 2.0 * u * u + u;
        let h01 = -2.0 * u.powi(3) + 3.0 * u * u;
        let h11 = u.powi(3) - u * u;
        let oracle = h10 + h01 + h11;
        assert!((eval1(&[0.0, 1.0], 0.5) - oracle).abs() < 1e-12);
        assert!((oracle - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_spline() {
        let pts = [0.25; 6];
        for k in 0..=20 {
            assert!((eval1(&pts, k as f64 / 20.0) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn rotvec_examples() {
        assert_eq!(rotvec_to_quat::<f64, f64>(&[0.0; 3]), [1.0, 0.0, 0.0, 0.0]);
        let q = rotvec_to_quat::<f64, f64>(&[0.0, 0.0, std::f64::consts::PI]);
        assert!(q[0].abs() < 1e-15 && (q[3] - 1.0).abs() < 1e-15);
        let q = rotvec_to_quat::<f64, f64>(&[0.1, 0.0, 0.0]);
        let (s, c) = (0.05f64).sin_cos();
        assert!((q[0] - c).abs() < 1e-12 && (q[1] - s).abs() < 1e-12);
    }

    #[test]
    fn small_angle_series_is_continuous_with_closed_form() {
        let v = [6e-4, -5e-4, 5.0e-4];
        let a = rotvec_to_quat::<f64, f64>(&v);
        let th = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let k = (th / 2.0).sin() / th;
        let b = [(th / 2.0).cos(), v[0] * k, v[1] * k, v[2] * k];
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-15, "{a:?} {b:?}");
        }
        let v = [1e-4, 2e-4, -3e-4];
        let a = rotvec_to_quat::<f64, f64>(&v);
        let th = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let k = (th / 2.0).sin() / th;
        assert!((a[0] - (th / 2.0).cos()).abs() < 1e-16);
        assert!((a[1] - v[0] * k).abs() < 1e-18);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn knots_exact_for_any_points(pts in prop::collection::vec(-10.0..10.0f64, 2..16)) {
                let p = pts.len();
                for (k, v) in pts.iter().enumerate() {
                    prop_assert_eq!(eval1(&pts, k as f64 / (p - 1) as f64), *v);
                }
            }

            #[test]
            fn weights_sum_to_one(p in 2usize..20, t in 0.0..=1.0f64) {
                let (_, w, n) = hermite_weights(p, t);
                prop_assert!((w[..n].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn rotvec_gives_unit_quaternions(v in prop::array::uniform3(-4.0..4.0f64)) {
                let q = rotvec_to_quat::<f64, f64>(&v);
                let n: f64 = q.iter().map(|x| x * x).sum();
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
