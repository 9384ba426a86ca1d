//! Fully connected ReLU networks evaluated in batches with GEMM.
//!
//! Parameters are one flat array: for every layer the `out × in` weight
//! matrix (row major) followed by its bias.

use serde::{Deserialize, Serialize};

use crate::autodiff::kink;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    /// Linear layers in total, including the output head.
    pub layers: usize,
    pub output: usize,
}

impl MlpShape {
    /// Five linear layers of width 64 with ReLU between them.
    pub fn standard(input: usize, output: usize) -> Self {
        MlpShape {
            input,
            hidden: 64,
            layers: 5,
            output,
        }
    }

    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 { self.input } else { self.hidden };
        let fan_out = if l + 1 == self.layers {
            self.output
        } else {
            self.hidden
        };
        (fan_in, fan_out)
    }

    /// Offset of layer `l`'s weights; its bias follows them.
    pub fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| {
                let (i, o) = self.layer_dims(k);
                o * i + o
            })
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.layer_offset(self.layers)
    }

    /// Hidden layers use the usual `U(±1/√fan_in)` initialization; the head
    /// starts at exactly zero so a fresh field contributes nothing.
    pub fn init<R: Real>(&self, rng: &mut impl rand::Rng) -> Vec<R> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in 0..self.layers {
            let (i, o) = self.layer_dims(l);
            if l + 1 == self.layers {
                p.extend(std::iter::repeat_n(R::zero(), o * i + o));
            } else {
                let b = 1.0 / (i as f64).sqrt();
                p.extend((0..o * i + o).map(|_| R::lit(rng.random_range(-b..b))));
            }
        }
        p
    }

    /// Whether the output head's weights are all zero, in which case every
    /// input maps to the head bias.
    pub fn head_is_constant<R: Real>(&self, params: &[R]) -> bool {
        let (i, o) = self.layer_dims(self.layers - 1);
        let off = self.layer_offset(self.layers - 1);
        params[off..off + o * i].iter().all(|v| *v == R::zero())
    }

    pub fn head_bias<'a, R: Real>(&self, params: &'a [R]) -> &'a [R] {
        let (i, o) = self.layer_dims(self.layers - 1);
        let off = self.layer_offset(self.layers - 1) + o * i;
        &params[off..off + o]
    }

    /// Forward pass over `n` rows of `x`. Returns the activations of every
    /// layer input (`acts[0] = x`) followed by the output.
    pub fn forward<R: Real>(&self, params: &[R], x: Vec<R>, n: usize) -> Vec<Vec<R>> {
        let mut acts = Vec::with_capacity(self.layers + 1);
        acts.push(x);
        let trace = kink::enabled();
        for l in 0..self.layers {
            let (fi, fo) = self.layer_dims(l);
            let off = self.layer_offset(l);
            let w = &params[off..off + fo * fi];
            let b = &params[off + fo * fi..off + fo * fi + fo];
            let mut y = Vec::with_capacity(n * fo);
            for _ in 0..n {
                y.extend_from_slice(b);
            }
            let a = &acts[l];
            if n > 0 {
                // y[n×fo] += a[n×fi] · wᵀ
                unsafe {
                    R::gemm(
                        n,
                        fi,
                        fo,
                        R::one(),
                        a.as_ptr(),
                        fi as isize,
                        1,
                        w.as_ptr(),
                        1,
                        fi as isize,
                        R::one(),
                        y.as_mut_ptr(),
                        fo as isize,
                        1,
                    );
                }
            }
            if l + 1 < self.layers {
                if trace {
                    note_pattern(l, &y);
                }
                for v in y.iter_mut() {
                    if *v <= R::zero() {
                        *v = R::zero();
                    }
                }
            }
            acts.push(y);
        }
        acts
    }

    /// Reverse pass. `d_out` is `n × output`. Adds parameter gradients into
    /// `d_params` when given and returns the adjoint of the input rows.
    pub fn backward<R: Real>(
        &self,
        params: &[R],
        acts: &[Vec<R>],
        d_out: &[R],
        n: usize,
        mut d_params: Option<&mut [R]>,
    ) -> Vec<R> {
        let mut delta = d_out.to_vec();
        for l in (0..self.layers).rev() {
            let (fi, fo) = self.layer_dims(l);
            let off = self.layer_offset(l);
            let w = &params[off..off + fo * fi];
            let a = &acts[l];
            if let Some(dp) = d_params.as_deref_mut() {
                let (dw, rest) = dp[off..].split_at_mut(fo * fi);
                // dw[fo×fi] += deltaᵀ[fo×n] · a[n×fi]
                unsafe {
                    R::gemm(
                        fo,
                        n,
                        fi,
                        R::one(),
                        delta.as_ptr(),
                        1,
                        fo as isize,
                        a.as_ptr(),
                        fi as isize,
                        1,
                        R::one(),
                        dw.as_mut_ptr(),
                        fi as isize,
                        1,
                    );
                }
                let db = &mut rest[..fo];
                for r in 0..n {
                    for (k, v) in db.iter_mut().enumerate() {
                        *v += delta[r * fo + k];
                    }
                }
            }
            // d_a[n×fi] = delta[n×fo] · w[fo×fi]
            let mut da = vec![R::zero(); n * fi];
            unsafe {
                R::gemm(
                    n,
                    fo,
                    fi,
                    R::one(),
                    delta.as_ptr(),
                    fo as isize,
                    1,
                    w.as_ptr(),
                    fi as isize,
                    1,
                    R::zero(),
                    da.as_mut_ptr(),
                    fi as isize,
                    1,
                );
            }
            if l > 0 {
                // ReLU mask of this layer's input (the previous activation).
                for (g, v) in da.iter_mut().zip(a.iter()) {
                    if *v <= R::zero() {
                        *g = R::zero();
                    }
                }
            }
            delta = da;
        }
        delta
    }
}

fn note_pattern<R: Real>(layer: usize, pre: &[R]) {
    let mut h = 0u64;
    for (k, v) in pre.iter().enumerate() {
        if *v > R::zero() {
            h = h.wrapping_add((k as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D));
        }
    }
    kink::note(0x50 + layer as u64, h);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Scalar reference network.
    fn reference(shape: &MlpShape, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..shape.layers {
            let (fi, fo) = shape.layer_dims(l);
            let off = shape.layer_offset(l);
            let mut y = vec![0.0; fo];
            for o in 0..fo {
                let mut s = p[off + fo * fi + o];
                for i in 0..fi {
                    s += p[off + o * fi + i] * a[i];
                }
                y[o] = if l + 1 < shape.layers { s.max(0.0) } else { s };
            }
            a = y;
        }
        a
    }

    fn random_params(shape: &MlpShape, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..shape.param_count())
            .map(|_| rand::Rng::random_range(&mut rng, -0.5..0.5))
            .collect()
    }

    #[test]
    fn batched_forward_matches_scalar_reference() {
        let shape = MlpShape {
            input: 5,
            hidden: 7,
            layers: 3,
            output: 2,
        };
        let p = random_params(&shape, 1);
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let acts = shape.forward(&p, x.clone(), 3);
        let y = acts.last().unwrap();
        for r in 0..3 {
            let want = reference(&shape, &p, &x[r * 5..(r + 1) * 5]);
            for k in 0..2 {
                assert!((y[r * 2 + k] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let shape = MlpShape {
            input: 3,
            hidden: 6,
            layers: 3,
            output: 2,
        };
        let p = random_params(&shape, 2);
        let x = vec![0.3, -0.2, 0.9, 0.1, 0.5, -0.7];
        let d_out = vec![1.0, -0.5, 0.25, 2.0];
        let loss = |p: &[f64], x: &[f64]| -> f64 {
            let y = shape.forward(p, x.to_vec(), 2);
            y.last()
                .unwrap()
                .iter()
                .zip(&d_out)
                .map(|(a, b)| a * b)
                .sum()
        };
        let acts = shape.forward(&p, x.clone(), 2);
        let mut dp = vec![0.0; p.len()];
        let dx = shape.backward(&p, &acts, &d_out, 2, Some(&mut dp));
        let h = 1e-6;
        for k in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!((fd - dp[k]).abs() < 1e-6, "param {k}: {fd} vs {}", dp[k]);
        }
        for k in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
            assert!((fd - dx[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn fresh_head_is_zero() {
        let shape = MlpShape::standard(64, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p: Vec<f32> = shape.init(&mut rng);
        assert!(shape.head_is_constant(&p));
        assert_eq!(shape.head_bias(&p), &[0.0; 3]);
        assert_eq!(
            shape.param_count(),
            64 * 64 + 64 + 3 * (64 * 64 + 64) + 64 * 3 + 3
        );
    }
}
