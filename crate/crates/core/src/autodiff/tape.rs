//! Wengert tape with precomputed local partials and fused block operations.
//!
//! Scalar operations record their operand ids and local partial derivatives
//! at forward time. Heavy batched kernels (hash encoding + MLP) are recorded
//! as a single [`BlockOp`] that owns whatever it cached during its forward
//! pass and produces input adjoints and parameter gradients on the way back.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::kink;
use super::registry::GradSink;
use super::scalar::{clamp_value, d_sqrt, Scalar};
use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};

const NONE: u32 = u32::MAX;
const BLOCK: u32 = u32::MAX - 1;

/// A fused operation with a hand-written reverse pass.
pub trait BlockOp<R: Real>: Send {
    /// Given adjoints of all block outputs, write adjoints of all block
    /// inputs into `in_adj` (pre-zeroed) and push parameter gradients into
    /// `sink`.
    fn backward(&mut self, out_adj: &[R], in_adj: &mut [R], sink: &mut dyn GradSink<R>);
}

struct BlockRecord<R: Real> {
    inputs: Vec<u32>,
    first_out: u32,
    n_out: u32,
    op: Box<dyn BlockOp<R>>,
}

struct Inner<R: Real> {
    a: Vec<u32>,
    b: Vec<u32>,
    da: Vec<R>,
    db: Vec<R>,
    blocks: Vec<BlockRecord<R>>,
}

impl<R: Real> Inner<R> {
    #[inline(always)]
    fn push(&mut self, a: u32, b: u32, da: R, db: R) -> u32 {
        let id = self.a.len() as u32;
        self.a.push(a);
        self.b.push(b);
        self.da.push(da);
        self.db.push(db);
        id
    }
}

/// A single-writer recording of one forward computation.
pub struct Tape<R: Real> {
    inner: RefCell<Inner<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                a: Vec::new(),
                b: Vec::new(),
                da: Vec::new(),
                db: Vec::new(),
                blocks: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forget all recorded operations, keeping allocations.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.a.clear();
        inner.b.clear();
        inner.da.clear();
        inner.db.clear();
        inner.blocks.clear();
    }

    /// An independent input whose adjoint is reported by [`Tape::backward`].
    pub fn leaf(&self, value: R) -> TVar<'_, R> {
        let id = self
            .inner
            .borrow_mut()
            .push(NONE, NONE, R::zero(), R::zero());
        TVar {
            tape: self,
            id,
            val: value,
        }
    }

    pub fn leaves(&self, values: &[R]) -> Vec<TVar<'_, R>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    /// Record a fused block. `outputs` are the values the block computed.
    pub fn block(
        &self,
        inputs: &[TVar<'_, R>],
        outputs: &[R],
        op: Box<dyn BlockOp<R>>,
    ) -> Vec<TVar<'_, R>> {
        let mut inner = self.inner.borrow_mut();
        let block_idx = inner.blocks.len() as u32;
        let first_out = inner.a.len() as u32;
        for _ in outputs {
            inner.push(BLOCK, block_idx, R::zero(), R::zero());
        }
        inner.blocks.push(BlockRecord {
            inputs: inputs.iter().map(|v| v.id).collect(),
            first_out,
            n_out: outputs.len() as u32,
            op,
        });
        drop(inner);
        outputs
            .iter()
            .enumerate()
            .map(|(k, &val)| TVar {
                tape: self,
                id: first_out + k as u32,
                val,
            })
            .collect()
    }

    /// Reverse sweep from a scalar output with seed 1.
    pub fn backward(&self, output: TVar<'_, R>, sink: &mut dyn GradSink<R>) -> Adjoints<R> {
        self.backward_seeded(&[(output, R::one())], sink)
    }

    /// Reverse sweep from several outputs with explicit seeds.
    ///
    /// Visits every recorded node once in reverse order. Recorded blocks are
    /// consumed; the tape must be cleared before it is reused.
    pub fn backward_seeded(
        &self,
        seeds: &[(TVar<'_, R>, R)],
        sink: &mut dyn GradSink<R>,
    ) -> Adjoints<R> {
        let mut inner = self.inner.borrow_mut();
        let n = inner.a.len();
        let mut adj = vec![R::zero(); n];
        for (v, s) in seeds {
            adj[v.id as usize] += *s;
        }
        let mut blocks = std::mem::take(&mut inner.blocks);
        let mut in_adj: Vec<R> = Vec::new();
        for i in (0..n).rev() {
            let a = inner.a[i];
            if a == BLOCK {
                let rec = &mut blocks[inner.b[i] as usize];
                if rec.first_out as usize != i {
                    continue;
                }
                let outs = i..i + rec.n_out as usize;
                if adj[outs.clone()].iter().all(|g| *g == R::zero()) {
                    continue;
                }
                in_adj.clear();
                in_adj.resize(rec.inputs.len(), R::zero());
                rec.op.backward(&adj[outs], &mut in_adj, sink);
                for (&id, &g) in rec.inputs.iter().zip(in_adj.iter()) {
                    adj[id as usize] += g;
                }
                continue;
            }
            let g = adj[i];
            if g == R::zero() || a == NONE {
                continue;
            }
            adj[a as usize] += inner.da[i] * g;
            let b = inner.b[i];
            if b != NONE {
                adj[b as usize] += inner.db[i] * g;
            }
        }
        Adjoints { adj }
    }
}

/// Adjoints of every tape node after a reverse sweep.
pub struct Adjoints<R: Real> {
    adj: Vec<R>,
}

impl<R: Real> Adjoints<R> {
    pub fn of(&self, v: TVar<'_, R>) -> R {
        self.adj[v.id as usize]
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct TVar<'t, R: Real> {
    tape: &'t Tape<R>,
    id: u32,
    val: R,
}

impl<'t, R: Real> std::fmt::Debug for TVar<'t, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TVar(#{}={})", self.id, self.val)
    }
}

impl<'t, R: Real> TVar<'t, R> {
    pub fn id(&self) -> u32 {
        self.id
    }

    #[inline(always)]
    fn unary(self, val: R, da: R) -> Self {
        let id = self
            .tape
            .inner
            .borrow_mut()
            .push(self.id, NONE, da, R::zero());
        TVar {
            tape: self.tape,
            id,
            val,
        }
    }

    #[inline(always)]
    fn binary(self, other: Self, val: R, da: R, db: R) -> Self {
        let id = self.tape.inner.borrow_mut().push(self.id, other.id, da, db);
        TVar {
            tape: self.tape,
            id,
            val,
        }
    }
}

impl<'t, R: Real> Add for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, R::one(), R::one())
    }
}

impl<'t, R: Real> Sub for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, R::one(), -R::one())
    }
}

impl<'t, R: Real> Mul for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t, R: Real> Div for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn div(self, o: Self) -> Self {
        let val = self.val / o.val;
        self.binary(o, val, R::one() / o.val, -val / o.val)
    }
}

impl<'t, R: Real> Neg for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        self.unary(-self.val, -R::one())
    }
}

impl<'t, R: Real> Add<R> for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn add(self, c: R) -> Self {
        self.unary(self.val + c, R::one())
    }
}

impl<'t, R: Real> Sub<R> for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, c: R) -> Self {
        self.unary(self.val - c, R::one())
    }
}

impl<'t, R: Real> Mul<R> for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, c: R) -> Self {
        self.unary(self.val * c, c)
    }
}

impl<'t, R: Real> Div<R> for TVar<'t, R> {
    type Output = Self;
    #[inline(always)]
    fn div(self, c: R) -> Self {
        self.unary(self.val / c, R::one() / c)
    }
}

impl<'t, R: Real> Scalar<R> for TVar<'t, R> {
    #[inline(always)]
    fn value(self) -> R {
        self.val
    }
    #[inline(always)]
    fn lift(self, c: R) -> Self {
        self.tape.leaf(c)
    }
    fn sqrt(self) -> Self {
        let v = num_traits::Float::sqrt(self.val);
        self.unary(v, d_sqrt(v))
    }
    fn sin(self) -> Self {
        self.unary(
            num_traits::Float::sin(self.val),
            num_traits::Float::cos(self.val),
        )
    }
    fn cos(self) -> Self {
        self.unary(
            num_traits::Float::cos(self.val),
            -num_traits::Float::sin(self.val),
        )
    }
    fn exp(self) -> Self {
        let v = num_traits::Float::exp(self.val);
        self.unary(v, v)
    }
    fn ln(self) -> Self {
        self.unary(num_traits::Float::ln(self.val), R::one() / self.val)
    }
    fn abs(self) -> Self {
        kink::note(3, (self.val < R::zero()) as u64);
        let d = if self.val > R::zero() {
            R::one()
        } else if self.val < R::zero() {
            -R::one()
        } else {
            R::zero()
        };
        self.unary(num_traits::Float::abs(self.val), d)
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.val);
        self.unary(s, s * (R::one() - s))
    }
    fn relu(self) -> Self {
        kink::note(2, (self.val > R::zero()) as u64);
        if self.val > R::zero() {
            self.unary(self.val, R::one())
        } else {
            self.unary(R::zero(), R::zero())
        }
    }
    fn clamp(self, lo: R, hi: R) -> Self {
        let v = clamp_value(self.val, lo, hi);
        let d = if self.val < lo || self.val > hi {
            R::zero()
        } else {
            R::one()
        };
        self.unary(v, d)
    }
    fn atan2(self, x: Self) -> Self {
        let v = num_traits::Float::atan2(self.val, x.val);
        let r2 = self.val * self.val + x.val * x.val;
        let (dy, dx) = if r2 > R::zero() {
            (x.val / r2, -self.val / r2)
        } else {
            (R::zero(), R::zero())
        };
        self.binary(x, v, dy, dx)
    }
}

/// Record `f` on a fresh tape, run the reverse sweep from its single output
/// and return the output values with the input gradients.
///
/// `f` may only use operations exposed by [`Scalar`] and [`Tape::block`];
/// anything else simply cannot touch a [`TVar`]. The outputs are required to
/// be finite.
pub fn forward_record<R, F>(inputs: &[R], f: F) -> Result<(Vec<R>, Vec<R>)>
where
    R: Real,
    F: for<'t> Fn(&[TVar<'t, R>]) -> Vec<TVar<'t, R>>,
{
    let tape = Tape::new();
    let vars = tape.leaves(inputs);
    let outs = f(&vars);
    let values: Vec<R> = outs.iter().map(|o| o.val).collect();
    if outs.len() != 1 {
        return Err(Error::Invalid(format!(
            "backward needs a scalar output, got {} values",
            outs.len()
        )));
    }
    let adj = tape.backward(outs[0], &mut super::registry::NullSink);
    let grads = vars.iter().map(|v| adj.of(*v)).collect();
    Ok((values, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of<F>(x: &[f64], f: F) -> (f64, Vec<f64>)
    where
        F: for<'t> Fn(&[TVar<'t, f64>]) -> Vec<TVar<'t, f64>>,
    {
        let (v, g) = forward_record(x, f).unwrap();
        (v[0], g)
    }

    #[test]
    fn identity_has_unit_gradient() {
        let (v, g) = grad_of(&[3.5], |x| vec![x[0]]);
        assert_eq!(v, 3.5);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn product_rule() {
        let (v, g) = grad_of(&[2.0, 3.0], |x| vec![x[0] * x[1]]);
        assert_eq!(v, 6.0);
        assert_eq!(g, vec![3.0, 2.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let (_, g) = grad_of(&[2.0, -1.0], |x| vec![x[0].lift(4.0) * 2.0]);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares() {
        let p = [0.5, -1.25, 3.0];
        let (_, g) = grad_of(&p, |x| {
            let mut acc = x[0] * x[0];
            for v in &x[1..] {
                acc = acc + *v * *v;
            }
            vec![acc]
        });
        for (gi, pi) in g.iter().zip(p.iter()) {
            assert_eq!(*gi, 2.0 * pi);
        }
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        assert!(forward_record(&[1.0f64, 2.0], |x| vec![x[0], x[1]]).is_err());
    }

    #[test]
    fn clamp_subgradient_is_zero_outside() {
        let (_, g) = grad_of(&[1.5], |x| vec![x[0].clamp(0.0, 1.0)]);
        assert_eq!(g, vec![0.0]);
        let (_, g) = grad_of(&[0.5], |x| vec![x[0].clamp(0.0, 1.0)]);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn elementary_derivatives() {
        let x0 = 0.7f64;
        let cases: Vec<(f64, f64)> = vec![
            (grad_of(&[x0], |x| vec![x[0].sin()]).1[0], x0.cos()),
            (grad_of(&[x0], |x| vec![x[0].cos()]).1[0], -x0.sin()),
            (grad_of(&[x0], |x| vec![x[0].exp()]).1[0], x0.exp()),
            (grad_of(&[x0], |x| vec![x[0].ln()]).1[0], 1.0 / x0),
            (grad_of(&[x0], |x| vec![x[0].sqrt()]).1[0], 0.5 / x0.sqrt()),
            (
                grad_of(&[x0], |x| vec![x[0].sigmoid()]).1[0],
                sigmoid(x0) * (1.0 - sigmoid(x0)),
            ),
            (grad_of(&[x0], |x| vec![x[0] / 2.0]).1[0], 0.5),
            (grad_of(&[x0], |x| vec![x[0].rsub(1.0)]).1[0], -1.0),
        ];
        for (got, want) in cases {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn atan2_partials() {
        let (_, g) = grad_of(&[0.3, -0.8], |x| vec![x[0].atan2(x[1])]);
        let r2 = 0.3f64 * 0.3 + 0.8 * 0.8;
        assert!((g[0] - (-0.8 / r2)).abs() < 1e-15);
        assert!((g[1] - (-0.3 / r2)).abs() < 1e-15);
    }

    struct Doubler;
    impl BlockOp<f64> for Doubler {
        fn backward(&mut self, out_adj: &[f64], in_adj: &mut [f64], _: &mut dyn GradSink<f64>) {
            for (i, g) in in_adj.iter_mut().enumerate() {
                *g = 2.0 * out_adj[i];
            }
        }
    }

    #[test]
    fn block_ops_chain_with_scalar_ops() {
        let tape = Tape::<f64>::new();
        let x = tape.leaves(&[1.0, 2.0]);
        let y = tape.block(&x, &[2.0, 4.0], Box::new(Doubler));
        let out = y[0] * y[1];
        let adj = tape.backward(out, &mut super::super::registry::NullSink);
        // d/dx0 (2x0 * 2x1) = 4 x1
        assert_eq!(adj.of(x[0]), 8.0);
        assert_eq!(adj.of(x[1]), 4.0);
    }
}
