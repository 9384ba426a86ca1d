//! Node appearance: fixed base grids refined by hash-encoded neural fields,
//! warped by a time-dependent planar flow.
//!
//! A node's color at plane point `x`, view angle `φ` and time `t` is
//!
//! ```text
//! x'      = x + λ_f · S(t, flow(x))
//! color   = clamp01(C̃(x') + λ·color(x') + λ·view_rgb(x', φ))
//! opacity = sigmoid(logit(Ã(x')) + λ·alpha(x') + λ·view_a(x', φ))
//! ```
//!
//! with every λ fixed at 0.1. Evaluation goes through a [`Backend`], so the
//! same code renders plainly or records onto a tape.

pub mod grid;
pub mod hash;
pub mod mlp;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    BlockOp, GradSink, GroupId, ParamStore, Part, Role, RoleSet, Scalar, TVar, Tape,
};
use crate::motion::hermite_eval;
use crate::real::Real;
use crate::scenegraph::AtlasNode;

pub use grid::Grid;
pub use hash::{active_dims, apply_sparsity, HashConfig, HashEncoding};
pub use mlp::MlpShape;

/// Weight of the color, opacity and view-dependent offsets.
pub const LAMBDA: f64 = 0.1;
/// Weight of the flow offsets.
pub const LAMBDA_FLOW: f64 = 0.1;
/// Base opacities are clamped to `[ε, 1 − ε]` before the logit.
pub const ALPHA_EPS: f64 = 1e-4;

/// Flow control points for a clip of `frames` frames.
pub fn flow_control_points(frames: usize) -> usize {
    frames.div_ceil(4).max(4)
}

/// A hash encoding feeding an MLP, with parameters held in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralField {
    pub role: Role,
    pub encoding: HashConfig,
    pub mlp: MlpShape,
    pub table: GroupId,
    pub weights: GroupId,
    /// Whether the coarse-to-fine mask applies to the encoding.
    pub masked: bool,
}

impl NeuralField {
    #[allow(clippy::too_many_arguments)]
    pub fn create<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        role: Role,
        input_dim: usize,
        outputs: usize,
        masked: bool,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let encoding = HashConfig::standard(input_dim);
        let layout = HashEncoding::new(encoding);
        let mlp = MlpShape::standard(layout.output_dim(), outputs);
        let weights = store.add(format!("{name}.mlp"), role, Part::Mlp, mlp.init(rng));
        let table = store.add(
            format!("{name}.table"),
            role,
            Part::HashTable,
            layout.init(rng),
        );
        NeuralField {
            role,
            encoding,
            mlp,
            table,
            weights,
            masked,
        }
    }

    pub fn layout(&self) -> HashEncoding {
        HashEncoding::new(self.encoding)
    }

    pub fn outputs(&self) -> usize {
        self.mlp.output
    }

    pub fn active_dims(&self, tau: f64) -> usize {
        let e = self.encoding.output_dim();
        if self.masked {
            active_dims(tau, e, self.encoding.features)
        } else {
            e
        }
    }

    /// Plain batched evaluation; `inputs` is `n × input_dim`, already inside
    /// the unit cube. Returns `n × outputs`.
    pub fn eval<R: Real>(&self, store: &ParamStore<R>, inputs: &[R], tau: f64) -> Vec<R> {
        let d = self.encoding.input_dim;
        let n = inputs.len() / d;
        let weights = store.data(self.weights);
        if self.mlp.head_is_constant(weights) {
            let b = self.mlp.head_bias(weights);
            return (0..n).flat_map(|_| b.iter().copied()).collect();
        }
        let layout = self.layout();
        let e = layout.output_dim();
        let mut enc = vec![R::zero(); n * e];
        layout.encode(
            store.data(self.table),
            inputs,
            self.active_dims(tau),
            &mut enc,
        );
        let mut acts = self.mlp.forward(weights, enc, n);
        acts.pop().unwrap_or_default()
    }

    /// Evaluation recorded on a tape as one block.
    ///
    /// A frozen field whose head is all zero is a constant, so nothing is
    /// recorded for it.
    pub fn eval_taped<'t, R: Real>(
        &self,
        tape: &'t Tape<R>,
        store: &ParamStore<R>,
        inputs: &[TVar<'t, R>],
        tau: f64,
        trainable: bool,
    ) -> Vec<TVar<'t, R>> {
        let d = self.encoding.input_dim;
        let n = inputs.len() / d;
        let weights = store.arc(self.weights);
        if !trainable && self.mlp.head_is_constant(&weights) {
            let b = self.mlp.head_bias(&weights);
            return (0..n)
                .flat_map(|_| b.iter().map(|&v| tape.leaf(v)))
                .collect();
        }
        let values: Vec<R> = inputs.iter().map(|v| v.value()).collect();
        let layout = self.layout();
        let active = self.active_dims(tau);
        let table = store.arc(self.table);
        let mut enc = vec![R::zero(); n * layout.output_dim()];
        layout.encode(&table, &values, active, &mut enc);
        let mut acts = self.mlp.forward(&weights, enc, n);
        let out = acts.pop().unwrap_or_default();
        let op = FieldOp {
            field: self.clone(),
            layout,
            table,
            weights,
            inputs: values,
            acts,
            active,
            want_params: trainable,
        };
        tape.block(inputs, &out, Box::new(op))
    }
}

struct FieldOp<R: Real> {
    field: NeuralField,
    layout: HashEncoding,
    table: Arc<Vec<R>>,
    weights: Arc<Vec<R>>,
    inputs: Vec<R>,
    acts: Vec<Vec<R>>,
    active: usize,
    want_params: bool,
}

impl<R: Real> BlockOp<R> for FieldOp<R> {
    fn backward(&mut self, out_adj: &[R], in_adj: &mut [R], sink: &mut dyn GradSink<R>) {
        let n = self.inputs.len() / self.field.encoding.input_dim;
        let mlp = &self.field.mlp;
        let mut d_params = self.want_params.then(|| vec![R::zero(); mlp.param_count()]);
        let d_enc = mlp.backward(
            &self.weights,
            &self.acts,
            out_adj,
            n,
            d_params.as_deref_mut(),
        );
        if let Some(dp) = d_params {
            sink.add_dense(self.field.weights, 0, &dp);
        }
        let mut table_grad = self.want_params.then(Vec::new);
        self.layout.backward(
            &self.table,
            &self.inputs,
            self.active,
            &d_enc,
            in_adj,
            table_grad.as_mut(),
        );
        if let Some(tg) = table_grad {
            sink.add_sparse(self.field.table, &tg);
        }
    }
}

/// The four fields of one node. The background has no opacity field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldStack {
    pub color: NeuralField,
    pub alpha: Option<NeuralField>,
    pub flow: NeuralField,
    pub view: NeuralField,
    pub flow_points: usize,
}

impl FieldStack {
    pub fn create<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        with_alpha: bool,
        frames: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let flow_points = flow_control_points(frames);
        let color = NeuralField::create(
            store,
            &format!("{prefix}.color"),
            Role::ColorField,
            2,
            3,
            false,
            rng,
        );
        let alpha = with_alpha.then(|| {
            NeuralField::create(
                store,
                &format!("{prefix}.alpha"),
                Role::AlphaField,
                2,
                1,
                false,
                rng,
            )
        });
        let flow = NeuralField::create(
            store,
            &format!("{prefix}.flow"),
            Role::FlowField,
            2,
            2 * flow_points,
            true,
            rng,
        );
        let view = NeuralField::create(
            store,
            &format!("{prefix}.view"),
            Role::ViewField,
            4,
            4,
            true,
            rng,
        );
        FieldStack {
            color,
            alpha,
            flow,
            view,
            flow_points,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &NeuralField> {
        [
            Some(&self.color),
            self.alpha.as_ref(),
            Some(&self.flow),
            Some(&self.view),
        ]
        .into_iter()
        .flatten()
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut NeuralField> {
        [
            Some(&mut self.color),
            self.alpha.as_mut(),
            Some(&mut self.flow),
            Some(&mut self.view),
        ]
        .into_iter()
        .flatten()
    }

    pub fn groups(&self) -> Vec<GroupId> {
        self.all().flat_map(|f| [f.weights, f.table]).collect()
    }
}

/// How neural fields are evaluated: plainly, or recorded on a tape.
pub trait Backend<R: Real> {
    type S: Scalar<R>;
    fn constant(&self, c: R) -> Self::S;
    /// Evaluate `field` on `n × input_dim` inputs (clamped to the unit cube
    /// here, with zero derivative outside).
    fn field(
        &self,
        field: &NeuralField,
        store: &ParamStore<R>,
        inputs: &[Self::S],
        tau: f64,
    ) -> Vec<Self::S>;
}

/// Direct evaluation.
pub struct Plain;

impl<R: Real> Backend<R> for Plain {
    type S = R;
    fn constant(&self, c: R) -> R {
        c
    }
    fn field(&self, field: &NeuralField, store: &ParamStore<R>, inputs: &[R], tau: f64) -> Vec<R> {
        let x: Vec<R> = inputs
            .iter()
            .map(|v| Scalar::clamp(*v, R::zero(), R::one()))
            .collect();
        field.eval(store, &x, tau)
    }
}

/// Recording evaluation; parameter gradients flow only to `trainable` roles.
pub struct Taped<'t, R: Real> {
    pub tape: &'t Tape<R>,
    pub trainable: RoleSet,
}

impl<'t, R: Real> Backend<R> for Taped<'t, R> {
    type S = TVar<'t, R>;
    fn constant(&self, c: R) -> TVar<'t, R> {
        self.tape.leaf(c)
    }
    fn field(
        &self,
        field: &NeuralField,
        store: &ParamStore<R>,
        inputs: &[TVar<'t, R>],
        tau: f64,
    ) -> Vec<TVar<'t, R>> {
        let x: Vec<_> = inputs
            .iter()
            .map(|v| v.clamp(R::zero(), R::one()))
            .collect();
        field.eval_taped(
            self.tape,
            store,
            &x,
            tau,
            self.trainable.contains(&field.role),
        )
    }
}

/// A plane hit to be shaded by one node.
#[derive(Clone, Copy, Debug)]
pub struct NodePoint<S> {
    pub x: [S; 2],
    pub phi: [S; 2],
    /// Node-local time (after any time shift).
    pub t: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Appearance<S> {
    pub color: [S; 3],
    pub opacity: S,
    /// Flow-warped canonical atlas coordinate.
    pub warped: [S; 2],
}

/// Which optional parts of the appearance model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadeOptions {
    pub use_flow: bool,
    pub use_view: bool,
    pub use_edits: bool,
}

impl Default for ShadeOptions {
    fn default() -> Self {
        ShadeOptions {
            use_flow: true,
            use_view: true,
            use_edits: true,
        }
    }
}

/// `λ_f · S(t, control points)` for each point, `n × 2`.
pub fn flow_offsets<R: Real, B: Backend<R>>(
    backend: &B,
    node: &AtlasNode<R>,
    store: &ParamStore<R>,
    points: &[NodePoint<B::S>],
    tau: f64,
) -> Vec<[B::S; 2]> {
    let inputs: Vec<B::S> = points.iter().flat_map(|p| p.x).collect();
    let cps = backend.field(&node.fields.flow, store, &inputs, tau);
    let k = 2 * node.fields.flow_points;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = hermite_eval(&cps[i * k..(i + 1) * k], 2, p.t);
            [s[0] * R::lit(LAMBDA_FLOW), s[1] * R::lit(LAMBDA_FLOW)]
        })
        .collect()
}

/// Shade a batch of hits on one node.
pub fn shade_node<R: Real, B: Backend<R>>(
    backend: &B,
    node: &AtlasNode<R>,
    store: &ParamStore<R>,
    points: &[NodePoint<B::S>],
    tau: f64,
    opts: ShadeOptions,
) -> Vec<Appearance<B::S>> {
    if points.is_empty() {
        return Vec::new();
    }
    let n = points.len();
    let warped: Vec<[B::S; 2]> = if opts.use_flow {
        let f = flow_offsets(backend, node, store, points, tau);
        points
            .iter()
            .zip(&f)
            .map(|(p, d)| [p.x[0] + d[0], p.x[1] + d[1]])
            .collect()
    } else {
        points.iter().map(|p| p.x).collect()
    };
    let flat: Vec<B::S> = warped.iter().flat_map(|w| *w).collect();
    let color_off = backend.field(&node.fields.color, store, &flat, tau);
    let alpha_off = node
        .fields
        .alpha
        .as_ref()
        .map(|f| backend.field(f, store, &flat, tau));
    let view_off = opts.use_view.then(|| {
        let inputs: Vec<B::S> = warped
            .iter()
            .zip(points)
            .flat_map(|(w, p)| [w[0], w[1], p.phi[0], p.phi[1]])
            .collect();
        backend.field(&node.fields.view, store, &inputs, tau)
    });
    let lam = R::lit(LAMBDA);
    let eps = R::lit(ALPHA_EPS);
    let edit = node.edit.as_ref().filter(|_| opts.use_edits);
    (0..n)
        .map(|i| {
            let x = warped[i];
            let base: [B::S; 3] = node.base_color.sample(x);
            let mut color = std::array::from_fn(|c| {
                let mut v = base[c] + color_off[i * 3 + c] * lam;
                if let Some(vo) = &view_off {
                    v = v + vo[i * 4 + c] * lam;
                }
                v.clamp(R::zero(), R::one())
            });
            let opacity = if node.is_background {
                backend.constant(R::one())
            } else {
                let [a]: [B::S; 1] = node.base_alpha.sample(x);
                let a = a.clamp(eps, R::one() - eps);
                let logit = -((backend.constant(R::one()) / a - R::one()).ln());
                let mut z = logit;
                if let Some(ao) = &alpha_off {
                    z = z + ao[i] * lam;
                }
                if let Some(vo) = &view_off {
                    z = z + vo[i * 4 + 3] * lam;
                }
                z.sigmoid()
            };
            if let Some(e) = edit {
                let [ah]: [B::S; 1] = e.alpha.sample(x);
                if ah.value() != R::zero() {
                    let ch: [B::S; 3] = e.color.sample(x);
                    color = std::array::from_fn(|c| color[c] * ah.rsub(R::one()) + ch[c] * ah);
                }
            }
            Appearance {
                color,
                opacity,
                warped: x,
            }
        })
        .collect()
}

/// Flow offset of a node at one plane point.
pub fn query_flow<R: Real>(
    node: &AtlasNode<R>,
    store: &ParamStore<R>,
    x: [R; 2],
    t: f64,
    tau: f64,
) -> [R; 2] {
    flow_offsets(
        &Plain,
        node,
        store,
        &[NodePoint {
            x,
            phi: [R::zero(); 2],
            t,
        }],
        tau,
    )[0]
}

/// Color and opacity of a node at one plane point.
pub fn query_node<R: Real>(
    node: &AtlasNode<R>,
    store: &ParamStore<R>,
    x: [R; 2],
    phi: [R; 2],
    t: f64,
    tau: f64,
) -> ([R; 3], R) {
    let a = shade_node(
        &Plain,
        node,
        store,
        &[NodePoint { x, phi, t }],
        tau,
        ShadeOptions::default(),
    )[0];
    (a.color, a.opacity)
}
