//! Fitting a scene graph to a video: loss, batch sampling, Adam with a
//! plateau schedule, phase gating, the encoding mask schedule and the
//! training loop.
//!
//! One batch is `rays_per_batch` random pixels observed at
//! `timestamps_per_batch` distinct frames. Poses for those frames are
//! recorded on a small tape of their own; rays are traced in fixed-size
//! chunks, each on a private tape whose pose inputs are plain leaves. Chunk
//! results (loss terms, pose adjoints, parameter gradient logs) are reduced
//! strictly in chunk order and the pose tape is then swept with the summed
//! pose adjoints, so the gradient does not depend on the number of threads.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{grad_check, GradCheckReport};
use crate::autodiff::registry::BLOCK_LEN;
use crate::autodiff::{
    GradBuffers, GradLog, GradSink, GroupId, ParamStore, Role, RoleSet, Scalar, TVar, Tape,
};
use crate::error::{Error, Result};
use crate::fields::{ShadeOptions, Taped};
use crate::geometry::{generate_ray, sample_plane, CameraIntrinsics, Pose};
use crate::io::metrics::{mse, psnr};
use crate::io::{dequantize, quantize, ssim, Dataset};
use crate::motion::frame_time;
use crate::real::Real;
use crate::renderer::{render_frame_with, slot_at, trace, RayJob, Slot, TraceOptions};
use crate::scenegraph::{GraphConfig, SceneGraph};

/// Floating-point width used for a fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Every training knob. Graph construction settings are flattened in, so a
/// config file is a single flat table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Distinct pixels per batch; each is traced at every batch timestamp.
    pub rays_per_batch: usize,
    pub timestamps_per_batch: usize,
    /// Weight of the mask term.
    pub beta: f64,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Relative improvement of the epoch loss that resets the patience.
    pub plateau_threshold: f64,
    /// First epoch at which the plateau schedule is consulted.
    pub plateau_start: usize,
    /// Epoch at which color and opacity fields start training.
    pub phase_fields: usize,
    /// Epoch at which every group trains.
    pub phase_all: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub use_flow: bool,
    pub use_view: bool,
    pub mask_loss: bool,
    pub precision: Precision,
    /// Rays per tape; fixes the reduction order, so it is part of the
    /// result, unlike the thread count.
    pub chunk_rays: usize,
    /// Full-frame evaluation every this many epochs (and after the last).
    pub eval_every: usize,
    #[serde(flatten)]
    pub graph: GraphConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batches_per_epoch: 140,
            rays_per_batch: 100_000,
            timestamps_per_batch: 20,
            beta: 0.005,
            lr: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            plateau_start: 20,
            phase_fields: 5,
            phase_all: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            use_flow: true,
            use_view: true,
            mask_loss: true,
            precision: Precision::F32,
            chunk_rays: 1024,
            eval_every: 10,
            graph: GraphConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small-scene settings that run on a desktop CPU.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 80,
            batches_per_epoch: 20,
            rays_per_batch: 2048,
            timestamps_per_batch: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batches_per_epoch", self.batches_per_epoch),
            ("rays_per_batch", self.rays_per_batch),
            ("timestamps_per_batch", self.timestamps_per_batch),
            ("chunk_rays", self.chunk_rays),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.beta >= 0.0) {
            return Err(Error::Invalid(
                "lr must be positive and beta non-negative".into(),
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Invalid("plateau_factor must lie in (0, 1)".into()));
        }
        if self.phase_fields > self.phase_all {
            return Err(Error::Invalid(
                "phase_fields must not come after phase_all".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::Invalid(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parse a TOML table; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let known = Self::keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::Parse(format!("unknown config key `{k}`")));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn keys() -> BTreeSet<String> {
        let mut keys: BTreeSet<String> = Self::default().to_table().keys().cloned().collect();
        // Optional keys are absent from a serialized default.
        keys.insert("pose_control_points".into());
        keys
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("configs always serialize")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    /// Apply `key=value` overrides; values use TOML syntax, with bare words
    /// taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = self.to_table();
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| {
                Error::Parse(format!("override `{o}` is not of the form key=value"))
            })?;
            let key = key.trim();
            let raw = raw.trim();
            let value = match format!("v = {raw}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").expect("just parsed"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            table.insert(key.to_string(), value);
        }
        Self::from_table(table)
    }

    pub fn shade(&self) -> ShadeOptions {
        ShadeOptions {
            use_flow: self.use_flow,
            use_view: self.use_view,
            use_edits: false,
        }
    }

    /// Rendering options for a graph trained with this config (edits on).
    pub fn render_options(&self) -> TraceOptions {
        TraceOptions {
            shade: ShadeOptions {
                use_edits: true,
                ..self.shade()
            },
            ..TraceOptions::default()
        }
    }
}

/// Roles that train during `epoch`: poses first, then color and opacity,
/// then everything.
pub fn phase_gate(epoch: usize, config: &TrainConfig) -> RoleSet {
    let mut roles: RoleSet = [Role::CameraOffsets, Role::NodeOffsets].into();
    if epoch >= config.phase_fields {
        roles.extend([Role::ColorField, Role::AlphaField]);
    }
    if epoch >= config.phase_all {
        roles.extend([Role::FlowField, Role::ViewField]);
    }
    roles
}

/// Coarse-to-fine encoding mask level, `0.05 + sin(epoch·π / (1.6·max_epoch))`
/// clamped to `[0.05, 1]`.
///
/// The phase runs past π/2 late in training, where the sine turns down; it
/// is held at π/2 there so levels once unmasked stay unmasked.
pub fn tau_schedule(epoch: usize, max_epoch: usize) -> f64 {
    if max_epoch == 0 {
        return 1.0;
    }
    let e = epoch.min(max_epoch) as f64;
    let phase =
        (e * std::f64::consts::PI / (1.6 * max_epoch as f64)).min(std::f64::consts::FRAC_PI_2);
    (0.05 + phase.sin()).clamp(0.05, 1.0)
}

/// One training ray.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRay {
    /// Index into [`Batch::frames`].
    pub slot: usize,
    pub pixel: [u32; 2],
    pub color: [f32; 3],
    /// Mask value of every dataset node, in [`Batch::node_ids`] order.
    pub masks: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Distinct frames, one pose slot each.
    pub frames: Vec<usize>,
    pub node_ids: Vec<u32>,
    /// `frames.len() × pixels` rays, grouped by slot.
    pub rays: Vec<BatchRay>,
}

/// `n_spatial` uniform pixels, each observed in `n_time` distinct uniform
/// frames.
pub fn sample_batch(
    data: &Dataset,
    n_spatial: usize,
    n_time: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let f = data.frame_count();
    if n_spatial == 0 || n_time == 0 {
        return Err(Error::Invalid(
            "a batch needs at least one pixel and one timestamp".into(),
        ));
    }
    if n_time > f {
        return Err(Error::Invalid(format!(
            "{n_time} timestamps requested from {f} frames"
        )));
    }
    let frames: Vec<usize> = sample_indices(rng, f, n_time).into_vec();
    let (w, h) = (data.intrinsics.width, data.intrinsics.height);
    let pixels: Vec<[u32; 2]> = (0..n_spatial)
        .map(|_| [rng.random_range(0..w), rng.random_range(0..h)])
        .collect();
    let node_ids = data.nodes.iter().map(|n| n.id).collect();
    let mut rays = Vec::with_capacity(n_spatial * n_time);
    for (slot, &k) in frames.iter().enumerate() {
        let img = &data.frames[k];
        for &[i, j] in &pixels {
            let (i, j) = (i as usize, j as usize);
            rays.push(BatchRay {
                slot,
                pixel: [i as u32, j as u32],
                color: [img.at(i, j, 0), img.at(i, j, 1), img.at(i, j, 2)],
                masks: data.nodes.iter().map(|n| n.masks[k].at(i, j, 0)).collect(),
            });
        }
    }
    Ok(Batch {
        frames,
        node_ids,
        rays,
    })
}

/// Loss over a set of rays:
/// `mean |pred − gt| + β · mean over (ray, hit node) of |Â − m|`.
///
/// `node_terms` holds the opacity of every foreground node a ray hits with
/// that node's mask value there.
pub fn atlas_loss<R: Real, S: Scalar<R>>(
    preds: &[[S; 3]],
    gt: &[[R; 3]],
    node_terms: &[(S, R)],
    beta: R,
) -> Result<S> {
    if preds.is_empty() || preds.len() != gt.len() {
        return Err(Error::Invalid(
            "loss needs a non-empty batch with matching targets".into(),
        ));
    }
    let (photo, mask) = loss_sums(preds, gt, node_terms);
    let mut loss = photo * R::lit(1.0 / (3 * preds.len()) as f64);
    if let Some(m) = mask.filter(|_| !node_terms.is_empty()) {
        loss = loss + m * (beta / R::lit(node_terms.len() as f64));
    }
    Ok(loss)
}

fn loss_sums<R: Real, S: Scalar<R>>(
    preds: &[[S; 3]],
    gt: &[[R; 3]],
    node_terms: &[(S, R)],
) -> (S, Option<S>) {
    let mut photo: Option<S> = None;
    for (p, g) in preds.iter().zip(gt) {
        for c in 0..3 {
            let d = (p[c] - g[c]).abs();
            photo = Some(photo.map_or(d, |s| s + d));
        }
    }
    let mut mask: Option<S> = None;
    for (a, m) in node_terms {
        let d = (*a - *m).abs();
        mask = Some(mask.map_or(d, |s| s + d));
    }
    (photo.expect("non-empty batch"), mask)
}

/// Loss of one batch split into its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub photometric: f64,
    pub mask: f64,
}

/// What a loss evaluation needs besides graph and batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub beta: f64,
    pub mask_loss: bool,
    pub shade: ShadeOptions,
    pub chunk_rays: usize,
}

impl LossOptions {
    pub fn from_config(c: &TrainConfig) -> Self {
        LossOptions {
            beta: c.beta,
            mask_loss: c.mask_loss,
            shade: c.shade(),
            chunk_rays: c.chunk_rays,
        }
    }
}

const POSE_LEN: usize = 7;

/// Poses of every slot recorded on `tape`: per slot the camera then every
/// node, 7 values each.
fn record_poses<'t, R: Real>(
    tape: &'t Tape<R>,
    graph: &SceneGraph<R>,
    times: &[f64],
) -> (Vec<(GroupId, Vec<TVar<'t, R>>)>, Vec<Vec<TVar<'t, R>>>) {
    let mut leaves = Vec::new();
    let mut lift_group = |g: Option<GroupId>| -> Option<Vec<TVar<'t, R>>> {
        g.map(|g| {
            let v = tape.leaves(graph.params.data(g));
            leaves.push((g, v.clone()));
            v
        })
    };
    let cam = lift_group(graph.camera.offsets);
    let nodes: Vec<_> = graph
        .nodes
        .iter()
        .map(|n| lift_group(n.track.offsets))
        .collect();
    let lift = |c: R| tape.leaf(c);
    let slots = times
        .iter()
        .map(|&t| {
            let mut flat = Vec::with_capacity(POSE_LEN * (1 + nodes.len()));
            flat.extend(graph.camera.pose(cam.as_deref(), lift, t).to_array());
            for (n, off) in graph.nodes.iter().zip(&nodes) {
                flat.extend(
                    n.track
                        .pose(off.as_deref(), lift, n.local_time(t))
                        .to_array(),
                );
            }
            flat
        })
        .collect();
    (leaves, slots)
}

fn slot_from_flat<S: Copy>(t: f64, flat: &[S]) -> Slot<S> {
    let pose = |k: usize| Pose::from_array(std::array::from_fn(|i| flat[k * POSE_LEN + i]));
    Slot {
        t,
        camera: pose(0),
        nodes: (1..flat.len() / POSE_LEN).map(pose).collect(),
    }
}

/// Number of (ray, foreground plane) hits; normalizes the mask term.
fn count_hits<R: Real>(
    graph: &SceneGraph<R>,
    slots: &[Slot<R>],
    jobs: &[RayJob],
    mask_col: &[Option<usize>],
) -> usize {
    jobs.iter()
        .map(|j| {
            let slot = &slots[j.slot];
            let ray = generate_ray(&graph.intrinsics, &slot.camera, j.px);
            graph
                .nodes
                .iter()
                .enumerate()
                .filter(|(n, node)| {
                    mask_col[*n].is_some()
                        && sample_plane(&ray, &slot.nodes[*n], node.extent)
                            .is_some_and(|s| s.inside)
                })
                .count()
        })
        .sum()
}

struct ChunkOut<R: Real> {
    photo: f64,
    mask: f64,
    pose_adj: Vec<R>,
    log: GradLog<R>,
}

/// Batch loss and its gradient for the `trainable` roles.
pub fn loss_and_grad<R: Real>(
    graph: &SceneGraph<R>,
    batch: &Batch,
    tau: f64,
    trainable: &RoleSet,
    opts: &LossOptions,
    grads: &mut GradBuffers<R>,
) -> Result<LossParts> {
    if batch.rays.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let times: Vec<f64> = batch
        .frames
        .iter()
        .map(|&k| frame_time(k, graph.frames))
        .collect();
    let pose_tape = Tape::new();
    let (pose_leaves, pose_vars) = record_poses(&pose_tape, graph, &times);
    let pose_values: Vec<Vec<R>> = pose_vars
        .iter()
        .map(|s| s.iter().map(|v| v.value()).collect())
        .collect();
    let plain_slots: Vec<Slot<R>> = times
        .iter()
        .zip(&pose_values)
        .map(|(&t, f)| slot_from_flat(t, f))
        .collect();

    let jobs: Vec<RayJob> = batch
        .rays
        .iter()
        .map(|r| RayJob {
            slot: r.slot,
            px: CameraIntrinsics::pixel_center(r.pixel[0], r.pixel[1]),
        })
        .collect();
    // Mask column of every graph node (duplicates made by edits have none).
    let mask_col: Vec<Option<usize>> = graph
        .nodes
        .iter()
        .map(|n| {
            if n.is_background {
                None
            } else {
                batch.node_ids.iter().position(|id| *id == n.id)
            }
        })
        .collect();
    let hits = if opts.mask_loss {
        count_hits(graph, &plain_slots, &jobs, &mask_col)
    } else {
        0
    };
    let w_photo = 1.0 / (3 * jobs.len()) as f64;
    let w_mask = if hits > 0 {
        opts.beta / hits as f64
    } else {
        0.0
    };
    let trace_opts = TraceOptions {
        shade: opts.shade,
        ..TraceOptions::default()
    };
    let pose_len = pose_values.iter().map(Vec::len).sum::<usize>();

    let chunk = |range: std::ops::Range<usize>| -> ChunkOut<R> {
        let tape = Tape::new();
        let slot_vars: Vec<Vec<TVar<R>>> = pose_values.iter().map(|v| tape.leaves(v)).collect();
        let slots: Vec<Slot<TVar<R>>> = times
            .iter()
            .zip(&slot_vars)
            .map(|(&t, v)| slot_from_flat(t, v))
            .collect();
        let backend = Taped {
            tape: &tape,
            trainable: trainable.clone(),
        };
        let samples = trace(
            &backend,
            graph,
            &graph.params,
            &slots,
            &jobs[range.clone()],
            tau,
            &trace_opts,
        );
        let preds: Vec<[TVar<R>; 3]> = samples.iter().map(|s| s.color).collect();
        let gt: Vec<[R; 3]> = batch.rays[range.clone()]
            .iter()
            .map(|r| r.color.map(|c| R::lit(c as f64)))
            .collect();
        let mut terms = Vec::new();
        if opts.mask_loss {
            for (s, ray) in samples.iter().zip(&batch.rays[range]) {
                for ns in &s.samples {
                    let n = graph.node_index(ns.node_id).expect("traced nodes exist");
                    if let Some(col) = mask_col[n] {
                        terms.push((ns.opacity, R::lit(ray.masks[col] as f64)));
                    }
                }
            }
        }
        let (photo, mask) = loss_sums(&preds, &gt, &terms);
        let mut seeds = vec![(photo, R::lit(w_photo))];
        if let Some(m) = mask {
            seeds.push((m, R::lit(w_mask)));
        }
        let mut log = GradLog::new();
        let adj = tape.backward_seeded(&seeds, &mut log);
        let pose_adj = slot_vars.iter().flatten().map(|v| adj.of(*v)).collect();
        ChunkOut {
            photo: photo.value().as_f64(),
            mask: mask.map_or(0.0, |m| m.value().as_f64()),
            pose_adj,
            log,
        }
    };
    let ranges: Vec<_> = (0..jobs.len())
        .step_by(opts.chunk_rays)
        .map(|s| s..(s + opts.chunk_rays).min(jobs.len()))
        .collect();
    let outs: Vec<ChunkOut<R>> = ranges.into_par_iter().map(chunk).collect();

    grads.zero();
    let mut parts = LossParts::default();
    let mut pose_adj = vec![R::zero(); pose_len];
    for o in &outs {
        parts.photometric += o.photo;
        parts.mask += o.mask;
        for (a, g) in pose_adj.iter_mut().zip(&o.pose_adj) {
            *a += *g;
        }
        o.log.replay(grads);
    }
    parts.photometric *= w_photo;
    parts.mask *= w_mask;
    parts.total = parts.photometric + parts.mask;

    let seeds: Vec<(TVar<R>, R)> = pose_vars.iter().flatten().copied().zip(pose_adj).collect();
    let adj = pose_tape.backward_seeded(&seeds, &mut crate::autodiff::NullSink);
    for (g, vars) in &pose_leaves {
        if trainable.contains(&graph.params.group(*g).role) {
            let values: Vec<R> = vars.iter().map(|v| adj.of(*v)).collect();
            grads.add_dense(*g, 0, &values);
        }
    }
    Ok(parts)
}

/// Batch loss without gradients, summed chunk by chunk exactly like
/// [`loss_and_grad`].
pub fn loss_value<R: Real>(
    graph: &SceneGraph<R>,
    batch: &Batch,
    tau: f64,
    opts: &LossOptions,
) -> Result<LossParts> {
    if batch.rays.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let slots = plain_slots(graph, &batch.frames);
    let jobs: Vec<RayJob> = batch
        .rays
        .iter()
        .map(|r| RayJob {
            slot: r.slot,
            px: CameraIntrinsics::pixel_center(r.pixel[0], r.pixel[1]),
        })
        .collect();
    let mask_col: Vec<Option<usize>> = graph
        .nodes
        .iter()
        .map(|n| {
            if n.is_background {
                None
            } else {
                batch.node_ids.iter().position(|id| *id == n.id)
            }
        })
        .collect();
    let hits = if opts.mask_loss {
        count_hits(graph, &slots, &jobs, &mask_col)
    } else {
        0
    };
    let w_photo = 1.0 / (3 * jobs.len()) as f64;
    let w_mask = if hits > 0 {
        opts.beta / hits as f64
    } else {
        0.0
    };
    let trace_opts = TraceOptions {
        shade: opts.shade,
        ..TraceOptions::default()
    };
    let chunk = |range: std::ops::Range<usize>| -> (f64, f64) {
        let samples = trace(
            &crate::fields::Plain,
            graph,
            &graph.params,
            &slots,
            &jobs[range.clone()],
            tau,
            &trace_opts,
        );
        let preds: Vec<[R; 3]> = samples.iter().map(|s| s.color).collect();
        let gt: Vec<[R; 3]> = batch.rays[range.clone()]
            .iter()
            .map(|r| r.color.map(|c| R::lit(c as f64)))
            .collect();
        let mut terms = Vec::new();
        if opts.mask_loss {
            for (s, ray) in samples.iter().zip(&batch.rays[range]) {
                for ns in &s.samples {
                    let n = graph.node_index(ns.node_id).expect("traced nodes exist");
                    if let Some(col) = mask_col[n] {
                        terms.push((ns.opacity, R::lit(ray.masks[col] as f64)));
                    }
                }
            }
        }
        let (photo, mask) = loss_sums(&preds, &gt, &terms);
        (photo.as_f64(), mask.map_or(0.0, |m| m.as_f64()))
    };
    let ranges: Vec<_> = (0..jobs.len())
        .step_by(opts.chunk_rays)
        .map(|s| s..(s + opts.chunk_rays).min(jobs.len()))
        .collect();
    let outs: Vec<(f64, f64)> = ranges.into_par_iter().map(chunk).collect();
    let mut parts = LossParts::default();
    for (p, m) in outs {
        parts.photometric += p;
        parts.mask += m;
    }
    parts.photometric *= w_photo;
    parts.mask *= w_mask;
    parts.total = parts.photometric + parts.mask;
    Ok(parts)
}

/// ReduceLROnPlateau on the epoch-mean loss ("min" mode, relative
/// threshold, no cooldown).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, threshold: f64) -> Self {
        Plateau {
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Record an epoch loss; returns the factor to apply to the learning
    /// rate (1 when unchanged).
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            self.factor
        } else {
            1.0
        }
    }
}

/// Adam moments of one group, stored for blocks that ever had a gradient.
/// Blocks never touched have zero moments, for which the update is exactly
/// zero, so skipping them matches a dense implementation bit for bit.
#[derive(Clone, Debug, Default)]
struct Moments<R> {
    slot: Vec<u32>,
    blocks: Vec<u32>,
    m: Vec<R>,
    v: Vec<R>,
    step: u64,
}

const NO_SLOT: u32 = u32::MAX;

/// Adam with bias correction plus the plateau schedule.
#[derive(Clone, Debug)]
pub struct OptimizerState<R: Real> {
    moments: Vec<Option<Moments<R>>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub plateau: Plateau,
}

impl<R: Real> OptimizerState<R> {
    pub fn new(config: &TrainConfig) -> Self {
        OptimizerState {
            moments: Vec::new(),
            lr: config.lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            plateau: Plateau::new(
                config.plateau_factor,
                config.plateau_patience,
                config.plateau_threshold,
            ),
        }
    }

    /// Steps taken by a group so far.
    pub fn steps(&self, group: GroupId) -> u64 {
        self.moments
            .get(group.0 as usize)
            .and_then(|m| m.as_ref())
            .map_or(0, |m| m.step)
    }

    /// First and second moment of one parameter.
    pub fn moment(&self, group: GroupId, idx: usize) -> (R, R) {
        let Some(m) = self.moments.get(group.0 as usize).and_then(|m| m.as_ref()) else {
            return (R::zero(), R::zero());
        };
        match m.slot[idx / BLOCK_LEN] {
            NO_SLOT => (R::zero(), R::zero()),
            s => {
                let k = s as usize * BLOCK_LEN + idx % BLOCK_LEN;
                (m.m[k], m.v[k])
            }
        }
    }

    /// One Adam step on every group whose role is in `trainable`; other
    /// groups (and their moments) are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<R>,
        grads: &GradBuffers<R>,
        trainable: &RoleSet,
    ) -> Result<()> {
        if self.moments.len() < store.capacity() {
            self.moments.resize_with(store.capacity(), || None);
        }
        let ids: Vec<GroupId> = store
            .iter()
            .filter(|(_, g)| trainable.contains(&g.role))
            .map(|(id, _)| id)
            .collect();
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let (c1, c2) = (R::one() - b1, R::one() - b2);
        let eps = R::lit(self.eps);
        for id in ids {
            let len = store.data(id).len();
            let grad = grads.get(id);
            if let Some(g) = grad {
                if g.len() != len {
                    return Err(Error::Invalid(format!(
                        "gradient of group {} has the wrong length",
                        id.0
                    )));
                }
            }
            let m = self.moments[id.0 as usize].get_or_insert_with(|| Moments {
                slot: vec![NO_SLOT; len.div_ceil(BLOCK_LEN)],
                ..Moments::default()
            });
            if let Some(g) = grad {
                for (b, _) in g.touched() {
                    if m.slot[b] == NO_SLOT {
                        m.slot[b] = m.blocks.len() as u32;
                        m.blocks.push(b as u32);
                        m.m.extend(std::iter::repeat_n(R::zero(), BLOCK_LEN));
                        m.v.extend(std::iter::repeat_n(R::zero(), BLOCK_LEN));
                    }
                }
            }
            m.step += 1;
            let t = m.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let step_size = R::lit(self.lr / bc1);
            let inv_bc2_sqrt = R::lit(1.0 / bc2.sqrt());
            if m.blocks.is_empty() {
                continue;
            }
            let p = store.data_mut(id);
            let zero = [R::zero(); BLOCK_LEN];
            for (s, &b) in m.blocks.iter().enumerate() {
                let b = b as usize;
                let gb = grad.and_then(|g| g.block(b)).unwrap_or(&zero);
                let lo = b * BLOCK_LEN;
                let n = BLOCK_LEN.min(len - lo);
                let mb = &mut m.m[s * BLOCK_LEN..s * BLOCK_LEN + n];
                let vb = &mut m.v[s * BLOCK_LEN..s * BLOCK_LEN + n];
                let pb = &mut p[lo..lo + n];
                for k in 0..n {
                    let g = gb[k];
                    mb[k] = b1 * mb[k] + c1 * g;
                    vb[k] = b2 * vb[k] + c2 * g * g;
                    let denom = num_traits::Float::sqrt(vb[k]) * inv_bc2_sqrt + eps;
                    pb[k] -= step_size * mb[k] / denom;
                }
            }
        }
        Ok(())
    }

    /// Feed an epoch loss to the plateau schedule.
    pub fn end_epoch(&mut self, loss: f64) {
        self.lr *= self.plateau.observe(loss);
    }
}

/// Per-frame and mean image quality of a graph against a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// PSNR of the mean squared error over all frames, so a single
    /// perfectly reproduced frame does not make the mean infinite.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Render every frame, quantize it to 8 bits like a saved frame and compare.
pub fn evaluate<R: Real>(
    graph: &SceneGraph<R>,
    data: &Dataset,
    opts: &TraceOptions,
) -> Result<EvalReport> {
    if graph.frames != data.frame_count() {
        return Err(Error::Invalid(format!(
            "graph has {} frames, dataset {}",
            graph.frames,
            data.frame_count()
        )));
    }
    let mut p = Vec::with_capacity(graph.frames);
    let mut s = Vec::with_capacity(graph.frames);
    let mut sq = 0.0;
    for k in 0..graph.frames {
        let img = render_frame_with(graph, k, graph.tau, opts);
        let q = crate::fields::Grid {
            width: img.width,
            height: img.height,
            channels: 3,
            data: img
                .data
                .iter()
                .map(|v| dequantize(quantize(v.as_f64() as f32)))
                .collect(),
        };
        sq += mse(&q, &data.frames[k])?;
        p.push(psnr(&q, &data.frames[k])?);
        s.push(ssim(&q, &data.frames[k])?);
    }
    let n = graph.frames as f64;
    Ok(EvalReport {
        mean_psnr: if sq == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * (sq / n).log10()
        },
        mean_ssim: s.iter().sum::<f64>() / n,
        psnr: p,
        ssim: s,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub photometric: f64,
    pub mask: f64,
    pub lr: f64,
    pub tau: f64,
    /// Full-frame metrics, on evaluation epochs only.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seconds: f64,
}

/// The training log as CSV; empty cells for epochs without evaluation.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,photometric,mask,lr,tau,psnr,ssim,seconds\n");
    let opt = |v: Option<f64>| {
        v.map(|x| {
            if x.is_infinite() {
                "inf".to_string()
            } else {
                format!("{x}")
            }
        })
        .unwrap_or_default()
    };
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            r.epoch,
            r.loss,
            r.photometric,
            r.mask,
            r.lr,
            r.tau,
            opt(r.psnr),
            opt(r.ssim),
            r.seconds
        ));
    }
    out
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position; a string because it is a 128-bit integer.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Parse("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Batch sampler seeded from the config, on its own stream so it does not
/// alias graph initialization.
pub fn training_rng(config: &TrainConfig) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.graph.seed);
    rng.set_stream(1);
    rng
}

pub struct FitResult {
    pub metrics: Vec<EpochMetrics>,
    pub rng: RngState,
}

/// Train `graph` on `data`. `progress` sees every finished epoch.
pub fn fit<R: Real>(
    graph: &mut SceneGraph<R>,
    data: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<FitResult> {
    config.validate()?;
    data.validate()?;
    if graph.frames != data.frame_count() {
        return Err(Error::Invalid(
            "graph and dataset disagree on the frame count".into(),
        ));
    }
    let mut rng = training_rng(config);
    let mut opt = OptimizerState::<R>::new(config);
    let mut grads = GradBuffers::for_store(&graph.params);
    let loss_opts = LossOptions::from_config(config);
    let max_epoch = config.epochs.saturating_sub(1);
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let tau = tau_schedule(epoch, max_epoch);
        graph.tau = tau;
        let trainable = phase_gate(epoch, config);
        let mut sum = LossParts::default();
        for b in 0..config.batches_per_epoch {
            let batch = sample_batch(
                data,
                config.rays_per_batch,
                config.timestamps_per_batch,
                &mut rng,
            )?;
            let parts = loss_and_grad(graph, &batch, tau, &trainable, &loss_opts, &mut grads)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("photometric {} mask {}", parts.photometric, parts.mask),
                });
            }
            opt.step(&mut graph.params, &grads, &trainable)?;
            sum.total += parts.total;
            sum.photometric += parts.photometric;
            sum.mask += parts.mask;
        }
        let n = config.batches_per_epoch as f64;
        let loss = sum.total / n;
        let lr = opt.lr;
        if epoch >= config.plateau_start {
            opt.end_epoch(loss);
        }
        let evaluate_now = (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs;
        let (psnr, ssim) = if evaluate_now {
            let r = evaluate(graph, data, &config.render_options())?;
            (Some(r.mean_psnr), Some(r.mean_ssim))
        } else {
            (None, None)
        };
        let row = EpochMetrics {
            epoch,
            loss,
            photometric: sum.photometric / n,
            mask: sum.mask / n,
            lr,
            tau,
            psnr,
            ssim,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(FitResult {
        metrics: rows,
        rng: RngState::capture(&rng),
    })
}

/// Plain per-slot poses, for callers that trace outside of training.
pub fn plain_slots<R: Real>(graph: &SceneGraph<R>, frames: &[usize]) -> Vec<Slot<R>> {
    frames
        .iter()
        .map(|&k| slot_at(graph, frame_time(k, graph.frames)))
        .collect()
}

/// Give every field random output-head weights and feature-table entries
/// of trained magnitude and jitter all pose offsets, so that every
/// parameter group influences the loss (a fresh field has a zero head and
/// near-zero tables, which leaves most parameters without a gradient).
/// Used before gradient checks.
pub fn excite_for_gradcheck<R: Real>(graph: &mut SceneGraph<R>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let fields: Vec<(GroupId, GroupId, crate::fields::MlpShape)> = graph
        .nodes
        .iter()
        .flat_map(|n| {
            n.fields
                .all()
                .map(|f| (f.weights, f.table, f.mlp))
                .collect::<Vec<_>>()
        })
        .collect();
    for (w, t, shape) in fields {
        let off = shape.layer_offset(shape.layers - 1);
        for v in graph.params.data_mut(w)[off..].iter_mut() {
            *v = R::lit(rng.random_range(-0.1..0.1));
        }
        for v in graph.params.data_mut(t).iter_mut() {
            *v = R::lit(rng.random_range(-0.1..0.1));
        }
    }
    let offsets: Vec<GroupId> = graph
        .camera
        .offsets
        .into_iter()
        .chain(graph.nodes.iter().filter_map(|n| n.track.offsets))
        .collect();
    for g in offsets {
        for v in graph.params.data_mut(g).iter_mut() {
            *v = R::lit(rng.random_range(-0.01..0.01));
        }
    }
}

/// Check the batch-loss gradient of every parameter group of `graph`
/// against central differences: a fixed batch of `spatial × timestamps`
/// rays, all levels unmasked, every role trainable. Runs single-threaded
/// (kink tracing is per thread). A group whose probes all land on kinks is
/// retried on 4-ray batches, so the report can hold a few more than
/// `samples` probes.
pub fn gradcheck_scene(
    graph: &SceneGraph<f64>,
    data: &Dataset,
    cfg: &TrainConfig,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = LossOptions::from_config(cfg);
        let all: RoleSet = Role::ALL.into_iter().collect();
        let tau = 1.0;
        let mut shell = graph.clone();
        let mut store = std::mem::take(&mut shell.params);
        let check = |store: &mut ParamStore<f64>,
                     batch: &Batch,
                     groups: &[GroupId],
                     samples: usize,
                     seed: u64| {
            let mut grads = GradBuffers::for_store(&graph.params);
            loss_and_grad(graph, batch, tau, &all, &opts, &mut grads)?;
            let nonzero = |g: GroupId| -> Vec<usize> {
                grads.get(g).map_or_else(Vec::new, |b| {
                    b.touched()
                        .flat_map(|(blk, vals)| {
                            vals.iter()
                                .enumerate()
                                .filter(|(_, v)| **v != 0.0)
                                .map(move |(i, _)| blk * BLOCK_LEN + i)
                        })
                        .collect()
                })
            };
            let f = |params: &ParamStore<f64>| -> f64 {
                let g = SceneGraph {
                    params: params.clone(),
                    ..shell.clone()
                };
                loss_value(&g, batch, tau, &opts).map_or(f64::NAN, |p| p.total)
            };
            Ok::<_, Error>(grad_check(
                store,
                groups,
                f,
                |g, i| grads.value(g, i),
                nonzero,
                step,
                samples,
                seed,
            ))
        };
        let groups: Vec<GroupId> = store.iter().map(|(id, _)| id).collect();
        let batch = sample_batch(data, 128, 2.min(data.frame_count()), &mut rng)?;
        let mut report = check(&mut store, &batch, &groups, samples, seed)?;

        // Groups that move every ray (camera offsets) cross some hash cell on
        // nearly every probe of a large batch; retry them on a few rays.
        let quota = samples.div_ceil(groups.len().max(1));
        for &g in &groups {
            if store.data(g).is_empty() || report.probes.iter().any(|p| p.group == g) {
                continue;
            }
            let mut got = 0;
            for attempt in 0..64u64 {
                if got >= quota {
                    break;
                }
                let small = sample_batch(data, 4, 1, &mut rng)?;
                let r = check(&mut store, &small, &[g], 1, seed ^ (attempt + 1))?;
                report.rejected += r.rejected;
                got += r.probes.len();
                report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
                report.probes.extend(r.probes);
            }
        }
        Ok(report)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Part, Role};
    use proptest::prelude::*;

    #[test]
    fn plain_loss_matches_taped_loss() {
        let spec = crate::io::SynthSpec {
            width: 32,
            height: 24,
            frames: 4,
            nodes: 2,
            ..Default::default()
        };
        let (data, _) = crate::io::synth_scene(3, &spec).unwrap();
        let cfg = TrainConfig::desk();
        let mut g: SceneGraph<f64> = crate::scenegraph::build_graph(&data, &cfg.graph).unwrap();
        excite_for_gradcheck(&mut g, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_batch(&data, 300, 2, &mut rng).unwrap();
        let opts = LossOptions {
            chunk_rays: 128,
            ..LossOptions::from_config(&cfg)
        };
        let all: RoleSet = Role::ALL.into_iter().collect();
        let mut grads = GradBuffers::for_store(&g.params);
        let taped = loss_and_grad(&g, &batch, 0.6, &all, &opts, &mut grads).unwrap();
        let plain = loss_value(&g, &batch, 0.6, &opts).unwrap();
        assert_eq!(taped, plain);
    }

    #[test]
    fn small_scene_gradients_match_finite_differences() {
        let spec = crate::io::SynthSpec {
            width: 32,
            height: 24,
            frames: 4,
            nodes: 2,
            ..Default::default()
        };
        let (data, _) = crate::io::synth_scene(7, &spec).unwrap();
        let cfg = TrainConfig::desk();
        let mut g: SceneGraph<f64> = crate::scenegraph::build_graph(&data, &cfg.graph).unwrap();
        excite_for_gradcheck(&mut g, 2);
        let r = gradcheck_scene(&g, &data, &cfg, 80, 1e-5, 3).unwrap();
        assert!(r.probes.len() >= 80);
        let covered: std::collections::BTreeSet<_> = r.probes.iter().map(|p| p.group).collect();
        assert_eq!(covered.len(), g.params.iter().count());
        let mut sorted = r.probes.clone();
        sorted.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        for p in sorted.iter().take(5) {
            eprintln!("{p:?}");
        }
        eprintln!("rejected {}", r.rejected);
        assert!(r.max_rel_error < 1e-4, "{:?}", r.worst());
        assert!(r.probes.iter().filter(|p| p.analytic != 0.0).count() > 40);
    }

    #[test]
    fn loss_examples() {
        let gt = [[0.5f64; 3]; 4];
        let same = gt;
        assert_eq!(atlas_loss(&same, &gt, &[(1.0, 1.0)], 0.005).unwrap(), 0.0);
        let off = [[0.7f64; 3]; 4];
        assert!((atlas_loss(&off, &gt, &[], 0.005).unwrap() - 0.2).abs() < 1e-12);
        let terms = [(0.0, 1.0); 5];
        assert!((atlas_loss(&same, &gt, &terms, 0.005).unwrap() - 0.005).abs() < 1e-15);
        assert!(atlas_loss::<f64, f64>(&[], &[], &[], 0.005).is_err());
    }

    #[test]
    fn phase_gate_boundaries() {
        let c = TrainConfig::default();
        let e3: RoleSet = [Role::CameraOffsets, Role::NodeOffsets].into();
        assert_eq!(phase_gate(3, &c), e3);
        let mut e10 = e3.clone();
        e10.extend([Role::ColorField, Role::AlphaField]);
        assert_eq!(phase_gate(10, &c), e10);
        assert_eq!(phase_gate(30, &c), Role::ALL.into_iter().collect());
    }

    #[test]
    fn tau_endpoints() {
        assert_eq!(tau_schedule(0, 79), 0.05);
        let first_full = (0..=79usize)
            .find(|e| 0.05 + (*e as f64 * std::f64::consts::PI / (1.6 * 79.0)).sin() >= 1.0)
            .unwrap();
        let oracle = (0.95f64.asin() * 1.6 * 79.0 / std::f64::consts::PI).ceil() as usize;
        assert_eq!(first_full, oracle);
        assert_eq!(tau_schedule(first_full, 79), 1.0);
        assert!(tau_schedule(first_full - 1, 79) < 1.0);
        assert_eq!(tau_schedule(79, 79), 1.0);
        assert!(tau_schedule(10, 79) < 0.5);
    }

    proptest! {
        #[test]
        fn tau_is_monotone_and_bounded(max in 1usize..500, e in 0usize..500) {
            let e = e % max;
            let (a, b) = (tau_schedule(e, max), tau_schedule(e + 1, max));
            prop_assert!(b >= a);
            prop_assert!((0.05..=1.0).contains(&a));
        }
    }

    fn one_group(value: f64, len: usize) -> (ParamStore<f64>, GroupId) {
        let mut s = ParamStore::new();
        let g = s.add("p", Role::ColorField, Part::Mlp, vec![value; len]);
        (s, g)
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut store, g) = one_group(1.0, 3);
        let mut grads = GradBuffers::for_store(&store);
        grads.add_dense(g, 0, &[1.0, -1.0, 0.0]);
        let mut opt = OptimizerState::new(&TrainConfig::default());
        opt.step(&mut store, &grads, &[Role::ColorField].into())
            .unwrap();
        // Scalar reference: m̂ = g, v̂ = g², step = lr·g/(|g| + ε).
        let want = |g: f64| 1.0 - 1e-3 * g / (g.abs() + 1e-8);
        let p = store.data(g);
        assert!((p[0] - want(1.0)).abs() < 1e-15);
        assert!((p[1] - want(-1.0)).abs() < 1e-15);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn zero_gradients_and_frozen_groups_leave_parameters() {
        let (mut store, g) = one_group(0.25, 40);
        let before = store.clone();
        let grads = GradBuffers::for_store(&store);
        let mut opt = OptimizerState::new(&TrainConfig::default());
        opt.step(&mut store, &grads, &[Role::ColorField].into())
            .unwrap();
        assert_eq!(store, before);
        let mut grads = GradBuffers::for_store(&store);
        grads.add_dense(g, 0, &[3.0; 40]);
        opt.step(&mut store, &grads, &[Role::ViewField].into())
            .unwrap();
        assert_eq!(store, before);
    }

    /// Dense reference Adam, written out independently.
    fn dense_adam(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64) {
        for k in 0..p.len() {
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let vh = v[k] / (1.0 - 0.999f64.powi(t));
            p[k] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }

    proptest! {
        #[test]
        fn block_sparse_adam_tracks_dense_adam(
            steps in proptest::collection::vec(proptest::collection::vec((0usize..50, -2.0f64..2.0), 0..6), 1..6)
        ) {
            let (mut store, g) = one_group(0.5, 50);
            let mut opt = OptimizerState::new(&TrainConfig::default());
            let (mut p, mut m, mut v) = (vec![0.5; 50], vec![0.0; 50], vec![0.0; 50]);
            for (t, entries) in steps.iter().enumerate() {
                let mut grads = GradBuffers::for_store(&store);
                let mut dense = vec![0.0; 50];
                for &(i, x) in entries {
                    grads.add_sparse(g, &[(i as u32, x)]);
                    dense[i] += x;
                }
                opt.step(&mut store, &grads, &[Role::ColorField].into()).unwrap();
                dense_adam(&mut p, &mut m, &mut v, &dense, t as i32 + 1, 1e-3);
            }
            for k in 0..50 {
                prop_assert!((store.data(g)[k] - p[k]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn batches_cover_frames_and_pixels_uniformly() {
        let spec = crate::io::SynthSpec {
            width: 16,
            height: 16,
            frames: 5,
            nodes: 1,
            ..Default::default()
        };
        let (data, _) = crate::io::synth_scene(2, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut frame_hits = [0usize; 5];
        let mut column_hits = [0usize; 16];
        for _ in 0..2000 {
            let b = sample_batch(&data, 8, 2, &mut rng).unwrap();
            assert_eq!(b.rays.len(), 16);
            assert_ne!(b.frames[0], b.frames[1]);
            for f in &b.frames {
                frame_hits[*f] += 1;
            }
            for r in &b.rays[..8] {
                column_hits[r.pixel[0] as usize] += 1;
                let k = b.frames[r.slot];
                let [i, j] = r.pixel.map(|v| v as usize);
                assert_eq!(r.color, [0, 1, 2].map(|c| data.frames[k].at(i, j, c)));
                assert_eq!(r.masks, vec![data.nodes[0].masks[k].at(i, j, 0)]);
            }
        }
        // 4000 frame draws over 5 frames, 16000 pixels over 16 columns:
        // ±5 binomial standard deviations.
        assert!(
            frame_hits
                .iter()
                .all(|n| (*n as f64 - 800.0).abs() < 5.0 * 25.3),
            "{frame_hits:?}"
        );
        assert!(
            column_hits
                .iter()
                .all(|n| (*n as f64 - 1000.0).abs() < 5.0 * 30.6),
            "{column_hits:?}"
        );
        assert!(sample_batch(&data, 8, 6, &mut rng).is_err());
        assert!(sample_batch(&data, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut p = Plateau::new(0.5, 2, 1e-4);
        assert_eq!(p.observe(1.0), 1.0);
        assert_eq!(p.observe(1.0), 1.0);
        assert_eq!(p.observe(1.0), 1.0);
        assert_eq!(p.observe(1.0), 0.5);
        assert_eq!(p.observe(0.5), 1.0);
    }

    #[test]
    fn config_overrides_and_unknown_keys() {
        let c = TrainConfig::desk()
            .with_overrides(&[
                "use_flow=false".into(),
                "lr=0.01".into(),
                "precision=f64".into(),
            ])
            .unwrap();
        assert!(!c.use_flow);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(c.rays_per_batch, 2048);
        assert!(TrainConfig::desk()
            .with_overrides(&["nope=1".into()])
            .is_err());
        assert!(
            TrainConfig::desk()
                .with_overrides(&["seed=3".into()])
                .unwrap()
                .graph
                .seed
                == 3
        );
        let text = c.to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("epochs = 3\nbogus = 1").is_err());
    }
}
