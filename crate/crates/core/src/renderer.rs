//! Ray casting through a scene graph and front-to-back alpha compositing.
//!
//! For each ray every node plane is intersected at the node's pose; hits
//! outside a plane's extent are dropped, the rest are sorted by depth (ties by
//! node id), shaded in per-node batches and composited:
//!
//! ```text
//! C = Σ_i c_i · A_i · Π_{j<i} (1 − A_j)
//! ```
//!
//! The ordering is a detached permutation: gradients flow through the
//! composited values, never through the sort.

use rayon::prelude::*;

use crate::autodiff::{kink, ParamStore, Scalar};
use crate::error::Result;
use crate::fields::{shade_node, Backend, Grid, NodePoint, Plain, ShadeOptions};
use crate::geometry::{generate_ray, sample_plane, CameraIntrinsics, Pose, Ray};
use crate::motion::frame_time;
use crate::real::Real;
use crate::scenegraph::SceneGraph;

/// Rays per rendering work item.
const RENDER_CHUNK: usize = 4096;

/// One shaded intersection along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeSample<S> {
    pub node_id: u32,
    pub color: [S; 3],
    pub opacity: S,
    pub depth: S,
}

/// Composite of one ray with its ordered samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample<S> {
    pub color: [S; 3],
    /// Samples in ascending depth order.
    pub samples: Vec<NodeSample<S>>,
    /// Light left after the last sample.
    pub transmittance: S,
}

impl<S: Copy> RaySample<S> {
    /// Compositing weight of every sample, front to back.
    pub fn weights<R: Real>(&self) -> Vec<R>
    where
        S: Scalar<R>,
    {
        let mut t = R::one();
        self.samples
            .iter()
            .map(|s| {
                let a = s.opacity.value();
                let w = a * t;
                t = t * (R::one() - a);
                w
            })
            .collect()
    }
}

/// Camera and node poses at one time.
#[derive(Clone, Debug)]
pub struct Slot<S> {
    pub t: f64,
    pub camera: Pose<S>,
    /// Indexed like `graph.nodes`.
    pub nodes: Vec<Pose<S>>,
}

/// Plain poses of every node at time `t`.
pub fn slot_at<R: Real>(graph: &SceneGraph<R>, t: f64) -> Slot<R> {
    Slot {
        t,
        camera: graph.camera_pose(t),
        nodes: graph
            .nodes
            .iter()
            .map(|n| n.pose(&graph.params, t))
            .collect(),
    }
}

/// A pixel position to trace in a given slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayJob {
    pub slot: usize,
    pub px: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceOptions {
    pub shade: ShadeOptions,
    /// Stop compositing once transmittance drops below this (inference only).
    pub early_out: Option<f64>,
    /// Restrict tracing to one node (by index), ignoring occluders.
    pub only: Option<usize>,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            shade: ShadeOptions::default(),
            early_out: None,
            only: None,
        }
    }
}

/// Trace `jobs` through the graph with any backend. Rays are generated from
/// each slot's camera pose, so camera parameters are differentiable too.
pub fn trace<R: Real, B: Backend<R>>(
    backend: &B,
    graph: &SceneGraph<R>,
    store: &ParamStore<R>,
    slots: &[Slot<B::S>],
    jobs: &[RayJob],
    tau: f64,
    opts: &TraceOptions,
) -> Vec<RaySample<B::S>> {
    let rays: Vec<(usize, Ray<B::S>)> = jobs
        .iter()
        .map(|j| {
            (
                j.slot,
                generate_ray(&graph.intrinsics, &slots[j.slot].camera, j.px),
            )
        })
        .collect();
    trace_rays(backend, graph, store, slots, &rays, tau, opts)
}

/// Trace explicit rays, each tagged with its slot.
pub fn trace_rays<R: Real, B: Backend<R>>(
    backend: &B,
    graph: &SceneGraph<R>,
    store: &ParamStore<R>,
    slots: &[Slot<B::S>],
    rays: &[(usize, Ray<B::S>)],
    tau: f64,
    opts: &TraceOptions,
) -> Vec<RaySample<B::S>> {
    let n_nodes = graph.nodes.len();
    let mut per_node: Vec<Vec<NodePoint<B::S>>> = (0..n_nodes).map(|_| Vec::new()).collect();
    // Per ray: (node index, index into that node's batch, depth).
    let mut lists: Vec<Vec<(usize, usize, B::S)>> = Vec::with_capacity(rays.len());
    for (slot_idx, ray) in rays {
        let slot = &slots[*slot_idx];
        let mut list = Vec::new();
        for (n, node) in graph.nodes.iter().enumerate() {
            if opts.only.is_some_and(|o| o != n) {
                continue;
            }
            let Some(s) = sample_plane(ray, &slot.nodes[n], node.extent) else {
                continue;
            };
            if !s.inside {
                continue;
            }
            list.push((n, per_node[n].len(), s.depth));
            per_node[n].push(NodePoint {
                x: s.plane_point,
                phi: s.view_angle,
                t: node.local_time(slot.t),
            });
        }
        lists.push(list);
    }
    let shaded: Vec<_> = graph
        .nodes
        .iter()
        .zip(&per_node)
        .map(|(node, pts)| shade_node(backend, node, store, pts, tau, opts.shade))
        .collect();

    let zero = backend.constant(R::zero());
    let one = backend.constant(R::one());
    let early = opts.early_out.map(R::lit);
    lists
        .into_iter()
        .map(|mut list| {
            list.sort_by(|a, b| {
                a.2.value()
                    .partial_cmp(&b.2.value())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(graph.nodes[a.0].id.cmp(&graph.nodes[b.0].id))
            });
            if kink::enabled() {
                let sig = list.iter().fold(0u64, |h, e| {
                    h.wrapping_mul(131).wrapping_add(e.0 as u64 + 1)
                });
                kink::note(0x20, sig);
            }
            let layers: Vec<([B::S; 3], B::S)> = list
                .iter()
                .map(|&(n, k, _)| (shaded[n][k].color, shaded[n][k].opacity))
                .collect();
            let (color, trans, used) = composite(zero, one, &layers, early);
            let samples = list[..used]
                .iter()
                .map(|&(n, k, depth)| NodeSample {
                    node_id: graph.nodes[n].id,
                    color: shaded[n][k].color,
                    opacity: shaded[n][k].opacity,
                    depth,
                })
                .collect();
            RaySample {
                color,
                samples,
                transmittance: trans,
            }
        })
        .collect()
}

/// Front-to-back compositing of `(color, opacity)` layers. Returns the
/// color, the remaining transmittance and how many layers were used
/// (fewer than all only when transmittance fell below `early`).
pub fn composite<R: Real, S: Scalar<R>>(
    zero: S,
    one: S,
    layers: &[([S; 3], S)],
    early: Option<R>,
) -> ([S; 3], S, usize) {
    let mut color = [zero; 3];
    let mut trans = one;
    for (i, (c, a)) in layers.iter().enumerate() {
        if early.is_some_and(|e| trans.value() < e) {
            return (color, trans, i);
        }
        let w = *a * trans;
        for k in 0..3 {
            color[k] = color[k] + c[k] * w;
        }
        trans = trans * a.rsub(R::one());
    }
    (color, trans, layers.len())
}

/// Shade a single world-space ray at time `t`.
pub fn shade_ray<R: Real>(graph: &SceneGraph<R>, ray: &Ray<R>, t: f64, tau: f64) -> RaySample<R> {
    let slots = [slot_at(graph, t)];
    trace_rays(
        &Plain,
        graph,
        &graph.params,
        &slots,
        &[(0, *ray)],
        tau,
        &TraceOptions::default(),
    )
    .pop()
    .expect("one ray in, one sample out")
}

/// Every pixel center of an image, row major.
pub fn pixel_jobs(intr: &CameraIntrinsics, slot: usize) -> Vec<RayJob> {
    let (w, h) = (intr.width, intr.height);
    (0..h)
        .flat_map(|j| {
            (0..w).map(move |i| RayJob {
                slot,
                px: CameraIntrinsics::pixel_center(i, j),
            })
        })
        .collect()
}

/// Plain tracing of every pixel at time `t`, in parallel chunks.
pub fn render_samples<R: Real>(
    graph: &SceneGraph<R>,
    t: f64,
    tau: f64,
    opts: &TraceOptions,
) -> Vec<RaySample<R>> {
    let slots = [slot_at(graph, t)];
    let jobs = pixel_jobs(&graph.intrinsics, 0);
    let chunks: Vec<Vec<RaySample<R>>> = jobs
        .par_chunks(RENDER_CHUNK)
        .map(|c| trace(&Plain, graph, &graph.params, &slots, c, tau, opts))
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Normalized time of a frame of this graph.
pub fn graph_time<R: Real>(graph: &SceneGraph<R>, frame: usize) -> f64 {
    frame_time(frame, graph.frames)
}

/// Render frame `frame` as an RGB grid.
pub fn render_frame<R: Real>(graph: &SceneGraph<R>, frame: usize, tau: f64) -> Grid<R> {
    render_frame_with(graph, frame, tau, &TraceOptions::default())
}

pub fn render_frame_with<R: Real>(
    graph: &SceneGraph<R>,
    frame: usize,
    tau: f64,
    opts: &TraceOptions,
) -> Grid<R> {
    let samples = render_samples(graph, graph_time(graph, frame), tau, opts);
    let intr = &graph.intrinsics;
    Grid {
        width: intr.width as usize,
        height: intr.height as usize,
        channels: 3,
        data: samples.iter().flat_map(|s| s.color).collect(),
    }
}

/// Premultiplied RGBA render of one node alone (no occluders).
pub fn render_layer<R: Real>(
    graph: &SceneGraph<R>,
    node_id: u32,
    frame: usize,
    tau: f64,
) -> Result<Grid<R>> {
    let idx = graph.node_index(node_id)?;
    let opts = TraceOptions {
        only: Some(idx),
        ..TraceOptions::default()
    };
    let samples = render_samples(graph, graph_time(graph, frame), tau, &opts);
    let intr = &graph.intrinsics;
    let data = samples
        .iter()
        .flat_map(|s| match s.samples.first() {
            Some(n) => [
                n.color[0] * n.opacity,
                n.color[1] * n.opacity,
                n.color[2] * n.opacity,
                n.opacity,
            ],
            None => [R::zero(); 4],
        })
        .collect();
    Ok(Grid {
        width: intr.width as usize,
        height: intr.height as usize,
        channels: 4,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layer() -> impl Strategy<Value = ([f64; 3], f64)> {
        (prop::array::uniform3(0.0..=1.0f64), 0.0..=1.0f64)
    }

    proptest! {
        #[test]
        fn weights_and_transmittance_sum_to_one(layers in prop::collection::vec(layer(), 0..8)) {
            let (_, trans, used) = composite(0.0, 1.0, &layers, None);
            prop_assert_eq!(used, layers.len());
            let mut t = 1.0;
            let mut total = 0.0;
            for (_, a) in &layers {
                total += a * t;
                t *= 1.0 - a;
            }
            prop_assert!((total + trans - 1.0).abs() < 1e-12);
        }

        #[test]
        fn opaque_front_hides_everything_behind(front in layer(), behind in prop::collection::vec(layer(), 0..6)) {
            let mut layers = vec![(front.0, 1.0)];
            layers.extend(behind);
            let (c, trans, _) = composite(0.0, 1.0, &layers, None);
            prop_assert_eq!(c, front.0);
            prop_assert_eq!(trans, 0.0);
        }
    }

    #[test]
    fn composite_matches_hand_computation() {
        let layers = [
            ([1.0, 0.0, 0.0], 0.5),
            ([0.0, 1.0, 0.0], 0.5),
            ([0.0, 0.0, 1.0], 1.0),
        ];
        let (c, t, _) = composite(0.0, 1.0, &layers, None);
        assert_eq!(c, [0.5, 0.25, 0.25]);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn early_out_stops_once_light_is_gone() {
        let layers = [([1.0; 3], 0.99), ([0.0; 3], 0.5), ([0.5; 3], 0.5)];
        let (_, t, used) = composite(0.0, 1.0, &layers, Some(0.05));
        assert_eq!(used, 1);
        assert!((t - 0.01f64).abs() < 1e-15);
    }

    #[test]
    fn layer_of_an_unknown_node_is_an_error() {
        let spec = crate::io::SynthSpec {
            width: 16,
            height: 16,
            frames: 2,
            nodes: 1,
            ..Default::default()
        };
        let (_, g) = crate::io::synth_scene(0, &spec).unwrap();
        assert!(render_layer(&g, 42, 0, 1.0).is_err());
        let layer = render_layer(&g, 1, 0, 1.0).unwrap();
        assert_eq!((layer.width, layer.height, layer.channels), (16, 16, 4));
        assert!(layer
            .data
            .chunks(4)
            .all(|p| p[3] >= 0.0 && p[3] <= 1.0 && p[..3].iter().all(|c| *c <= p[3] + 1e-12)));
    }
}
