//! Synthetic scenes with known ground truth.
//!
//! A static (optionally shaking) pinhole camera looks at fronto-parallel
//! textured planes at increasing depths in front of a textured background.
//! Planes move by whole pixels per frame and their texel grids line up with
//! the pixel grid, so frames are exactly representable by a fitted graph.
//! Frames are rendered with this crate's renderer from the returned ground
//! truth graph and quantized to 8 bits; masks mark pixels where a node's
//! compositing weight is at least one half.
//!
//! Two optional effects make appearance change over time: a shear flow
//! whose strength varies linearly in time and a view-dependent color tint
//! proportional to the viewing inclination. Both are wired directly into the
//! nodes' neural fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Part, Role};
use crate::error::{Error, Result};
use crate::fields::{FieldStack, Grid, NeuralField};
use crate::geometry::{quat_from_axes, CameraIntrinsics, Pose};
use crate::io::{dequantize, quantize, BoxState, Dataset, Image, NodeObservation};
use crate::motion::{frame_time, RigidTrack};
use crate::renderer::{render_samples, TraceOptions};
use crate::scenegraph::{AtlasNode, SceneGraph, BACKGROUND_ID};

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub focal: f64,
    /// Foreground planes.
    pub nodes: usize,
    /// Largest per-frame motion of a plane, in whole pixels per axis.
    pub motion: u32,
    /// Largest error of the reported box centers, in pixels per axis: boxes
    /// in real data come from a detector and are only roughly aligned.
    pub box_noise: f64,
    /// Standard deviation of per-frame camera translation jitter (world units).
    pub camera_shake: f64,
    /// Strength of the time-varying shear flow; 0 disables it.
    pub flow: f64,
    /// Strength of the view-dependent tint; 0 disables it.
    pub view: f64,
    pub background_depth: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 96,
            height: 64,
            frames: 16,
            focal: 100.0,
            nodes: 3,
            motion: 1,
            box_noise: 0.5,
            camera_shake: 0.0,
            flow: 0.0,
            view: 0.0,
            background_depth: 20.0,
        }
    }
}

impl SynthSpec {
    /// The default scene with both appearance effects switched on.
    pub fn parallax() -> Self {
        SynthSpec {
            flow: 2.0,
            view: 8.0,
            ..SynthSpec::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Invalid(
                "a synthetic scene needs at least 2 frames".into(),
            ));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Invalid(
                "synthetic frames must be at least 16×16".into(),
            ));
        }
        if !(self.box_noise >= 0.0 && self.camera_shake >= 0.0) {
            return Err(Error::Invalid(
                "noise amplitudes must be non-negative".into(),
            ));
        }
        if !(self.focal > 0.0 && self.background_depth > 0.0) {
            return Err(Error::Invalid(
                "focal length and background depth must be positive".into(),
            ));
        }
        Ok(())
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width / 2) as f64,
            cy: (self.height / 2) as f64,
            width: self.width,
            height: self.height,
        }
    }

    /// Depth of foreground plane `i`, always in front of the background.
    fn depth(&self, i: usize) -> f64 {
        let near = 0.3 * self.background_depth;
        let step = 0.6 * self.background_depth / (self.nodes.max(1) as f64 + 1.0);
        near + step * i as f64
    }
}

/// Pixels of slack around the background so a shaking camera stays covered.
const BACKGROUND_MARGIN: usize = 8;
/// Texels between a plane's border and its opaque shape.
const SHAPE_INSET: usize = 2;

/// Fronto-parallel plane rotation; the matching box has its x axis along
/// the optical axis, y to the left and z up.
fn box_rotation() -> [f64; 4] {
    quat_from_axes([0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0])
}

/// Smooth two-tone texture with values on the 8-bit lattice.
fn texture(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Grid<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.08..0.2));
    let fu = rng.random_range(0.5..2.0);
    let fv = rng.random_range(0.5..2.0);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let mut g = Grid::filled(w, h, 3, 0.0);
    for j in 0..h {
        for i in 0..w {
            let [u, v] = g.texel_center(i, j);
            for c in 0..3 {
                let s = (std::f64::consts::TAU * (fu * u + fv * v) + phase[c]).sin();
                let t = (std::f64::consts::TAU * (fv * u - fu * v) + 1.7 * phase[c]).cos();
                let value = (base[c] + amp[c] * (0.7 * s + 0.3 * t)).clamp(0.0, 1.0);
                g.set(i, j, c, dequantize(quantize(value as f32)) as f64);
            }
        }
    }
    g
}

/// Binary ellipse or rounded rectangle, inset from the border.
fn shape(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Grid<f64> {
    let ellipse = rng.random_bool(0.5);
    let mut g = Grid::filled(w, h, 1, 0.0);
    let (iw, ih) = ((w - 2 * SHAPE_INSET) as f64, (h - 2 * SHAPE_INSET) as f64);
    let radius = 0.25 * iw.min(ih);
    for j in 0..h {
        for i in 0..w {
            // Texel center relative to the shape center, in texels.
            let x = (i as f64 + 0.5 - w as f64 / 2.0).abs();
            let y = (j as f64 + 0.5 - h as f64 / 2.0).abs();
            let inside = if ellipse {
                (x / (iw / 2.0)).powi(2) + (y / (ih / 2.0)).powi(2) <= 1.0
            } else {
                let dx = (x - (iw / 2.0 - radius)).max(0.0);
                let dy = (y - (ih / 2.0 - radius)).max(0.0);
                x <= iw / 2.0 && y <= ih / 2.0 && dx * dx + dy * dy <= radius * radius
            };
            if inside {
                g.set(i, j, 0, 1.0);
            }
        }
    }
    g
}

/// Overwrite a field so that it computes
/// `out[o] = gain_o · x[axis] + bias_o` for the given outputs and zero
/// elsewhere: the coarsest encoding level stores the vertex coordinate
/// along `axis` in its first feature (so interpolation reproduces it
/// exactly) and one ReLU path carries that non-negative value to the head.
fn rig_linear(
    field: &NeuralField,
    store: &mut ParamStore<f64>,
    axis: usize,
    outputs: &[(usize, f64, f64)],
) {
    let layout = field.layout();
    let features = field.encoding.features;
    let level = &layout.levels[0];
    assert!(level.dense, "the coarsest level is always dense");
    let table = store.data_mut(field.table);
    table.iter_mut().for_each(|v| *v = 0.0);
    for e in 0..level.size {
        let c = (e as u64 / level.res.pow(axis as u32)) % level.res;
        table[(level.offset + e) * features] = c as f64 / level.scale;
    }
    let mlp = field.mlp;
    let weights = store.data_mut(field.weights);
    weights.iter_mut().for_each(|v| *v = 0.0);
    for l in 0..mlp.layers - 1 {
        weights[mlp.layer_offset(l)] = 1.0;
    }
    let head = mlp.layer_offset(mlp.layers - 1);
    let (fan_in, fan_out) = mlp.layer_dims(mlp.layers - 1);
    for &(o, gain, bias) in outputs {
        weights[head + o * fan_in] = gain;
        weights[head + fan_out * fan_in + o] = bias;
    }
}

/// Plane placement of one foreground node, in pixels.
#[derive(Clone, Copy, Debug)]
struct Placement {
    /// Top-left pixel in frame 0.
    origin: [i64; 2],
    size: [usize; 2],
    velocity: [i64; 2],
}

impl Placement {
    fn at(&self, k: usize) -> [i64; 2] {
        [
            self.origin[0] + self.velocity[0] * k as i64,
            self.origin[1] + self.velocity[1] * k as i64,
        ]
    }

    fn overlaps(&self, other: &Placement) -> bool {
        let (a, b) = (self.origin, other.origin);
        a[0] < b[0] + other.size[0] as i64
            && b[0] < a[0] + self.size[0] as i64
            && a[1] < b[1] + other.size[1] as i64
            && b[1] < a[1] + self.size[1] as i64
    }
}

/// Draw sizes, starting points and velocities: every plane stays fully in
/// view and no two overlap in the first frame.
fn place(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Placement>> {
    let (w, h) = (spec.width as i64, spec.height as i64);
    let last = spec.frames as i64 - 1;
    let mut placed: Vec<Placement> = Vec::with_capacity(spec.nodes);
    for _ in 0..spec.nodes {
        let mut found = None;
        for _ in 0..10_000 {
            let size = [
                rng.random_range((w as usize / 5).max(8)..=(w as usize / 3).max(9)),
                rng.random_range((h as usize / 5).max(8)..=(h as usize / 3).max(9)),
            ];
            let m = spec.motion as i64;
            let velocity = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
            let span = |axis: usize, extent: i64| {
                let travel = velocity[axis] * last;
                let lo = 1 - travel.min(0);
                let hi = extent - 1 - size[axis] as i64 - travel.max(0);
                (lo, hi)
            };
            let (x0, x1) = span(0, w);
            let (y0, y1) = span(1, h);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let p = Placement {
                origin: [rng.random_range(x0..=x1), rng.random_range(y0..=y1)],
                size,
                velocity,
            };
            if placed.iter().all(|q| !p.overlaps(q)) {
                found = Some(p);
                break;
            }
        }
        placed.push(found.ok_or_else(|| {
            Error::Invalid("could not fit the requested planes into the frame".into())
        })?);
    }
    Ok(placed)
}

/// Build the ground-truth graph, render it and derive masks and boxes.
pub fn synth_scene(seed: u64, spec: &SynthSpec) -> Result<(Dataset, SceneGraph<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = spec.intrinsics();
    let f = spec.frames;
    let mut params = ParamStore::new();

    // Camera: at the origin looking down +z, optionally jittered.
    let camera_poses: Vec<Pose<f64>> = (0..f)
        .map(|_| {
            let mut p = Pose::identity();
            if spec.camera_shake > 0.0 {
                p.translation =
                    std::array::from_fn(|_| rng.random_range(-1.0..1.0) * spec.camera_shake);
            }
            p
        })
        .collect();
    let camera = RigidTrack {
        base_translation: camera_poses.iter().map(|c| c.translation).collect(),
        base_rotation: camera_poses.iter().map(|c| c.rotation).collect(),
        eta_t: 0.5,
        eta_r: 0.5,
        control_points: f,
        offsets: Some(params.add(
            "camera.offsets",
            Role::CameraOffsets,
            Part::Offsets,
            vec![0.0; 6 * f],
        )),
    };

    // Background: one texel per pixel at its depth, with a margin.
    let bd = spec.background_depth;
    let texel = bd / spec.focal;
    let bw = intr.width as usize + 2 * BACKGROUND_MARGIN;
    let bh = intr.height as usize + 2 * BACKGROUND_MARGIN;
    let bg_pose = Pose {
        rotation: [1.0, 0.0, 0.0, 0.0],
        translation: [
            ((intr.width as f64) / 2.0 - intr.cx) * texel,
            ((intr.height as f64) / 2.0 - intr.cy) * texel,
            bd,
        ],
    };
    let bg_fields = FieldStack::create(&mut params, "background", false, f, &mut rng);
    let background = AtlasNode {
        id: BACKGROUND_ID,
        is_background: true,
        base_color: texture(bw, bh, &mut rng),
        base_alpha: Grid::filled(bw, bh, 1, 1.0),
        fields: bg_fields,
        track: RigidTrack::fixed(bg_pose, f),
        extent: [bw as f64 * texel, bh as f64 * texel],
        time_shift: 0.0,
        edit: None,
    };

    let placements = place(spec, &mut rng)?;
    let flow_points = crate::fields::flow_control_points(f);
    let mut nodes = vec![background];
    let mut boxes = Vec::with_capacity(spec.nodes);
    for (i, p) in placements.iter().enumerate() {
        let id = i as u32 + 1;
        let d = spec.depth(i);
        let px = d / spec.focal;
        let extent = [p.size[0] as f64 * px, p.size[1] as f64 * px];
        let centers: Vec<[f64; 3]> = (0..f)
            .map(|k| {
                let o = p.at(k);
                [
                    (o[0] as f64 + p.size[0] as f64 / 2.0 - intr.cx) * px,
                    (o[1] as f64 + p.size[1] as f64 / 2.0 - intr.cy) * px,
                    d,
                ]
            })
            .collect();
        let track = RigidTrack {
            base_translation: centers.clone(),
            base_rotation: vec![[1.0, 0.0, 0.0, 0.0]; f],
            eta_t: 0.5,
            eta_r: 0.5,
            control_points: f,
            offsets: Some(params.add(
                format!("node{id}.offsets"),
                Role::NodeOffsets,
                Part::Offsets,
                vec![0.0; 6 * f],
            )),
        };
        let fields = FieldStack::create(&mut params, &format!("node{id}"), true, f, &mut rng);
        if spec.flow != 0.0 {
            // Vertical displacement proportional to the horizontal position,
            // sweeping from −flow to +flow over the clip.
            let outs: Vec<(usize, f64, f64)> = (0..flow_points)
                .map(|k| {
                    let a = spec.flow * (2.0 * frame_time(k, flow_points) - 1.0);
                    (2 * k + 1, a, -0.5 * a)
                })
                .collect();
            rig_linear(&fields.flow, &mut params, 0, &outs);
        }
        if spec.view != 0.0 {
            // Tint proportional to the inclination of the viewing ray.
            let gains = [1.0, -0.7, 0.4].map(|g| g * spec.view);
            let outs: Vec<(usize, f64, f64)> =
                (0..3).map(|c| (c, gains[c], -0.08 * gains[c])).collect();
            rig_linear(&fields.view, &mut params, 2, &outs);
        }
        nodes.push(AtlasNode {
            id,
            is_background: false,
            base_color: texture(p.size[0], p.size[1], &mut rng),
            base_alpha: shape(p.size[0], p.size[1], &mut rng),
            fields,
            track,
            extent,
            time_shift: 0.0,
            edit: None,
        });
        let thickness = 0.05 * d;
        boxes.push(
            centers
                .iter()
                .map(|c| {
                    let mut center = *c;
                    if spec.box_noise > 0.0 {
                        for v in &mut center[..2] {
                            *v += rng.random_range(-1.0..=1.0) * spec.box_noise * px;
                        }
                    }
                    BoxState {
                        center,
                        rotation: box_rotation(),
                        size: [thickness, extent[0], extent[1]],
                    }
                })
                .collect::<Vec<_>>(),
        );
    }

    let graph = SceneGraph {
        intrinsics: intr,
        camera,
        nodes,
        frames: f,
        params,
        tau: 1.0,
        next_id: spec.nodes as u32 + 1,
    };
    graph.validate()?;

    let (w, h) = (intr.width as usize, intr.height as usize);
    let mut frames = Vec::with_capacity(f);
    let mut masks: Vec<Vec<Image>> = vec![Vec::with_capacity(f); spec.nodes];
    for k in 0..f {
        let samples = render_samples(
            &graph,
            frame_time(k, f),
            graph.tau,
            &TraceOptions::default(),
        );
        let data = samples
            .iter()
            .flat_map(|s| s.color.map(|v| dequantize(quantize(v as f32))))
            .collect();
        frames.push(Grid {
            width: w,
            height: h,
            channels: 3,
            data,
        });
        for (n, m) in masks.iter_mut().enumerate() {
            let id = n as u32 + 1;
            let mut img = Grid::filled(w, h, 1, 0.0f32);
            for (px, s) in samples.iter().enumerate() {
                let weights = s.weights::<f64>();
                if s.samples
                    .iter()
                    .zip(&weights)
                    .any(|(ns, wt)| ns.node_id == id && *wt >= 0.5)
                {
                    img.data[px] = 1.0;
                }
            }
            m.push(img);
        }
    }
    let nodes = masks
        .into_iter()
        .zip(boxes)
        .enumerate()
        .map(|(n, (masks, boxes))| NodeObservation {
            id: n as u32 + 1,
            masks,
            boxes,
        })
        .collect();
    let data = Dataset {
        intrinsics: intr,
        extrinsics: camera_poses.iter().map(|p| p.to_matrix()).collect(),
        frames,
        nodes,
    };
    data.validate()?;
    Ok((data, graph))
}

/// Ground-truth premultiplied RGBA layers of one node, every frame.
pub fn ground_truth_layers(graph: &SceneGraph<f64>, node_id: u32) -> Result<Vec<Grid<f64>>> {
    (0..graph.frames)
        .map(|k| crate::renderer::render_layer(graph, node_id, k, graph.tau))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::render_frame;

    fn small() -> SynthSpec {
        SynthSpec {
            width: 48,
            height: 32,
            frames: 4,
            focal: 50.0,
            nodes: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, ga) = synth_scene(7, &small()).unwrap();
        let (b, gb) = synth_scene(7, &small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = synth_scene(8, &small()).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn frames_match_a_rerender_after_quantization() {
        let (data, graph) = synth_scene(3, &small()).unwrap();
        for k in 0..data.frame_count() {
            let img = render_frame(&graph, k, graph.tau);
            let q: Vec<f32> = img
                .data
                .iter()
                .map(|v| dequantize(quantize(*v as f32)))
                .collect();
            assert_eq!(q, data.frames[k].data);
        }
    }

    #[test]
    fn no_foreground_gives_a_static_video() {
        let spec = SynthSpec {
            nodes: 0,
            ..small()
        };
        let (data, _) = synth_scene(1, &spec).unwrap();
        assert!(data.nodes.is_empty());
        assert!(data.frames.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn first_frame_shows_every_node_whole() {
        let (data, graph) = synth_scene(5, &SynthSpec::default()).unwrap();
        for (obs, node) in data.nodes.iter().zip(graph.foreground()) {
            let area = obs.masks[0].data.iter().filter(|v| **v == 1.0).count();
            let shape = node.base_alpha.data.iter().filter(|v| **v == 1.0).count();
            assert_eq!(area, shape, "node {}", obs.id);
        }
    }

    #[test]
    fn rigged_fields_compute_their_linear_maps() {
        let spec = SynthSpec {
            flow: 2.0,
            view: 3.0,
            ..small()
        };
        let (_, graph) = synth_scene(2, &spec).unwrap();
        let node = graph.node(1).unwrap();
        let x = [0.8, 0.3];
        let out = node.fields.flow.eval(&graph.params, &x, 1.0);
        let p = node.fields.flow_points;
        for k in 0..p {
            let a = 2.0 * (2.0 * frame_time(k, p) - 1.0);
            assert!(out[2 * k].abs() < 1e-12);
            assert!((out[2 * k + 1] - a * (0.8 - 0.5)).abs() < 1e-12);
        }
        let v = node
            .fields
            .view
            .eval(&graph.params, &[0.5, 0.5, 0.1, 0.4], 1.0);
        assert!((v[0] - 3.0 * (0.1 - 0.08)).abs() < 1e-12);
        assert!(v[3].abs() < 1e-12);
    }
}
