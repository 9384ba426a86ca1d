//! Scene edits: removing, duplicating, moving and retiming nodes, and
//! painting textures onto node atlases.
//!
//! A texture edit stores a user image in a node's canonical atlas space, so
//! it follows the object through every frame. Rendering blends it over the
//! node's own color, `c* = (1 − α̂)·c + α̂·ĉ`; the view-dependent field is left
//! untouched.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GroupId, ParamStore};
use crate::error::{Error, Result};
use crate::fields::{query_flow, Grid};
use crate::geometry::{plane_to_world, quat_rotate_inv, CameraIntrinsics, Pose};
use crate::io::{load_rgba, Image};
use crate::motion::frame_time;
use crate::real::Real;
use crate::scenegraph::{AtlasNode, SceneGraph};

/// A user texture registered to a node's atlas.
#[derive(Clone, Debug, PartialEq)]
pub struct EditTexture<R> {
    /// 3 channels.
    pub color: Grid<R>,
    /// 1 channel.
    pub alpha: Grid<R>,
}

/// `(1 − α̂)·c + α̂·ĉ`.
pub fn blend_color<R: Real>(c: [R; 3], edit: [R; 3], alpha: R) -> [R; 3] {
    std::array::from_fn(|k| c[k] * (R::one() - alpha) + edit[k] * alpha)
}

pub const FLOW_MAX_ITER: usize = 20;
pub const FLOW_TOL: f64 = 1e-5;

/// Result of inverting a node's flow at one atlas point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowInverse {
    pub x: [f64; 2],
    pub residual: f64,
    pub converged: bool,
}

/// Find `x` with `x + f(x, t) = target` by fixed-point iteration
/// `x ← target − f(x, t)`, starting from the target. Returns the iterate
/// with the smallest residual.
pub fn invert_flow<R: Real>(
    node: &AtlasNode<R>,
    graph: &SceneGraph<R>,
    target: [f64; 2],
    t: f64,
    tau: f64,
    max_iter: usize,
    tol: f64,
) -> FlowInverse {
    let flow = |x: [f64; 2]| -> [f64; 2] {
        let f = query_flow(
            node,
            &graph.params,
            [R::lit(x[0]), R::lit(x[1])],
            node.local_time(t),
            tau,
        );
        [f[0].as_f64(), f[1].as_f64()]
    };
    let mut x = target;
    let mut best = FlowInverse {
        x,
        residual: f64::INFINITY,
        converged: false,
    };
    for _ in 0..max_iter.max(1) {
        let f = flow(x);
        let r = ((x[0] + f[0] - target[0]).powi(2) + (x[1] + f[1] - target[1]).powi(2)).sqrt();
        if r < best.residual {
            best = FlowInverse {
                x,
                residual: r,
                converged: r < tol,
            };
        }
        if r < tol {
            break;
        }
        x = [target[0] - f[0], target[1] - f[1]];
    }
    best
}

/// Counters from projecting a texture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    /// Texels that received texture content.
    pub covered: usize,
    /// Texels skipped because the flow could not be inverted.
    pub unconverged: usize,
}

/// Project an RGBA image, given in the image space of `reference_frame`, onto
/// a node's atlas.
///
/// Each atlas texel is traced back through the node's flow to the plane
/// point that displays it at the reference time, projected into the
/// reference camera and the image sampled bilinearly there. Texels outside
/// the image (or with an unconverged flow inverse) stay transparent.
pub fn project_texture<R: Real>(
    graph: &SceneGraph<R>,
    node_id: u32,
    texture: &Image,
    reference_frame: usize,
) -> Result<(EditTexture<R>, ProjectionStats)> {
    let node = graph.node(node_id).ok_or(Error::UnknownNode(node_id))?;
    if texture.channels != 4 {
        return Err(Error::Invalid("edit textures must be RGBA".into()));
    }
    if reference_frame >= graph.frames {
        return Err(Error::Invalid(format!(
            "reference frame {reference_frame} out of range"
        )));
    }
    let intr = &graph.intrinsics;
    let t = frame_time(reference_frame, graph.frames);
    let camera = graph.camera_pose(t).map(|v| v.as_f64());
    let plane = node.pose(&graph.params, t).map(|v| v.as_f64());
    let (w, h) = (node.base_color.width, node.base_color.height);
    let mut color = Grid::filled(w, h, 3, R::zero());
    let mut alpha = Grid::filled(w, h, 1, R::zero());
    let mut stats = ProjectionStats::default();
    for j in 0..h {
        for i in 0..w {
            let target = color.texel_center(i, j);
            let inv = invert_flow(node, graph, target, t, graph.tau, FLOW_MAX_ITER, FLOW_TOL);
            if !inv.converged {
                stats.unconverged += 1;
                continue;
            }
            let Some(px) = project_point(intr, &camera, &plane, node.extent, inv.x) else {
                continue;
            };
            let (iw, ih) = (texture.width as f64, texture.height as f64);
            if !(px[0] >= 0.0 && px[0] <= iw && px[1] >= 0.0 && px[1] <= ih) {
                continue;
            }
            let rgba: [f32; 4] = texture.sample_plain([(px[0] / iw) as f32, (px[1] / ih) as f32]);
            for c in 0..3 {
                color.set(i, j, c, R::lit(rgba[c] as f64));
            }
            alpha.set(i, j, 0, R::lit(rgba[3] as f64));
            stats.covered += 1;
        }
    }
    if stats.covered == 0 {
        log::warn!(
            "node {node_id} is not visible in frame {reference_frame}; texture edit is empty"
        );
    }
    Ok((EditTexture { color, alpha }, stats))
}

/// Pixel position of plane point `x` (only for planes in front of the camera).
fn project_point(
    intr: &CameraIntrinsics,
    camera: &Pose<f64>,
    plane: &Pose<f64>,
    extent: [f64; 2],
    x: [f64; 2],
) -> Option<[f64; 2]> {
    let w = plane_to_world(x, plane, extent);
    let d = [
        w[0] - camera.translation[0],
        w[1] - camera.translation[1],
        w[2] - camera.translation[2],
    ];
    intr.project(quat_rotate_inv(&camera.rotation, &d))
}

/// One graph edit. Time shifts are in frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Remove {
        node: u32,
    },
    Duplicate {
        node: u32,
        #[serde(default)]
        translation: [f64; 3],
        #[serde(default)]
        dt: f64,
    },
    Translate {
        node: u32,
        translation: [f64; 3],
    },
    TimeShift {
        node: u32,
        dt: f64,
    },
    Texture {
        node: u32,
        /// RGBA image path, relative to the script's directory.
        image: String,
        reference_frame: usize,
    },
}

/// An ordered list of edits, written as TOML `[[edit]]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditScript {
    #[serde(default, rename = "edit")]
    pub edits: Vec<EditOp>,
}

impl EditScript {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("edit scripts always serialize")
    }
}

fn shift_track(node: &mut AtlasNode<impl Real>, delta: [f64; 3]) {
    for t in &mut node.track.base_translation {
        for c in 0..3 {
            t[c] += delta[c];
        }
    }
}

fn foreground_index<R: Real>(graph: &SceneGraph<R>, id: u32) -> Result<usize> {
    let i = graph.node_index(id)?;
    if graph.nodes[i].is_background {
        return Err(Error::Invalid(
            "the background node cannot be edited this way".into(),
        ));
    }
    Ok(i)
}

/// Apply one edit in place. `base_dir` resolves texture paths.
pub fn apply_edit<R: Real>(graph: &mut SceneGraph<R>, op: &EditOp, base_dir: &Path) -> Result<()> {
    let dt_units = |frames: f64| frames / (graph.frames.max(2) - 1) as f64;
    match op {
        EditOp::Remove { node } => {
            let i = foreground_index(graph, *node)?;
            let removed = graph.nodes.remove(i);
            for g in removed.groups() {
                graph.params.remove(g);
            }
        }
        EditOp::Duplicate {
            node,
            translation,
            dt,
        } => {
            let i = foreground_index(graph, *node)?;
            let shift = dt_units(*dt);
            let mut copy = graph.nodes[i].clone();
            copy.id = graph.next_id;
            graph.next_id += 1;
            let prefix = format!("node{}", copy.id);
            // "node3.color.mlp" → "node7.color.mlp"
            let rename = |params: &ParamStore<R>, g: GroupId| {
                let name = &params.group(g).name;
                format!("{prefix}{}", name.find('.').map_or("", |k| &name[k..]))
            };
            for f in copy.fields.all_mut() {
                let name = rename(&graph.params, f.weights);
                f.weights = graph.params.duplicate(f.weights, name);
                let name = rename(&graph.params, f.table);
                f.table = graph.params.duplicate(f.table, name);
            }
            if let Some(g) = copy.track.offsets {
                let name = rename(&graph.params, g);
                copy.track.offsets = Some(graph.params.duplicate(g, name));
            }
            shift_track(&mut copy, *translation);
            copy.time_shift += shift;
            graph.nodes.push(copy);
        }
        EditOp::Translate { node, translation } => {
            let i = foreground_index(graph, *node)?;
            shift_track(&mut graph.nodes[i], *translation);
        }
        EditOp::TimeShift { node, dt } => {
            let i = foreground_index(graph, *node)?;
            let shift = dt_units(*dt);
            graph.nodes[i].time_shift += shift;
        }
        EditOp::Texture {
            node,
            image,
            reference_frame,
        } => {
            graph.node_index(*node)?;
            let tex = load_rgba(&base_dir.join(image))?;
            let (edit, stats) = project_texture(graph, *node, &tex, *reference_frame)?;
            if stats.unconverged > 0 {
                log::warn!(
                    "node {node}: flow inversion failed for {} texels",
                    stats.unconverged
                );
            }
            let i = graph.node_index(*node)?;
            graph.nodes[i].edit = Some(edit);
        }
    }
    Ok(())
}

/// Apply a script to a copy of `graph`; the input is left untouched.
pub fn apply_script<R: Real>(
    graph: &SceneGraph<R>,
    script: &EditScript,
    base_dir: &Path,
) -> Result<SceneGraph<R>> {
    let mut out = graph.clone();
    for op in &script.edits {
        apply_edit(&mut out, op, base_dir)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{synth_scene, SynthSpec};
    use crate::renderer::render_frame;

    fn scene() -> SceneGraph<f64> {
        let spec = SynthSpec {
            width: 24,
            height: 16,
            frames: 3,
            nodes: 2,
            ..SynthSpec::default()
        };
        synth_scene(9, &spec).unwrap().1
    }

    #[test]
    fn empty_script_changes_nothing() {
        let g = scene();
        let out = apply_script(&g, &EditScript::default(), Path::new(".")).unwrap();
        assert_eq!(out, g);
        for k in 0..g.frames {
            assert_eq!(
                render_frame(&out, k, 1.0).data,
                render_frame(&g, k, 1.0).data
            );
        }
    }

    #[test]
    fn remove_drops_node_and_its_parameters() {
        let g = scene();
        let before = g.params.iter().count();
        let owned = g.node(1).unwrap().groups().len();
        let out = apply_script(
            &g,
            &EditScript {
                edits: vec![EditOp::Remove { node: 1 }],
            },
            Path::new("."),
        )
        .unwrap();
        assert!(out.node(1).is_none());
        assert_eq!(out.params.iter().count(), before - owned);
        out.validate().unwrap();
    }

    #[test]
    fn duplicate_gets_fresh_id_and_group_names() {
        let g = scene();
        let op = EditOp::Duplicate {
            node: 2,
            translation: [0.0, 0.5, 0.0],
            dt: 0.0,
        };
        let out = apply_script(&g, &EditScript { edits: vec![op] }, Path::new(".")).unwrap();
        let id = g.next_id;
        let copy = out.node(id).expect("duplicate present");
        assert_eq!(out.next_id, id + 1);
        for grp in copy.groups() {
            let name = &out.params.group(grp).name;
            assert!(name.starts_with(&format!("node{id}.")), "{name}");
        }
        let orig = out.node(2).unwrap();
        assert_eq!(
            out.params.data(orig.fields.color.table),
            out.params.data(copy.fields.color.table)
        );
        assert_eq!(
            copy.track.base_translation[0][1],
            orig.track.base_translation[0][1] + 0.5
        );
        out.validate().unwrap();
    }

    #[test]
    fn time_shift_is_in_frames() {
        let g = scene();
        let op = EditOp::TimeShift { node: 1, dt: 1.0 };
        let out = apply_script(&g, &EditScript { edits: vec![op] }, Path::new(".")).unwrap();
        assert_eq!(out.node(1).unwrap().time_shift, 0.5);
        // Shifted by one frame, the node at t(1) sits where it was at t(0).
        let pose_then = g.node(1).unwrap().pose(&g.params, 0.0);
        let pose_now = out.node(1).unwrap().pose(&out.params, 0.5);
        assert_eq!(pose_then, pose_now);
    }

    #[test]
    fn background_cannot_be_removed_and_unknown_nodes_fail() {
        let g = scene();
        for op in [
            EditOp::Remove { node: 0 },
            EditOp::Translate {
                node: 77,
                translation: [0.0; 3],
            },
        ] {
            assert!(apply_script(&g, &EditScript { edits: vec![op] }, Path::new(".")).is_err());
        }
    }

    #[test]
    fn script_toml_roundtrip() {
        let text = r#"
[[edit]]
op = "duplicate"
node = 1
translation = [0.0, 1.0, 0.0]

[[edit]]
op = "texture"
node = 2
image = "logo.png"
reference_frame = 0
"#;
        let s = EditScript::parse(text).unwrap();
        assert_eq!(s.edits.len(), 2);
        assert_eq!(EditScript::parse(&s.to_toml()).unwrap(), s);
        assert!(EditScript::parse("[[edit]]\nop = \"explode\"\n").is_err());
    }

    #[test]
    fn blend_endpoints() {
        assert_eq!(
            blend_color([0.2, 0.4, 0.6], [1.0, 1.0, 1.0], 0.0),
            [0.2, 0.4, 0.6]
        );
        assert_eq!(
            blend_color([0.2, 0.4, 0.6], [1.0, 0.0, 0.5], 1.0),
            [1.0, 0.0, 0.5]
        );
    }
}
