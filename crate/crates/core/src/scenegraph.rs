//! Scene graphs: atlas nodes, the background node and the camera, and their
//! construction from a dataset.
//!
//! Construction places one plane per mask track, sized from the largest mask
//! and textured by projecting the reference frame onto it, plus a background
//! plane behind everything that covers the whole camera trajectory.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GroupId, ParamStore, Part, Role};
use crate::editing::EditTexture;
use crate::error::{Error, Result};
use crate::fields::{FieldStack, Grid};
use crate::geometry::{
    cross, generate_ray, intersect_plane, normalize, quat_from_axes, quat_mul, quat_rotate,
    quat_rotate_inv, CameraIntrinsics, Pose,
};
use crate::io::{Dataset, Image};
use crate::motion::RigidTrack;
use crate::real::Real;

/// Id of the background node.
pub const BACKGROUND_ID: u32 = 0;

/// One planar object (or the background).
#[derive(Clone, Debug, PartialEq)]
pub struct AtlasNode<R: Real> {
    pub id: u32,
    pub is_background: bool,
    /// Fixed base color, 3 channels.
    pub base_color: Grid<R>,
    /// Fixed base opacity, 1 channel.
    pub base_alpha: Grid<R>,
    pub fields: FieldStack,
    pub track: RigidTrack,
    /// Plane size in world units.
    pub extent: [f64; 2],
    /// Shift of the node's clock in normalized time.
    pub time_shift: f64,
    pub edit: Option<EditTexture<R>>,
}

impl<R: Real> AtlasNode<R> {
    /// The node's own time for global time `t`.
    pub fn local_time(&self, t: f64) -> f64 {
        (t - self.time_shift).clamp(0.0, 1.0)
    }

    /// Pose at global time `t` with the current offsets.
    pub fn pose(&self, store: &ParamStore<R>, t: f64) -> Pose<R> {
        let off = self.track.offsets.map(|g| store.data(g));
        self.track.pose_plain(off, self.local_time(t))
    }

    /// Parameter groups owned by this node.
    pub fn groups(&self) -> Vec<GroupId> {
        let mut g = self.fields.groups();
        g.extend(self.track.offsets);
        g
    }
}

/// A complete scene: camera, foreground nodes, background and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph<R: Real> {
    pub intrinsics: CameraIntrinsics,
    pub camera: RigidTrack,
    pub nodes: Vec<AtlasNode<R>>,
    pub frames: usize,
    pub params: ParamStore<R>,
    /// Encoding mask level used for inference (the last training value).
    pub tau: f64,
    pub next_id: u32,
}

impl<R: Real> SceneGraph<R> {
    pub fn node(&self, id: u32) -> Option<&AtlasNode<R>> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: u32) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or(Error::UnknownNode(id))
    }

    pub fn background(&self) -> Option<&AtlasNode<R>> {
        self.nodes.iter().find(|n| n.is_background)
    }

    pub fn foreground(&self) -> impl Iterator<Item = &AtlasNode<R>> {
        self.nodes.iter().filter(|n| !n.is_background)
    }

    pub fn camera_pose(&self, t: f64) -> Pose<R> {
        let off = self.camera.offsets.map(|g| self.params.data(g));
        self.camera.pose_plain(off, t)
    }

    /// The same scene at another precision.
    pub fn cast<S: Real>(&self) -> SceneGraph<S> {
        SceneGraph {
            intrinsics: self.intrinsics,
            camera: self.camera.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| AtlasNode {
                    id: n.id,
                    is_background: n.is_background,
                    base_color: n.base_color.cast(),
                    base_alpha: n.base_alpha.cast(),
                    fields: n.fields.clone(),
                    track: n.track.clone(),
                    extent: n.extent,
                    time_shift: n.time_shift,
                    edit: n.edit.as_ref().map(|e| EditTexture {
                        color: e.color.cast(),
                        alpha: e.alpha.cast(),
                    }),
                })
                .collect(),
            frames: self.frames,
            params: self.params.cast(),
            tau: self.tau,
            next_id: self.next_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Invalid(format!(
                "a scene needs at least 2 frames, got {}",
                self.frames
            )));
        }
        if self.nodes.iter().filter(|n| n.is_background).count() != 1 {
            return Err(Error::Invalid(
                "a scene needs exactly one background node".into(),
            ));
        }
        let mut ids: Vec<u32> = self.nodes.iter().map(|n| n.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Invalid("duplicate node ids".into()));
        }
        for n in &self.nodes {
            if !(n.extent[0] > 0.0 && n.extent[1] > 0.0) {
                return Err(Error::Invalid(format!(
                    "node {} has a degenerate extent",
                    n.id
                )));
            }
        }
        Ok(())
    }
}

/// Knobs of graph construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Relative margin added to the back-projected mask rectangle.
    pub margin: f64,
    /// Atlas texels per reference-frame pixel, per axis.
    pub atlas_oversample: f64,
    /// Largest atlas side in texels.
    pub max_atlas_side: usize,
    /// Spline control points of pose offsets; `None` uses one per frame.
    pub pose_control_points: Option<usize>,
    pub eta_t: f64,
    pub eta_r: f64,
    /// Background distance as a multiple of the farthest box depth.
    pub background_depth_factor: f64,
    pub seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            margin: 0.2,
            atlas_oversample: 2.0,
            max_atlas_side: 1024,
            pose_control_points: None,
            eta_t: 0.5,
            eta_r: 0.5,
            background_depth_factor: 1.5,
            seed: 0,
        }
    }
}

/// Back-projected mask rectangle on a node's plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtentEstimate {
    /// Plane size including the margin.
    pub extent: [f64; 2],
    /// Rectangle center in plane-local coordinates (world units).
    pub center: [f64; 2],
    /// World size of one reference-frame pixel on the plane.
    pub pixel_size: f64,
    pub reference_frame: usize,
}

fn mask_area(m: &Image) -> usize {
    m.data.iter().filter(|v| **v >= 0.5).count()
}

fn mask_rect(m: &Image) -> Option<[usize; 4]> {
    let mut r: Option<[usize; 4]> = None;
    for j in 0..m.height {
        for i in 0..m.width {
            if m.at(i, j, 0) >= 0.5 {
                let b = r.get_or_insert([i, j, i, j]);
                b[0] = b[0].min(i);
                b[1] = b[1].min(j);
                b[2] = b[2].max(i);
                b[3] = b[3].max(j);
            }
        }
    }
    r
}

/// Frame with the largest mask (first on ties).
pub fn reference_frame(masks: &[Image]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (k, m) in masks.iter().enumerate() {
        let a = mask_area(m);
        if a > 0 && best.is_none_or(|(_, b)| a > b) {
            best = Some((k, a));
        }
    }
    best.map(|(k, _)| k)
}

/// Plane-local coordinates of the hit of pixel position `px`.
fn backproject(
    intr: &CameraIntrinsics,
    camera: &Pose<f64>,
    plane: &Pose<f64>,
    px: [f64; 2],
) -> Option<[f64; 2]> {
    let ray = generate_ray::<f64, f64>(intr, camera, px);
    let (_, w) = intersect_plane(&ray, plane)?;
    let d = [
        w[0] - plane.translation[0],
        w[1] - plane.translation[1],
        w[2] - plane.translation[2],
    ];
    let l = quat_rotate_inv(&plane.rotation, &d);
    Some([l[0], l[1]])
}

/// Size of a node's plane from its largest mask.
///
/// The mask's bounding rectangle (pixel edges) in the reference frame is
/// back-projected onto the plane at that frame; the extent is the size of its
/// plane-aligned bounding box times `1 + margin`.
pub fn estimate_extent(
    id: u32,
    masks: &[Image],
    track: &RigidTrack,
    intr: &CameraIntrinsics,
    cameras: &[Pose<f64>],
    margin: f64,
) -> Result<ExtentEstimate> {
    let k = reference_frame(masks).ok_or(Error::Unobservable(id))?;
    let [x0, y0, x1, y1] = mask_rect(&masks[k]).ok_or(Error::Unobservable(id))?;
    let plane = Pose {
        rotation: track.base_rotation[k],
        translation: track.base_translation[k],
    };
    let corners = [
        [x0 as f64, y0 as f64],
        [(x1 + 1) as f64, y0 as f64],
        [x0 as f64, (y1 + 1) as f64],
        [(x1 + 1) as f64, (y1 + 1) as f64],
    ];
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in corners {
        let p = backproject(intr, &cameras[k], &plane, c).ok_or_else(|| {
            Error::Invalid(format!(
                "node {id}: mask corner does not hit the node plane"
            ))
        })?;
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let size = [hi[0] - lo[0], hi[1] - lo[1]];
    let pixels = [(x1 + 1 - x0) as f64, (y1 + 1 - y0) as f64];
    Ok(ExtentEstimate {
        extent: [size[0] * (1.0 + margin), size[1] * (1.0 + margin)],
        center: [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0],
        pixel_size: 0.5 * (size[0] / pixels[0] + size[1] / pixels[1]),
        reference_frame: k,
    })
}

/// Rotation (box frame → plane frame) of the box face seen best.
///
/// Candidates are the box's front (`x`), side (`y`) and both diagonal faces;
/// the one whose normal is most aligned with the mean direction from camera
/// to box wins, ties going to the earlier candidate. The plane's `y` axis
/// points down the box's `z` (up) axis and its normal away from the camera.
pub fn face_rotation(view_in_box: [f64; 3]) -> [f64; 4] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let candidates = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [s, s, 0.0], [s, -s, 0.0]];
    let v = normalize(view_in_box);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let d = (c[0] * v[0] + c[1] * v[1] + c[2] * v[2]).abs();
        if d > best.1 + 1e-12 {
            best = (i, d);
        }
    }
    let c = candidates[best.0];
    let sign = if c[0] * v[0] + c[1] * v[1] + c[2] * v[2] < 0.0 {
        -1.0
    } else {
        1.0
    };
    let z = c.map(|x| x * sign);
    let y = [0.0, 0.0, -1.0];
    let x = cross(y, z);
    quat_from_axes(x, y, z)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn atlas_side(extent: f64, texel: f64, max: usize) -> usize {
    ((extent / texel).ceil() as usize).clamp(2, max.max(2))
}

/// Nearest pixel of a frame at pixel position `px`, if inside the image.
fn nearest_pixel(intr: &CameraIntrinsics, px: [f64; 2]) -> Option<(usize, usize)> {
    let (w, h) = (intr.width as f64, intr.height as f64);
    if !(px[0] >= 0.0 && px[0] < w && px[1] >= 0.0 && px[1] < h) {
        return None;
    }
    Some((px[0].floor() as usize, px[1].floor() as usize))
}

/// Pixel position where a world point appears in a frame.
fn project_world(intr: &CameraIntrinsics, camera: &Pose<f64>, p: [f64; 3]) -> Option<[f64; 2]> {
    let local = quat_rotate_inv(&camera.rotation, &sub3(p, camera.translation));
    intr.project(local)
}

fn offsets_group<R: Real>(
    store: &mut ParamStore<R>,
    name: &str,
    role: Role,
    points: usize,
) -> GroupId {
    store.add(name, role, Part::Offsets, vec![R::zero(); 6 * points])
}

/// Build a foreground node from its mask and box tracks.
///
/// Base textures sample the reference frame at the nearest pixel: with at
/// least two texels per pixel, bilinear lookups at pixel centers then read
/// two texels of the same pixel, so the reference frame is reproduced
/// exactly and mask edges stay sharp.
pub fn init_node<R: Real>(
    data: &Dataset,
    index: usize,
    config: &GraphConfig,
    store: &mut ParamStore<R>,
    rng: &mut impl rand::Rng,
) -> Result<AtlasNode<R>> {
    let obs = &data.nodes[index];
    let f = data.frame_count();
    let intr = &data.intrinsics;
    let cameras: Vec<Pose<f64>> = (0..f).map(|k| data.camera_pose(k)).collect();

    // Face selection from the mean viewing direction in the box frame.
    let mut view = [0.0; 3];
    for (b, cam) in obs.boxes.iter().zip(&cameras) {
        let d = normalize(sub3(b.center, cam.translation));
        view = add3(view, quat_rotate_inv(&b.rotation, &d));
    }
    let face = face_rotation(view);
    let rotations: Vec<[f64; 4]> = obs
        .boxes
        .iter()
        .map(|b| quat_mul(&b.rotation, &face))
        .collect();
    let mut track = RigidTrack {
        base_translation: obs.boxes.iter().map(|b| b.center).collect(),
        base_rotation: rotations,
        eta_t: config.eta_t,
        eta_r: config.eta_r,
        control_points: 0,
        offsets: None,
    };
    let est = estimate_extent(obs.id, &obs.masks, &track, intr, &cameras, config.margin)?;
    // Center the plane on the mask rectangle.
    for k in 0..f {
        let shift = quat_rotate(
            &track.base_rotation[k],
            &[est.center[0], est.center[1], 0.0],
        );
        track.base_translation[k] = add3(track.base_translation[k], shift);
    }
    let points = config.pose_control_points.unwrap_or(f).max(2);
    track.control_points = points;
    track.offsets = Some(offsets_group(
        store,
        &format!("node{}.offsets", obs.id),
        Role::NodeOffsets,
        points,
    ));

    let texel = est.pixel_size / config.atlas_oversample;
    let w = atlas_side(est.extent[0], texel, config.max_atlas_side);
    let h = atlas_side(est.extent[1], texel, config.max_atlas_side);
    let k = est.reference_frame;
    let plane = Pose {
        rotation: track.base_rotation[k],
        translation: track.base_translation[k],
    };
    let mut color = Grid::filled(w, h, 3, R::lit(0.5));
    let mut alpha = Grid::filled(w, h, 1, R::zero());
    let frame = &data.frames[k];
    let mask = &obs.masks[k];
    for j in 0..h {
        for i in 0..w {
            let x = color.texel_center(i, j);
            let p = crate::geometry::plane_to_world(x, &plane, est.extent);
            let Some((pi, pj)) =
                project_world(intr, &cameras[k], p).and_then(|px| nearest_pixel(intr, px))
            else {
                continue;
            };
            if mask.at(pi, pj, 0) >= 0.5 {
                for c in 0..3 {
                    color.set(i, j, c, R::lit(frame.at(pi, pj, c) as f64));
                }
                alpha.set(i, j, 0, R::one());
            }
        }
    }
    let fields = FieldStack::create(store, &format!("node{}", obs.id), true, f, rng);
    Ok(AtlasNode {
        id: obs.id,
        is_background: false,
        base_color: color,
        base_alpha: alpha,
        fields,
        track,
        extent: est.extent,
        time_shift: 0.0,
        edit: None,
    })
}

/// Whether any foreground mask covers pixel `(i, j)` of frame `k`.
fn masked(data: &Dataset, k: usize, i: usize, j: usize) -> bool {
    data.nodes.iter().any(|n| n.masks[k].at(i, j, 0) >= 0.5)
}

/// Place and texture the background plane.
///
/// The plane sits at `depth_factor ×` the farthest box corner depth along the
/// mean viewing direction, faces the mean camera and is cropped to the union
/// of all frame frustums. Texels are colored from the first frame in which
/// they are visible and unmasked; texels never seen that way get the mean of
/// the others.
pub fn init_background<R: Real>(
    data: &Dataset,
    config: &GraphConfig,
    store: &mut ParamStore<R>,
    rng: &mut impl rand::Rng,
) -> Result<AtlasNode<R>> {
    let f = data.frame_count();
    let intr = &data.intrinsics;
    let cameras: Vec<Pose<f64>> = (0..f).map(|k| data.camera_pose(k)).collect();
    let mut center = [0.0; 3];
    let mut view = [0.0; 3];
    let mut right = [0.0; 3];
    for c in &cameras {
        center = add3(center, c.translation.map(|v| v / f as f64));
        view = add3(view, quat_rotate(&c.rotation, &[0.0, 0.0, 1.0]));
        right = add3(right, quat_rotate(&c.rotation, &[1.0, 0.0, 0.0]));
    }
    let z = normalize(view);
    let rd = right[0] * z[0] + right[1] * z[1] + right[2] * z[2];
    let x = normalize(sub3(right, z.map(|v| v * rd)));
    let y = cross(z, x);
    let rotation = quat_from_axes(x, y, z);

    let mut far: f64 = 0.0;
    for n in &data.nodes {
        for b in &n.boxes {
            for corner in 0..8 {
                let local = [0, 1, 2].map(|a| {
                    let s = if corner >> a & 1 == 1 { 0.5 } else { -0.5 };
                    s * b.size[a]
                });
                let p = add3(b.center, quat_rotate(&b.rotation, &local));
                let d = sub3(p, center);
                far = far.max(d[0] * z[0] + d[1] * z[1] + d[2] * z[2]);
            }
        }
    }
    if far <= 0.0 {
        // No boxes in front of the camera: any depth works; use ten units.
        far = 10.0 / config.background_depth_factor;
    }
    let depth = far * config.background_depth_factor;
    let mut plane = Pose {
        rotation,
        translation: add3(center, z.map(|v| v * depth)),
    };

    // Cover every frame's image corners.
    let (w, h) = (intr.width as f64, intr.height as f64);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for cam in &cameras {
        for c in [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]] {
            let p = backproject(intr, cam, &plane, c).ok_or_else(|| {
                Error::Invalid("a camera looks away from the background plane".into())
            })?;
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    plane.translation = add3(
        plane.translation,
        quat_rotate(&plane.rotation, &[mid[0], mid[1], 0.0]),
    );
    // A small safety margin keeps frame corners strictly inside.
    let extent = [(hi[0] - lo[0]) * 1.02, (hi[1] - lo[1]) * 1.02];
    let a = backproject(intr, &cameras[0], &plane, [0.0, 0.0]).unwrap_or([0.0; 2]);
    let b = backproject(intr, &cameras[0], &plane, [w, h]).unwrap_or([w, h]);
    let pixel = 0.5 * ((b[0] - a[0]).abs() / w + (b[1] - a[1]).abs() / h);
    let texel = pixel / config.atlas_oversample;
    let gw = atlas_side(extent[0], texel, config.max_atlas_side);
    let gh = atlas_side(extent[1], texel, config.max_atlas_side);

    let mut color = Grid::filled(gw, gh, 3, R::lit(0.5));
    let mut seen = vec![false; gw * gh];
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for j in 0..gh {
        for i in 0..gw {
            let p = crate::geometry::plane_to_world(color.texel_center(i, j), &plane, extent);
            for (k, cam) in cameras.iter().enumerate() {
                let Some((pi, pj)) =
                    project_world(intr, cam, p).and_then(|px| nearest_pixel(intr, px))
                else {
                    continue;
                };
                if masked(data, k, pi, pj) {
                    continue;
                }
                for c in 0..3 {
                    let v = data.frames[k].at(pi, pj, c) as f64;
                    color.set(i, j, c, R::lit(v));
                    sum[c] += v;
                }
                count += 1;
                seen[j * gw + i] = true;
                break;
            }
        }
    }
    if count > 0 {
        let mean = sum.map(|s| R::lit(s / count as f64));
        for j in 0..gh {
            for i in 0..gw {
                if !seen[j * gw + i] {
                    for (c, m) in mean.iter().enumerate() {
                        color.set(i, j, c, *m);
                    }
                }
            }
        }
    }
    let fields = FieldStack::create(store, "background", false, f, rng);
    Ok(AtlasNode {
        id: BACKGROUND_ID,
        is_background: true,
        base_color: color,
        base_alpha: Grid::filled(gw, gh, 1, R::one()),
        fields,
        track: RigidTrack::fixed(plane, f),
        extent,
        time_shift: 0.0,
        edit: None,
    })
}

/// One node per mask track plus the background, with a refinable camera.
pub fn build_graph<R: Real>(data: &Dataset, config: &GraphConfig) -> Result<SceneGraph<R>> {
    data.validate()?;
    let f = data.frame_count();
    if f < 2 {
        return Err(Error::Invalid(format!(
            "a scene needs at least 2 frames, got {f}"
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    let points = config.pose_control_points.unwrap_or(f).max(2);
    let cameras: Vec<Pose<f64>> = (0..f).map(|k| data.camera_pose(k)).collect();
    let camera = RigidTrack {
        base_translation: cameras.iter().map(|c| c.translation).collect(),
        base_rotation: cameras.iter().map(|c| c.rotation).collect(),
        eta_t: config.eta_t,
        eta_r: config.eta_r,
        control_points: points,
        offsets: Some(offsets_group(
            &mut params,
            "camera.offsets",
            Role::CameraOffsets,
            points,
        )),
    };
    let mut nodes = Vec::with_capacity(data.nodes.len() + 1);
    nodes.push(init_background(data, config, &mut params, &mut rng)?);
    for i in 0..data.nodes.len() {
        nodes.push(init_node(data, i, config, &mut params, &mut rng)?);
    }
    let next_id = data.nodes.iter().map(|n| n.id).max().unwrap_or(0) + 1;
    let graph = SceneGraph {
        intrinsics: data.intrinsics,
        camera,
        nodes,
        frames: f,
        params,
        tau: 1.0,
        next_id,
    };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_rotate;
    use crate::io::{synth_scene, SynthSpec};

    fn mask(on: &[(usize, usize)]) -> Image {
        let mut m = Grid::filled(4, 4, 1, 0.0f32);
        for &(i, j) in on {
            m.set(i, j, 0, 1.0);
        }
        m
    }

    #[test]
    fn reference_frame_is_largest_mask_first_on_ties() {
        let masks = [
            mask(&[]),
            mask(&[(0, 0), (1, 1)]),
            mask(&[(2, 2)]),
            mask(&[(3, 3), (0, 3)]),
        ];
        assert_eq!(reference_frame(&masks), Some(1));
        assert_eq!(reference_frame(&[mask(&[]), mask(&[])]), None);
    }

    #[test]
    fn face_normal_follows_the_view() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for (view, normal) in [
            ([1.0, 0.1, 0.0], [1.0, 0.0, 0.0]),
            ([0.2, -1.0, 0.3], [0.0, -1.0, 0.0]),
            ([-1.0, -1.05, 0.0], [-s, -s, 0.0]),
            ([1.0, -0.9, 0.0], [s, -s, 0.0]),
        ] {
            let q = face_rotation(view);
            let z = quat_rotate::<f64, f64>(&q, &[0.0, 0.0, 1.0]);
            let y = quat_rotate::<f64, f64>(&q, &[0.0, 1.0, 0.0]);
            for c in 0..3 {
                assert!((z[c] - normal[c]).abs() < 1e-12, "{view:?}: {z:?}");
            }
            assert!((y[2] + 1.0).abs() < 1e-12, "plane y must point down");
        }
    }

    #[test]
    fn built_graph_is_valid_and_reproduces_reference_pixels() {
        let spec = SynthSpec {
            width: 32,
            height: 24,
            frames: 3,
            nodes: 2,
            ..SynthSpec::default()
        };
        let (data, _) = synth_scene(4, &spec).unwrap();
        let g: SceneGraph<f64> = build_graph(&data, &GraphConfig::default()).unwrap();
        g.validate().unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.background().unwrap().id, BACKGROUND_ID);
        assert_eq!(g.next_id, 3);
        let frame = crate::renderer::render_frame(&g, 0, 0.05);
        let p = crate::io::psnr(&frame, &data.frames[0]).unwrap();
        assert!(p > 30.0, "initial PSNR {p}");
    }

    #[test]
    fn cast_keeps_structure() {
        let spec = SynthSpec {
            width: 16,
            height: 16,
            frames: 2,
            nodes: 1,
            ..SynthSpec::default()
        };
        let (_, g) = synth_scene(1, &spec).unwrap();
        let h: SceneGraph<f32> = g.cast();
        let back: SceneGraph<f64> = h.cast();
        assert_eq!(back.nodes.len(), g.nodes.len());
        assert_eq!(back.params.total_len(), g.params.total_len());
        for (id, grp) in g.params.iter() {
            let other = back.params.data(id);
            assert!(grp
                .data
                .iter()
                .zip(other)
                .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(1e-30)));
        }
    }

    #[test]
    fn validation_rejects_broken_graphs() {
        let spec = SynthSpec {
            width: 16,
            height: 16,
            frames: 2,
            nodes: 1,
            ..SynthSpec::default()
        };
        let (_, g) = synth_scene(1, &spec).unwrap();
        let mut bad = g.clone();
        bad.nodes[1].id = 0;
        assert!(bad.validate().is_err());
        let mut bad = g.clone();
        bad.nodes.remove(0);
        assert!(bad.validate().is_err());
        let mut bad = g;
        bad.nodes[1].extent[0] = 0.0;
        assert!(bad.validate().is_err());
    }
}
