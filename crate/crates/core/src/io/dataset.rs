//! On-disk video datasets: frames, per-object masks, camera and boxes.
//!
//! ```text
//! frames/00000.png            8-bit RGB
//! masks/node_001/00000.png    8-bit gray, 0 or 255
//! camera.json                 intrinsics + camera-to-world 4×4 per frame
//! nodes.json                  per object: id + per-frame box
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::fields::Grid;
use crate::geometry::{CameraIntrinsics, Pose};

/// Images are `f32` grids with values in `[0,1]`.
pub type Image = Grid<f32>;

/// An oriented 3D box; `rotation` maps box axes to world (x forward,
/// y left, z up in the box frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxState {
    pub center: [f64; 3],
    pub rotation: [f64; 4],
    pub size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeObservation {
    pub id: u32,
    /// One binary mask per frame.
    pub masks: Vec<Image>,
    pub boxes: Vec<BoxState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world matrices, row major.
    pub extrinsics: Vec<[[f64; 4]; 4]>,
    pub frames: Vec<Image>,
    pub nodes: Vec<NodeObservation>,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    extrinsics: Vec<[[f64; 4]; 4]>,
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    id: u32,
    frames: Vec<BoxState>,
}

#[derive(Serialize, Deserialize)]
struct NodesFile {
    nodes: Vec<NodeEntry>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn camera_pose(&self, frame: usize) -> Pose<f64> {
        Pose::from_matrix(&self.extrinsics[frame])
    }

    pub fn node(&self, id: u32) -> Option<&NodeObservation> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Check counts, shapes and value ranges.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let f = self.frames.len();
        if f == 0 {
            return Err(Error::Invalid("dataset has no frames".into()));
        }
        if self.extrinsics.len() != f {
            return Err(Error::Invalid(format!(
                "{} camera poses for {f} frames",
                self.extrinsics.len()
            )));
        }
        let (w, h) = (
            self.intrinsics.width as usize,
            self.intrinsics.height as usize,
        );
        for (k, img) in self.frames.iter().enumerate() {
            if img.width != w || img.height != h || img.channels != 3 {
                return Err(Error::Invalid(format!(
                    "frame {k} is {}×{}×{}, camera expects {w}×{h}×3",
                    img.width, img.height, img.channels
                )));
            }
        }
        let mut ids: Vec<u32> = self.nodes.iter().map(|n| n.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Invalid("duplicate node ids".into()));
        }
        for n in &self.nodes {
            if n.id == 0 {
                return Err(Error::Invalid(
                    "node id 0 is reserved for the background".into(),
                ));
            }
            if n.masks.len() != f || n.boxes.len() != f {
                return Err(Error::Invalid(format!(
                    "node {}: {} masks and {} boxes for {f} frames",
                    n.id,
                    n.masks.len(),
                    n.boxes.len()
                )));
            }
            for m in &n.masks {
                if m.width != w || m.height != h || m.channels != 1 {
                    return Err(Error::Invalid(format!(
                        "node {}: mask shape mismatch",
                        n.id
                    )));
                }
                if m.data.iter().any(|v| *v != 0.0 && *v != 1.0) {
                    return Err(Error::Invalid(format!("node {}: mask is not binary", n.id)));
                }
            }
        }
        Ok(())
    }
}

/// 8-bit quantization used for every image that goes to disk.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let cam_path = dir.join("camera.json");
    let cam: CameraFile = read_json(&cam_path)?;
    let intrinsics = CameraIntrinsics {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
    };
    let f = cam.extrinsics.len();
    let frames = (0..f)
        .map(|k| load_rgb(&dir.join("frames").join(format!("{k:05}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let nodes_path = dir.join("nodes.json");
    let nodes_file: NodesFile = read_json(&nodes_path)?;
    let mut nodes = Vec::with_capacity(nodes_file.nodes.len());
    for entry in nodes_file.nodes {
        let mdir = dir.join("masks").join(format!("node_{:03}", entry.id));
        let masks = (0..f)
            .map(|k| load_mask(&mdir.join(format!("{k:05}.png"))))
            .collect::<Result<Vec<_>>>()?;
        nodes.push(NodeObservation {
            id: entry.id,
            masks,
            boxes: entry.frames,
        });
    }
    let data = Dataset {
        intrinsics,
        extrinsics: cam.extrinsics,
        frames,
        nodes,
    };
    data.validate()?;
    Ok(data)
}

pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let fdir = dir.join("frames");
    fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
    for (k, img) in data.frames.iter().enumerate() {
        save_png(img, &fdir.join(format!("{k:05}.png")))?;
    }
    for n in &data.nodes {
        let mdir = dir.join("masks").join(format!("node_{:03}", n.id));
        fs::create_dir_all(&mdir).map_err(io_err(&mdir))?;
        for (k, m) in n.masks.iter().enumerate() {
            save_png(m, &mdir.join(format!("{k:05}.png")))?;
        }
    }
    let i = &data.intrinsics;
    let cam = CameraFile {
        fx: i.fx,
        fy: i.fy,
        cx: i.cx,
        cy: i.cy,
        width: i.width,
        height: i.height,
        extrinsics: data.extrinsics.clone(),
    };
    write_json(&dir.join("camera.json"), &cam)?;
    let nodes = NodesFile {
        nodes: data
            .nodes
            .iter()
            .map(|n| NodeEntry {
                id: n.id,
                frames: n.boxes.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("nodes.json"), &nodes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.into()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid {
        width: w as usize,
        height: h as usize,
        channels: 3,
        data: img.into_raw().into_iter().map(dequantize).collect(),
    })
}

/// Load a mask; gray values are thresholded at one half with a warning.
pub fn load_mask(path: &Path) -> Result<Image> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    if raw.iter().any(|v| *v != 0 && *v != 255) {
        log::warn!(
            "{}: mask is not binary, thresholding at 0.5",
            path.display()
        );
    }
    Ok(Grid {
        width: w as usize,
        height: h as usize,
        channels: 1,
        data: raw
            .into_iter()
            .map(|v| if v >= 128 { 1.0 } else { 0.0 })
            .collect(),
    })
}

/// Write a 1-, 3- or 4-channel image as an 8-bit PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize(*v)).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => return Err(Error::Invalid(format!("cannot write a {c}-channel image"))),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, color).map_err(|source| {
        Error::Image {
            path: path.into(),
            source,
        }
    })
}

/// RGBA images (e.g. edit textures) as `f32` grids.
pub fn load_rgba(path: &Path) -> Result<Image> {
    let img = open_image(path)?.to_rgba8();
    let (w, h) = img.dimensions();
    Ok(Grid {
        width: w as usize,
        height: h as usize,
        channels: 4,
        data: img.into_raw().into_iter().map(dequantize).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{synth_scene, SynthSpec};

    fn small() -> Dataset {
        let spec = SynthSpec {
            width: 24,
            height: 16,
            frames: 3,
            nodes: 2,
            ..SynthSpec::default()
        };
        synth_scene(5, &spec).unwrap().0
    }

    #[test]
    fn roundtrip_is_exact() {
        let data = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn missing_frame_is_reported_by_path() {
        let data = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let gone = dir.path().join("frames/00001.png");
        fs::remove_file(&gone).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert_eq!(p, gone),
            other => panic!("expected a missing file, got {other:?}"),
        }
    }

    #[test]
    fn gray_masks_are_thresholded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let gray = Grid {
            width: 4,
            height: 1,
            channels: 1,
            data: vec![0.0, 0.3, 0.6, 1.0],
        };
        save_png(&gray, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap().data, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn validation_catches_shape_errors() {
        let mut data = small();
        data.nodes[0].masks.pop();
        assert!(data.validate().is_err());
        let mut data = small();
        data.frames[1].width += 1;
        assert!(data.validate().is_err());
        let mut data = small();
        data.nodes[1].id = data.nodes[0].id;
        assert!(data.validate().is_err());
    }

    #[test]
    fn quantization_roundtrips_bytes() {
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
        }
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 255);
    }
}
