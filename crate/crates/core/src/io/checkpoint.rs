//! `.nag` checkpoints: a short text preamble, a JSON header describing the
//! graph, then every grid and parameter group as little-endian floats.
//!
//! ```text
//! ATLASGRAPH-CHECKPOINT 1
//! precision f32
//! header 5123
//! payload 272629760
//! sha256 <hex digest of header and payload bytes>
//! {json header}<payload>
//! ```
//!
//! The payload holds, per node in order, base color, base alpha and (when
//! present) the edit texture's color and alpha, followed by every live
//! parameter group in id order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{GroupId, ParamGroup, ParamStore, Part, Role};
use crate::editing::EditTexture;
use crate::error::{io_err, Error, Result};
use crate::fields::{FieldStack, Grid};
use crate::geometry::CameraIntrinsics;
use crate::motion::RigidTrack;
use crate::optimize::{Precision, RngState, TrainConfig};
use crate::real::Real;
use crate::scenegraph::{AtlasNode, SceneGraph};

const MAGIC: &str = "ATLASGRAPH-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<R: Real> {
    pub graph: SceneGraph<R>,
    pub train: Option<TrainConfig>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    intrinsics: CameraIntrinsics,
    camera: RigidTrack,
    frames: usize,
    tau: f64,
    next_id: u32,
    nodes: Vec<NodeHeader>,
    capacity: usize,
    groups: Vec<GroupHeader>,
    train: Option<TrainConfig>,
    rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeHeader {
    id: u32,
    is_background: bool,
    base_color: [usize; 3],
    base_alpha: [usize; 3],
    fields: FieldStack,
    track: RigidTrack,
    extent: [f64; 2],
    time_shift: f64,
    /// Shapes of the edit color and alpha grids.
    edit: Option<[[usize; 3]; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupHeader {
    id: u32,
    name: String,
    role: Role,
    part: Part,
    len: usize,
}

fn shape<R>(g: &Grid<R>) -> [usize; 3] {
    [g.width, g.height, g.channels]
}

fn push_all<R: Real>(out: &mut Vec<u8>, values: &[R]) {
    for v in values {
        v.write_le(out);
    }
}

/// Serialize a graph (plus optional training state) into checkpoint bytes.
pub fn encode_checkpoint<R: Real>(
    graph: &SceneGraph<R>,
    train: Option<&TrainConfig>,
    rng: Option<&RngState>,
) -> Result<Vec<u8>> {
    let groups: Vec<GroupHeader> = graph
        .params
        .iter()
        .map(|(id, g)| GroupHeader {
            id: id.0,
            name: g.name.clone(),
            role: g.role,
            part: g.part,
            len: g.data.len(),
        })
        .collect();
    let header = Header {
        intrinsics: graph.intrinsics,
        camera: graph.camera.clone(),
        frames: graph.frames,
        tau: graph.tau,
        next_id: graph.next_id,
        nodes: graph
            .nodes
            .iter()
            .map(|n| NodeHeader {
                id: n.id,
                is_background: n.is_background,
                base_color: shape(&n.base_color),
                base_alpha: shape(&n.base_alpha),
                fields: n.fields.clone(),
                track: n.track.clone(),
                extent: n.extent,
                time_shift: n.time_shift,
                edit: n.edit.as_ref().map(|e| [shape(&e.color), shape(&e.alpha)]),
            })
            .collect(),
        capacity: graph.params.capacity(),
        groups,
        train: train.cloned(),
        rng: rng.cloned(),
    };
    let json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let floats: usize = graph.params.total_len()
        + graph
            .nodes
            .iter()
            .map(|n| {
                n.base_color.data.len()
                    + n.base_alpha.data.len()
                    + n.edit
                        .as_ref()
                        .map_or(0, |e| e.color.data.len() + e.alpha.data.len())
            })
            .sum::<usize>();
    let mut payload = Vec::with_capacity(floats * R::BYTES);
    for n in &graph.nodes {
        push_all(&mut payload, &n.base_color.data);
        push_all(&mut payload, &n.base_alpha.data);
        if let Some(e) = &n.edit {
            push_all(&mut payload, &e.color.data);
            push_all(&mut payload, &e.alpha.data);
        }
    }
    for (_, g) in graph.params.iter() {
        push_all(&mut payload, &g.data);
    }
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hasher.update(&payload);
    let digest = hex(&hasher.finalize());
    let preamble = format!(
        "{MAGIC} {CHECKPOINT_VERSION}\nprecision {}\nheader {}\npayload {}\nsha256 {digest}\n",
        R::NAME,
        json.len(),
        payload.len()
    );
    let mut out = Vec::with_capacity(preamble.len() + json.len() + payload.len());
    out.extend_from_slice(preamble.as_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Preamble<'a> {
    precision: Precision,
    header: &'a [u8],
    payload: &'a [u8],
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Split off one `key value` preamble line.
fn line<'a>(bytes: &mut &'a [u8], key: &str) -> Result<&'a str> {
    let end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| bad("truncated preamble"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("preamble is not text"))?;
    *bytes = &bytes[end + 1..];
    text.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected `{key}` line, found `{text}`")))
}

fn parse_len(s: &str) -> Result<usize> {
    s.parse().map_err(|_| bad(format!("bad length `{s}`")))
}

fn split(bytes: &[u8]) -> Result<Preamble<'_>> {
    let mut rest = bytes;
    let version = line(&mut rest, MAGIC).map_err(|_| bad("not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(bad(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let precision = match line(&mut rest, "precision")? {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        p => return Err(bad(format!("unknown precision `{p}`"))),
    };
    let hlen = parse_len(line(&mut rest, "header")?)?;
    let plen = parse_len(line(&mut rest, "payload")?)?;
    let digest = line(&mut rest, "sha256")?.to_string();
    if rest.len() != hlen + plen {
        return Err(bad(format!(
            "expected {} bytes after the preamble, found {}",
            hlen + plen,
            rest.len()
        )));
    }
    let mut hasher = Sha256::new();
    hasher.update(rest);
    if hex(&hasher.finalize()) != digest {
        return Err(bad("checksum mismatch"));
    }
    Ok(Preamble {
        precision,
        header: &rest[..hlen],
        payload: &rest[hlen..],
    })
}

/// Precision recorded in checkpoint bytes.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let mut rest = bytes;
    line(&mut rest, MAGIC).map_err(|_| bad("not a checkpoint file"))?;
    match line(&mut rest, "precision")? {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        p => Err(bad(format!("unknown precision `{p}`"))),
    }
}

struct Reader<'a, R> {
    bytes: &'a [u8],
    _r: std::marker::PhantomData<R>,
}

impl<R: Real> Reader<'_, R> {
    fn take(&mut self, n: usize) -> Result<Vec<R>> {
        let len = n
            .checked_mul(R::BYTES)
            .ok_or_else(|| bad("size overflow"))?;
        if self.bytes.len() < len {
            return Err(bad("payload shorter than the header declares"));
        }
        let (head, tail) = self.bytes.split_at(len);
        self.bytes = tail;
        Ok(head.chunks_exact(R::BYTES).map(R::read_le).collect())
    }

    fn grid(&mut self, s: [usize; 3]) -> Result<Grid<R>> {
        let n = s[0]
            .checked_mul(s[1])
            .and_then(|v| v.checked_mul(s[2]))
            .ok_or_else(|| bad("size overflow"))?;
        Ok(Grid {
            width: s[0],
            height: s[1],
            channels: s[2],
            data: self.take(n)?,
        })
    }
}

/// Parse checkpoint bytes written at precision `R`.
pub fn decode_checkpoint<R: Real>(bytes: &[u8]) -> Result<Checkpoint<R>> {
    let pre = split(bytes)?;
    if pre.precision.name() != R::NAME {
        return Err(bad(format!(
            "checkpoint is {}, requested {}",
            pre.precision.name(),
            R::NAME
        )));
    }
    let header: Header =
        serde_json::from_slice(pre.header).map_err(|e| bad(format!("header: {e}")))?;
    let mut reader = Reader::<R> {
        bytes: pre.payload,
        _r: std::marker::PhantomData,
    };
    let mut nodes = Vec::with_capacity(header.nodes.len());
    for n in header.nodes {
        let base_color = reader.grid(n.base_color)?;
        let base_alpha = reader.grid(n.base_alpha)?;
        let edit = match n.edit {
            Some([c, a]) => Some(EditTexture {
                color: reader.grid(c)?,
                alpha: reader.grid(a)?,
            }),
            None => None,
        };
        nodes.push(AtlasNode {
            id: n.id,
            is_background: n.is_background,
            base_color,
            base_alpha,
            fields: n.fields,
            track: n.track,
            extent: n.extent,
            time_shift: n.time_shift,
            edit,
        });
    }
    let mut params = ParamStore::new();
    for g in header.groups {
        if g.id as usize >= header.capacity {
            return Err(bad(format!(
                "group id {} beyond capacity {}",
                g.id, header.capacity
            )));
        }
        if params.get(GroupId(g.id)).is_some() {
            return Err(bad(format!("group id {} listed twice", g.id)));
        }
        let data = reader.take(g.len)?;
        params.insert_at(
            GroupId(g.id),
            ParamGroup {
                name: g.name,
                role: g.role,
                part: g.part,
                data: Arc::new(data),
            },
        );
    }
    params.reserve_ids(header.capacity);
    if !reader.bytes.is_empty() {
        return Err(bad("payload longer than the header declares"));
    }
    let graph = SceneGraph {
        intrinsics: header.intrinsics,
        camera: header.camera,
        nodes,
        frames: header.frames,
        params,
        tau: header.tau,
        next_id: header.next_id,
    };
    graph
        .validate()
        .map_err(|e| bad(format!("inconsistent graph: {e}")))?;
    Ok(Checkpoint {
        graph,
        train: header.train,
        rng: header.rng,
    })
}

pub fn save_checkpoint<R: Real>(
    path: impl AsRef<Path>,
    graph: &SceneGraph<R>,
    train: Option<&TrainConfig>,
    rng: Option<&RngState>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(graph, train, rng)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint<R: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<R>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Precision of a checkpoint file, read from its preamble only.
pub fn checkpoint_precision(path: impl AsRef<Path>) -> Result<Precision> {
    use std::io::Read;
    let path = path.as_ref();
    let mut head = Vec::new();
    fs::File::open(path)
        .and_then(|f| f.take(256).read_to_end(&mut head))
        .map_err(io_err(path))?;
    peek_precision(&head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{synth_scene, SynthSpec};

    fn small() -> SceneGraph<f64> {
        let spec = SynthSpec {
            width: 32,
            height: 24,
            frames: 4,
            nodes: 1,
            ..SynthSpec::default()
        };
        synth_scene(5, &spec).unwrap().1
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut g = small();
        let id = g.foreground().next().unwrap().id;
        let idx = g.node_index(id).unwrap();
        let (w, h) = (
            g.nodes[idx].base_color.width,
            g.nodes[idx].base_color.height,
        );
        g.nodes[idx].edit = Some(EditTexture {
            color: Grid::filled(w, h, 3, 0.25),
            alpha: Grid::filled(w, h, 1, 0.5),
        });
        g.params.remove(GroupId(0));
        let cfg = TrainConfig::desk();
        let bytes = encode_checkpoint(&g, Some(&cfg), None).unwrap();
        let back: Checkpoint<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.graph, g);
        assert_eq!(back.train, Some(cfg));
        assert_eq!(back.graph.params.capacity(), g.params.capacity());
        assert_eq!(
            encode_checkpoint(&back.graph, back.train.as_ref(), None).unwrap(),
            bytes
        );
    }

    #[test]
    fn corruption_version_and_precision_are_rejected() {
        let g = small();
        let bytes = encode_checkpoint(&g, None, None).unwrap();
        assert_eq!(peek_precision(&bytes).unwrap(), Precision::F64);
        assert!(decode_checkpoint::<f32>(&bytes).is_err());

        let mut flipped = bytes.clone();
        let k = bytes.len() - 100;
        flipped[k] ^= 1;
        assert!(decode_checkpoint::<f64>(&flipped)
            .unwrap_err()
            .to_string()
            .contains("checksum"));

        let truncated = &bytes[..bytes.len() - 1];
        assert!(decode_checkpoint::<f64>(truncated).is_err());

        let text = String::from_utf8_lossy(&bytes[..40]).replace("CHECKPOINT 1", "CHECKPOINT 9");
        let mut other = text.into_bytes();
        other.extend_from_slice(&bytes[40..]);
        assert!(decode_checkpoint::<f64>(&other)
            .unwrap_err()
            .to_string()
            .contains("version"));

        assert!(decode_checkpoint::<f64>(b"hello\n").is_err());
    }
}
