//! Binary checkpoints: "GR4D" scenes and "GRNT" rectifier nets. Everything is
//! little-endian with flat f64 parameter arrays in declared field order;
//! round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::math::Quat;
use crate::rectifier::{RectifierArch, RectifierNet};
use crate::scene::{AnchorTrack, GaussianPrimitive, SceneModel, StaticField};
use nalgebra::Vector3;
use std::io::{Read, Write};
use std::path::Path;

pub const SCENE_MAGIC: [u8; 4] = *b"GR4D";
pub const NET_MAGIC: [u8; 4] = *b"GRNT";
pub const SCENE_VERSION: u32 = 1;
pub const NET_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&magic);
        w.u32(version);
        w
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: [u8; 4], version: u32, context: &'static str) -> Result<Self> {
        let mut r = Reader {
            buf,
            pos: 0,
            context,
        };
        let found = r.bytes4()?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        let v = r.u32()?;
        if v != version {
            return Err(Error::BadVersion {
                kind: context,
                expected: version,
                found: v,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(self.context.into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn bytes4(&mut self) -> Result<[u8; 4]> {
        Ok(self.take(4)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.context,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

const PRIM_FIELDS: usize = 14;

fn write_primitive(w: &mut Writer, p: &GaussianPrimitive) {
    w.f64s(&[
        p.position.x,
        p.position.y,
        p.position.z,
        p.rotation.w,
        p.rotation.x,
        p.rotation.y,
        p.rotation.z,
        p.log_scale.x,
        p.log_scale.y,
        p.log_scale.z,
        p.opacity_logit,
        p.color.x,
        p.color.y,
        p.color.z,
    ]);
}

fn read_primitive(r: &mut Reader) -> Result<GaussianPrimitive> {
    let v = r.f64s(PRIM_FIELDS)?;
    Ok(GaussianPrimitive {
        position: Vector3::new(v[0], v[1], v[2]),
        rotation: Quat::new(v[3], v[4], v[5], v[6]),
        log_scale: Vector3::new(v[7], v[8], v[9]),
        opacity_logit: v[10],
        color: Vector3::new(v[11], v[12], v[13]),
    })
}

pub fn scene_to_bytes(scene: &SceneModel) -> Vec<u8> {
    let mut w = Writer::new(SCENE_MAGIC, SCENE_VERSION);
    w.u64(scene.static_count() as u64);
    w.u64(scene.dynamic_count() as u64);
    w.u64(scene.dynamic_field.anchor_count() as u64);
    w.f64(scene.time_range.0);
    w.f64(scene.time_range.1);
    w.u64(scene.next_id);
    w.f64s(&scene.dynamic_field.anchor_times);
    for &id in &scene.static_field.ids {
        w.u64(id);
    }
    for p in &scene.static_field.primitives {
        write_primitive(&mut w, p);
    }
    for &id in &scene.dynamic_field.ids {
        w.u64(id);
    }
    for state in &scene.dynamic_field.anchor_states {
        for p in state {
            write_primitive(&mut w, p);
        }
    }
    w.buf
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<SceneModel> {
    let mut r = Reader::new(bytes, SCENE_MAGIC, SCENE_VERSION, "scene checkpoint")?;
    let n_static = r.u64()? as usize;
    let n_dynamic = r.u64()? as usize;
    let n_anchors = r.u64()? as usize;
    let t0 = r.f64()?;
    let t1 = r.f64()?;
    let next_id = r.u64()?;
    let anchor_times = r.f64s(n_anchors)?;
    let mut static_ids = Vec::with_capacity(n_static);
    for _ in 0..n_static {
        static_ids.push(r.u64()?);
    }
    let mut static_prims = Vec::with_capacity(n_static);
    for _ in 0..n_static {
        static_prims.push(read_primitive(&mut r)?);
    }
    let mut dyn_ids = Vec::with_capacity(n_dynamic);
    for _ in 0..n_dynamic {
        dyn_ids.push(r.u64()?);
    }
    let mut states = Vec::with_capacity(n_anchors);
    for _ in 0..n_anchors {
        let mut state = Vec::with_capacity(n_dynamic);
        for _ in 0..n_dynamic {
            state.push(read_primitive(&mut r)?);
        }
        states.push(state);
    }
    r.finish()?;
    Ok(SceneModel {
        static_field: StaticField {
            primitives: static_prims,
            ids: static_ids,
        },
        dynamic_field: AnchorTrack {
            anchor_times,
            anchor_states: states,
            ids: dyn_ids,
        },
        time_range: (t0, t1),
        next_id,
    })
}

pub fn save_scene(path: &Path, scene: &SceneModel) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&scene_to_bytes(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    scene_from_bytes(&bytes)
}

pub fn net_to_bytes(net: &RectifierNet) -> Vec<u8> {
    let mut w = Writer::new(NET_MAGIC, NET_VERSION);
    w.u32(net.arch.base_channels as u32);
    w.u32(net.arch.latent_channels as u32);
    w.u32(net.arch.rank as u32);
    let params = net.all_params_flat();
    w.u64(params.len() as u64);
    w.f64s(&params);
    w.buf
}

pub fn net_from_bytes(bytes: &[u8]) -> Result<RectifierNet> {
    let mut r = Reader::new(bytes, NET_MAGIC, NET_VERSION, "net checkpoint")?;
    let arch = RectifierArch {
        base_channels: r.u32()? as usize,
        latent_channels: r.u32()? as usize,
        rank: r.u32()? as usize,
    };
    let count = r.u64()? as usize;
    let params = r.f64s(count)?;
    r.finish()?;
    let mut net = RectifierNet::new(arch, 0);
    net.set_all_params_flat(&params)?;
    Ok(net)
}

pub fn save_net(path: &Path, net: &RectifierNet) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&net_to_bytes(net))?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<RectifierNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    net_from_bytes(&bytes)
}
