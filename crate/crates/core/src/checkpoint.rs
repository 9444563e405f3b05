//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   4 bytes  magic "NMF1"
//! offset 4   u32      format version (currently 1)
//! offset 8   8 bytes  reserved, zero
//! offset 16  u32      entry count
//! then per entry:
//!            u16      name length, then the UTF-8 name
//!            u8       element type: 0 = f32, 1 = u32, 2 = f64
//!            u64      element count
//!            data     element count values of that type
//! ```
//!
//! Parameter arrays are f32 (`density_plane0` .. `feature_basis`,
//! `decoder`, `gain`, `env`). Shapes and settings live in the u32 entry
//! `shape` and the f64 entry `geometry`; Adam moments, when present, are
//! f64 entries `adam.m.<group>` / `adam.v.<group>` with u32 `adam.t`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::envlight::EnvironmentMap;
use crate::field::{Aabb, FactorGrid, NormalKernel};
use crate::materials::{Decoder, GainMode, GainNetwork};
use crate::math::Vec3;
use crate::optim::adam::AdamGroup;
use crate::optim::params::{group_names, Model, N_GROUPS};
use crate::optim::train::TrainState;
use crate::scene::NeuralScene;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NMF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Vec<f32>),
    U32(Vec<u32>),
    F64(Vec<f64>),
}

pub fn encode(entries: &BTreeMap<String, Entry>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[0u8; 8]);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, e) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match e {
            Entry::F32(v) => {
                out.push(0);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            Entry::U32(v) => {
                out.push(1);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            Entry::F64(v) => {
                out.push(2);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Entry>> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    r.take(8)?;
    let n = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let ty = r.take(1)?[0];
        let count = r.u64()? as usize;
        let e = match ty {
            0 => Entry::F32(r.take(count * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => Entry::U32(r.take(count * 4)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => Entry::F64(r.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            t => return Err(Error::Checkpoint(format!("entry {name}: unknown type {t}"))),
        };
        out.insert(name, e);
    }
    Ok(out)
}

fn model_entries(model: &Model) -> BTreeMap<String, Entry> {
    let g = &model.scene.grid;
    let gain = &model.scene.gain;
    let mut m = BTreeMap::new();
    let shape = vec![
        g.res[0] as u32,
        g.res[1] as u32,
        g.res[2] as u32,
        g.density_rank as u32,
        g.feature_rank as u32,
        g.feature_dim as u32,
        match gain.mode {
            GainMode::Neural => 0,
            GainMode::Identity => 1,
        },
        gain.hidden as u32,
        gain.n_hidden_layers as u32,
        model.env.h as u32,
        model.env.w as u32,
    ];
    m.insert("shape".into(), Entry::U32(shape));
    let k = model.scene.kernel.taps;
    let geometry = vec![g.bbox.lo.x, g.bbox.lo.y, g.bbox.lo.z, g.bbox.hi.x, g.bbox.hi.y, g.bbox.hi.z, k[0], k[1], k[2]];
    m.insert("geometry".into(), Entry::F64(geometry));
    for (name, a) in group_names().iter().zip(model.groups()) {
        m.insert(name.to_string(), Entry::F32(a.iter().map(|&v| v as f32).collect()));
    }
    m
}

fn get<'a>(m: &'a BTreeMap<String, Entry>, name: &str) -> Result<&'a Entry> {
    m.get(name).ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
}

fn f32s(m: &BTreeMap<String, Entry>, name: &str, len: usize) -> Result<Vec<f64>> {
    match get(m, name)? {
        Entry::F32(v) if v.len() == len => Ok(v.iter().map(|&x| x as f64).collect()),
        Entry::F32(v) => Err(Error::Checkpoint(format!("entry {name}: {} values, expected {len}", v.len()))),
        _ => Err(Error::Checkpoint(format!("entry {name}: expected f32"))),
    }
}

fn model_from_entries(m: &BTreeMap<String, Entry>) -> Result<Model> {
    let Entry::U32(s) = get(m, "shape")? else {
        return Err(Error::Checkpoint("shape must be u32".into()));
    };
    let Entry::F64(geo) = get(m, "geometry")? else {
        return Err(Error::Checkpoint("geometry must be f64".into()));
    };
    if s.len() != 11 || geo.len() != 9 {
        return Err(Error::Checkpoint("bad shape or geometry entry".into()));
    }
    let u = |i: usize| s[i] as usize;
    let bbox = Aabb::new(Vec3::new(geo[0], geo[1], geo[2]), Vec3::new(geo[3], geo[4], geo[5]));
    let grid = FactorGrid::zeros([u(0), u(1), u(2)], u(3), u(4), u(5), bbox)?;
    let mode = match s[6] {
        0 => GainMode::Neural,
        1 => GainMode::Identity,
        v => return Err(Error::Checkpoint(format!("unknown gain mode {v}"))),
    };
    let mut model = Model {
        scene: NeuralScene::new(
            grid,
            Decoder::zeros(u(5)),
            GainNetwork::new(mode, u(5), u(7), u(8)),
            NormalKernel {
                taps: [geo[6], geo[7], geo[8]],
            },
        ),
        env: EnvironmentMap::constant(u(9), u(10), 1.0),
    };
    let names = group_names();
    let lens: Vec<usize> = model.groups().iter().map(|g| g.len()).collect();
    for (k, dst) in model.groups_mut().into_iter().enumerate() {
        *dst = f32s(m, names[k], lens[k])?;
    }
    if !model.scene.grid.is_finite() {
        return Err(Error::Checkpoint("non-finite grid values".into()));
    }
    model.refresh();
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode(&model_entries(model))).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_entries(&decode(&bytes)?)
}

/// Saves the model plus Adam moments and the step counter.
pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut m = model_entries(&state.model);
    m.insert("adam.step".into(), Entry::U32(vec![state.step as u32]));
    m.insert("adam.t".into(), Entry::U32(state.adam.iter().map(|a| a.t as u32).collect()));
    for a in &state.adam {
        m.insert(format!("adam.m.{}", a.name), Entry::F64(a.m.clone()));
        m.insert(format!("adam.v.{}", a.name), Entry::F64(a.v.clone()));
        m.insert(format!("adam.lr.{}", a.name), Entry::F64(vec![a.lr]));
    }
    fs::write(path, encode(&m)).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = decode(&bytes)?;
    let model = model_from_entries(&m)?;
    let Entry::U32(step) = get(&m, "adam.step")? else {
        return Err(Error::Checkpoint("adam.step must be u32".into()));
    };
    let Entry::U32(ts) = get(&m, "adam.t")? else {
        return Err(Error::Checkpoint("adam.t must be u32".into()));
    };
    if ts.len() != N_GROUPS {
        return Err(Error::Checkpoint("adam.t has the wrong length".into()));
    }
    let f64s = |name: String| match get(&m, &name)? {
        Entry::F64(v) => Ok(v.clone()),
        _ => Err(Error::Checkpoint(format!("entry {name}: expected f64"))),
    };
    let mut adam = Vec::new();
    for (k, (name, p)) in group_names().iter().zip(model.groups()).enumerate() {
        let a = AdamGroup {
            name,
            lr: f64s(format!("adam.lr.{name}"))?.first().copied().unwrap_or(0.0),
            m: f64s(format!("adam.m.{name}"))?,
            v: f64s(format!("adam.v.{name}"))?,
            t: ts[k] as u64,
        };
        if a.m.len() != p.len() || a.v.len() != p.len() {
            return Err(Error::Checkpoint(format!("adam moments for {name} do not match")));
        }
        adam.push(a);
    }
    Ok(TrainState {
        model,
        adam,
        step: step.first().copied().unwrap_or(0) as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::params::ModelConfig;
    use crate::optim::train::TrainConfig;

    fn model() -> Model {
        Model::init(
            &ModelConfig {
                resolution: 5,
                density_rank: 2,
                feature_rank: 3,
                feature_dim: 4,
                gain_hidden: 5,
                env_height: 4,
                env_width: 8,
                bbox: Aabb::new(Vec3::new(-1.3, -1.0, -0.7), Vec3::new(1.1, 1.0, 0.9)),
                ..Default::default()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nmf");
        let m = model();
        save_model(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"NMF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(load_model(&p).unwrap(), m);
    }

    #[test]
    fn state_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nmf");
        let mut st = TrainState::new(model(), &TrainConfig::default());
        st.step = 42;
        st.adam[3].m[1] = 0.123_456_789;
        st.adam[3].t = 7;
        save_state(&p, &st).unwrap();
        assert_eq!(load_state(&p).unwrap(), st);
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let mut bytes = encode(&model_entries(&model()));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::CheckpointVersion(2))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }
}
