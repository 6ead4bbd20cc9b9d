//! On-disk formats for datasets and preference files.
//!
//! All multi-byte integers are little-endian `u32`/`u16`; all reals are
//! little-endian IEEE-754 `f32`. See `docs/formats.md` for the byte layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LabelSource, OfflineDataset, PreferenceDataset, PreferenceTriple, Split, Trajectory};
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};

pub const DATASET_META: &str = "meta";
pub const DATASET_TRAJECTORIES: &str = "trajectories";
pub const DATASET_ORACLE: &str = "oracle";

const TRAJ_MAGIC: &[u8; 8] = b"OPPOTRJ1";
const ORACLE_MAGIC: &[u8; 8] = b"OPPOORC1";
const PREF_MAGIC: &[u8; 8] = b"OPPOPRF1";
const META_FORMAT: &str = "oppo-dataset-v1";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("value fits in u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!("{} file truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Data(format!("{} file has a bad magic header", self.what)));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.f32()).collect()
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data(format!("{} file holds invalid UTF-8", self.what)))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Data(format!("{} file has trailing bytes", self.what)));
        }
        Ok(())
    }
}

fn encode_trajectories(trajs: &[Trajectory]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TRAJ_MAGIC);
    put_u32(&mut buf, trajs.len());
    for t in trajs {
        put_u32(&mut buf, t.length);
        put_u32(&mut buf, t.behavior_tag.len());
        buf.extend_from_slice(t.behavior_tag.as_bytes());
        put_f32s(&mut buf, &t.states[..t.length * t.state_dim]);
        put_f32s(&mut buf, &t.actions[..t.length * t.action_dim]);
    }
    buf
}

fn encode_oracle(hash: &str, trajs: &[Trajectory]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ORACLE_MAGIC);
    buf.extend_from_slice(hash.as_bytes());
    put_u32(&mut buf, trajs.len());
    for t in trajs {
        put_u32(&mut buf, t.length);
        put_f32s(&mut buf, &t.hidden_rewards[..t.length]);
    }
    buf
}

fn meta_fields(env: &EnvSpec, split: Split, seed: u64, n_traj: usize) -> BTreeMap<&'static str, String> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    BTreeMap::from([
        ("format", META_FORMAT.to_string()),
        ("env_id", env.env_id.to_string()),
        ("split", split.to_string()),
        ("seed", seed.to_string()),
        ("horizon", env.horizon.to_string()),
        ("state_dim", env.state_dim.to_string()),
        ("action_dim", env.action_dim().to_string()),
        ("goal", join(&env.goal)),
        ("dt", env.dt.to_string()),
        ("discount", env.discount.to_string()),
        ("n_traj", n_traj.to_string()),
    ])
}

fn render_meta(fields: &BTreeMap<&str, String>) -> String {
    fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// SHA-256 over the metadata fields and the learner-visible trajectory bytes.
pub fn content_hash(env: &EnvSpec, split: Split, seed: u64, trajs: &[Trajectory]) -> String {
    let mut h = Sha256::new();
    h.update(render_meta(&meta_fields(env, split, seed, trajs.len())).as_bytes());
    h.update(encode_trajectories(trajs));
    hex::encode(h.finalize())
}

pub fn save_dataset(dataset: &OfflineDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = meta_fields(&dataset.env, dataset.split, dataset.seed, dataset.len());
    meta.insert("content_hash", dataset.content_hash.clone());
    fs::write(dir.join(DATASET_META), render_meta(&meta))?;
    fs::write(
        dir.join(DATASET_TRAJECTORIES),
        encode_trajectories(&dataset.trajectories),
    )?;
    if dataset.trajectories.iter().all(Trajectory::has_oracle) {
        fs::write(
            dir.join(DATASET_ORACLE),
            encode_oracle(&dataset.content_hash, &dataset.trajectories),
        )?;
    }
    Ok(())
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("meta line {} is not key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Data(format!("meta is missing `{key}`")))
}

fn meta_parse<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::Data(format!("meta field `{key}` is malformed")))
}

/// Loads a dataset directory. The hidden-reward oracle is read only when
/// `with_oracle` is set; otherwise trajectories carry no reward channel.
pub fn load_dataset(dir: &Path, with_oracle: bool) -> Result<OfflineDataset> {
    let meta_text = fs::read_to_string(dir.join(DATASET_META))
        .map_err(|e| Error::load(dir.join(DATASET_META), e.to_string()))?;
    let meta = parse_meta(&meta_text)?;
    if meta_get(&meta, "format")? != META_FORMAT {
        return Err(Error::Data("unsupported dataset format".into()));
    }
    let env_id: EnvId = meta_get(&meta, "env_id")?.parse()?;
    let mut env = EnvSpec::new(env_id);
    env.horizon = meta_parse(&meta, "horizon")?;
    env.dt = meta_parse(&meta, "dt")?;
    env.discount = meta_parse(&meta, "discount")?;
    env.goal = meta_get(&meta, "goal")?
        .split(',')
        .map(|x| x.parse().map_err(|_| Error::Data("meta goal is malformed".into())))
        .collect::<Result<Vec<f64>>>()?;
    env.validate()?;
    if meta_parse::<usize>(&meta, "state_dim")? != env.state_dim
        || meta_parse::<usize>(&meta, "action_dim")? != env.action_dim()
    {
        return Err(Error::Data("meta dims do not match env".into()));
    }
    let split: Split = meta_get(&meta, "split")?.parse()?;
    let seed: u64 = meta_parse(&meta, "seed")?;
    let expected_hash = meta_get(&meta, "content_hash")?.to_string();

    let bytes = fs::read(dir.join(DATASET_TRAJECTORIES))
        .map_err(|e| Error::load(dir.join(DATASET_TRAJECTORIES), e.to_string()))?;
    let mut r = Reader::new(&bytes, "trajectories");
    r.magic(TRAJ_MAGIC)?;
    let n = r.u32()?;
    if n != meta_parse::<usize>(&meta, "n_traj")? {
        return Err(Error::Data("trajectory count does not match meta".into()));
    }
    let (sd, ad, h) = (env.state_dim, env.action_dim(), env.horizon);
    let mut trajs = Vec::with_capacity(n);
    for _ in 0..n {
        let length = r.u32()?;
        if length == 0 || length > h {
            return Err(Error::Data(format!("trajectory length {length} out of range")));
        }
        let tag_len = r.u32()?;
        let tag = r.string(tag_len)?;
        let mut t = Trajectory::empty(h, sd, ad, &tag);
        t.states[..length * sd].copy_from_slice(&r.f32s(length * sd)?);
        t.actions[..length * ad].copy_from_slice(&r.f32s(length * ad)?);
        t.hidden_rewards.clear();
        t.length = length;
        trajs.push(t);
    }
    r.finish()?;

    if with_oracle {
        let bytes = fs::read(dir.join(DATASET_ORACLE))
            .map_err(|e| Error::load(dir.join(DATASET_ORACLE), e.to_string()))?;
        let mut r = Reader::new(&bytes, "oracle");
        r.magic(ORACLE_MAGIC)?;
        let hash = r.string(64)?;
        if hash != expected_hash {
            return Err(Error::HashMismatch {
                expected: expected_hash,
                found: hash,
            });
        }
        if r.u32()? != n {
            return Err(Error::Data("oracle count does not match trajectories".into()));
        }
        for t in &mut trajs {
            if r.u32()? != t.length {
                return Err(Error::Data("oracle length does not match trajectory".into()));
            }
            let mut rewards = r.f32s(t.length)?;
            rewards.resize(h, 0.0);
            t.hidden_rewards = rewards;
        }
        r.finish()?;
    }

    let dataset = OfflineDataset::new(env, split, seed, trajs)?;
    if dataset.content_hash != expected_hash {
        return Err(Error::HashMismatch {
            expected: expected_hash,
            found: dataset.content_hash,
        });
    }
    Ok(dataset)
}

pub fn write_preferences(prefs: &PreferenceDataset) -> Result<Vec<u8>> {
    if prefs.dataset_ref.len() != 64 || hex::decode(&prefs.dataset_ref).is_err() {
        return Err(Error::Data("dataset_ref must be a 64-digit hex hash".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(PREF_MAGIC);
    buf.extend_from_slice(prefs.dataset_ref.as_bytes());
    put_u32(&mut buf, prefs.triples.len());
    for t in &prefs.triples {
        put_u32(&mut buf, t.i);
        put_u32(&mut buf, t.j);
        buf.extend_from_slice(&(t.y as f32).to_le_bytes());
        buf.push(t.source.code());
        let id = t.annotator_id.as_deref().unwrap_or("");
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Data("annotator_id longer than 65535 bytes".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    Ok(buf)
}

pub fn read_preferences(bytes: &[u8]) -> Result<PreferenceDataset> {
    let mut r = Reader::new(bytes, "preference");
    r.magic(PREF_MAGIC)?;
    let dataset_ref = r.string(64)?;
    let n = r.u32()?;
    let mut triples = Vec::with_capacity(n);
    for _ in 0..n {
        let i = r.u32()?;
        let j = r.u32()?;
        let y = r.f32()? as f64;
        let source = LabelSource::from_code(r.u8()?)?;
        let len = r.u16()?;
        let id = r.string(len)?;
        triples.push(PreferenceTriple {
            i,
            j,
            y,
            source,
            annotator_id: (!id.is_empty()).then_some(id),
        });
    }
    r.finish()?;
    Ok(PreferenceDataset {
        triples,
        dataset_ref,
    })
}

pub fn save_preferences(prefs: &PreferenceDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, write_preferences(prefs)?)?;
    Ok(())
}

/// Reads a preference file and checks it against `dataset` (hash pin, index
/// range and label values).
pub fn load_preferences(path: &Path, dataset: &OfflineDataset) -> Result<PreferenceDataset> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let prefs = read_preferences(&bytes)?;
    prefs.validate_against(dataset)?;
    Ok(prefs)
}
