//! File formats: raw volumes and masks, checkpoints and TOML run
//! configurations.
//!
//! Volume files start with a fixed 21-byte little-endian header
//!
//! ```text
//! magic "VSG1" | dtype u8 (0 = f32, 1 = binary u8) | channels u32 | d u32 | h u32 | w u32
//! ```
//!
//! followed by the payload in the crate's memory layout. Every write goes
//! to a temporary file in the target directory and is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{AdamWConfig, EpochLog, OptState, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::net::{NetConfig, NetParams};
use crate::postproc::PostprocConfig;
use crate::synth::{AugmentConfig, GenConfig, Split, SubjectRecord};
use crate::volume::{BinaryMask, Real, Shape3, Volume};

pub const VOLUME_MAGIC: [u8; 4] = *b"VSG1";
pub const HEADER_LEN: usize = 21;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_MASK: u8 = 1;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const FLAG_DOUBLE: u8 = 1;
const FLAG_RESUME: u8 = 2;

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn header(dtype: u8, channels: usize, s: Shape3) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&VOLUME_MAGIC);
    out.push(dtype);
    for v in [channels, s.d, s.h, s.w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes")) as usize
}

/// Parses the header and checks the payload length. Returns channels,
/// shape and the payload slice.
fn parse_volume<'a>(bytes: &'a [u8], path: &Path, want: u8) -> Result<(usize, Shape3, &'a [u8])> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != VOLUME_MAGIC {
            return Err(bad_magic(path, &bytes[..4]));
        }
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != VOLUME_MAGIC {
        return Err(bad_magic(path, &bytes[..4]));
    }
    let dtype = bytes[4];
    if dtype != want {
        return Err(Error::DtypeMismatch {
            path: path.to_path_buf(),
            expected: want,
            found: dtype,
        });
    }
    let channels = u32_at(bytes, 5);
    let shape = Shape3::from_dims([u32_at(bytes, 9), u32_at(bytes, 13), u32_at(bytes, 17)]);
    shape.validate().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if channels == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "zero channels".into(),
        });
    }
    let elem = if dtype == DTYPE_F32 { 4 } else { 1 };
    let expected = HEADER_LEN as u64 + (channels as u64) * (shape.len() as u64) * elem;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("{} trailing bytes after payload", actual - expected),
        });
    }
    Ok((channels, shape, &bytes[HEADER_LEN..]))
}

fn bad_magic(path: &Path, found: &[u8]) -> Error {
    Error::BadMagic {
        path: path.to_path_buf(),
        expected: VOLUME_MAGIC,
        found: found.try_into().expect("4 bytes"),
    }
}

pub fn encode_volume(v: &Volume<f32>) -> Vec<u8> {
    let mut out = header(DTYPE_F32, v.channels(), v.shape());
    out.reserve(v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume<f32>> {
    let (channels, shape, payload) = parse_volume(bytes, path, DTYPE_F32)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Volume::from_vec(channels, shape, data)
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut out = header(DTYPE_MASK, 1, m.shape());
    out.extend_from_slice(m.data());
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    let (channels, shape, payload) = parse_volume(bytes, path, DTYPE_MASK)?;
    if channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("mask files hold one channel, found {channels}"),
        });
    }
    BinaryMask::from_vec(shape, payload.to_vec()).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_volume(path: &Path, v: &Volume<f32>) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume<f32>> {
    decode_volume(&read_all(path)?, path)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_mask(m))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask(&read_all(path)?, path)
}

/// JSON metadata stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub net: NetConfig,
    /// Epoch the stored parameters come from.
    pub epoch: Option<usize>,
    pub resume: Option<ResumeMeta>,
}

/// Bookkeeping needed to continue a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeMeta {
    pub next_epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stagnant: usize,
    pub stopped: bool,
    pub opt_step: u64,
    pub optimizer: AdamWConfig,
    pub logs: Vec<EpochLog>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &[f32]) {
        self.bytes(name.as_bytes());
        self.u64(t.len() as u64);
        for x in t {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let end = (self.at as u64).checked_add(n).filter(|&e| e <= self.b.len() as u64);
        match end {
            Some(e) => {
                let s = &self.b[self.at..e as usize];
                self.at = e as usize;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.at as u64 + n,
                actual: self.b.len() as u64,
            }),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<(String, Vec<f32>)> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| self.format("tensor name is not utf-8"))?;
        let n = self.u64()?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.format("tensor length overflows"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, data))
    }
    fn format(&self, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Precision of the parameters that were saved.
    pub source_double: bool,
    pub params: NetParams<f32>,
    pub resume: Option<ResumeTensors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResumeTensors {
    pub best: NetParams<f32>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

const SECTIONS: [&str; 4] = ["param", "best", "adam_m", "adam_v"];

fn encode_checkpoint(
    meta: &CheckpointMeta,
    double: bool,
    params: &NetParams<f32>,
    extra: Option<(&NetParams<f32>, &[Vec<f32>], &[Vec<f32>])>,
) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::invalid(format!("checkpoint metadata: {e}")))?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let mut flags = 0;
    if double {
        flags |= FLAG_DOUBLE;
    }
    if extra.is_some() {
        flags |= FLAG_RESUME;
    }
    w.u8(flags);
    w.bytes(&json);
    let specs = &params.layout().specs;
    let mut groups: Vec<&[Vec<f32>]> = vec![params.tensors()];
    if let Some((best, m, v)) = extra {
        groups.extend([best.tensors(), m, v]);
    }
    w.u32((groups.len() * specs.len()) as u32);
    for (section, tensors) in SECTIONS.iter().zip(groups) {
        for (spec, t) in specs.iter().zip(tensors) {
            w.tensor(&format!("{section}/{}", spec.name), t);
        }
    }
    Ok(w.0)
}

fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { b: bytes, at: 0, path };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found: magic.try_into().expect("4 bytes"),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.format(&format!("unsupported checkpoint version {version}")));
    }
    let flags = r.u8()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.bytes()?)
        .map_err(|e| r.format(&format!("checkpoint metadata: {e}")))?;
    meta.net
        .validate()
        .map_err(|e| Error::CheckpointMismatch(format!("stored network configuration: {e}")))?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        named.push(r.tensor()?);
    }
    if r.at != bytes.len() {
        return Err(r.format("trailing bytes after tensors"));
    }
    let resume = flags & FLAG_RESUME != 0;
    if resume != meta.resume.is_some() {
        return Err(r.format("resume flag disagrees with metadata"));
    }
    let layout = crate::net::NetLayout::new(&meta.net)?;
    let n = layout.specs.len();
    let sections = if resume { 4 } else { 1 };
    if named.len() != sections * n {
        return Err(Error::CheckpointMismatch(format!(
            "expected {} tensors, found {}",
            sections * n,
            named.len()
        )));
    }
    let mut it = named.into_iter();
    let mut groups = Vec::new();
    for section in &SECTIONS[..sections] {
        let mut g = Vec::with_capacity(n);
        for spec in &layout.specs {
            let (name, t) = it.next().expect("count checked");
            let want = format!("{section}/{}", spec.name);
            if name != want {
                return Err(Error::CheckpointMismatch(format!("expected tensor {want}, found {name}")));
            }
            g.push(t);
        }
        groups.push(g);
    }
    let mut groups = groups.into_iter();
    let params = NetParams::from_tensors(&meta.net, groups.next().expect("one section"))?;
    let resume = if resume {
        let best = NetParams::from_tensors(&meta.net, groups.next().expect("four sections"))?;
        let m = groups.next().expect("four sections");
        let v = groups.next().expect("four sections");
        for (x, t) in m.iter().chain(&v).zip(params.tensors().iter().cycle()) {
            if x.len() != t.len() {
                return Err(Error::CheckpointMismatch("optimizer moments do not match parameters".into()));
            }
        }
        Some(ResumeTensors { best, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        meta,
        source_double: flags & FLAG_DOUBLE != 0,
        params,
        resume,
    })
}

/// Saves parameters only, stored as `f32` whatever the compute precision.
pub fn save_params<T: Real>(path: &Path, params: &NetParams<T>, epoch: Option<usize>) -> Result<()> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        net: *params.config(),
        epoch,
        resume: None,
    };
    write_atomic(path, &encode_checkpoint(&meta, T::DOUBLE, &params.cast::<f32>(), None)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_all(path)?, path)
}

/// Loads the stored parameters, optionally requiring a network configuration.
pub fn load_params(path: &Path, expected: Option<&NetConfig>) -> Result<(NetParams<f32>, CheckpointMeta)> {
    let ck = read_checkpoint(path)?;
    if let Some(cfg) = expected {
        if *cfg != ck.meta.net {
            return Err(Error::CheckpointMismatch(format!(
                "{} was saved for {:?}, expected {:?}",
                path.display(),
                ck.meta.net,
                cfg
            )));
        }
    }
    Ok((ck.params, ck.meta))
}

/// Saves everything needed to resume training bitwise.
pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        net: *state.params.config(),
        epoch: state.epoch.checked_sub(1),
        resume: Some(ResumeMeta {
            next_epoch: state.epoch,
            best_epoch: state.best_epoch,
            best_val_loss: state.best_val_loss.is_finite().then_some(state.best_val_loss),
            stagnant: state.stagnant,
            stopped: state.stopped,
            opt_step: state.opt.step,
            optimizer: state.opt.cfg,
            logs: state.logs.clone(),
        }),
    };
    let extra = (&state.best, state.opt.m.as_slice(), state.opt.v.as_slice());
    write_atomic(path, &encode_checkpoint(&meta, false, &state.params, Some(extra))?)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let ck = read_checkpoint(path)?;
    let (Some(r), Some(t)) = (ck.meta.resume, ck.resume) else {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds parameters only and cannot resume training",
            path.display()
        )));
    };
    Ok(TrainState {
        opt: OptState {
            m: t.m,
            v: t.v,
            step: r.opt_step,
            cfg: r.optimizer,
        },
        params: ck.params,
        epoch: r.next_epoch,
        best: t.best,
        best_epoch: r.best_epoch,
        best_val_loss: r.best_val_loss.unwrap_or(f64::INFINITY),
        stagnant: r.stagnant,
        stopped: r.stopped,
        logs: r.logs,
    })
}

/// Inference settings shared by prediction and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub window: Shape3,
    pub overlap: f64,
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            window: Shape3::cube(32),
            overlap: 0.0,
            threshold: 0.5,
        }
    }
}

/// Complete run configuration. Every section and key is optional.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub augment: AugmentConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub postproc: PostprocConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.net.validate().map_err(|e| Error::Config {
            path: "net".into(),
            message: e.to_string(),
        })?;
        self.augment.validate(self.gen.volume_shape, self.net.required_divisor())?;
        self.train.validate()?;
        self.loss.validate()?;
        self.postproc.validate()?;
        let cfg = |path: &str, message: String| Error::Config { path: path.into(), message };
        let div = self.net.required_divisor();
        for (path, w) in [("train.val_window", self.train.val_window), ("infer.window", self.infer.window)] {
            if !w.divisible_by(div) {
                return Err(cfg(path, format!("{w} must be divisible by {div} along every axis")));
            }
        }
        if !(0.0..1.0).contains(&self.infer.overlap) {
            return Err(cfg("infer.overlap", format!("must lie in [0, 1), got {}", self.infer.overlap)));
        }
        if !(self.infer.threshold > 0.0 && self.infer.threshold < 1.0) {
            return Err(cfg("infer.threshold", format!("must lie in (0, 1), got {}", self.infer.threshold)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("serializing configuration: {e}")))
    }
}

/// Parses and validates TOML. Errors carry the dotted key path.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
        path: "<document>".into(),
        message: e.message().to_string(),
    })?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(path, cfg.to_toml()?.as_bytes())
}

/// `<dir>/<id>_<kind>.vsg`
pub fn subject_file(dir: &Path, id: &str, kind: &str) -> PathBuf {
    dir.join(format!("{id}_{kind}.vsg"))
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IMAGE_KIND: &str = "image";
pub const GT_KIND: &str = "gt";

/// One row of `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("manifest: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = read_all(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes every subject as `<id>_image.vsg` and `<id>_gt.vsg` plus the manifest.
pub fn write_dataset(dir: &Path, records: &[SubjectRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in records {
        write_volume(&subject_file(dir, &r.id, IMAGE_KIND), &r.image)?;
        write_mask(&subject_file(dir, &r.id, GT_KIND), &r.gt)?;
    }
    let entries: Vec<ManifestEntry> = records
        .iter()
        .map(|r| ManifestEntry {
            id: r.id.clone(),
            split: r.split,
        })
        .collect();
    write_manifest(&dir.join(MANIFEST_FILE), &entries)
}

/// Loads the subjects listed in the manifest, optionally one split only.
pub fn read_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<SubjectRecord>> {
    read_manifest(&dir.join(MANIFEST_FILE))?
        .into_iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| {
            Ok(SubjectRecord {
                image: read_volume(&subject_file(dir, &e.id, IMAGE_KIND))?,
                gt: read_mask(&subject_file(dir, &e.id, GT_KIND))?,
                id: e.id,
                split: e.split,
            })
        })
        .collect()
}
