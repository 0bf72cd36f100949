//! On-disk formats. Integers are little-endian and floats are IEEE-754
//! binary32. See `docs/formats.md` for byte layouts.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kinalign_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{self, ImuWindow, RawRecording, VideoClip, FRAMES_PER_CLIP};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMUV";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const IMU_MAGIC: &[u8; 4] = b"IMUW";
pub const CLIP_MAGIC: &[u8; 4] = b"CLIP";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMBD";

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Name of the checkpoint entry holding the JSON configuration echo.
pub const CONFIG_ENTRY: &str = "__config__";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Cursor over a byte buffer that reports failures with their offset.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], source: &'a str) -> Self {
        Self { bytes, pos: 0, source }
    }

    fn error_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            source_name: self.source.to_string(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.error_at(
                self.pos,
                format!("truncated {what}: need {n} bytes, {remaining} remain"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.error_at(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// `count` floats, checking the byte budget before allocating.
    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let n = count
            .checked_mul(4)
            .ok_or_else(|| self.error_at(self.pos, format!("{what} size overflows")))?;
        let raw = self.take(n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(start, format!("{what} is not UTF-8")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error_at(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
}

fn len_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::Input(format!("{what} length {n} exceeds 65535")))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Input(format!("{what} {n} exceeds u32 range")))
}

// ---------------------------------------------------------------- checkpoint

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Tensor<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub data: EntryData,
}

/// Ordered named tensors plus a JSON configuration echo.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Every parameter of `store` in store order, preceded by the config echo.
    pub fn from_store(store: &ParamStore<f32>, config_json: &str) -> Self {
        let mut entries = vec![CheckpointEntry {
            name: CONFIG_ENTRY.into(),
            data: EntryData::Bytes(config_json.as_bytes().to_vec()),
        }];
        entries.extend(store.iter().map(|(_, p)| CheckpointEntry {
            name: p.name().to_string(),
            data: EntryData::F32(p.value().clone()),
        }));
        Self { entries }
    }

    pub fn config_json(&self) -> Option<&str> {
        self.entries.iter().find(|e| e.name == CONFIG_ENTRY).and_then(|e| match &e.data {
            EntryData::Bytes(b) => std::str::from_utf8(b).ok(),
            EntryData::F32(_) => None,
        })
    }

    /// Parameter store holding every tensor entry, in file order.
    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            if let EntryData::F32(t) = &e.data {
                store.add(e.name.clone(), t.clone())?;
            }
        }
        Ok(store)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|e| e.name == name).and_then(|e| match &e.data {
            EntryData::F32(t) => Some(t),
            EntryData::Bytes(_) => None,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u32(len_u32(self.entries.len(), "entry count")?);
        for e in &self.entries {
            w.u16(len_u16(e.name.len(), "entry name")?);
            w.bytes(e.name.as_bytes());
            match &e.data {
                EntryData::F32(t) => {
                    w.u8(DTYPE_F32);
                    w.u8(u8::try_from(t.rank()).map_err(|_| Error::Input("tensor rank exceeds 255".into()))?);
                    for &d in t.shape() {
                        w.u32(len_u32(d, "dimension")?);
                    }
                    w.f32s(t.data());
                }
                EntryData::Bytes(b) => {
                    w.u8(DTYPE_U8);
                    w.u8(1);
                    w.u32(len_u32(b.len(), "byte entry length")?);
                    w.bytes(b);
                }
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, source);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.pos;
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error_at(at, format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for i in 0..count {
            let at = r.pos;
            let name_len = r.u16("entry name length")? as usize;
            let name = r.string(name_len, "entry name")?;
            if !seen.insert(name.clone()) {
                return Err(r.error_at(at, format!("duplicate entry `{name}`")));
            }
            let dtype_at = r.pos;
            let dtype = r.u8("dtype")?;
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error_at(dtype_at, format!("entry {i} `{name}` size overflows")))?;
            let data = match dtype {
                DTYPE_F32 => {
                    let values = r.f32s(numel, "tensor data")?;
                    EntryData::F32(Tensor::new(shape, values)?)
                }
                DTYPE_U8 => {
                    if ndim != 1 {
                        return Err(r.error_at(dtype_at, format!("byte entry `{name}` must be rank 1")));
                    }
                    EntryData::Bytes(r.take(numel, "byte entry")?.to_vec())
                }
                other => return Err(r.error_at(dtype_at, format!("unknown dtype code {other}"))),
            };
            entries.push(CheckpointEntry { name, data });
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?, &path.display().to_string())
}

// ------------------------------------------------------------------ IMU file

pub fn imu_to_bytes(rec: &RawRecording) -> Result<Vec<u8>> {
    rec.validate()?;
    let mut w = Writer(Vec::new());
    w.bytes(IMU_MAGIC);
    w.u16(len_u16(rec.num_channels(), "channel count")?);
    w.u32(len_u32(rec.len(), "sample count")?);
    w.0.extend_from_slice(&(rec.sample_rate_hz as f32).to_le_bytes());
    for c in &rec.channels {
        w.f32s(c);
    }
    Ok(w.0)
}

pub fn imu_from_bytes(bytes: &[u8], source: &str) -> Result<RawRecording> {
    let mut r = Reader::new(bytes, source);
    r.magic(IMU_MAGIC)?;
    let channels = r.u16("channel count")? as usize;
    if channels == 0 {
        return Err(r.error_at(4, "zero channels"));
    }
    let samples = r.u32("sample count")? as usize;
    let rate = r.f32("sample rate")?;
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(r.error_at(10, format!("sample rate {rate} must be positive")));
    }
    let expected = channels
        .checked_mul(samples)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| r.error_at(4, "declared size overflows"))?;
    if bytes.len() - r.pos != expected {
        return Err(r.error_at(
            r.pos,
            format!(
                "header declares {channels}x{samples} samples ({expected} bytes), payload has {} bytes",
                bytes.len() - r.pos
            ),
        ));
    }
    let mut data = Vec::with_capacity(channels);
    for _ in 0..channels {
        data.push(r.f32s(samples, "channel data")?);
    }
    r.finish()?;
    RawRecording::new(data, rate as f64)
}

pub fn write_imu_file(path: &Path, rec: &RawRecording) -> Result<()> {
    write_file(path, &imu_to_bytes(rec)?)
}

pub fn read_imu_file(path: &Path) -> Result<RawRecording> {
    imu_from_bytes(&read_file(path)?, &path.display().to_string())
}

/// Delimited text with one row per sample and one column per channel. A
/// leading non-numeric row is treated as a header.
pub fn read_imu_csv(path: &Path, sample_rate_hz: f64) -> Result<RawRecording> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut channels: Vec<Vec<f32>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f32>, _> = record.iter().map(str::parse::<f32>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if row == 0 => continue,
            Err(e) => {
                return Err(Error::Input(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    row + 1
                )))
            }
        };
        if channels.is_empty() {
            channels = vec![Vec::new(); values.len()];
        }
        for (c, v) in channels.iter_mut().zip(values) {
            c.push(v);
        }
    }
    RawRecording::new(channels, sample_rate_hz)
}

// ----------------------------------------------------------------- clip file

pub fn clip_to_bytes(clip: &VideoClip) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.bytes(CLIP_MAGIC);
    w.u8(FRAMES_PER_CLIP as u8);
    w.u16(len_u16(clip.height, "clip height")?);
    w.u16(len_u16(clip.width, "clip width")?);
    w.u8(u8::try_from(clip.channels).map_err(|_| Error::Input("clip channels exceed 255".into()))?);
    w.f32s(clip.data());
    Ok(w.0)
}

pub fn clip_from_bytes(bytes: &[u8], source: &str) -> Result<VideoClip> {
    let mut r = Reader::new(bytes, source);
    r.magic(CLIP_MAGIC)?;
    let frames = r.u8("frame count")? as usize;
    if frames != FRAMES_PER_CLIP {
        return Err(r.error_at(4, format!("clip has {frames} frames, expected {FRAMES_PER_CLIP}")));
    }
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let c = r.u8("channels")? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(r.error_at(5, format!("empty frame shape {h}x{w}x{c}")));
    }
    let count = frames * h * w * c;
    if bytes.len() - r.pos != count * 4 {
        return Err(r.error_at(
            r.pos,
            format!(
                "header declares {frames}x{h}x{w}x{c} values ({} bytes), payload has {} bytes",
                count * 4,
                bytes.len() - r.pos
            ),
        ));
    }
    let start = r.pos;
    let data = r.f32s(count, "frame data")?;
    if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(r.error_at(start + 4 * i, format!("pixel value {} outside [0, 1]", data[i])));
    }
    VideoClip::new(data, h, w, c)
}

pub fn write_clip_file(path: &Path, clip: &VideoClip) -> Result<()> {
    write_file(path, &clip_to_bytes(clip)?)
}

pub fn read_clip_file(path: &Path) -> Result<VideoClip> {
    clip_from_bytes(&read_file(path)?, &path.display().to_string())
}

// ------------------------------------------------------------ embedding file

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl EmbeddingFile {
    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, v)| v.as_slice())
    }
}

pub fn embeddings_to_bytes(file: &EmbeddingFile) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.bytes(EMBEDDING_MAGIC);
    w.u32(len_u32(file.dim, "embedding dimension")?);
    w.u32(len_u32(file.entries.len(), "embedding count")?);
    for (id, v) in &file.entries {
        if v.len() != file.dim {
            return Err(Error::Input(format!(
                "embedding `{id}` has {} values, file dimension is {}",
                v.len(),
                file.dim
            )));
        }
        w.u16(len_u16(id.len(), "embedding id")?);
        w.bytes(id.as_bytes());
        w.f32s(v);
    }
    Ok(w.0)
}

pub fn embeddings_from_bytes(bytes: &[u8], source: &str) -> Result<EmbeddingFile> {
    let mut r = Reader::new(bytes, source);
    r.magic(EMBEDDING_MAGIC)?;
    let dim = r.u32("dimension")? as usize;
    let count = r.u32("count")? as usize;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("id length")? as usize;
        let id = r.string(len, "id")?;
        if !seen.insert(id.clone()) {
            return Err(r.error_at(at, format!("duplicate id `{id}`")));
        }
        let v = r.f32s(dim, "embedding values")?;
        entries.push((id, v));
    }
    r.finish()?;
    Ok(EmbeddingFile { dim, entries })
}

pub fn write_embedding_file(path: &Path, file: &EmbeddingFile) -> Result<()> {
    write_file(path, &embeddings_to_bytes(file)?)
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingFile> {
    embeddings_from_bytes(&read_file(path)?, &path.display().to_string())
}

// ------------------------------------------------------------------ manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
    Ood,
    Prototype,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
            Split::Ood => "ood",
            Split::Prototype => "prototype",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            "ood" => Ok(Split::Ood),
            "prototype" => Ok(Split::Prototype),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestItem {
    pub id: String,
    /// Relative to the manifest's directory.
    pub imu: PathBuf,
    pub clip: Option<PathBuf>,
    pub label: Option<usize>,
    pub split: Split,
    pub subject: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
}

const MANIFEST_HEADER: &str = "#kinalign-manifest v1";
const MANIFEST_COLUMNS: &str = "id\timu\tclip\tlabel\tsplit\tsubject";

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MANIFEST_HEADER);
        s.push('\n');
        s.push_str("#classes");
        for c in &self.classes {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        s.push_str(MANIFEST_COLUMNS);
        s.push('\n');
        for it in &self.items {
            let clip = it.clip.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            let label = it.label.map_or("-", |l| self.classes[l].as_str());
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                it.id,
                it.imu.display(),
                clip,
                label,
                it.split,
                it.subject
            ));
        }
        s
    }

    /// Parses raw bytes, locating invalid UTF-8.
    pub fn parse_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Format {
            source_name: source.to_string(),
            offset: e.valid_up_to() as u64,
            reason: "manifest is not UTF-8".into(),
        })?;
        Self::parse(text, source)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |offset: usize, line: usize, reason: String| Error::Format {
            source_name: source.to_string(),
            offset: offset as u64,
            reason: format!("line {line}: {reason}"),
        };
        let mut classes: Option<Vec<String>> = None;
        let mut items = Vec::new();
        let mut ids = HashSet::new();
        let mut offset = 0;
        let mut saw_columns = false;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let line_no = i + 1;
            let start = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#classes") {
                if classes.is_some() {
                    return Err(err(start, line_no, "repeated #classes record".into()));
                }
                let names: Vec<String> = rest.split('\t').filter(|s| !s.is_empty()).map(String::from).collect();
                let unique: HashSet<&String> = names.iter().collect();
                if unique.len() != names.len() {
                    return Err(err(start, line_no, "duplicate class name".into()));
                }
                classes = Some(names);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            if !saw_columns && line == MANIFEST_COLUMNS {
                saw_columns = true;
                continue;
            }
            let Some(class_list) = classes.as_ref() else {
                return Err(err(start, line_no, "item before #classes header".into()));
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(err(start, line_no, format!("expected 6 tab-separated fields, got {}", fields.len())));
            }
            let id = fields[0].to_string();
            if id.is_empty() || !ids.insert(id.clone()) {
                return Err(err(start, line_no, format!("empty or duplicate id `{id}`")));
            }
            let label = match fields[3] {
                "-" | "" => None,
                name => Some(
                    class_list
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| err(start, line_no, format!("label `{name}` not in #classes")))?,
                ),
            };
            let split = fields[4].parse().map_err(|e| err(start, line_no, e))?;
            items.push(ManifestItem {
                id,
                imu: PathBuf::from(fields[1]),
                clip: match fields[2] {
                    "-" | "" => None,
                    p => Some(PathBuf::from(p)),
                },
                label,
                split,
                subject: fields[5].to_string(),
            });
        }
        let classes = classes.ok_or_else(|| err(offset, 0, "missing #classes header".into()))?;
        Ok(Self { classes, items })
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_file(path, manifest.to_text().as_bytes())
}

/// Parses the manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new(""));
    for it in &manifest.items {
        for p in std::iter::once(&it.imu).chain(it.clip.as_ref()) {
            let full = base.join(p);
            if !full.is_file() {
                return Err(Error::Input(format!(
                    "{}: item `{}` references missing file {}",
                    path.display(),
                    it.id,
                    full.display()
                )));
            }
        }
    }
    Ok(manifest)
}

// ------------------------------------------------------------------- dataset

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub window: ImuWindow,
    pub clip: Option<VideoClip>,
    pub label: Option<usize>,
    pub split: Split,
    pub subject: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    pub fn has_clips(&self, split: Split) -> bool {
        let items = self.split(split);
        !items.is_empty() && items.iter().all(|it| it.clip.is_some())
    }

    /// Writes `imu/<id>.imuw`, `clip/<id>.clip`, and `manifest.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let mut manifest = Manifest {
            classes: self.classes.clone(),
            items: Vec::with_capacity(self.items.len()),
        };
        for it in &self.items {
            let imu = PathBuf::from("imu").join(format!("{}.imuw", it.id));
            write_imu_file(&dir.join(&imu), &it.window.to_recording())?;
            let clip = match &it.clip {
                Some(c) => {
                    let p = PathBuf::from("clip").join(format!("{}.clip", it.id));
                    write_clip_file(&dir.join(&p), c)?;
                    Some(p)
                }
                None => None,
            };
            manifest.items.push(ManifestItem {
                id: it.id.clone(),
                imu,
                clip,
                label: it.label,
                split: it.split,
                subject: it.subject.clone(),
            });
        }
        write_manifest(&dir.join("manifest.tsv"), &manifest)?;
        Ok(manifest)
    }

    /// Loads every item of a manifest in file order. IMU files that are not
    /// already a single 50 Hz window run through the preprocessing chain and
    /// yield one item per window, ids suffixed `#k`.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut items = Vec::with_capacity(manifest.items.len());
        for it in &manifest.items {
            let rec = read_imu_file(&base.join(&it.imu))?;
            let clip = it.clip.as_ref().map(|p| read_clip_file(&base.join(p))).transpose()?;
            let is_window = rec.len() == signal::WINDOW_LEN
                && (rec.sample_rate_hz - signal::TARGET_RATE_HZ).abs() < 1e-6
                && rec.num_channels() == signal::NUM_CHANNELS;
            if is_window {
                items.push(Item {
                    id: it.id.clone(),
                    window: ImuWindow::from_recording(&rec, it.label, it.id.clone())?,
                    clip,
                    label: it.label,
                    split: it.split,
                    subject: it.subject.clone(),
                });
                continue;
            }
            if clip.is_some() {
                return Err(Error::Input(format!(
                    "item `{}`: a clip can only pair with a single-window IMU file",
                    it.id
                )));
            }
            for (k, mut w) in signal::preprocess(&rec, &it.id)?.into_iter().enumerate() {
                w.label = it.label;
                items.push(Item {
                    id: format!("{}#{k}", it.id),
                    window: w,
                    clip: None,
                    label: it.label,
                    split: it.split,
                    subject: it.subject.clone(),
                });
            }
        }
        Ok(Self {
            classes: manifest.classes,
            items,
        })
    }
}

/// Maps class names of one label space onto another, read from a two-column
/// tab-separated file (`source<TAB>target`).
pub fn read_class_map(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split('\t').collect::<Vec<_>>().as_slice() {
            [a, b] => {
                map.insert(a.to_string(), b.to_string());
            }
            _ => {
                return Err(Error::Format {
                    source_name: path.display().to_string(),
                    offset: start as u64,
                    reason: format!("line {}: expected `source<TAB>target`", i + 1),
                })
            }
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------- fuzz

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatKind {
    Checkpoint,
    Imu,
    Clip,
    Embedding,
    Manifest,
}

impl FormatKind {
    pub const ALL: [FormatKind; 5] = [
        FormatKind::Checkpoint,
        FormatKind::Imu,
        FormatKind::Clip,
        FormatKind::Embedding,
        FormatKind::Manifest,
    ];

    fn is_binary(self) -> bool {
        self != FormatKind::Manifest
    }

    /// Decodes `bytes` and discards the value.
    pub fn decode(self, bytes: &[u8], source: &str) -> Result<()> {
        match self {
            FormatKind::Checkpoint => Checkpoint::from_bytes(bytes, source).map(drop),
            FormatKind::Imu => imu_from_bytes(bytes, source).map(drop),
            FormatKind::Clip => clip_from_bytes(bytes, source).map(drop),
            FormatKind::Embedding => embeddings_from_bytes(bytes, source).map(drop),
            FormatKind::Manifest => Manifest::parse_bytes(bytes, source).map(drop),
        }
    }

    /// A small well-formed file of this kind.
    pub fn sample(self) -> Vec<u8> {
        match self {
            FormatKind::Checkpoint => {
                let mut store = ParamStore::<f32>::new();
                store
                    .add("imu.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 0.25, -0.5]).unwrap())
                    .unwrap();
                store.add("align.b", Tensor::scalar(-10.0)).unwrap();
                Checkpoint::from_store(&store, "{\"kind\":\"cross\"}").to_bytes().unwrap()
            }
            FormatKind::Imu => {
                let channels = (0..signal::NUM_CHANNELS)
                    .map(|c| (0..signal::WINDOW_LEN).map(|i| ((i + c) as f32 * 0.1).sin()).collect())
                    .collect();
                imu_to_bytes(&RawRecording::new(channels, signal::TARGET_RATE_HZ).unwrap()).unwrap()
            }
            FormatKind::Clip => {
                let data = (0..FRAMES_PER_CLIP * 16 * 16).map(|i| (i % 7) as f32 / 7.0).collect();
                clip_to_bytes(&VideoClip::new(data, 16, 16, 1).unwrap()).unwrap()
            }
            FormatKind::Embedding => {
                let entries = (0..3).map(|k| (format!("e{k}"), vec![k as f32; 8])).collect();
                embeddings_to_bytes(&EmbeddingFile { dim: 8, entries }).unwrap()
            }
            FormatKind::Manifest => {
                let items = (0..3)
                    .map(|k| ManifestItem {
                        id: format!("c0_{k:04}"),
                        imu: PathBuf::from(format!("imu/c0_{k:04}.imuw")),
                        clip: (k != 2).then(|| PathBuf::from(format!("clip/c0_{k:04}.clip"))),
                        label: Some(k % 2),
                        split: Split::Train,
                        subject: "s0".into(),
                    })
                    .collect();
                Manifest {
                    classes: vec!["walk".into(), "sit".into()],
                    items,
                }
                .to_text()
                .into_bytes()
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FuzzReport {
    pub cases: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Decoder panics, with the case description.
    pub crashes: Vec<String>,
    /// Errors that were not a format error with an in-bounds byte offset.
    pub unlocated: Vec<String>,
    /// Binary files whose length changed under an unchanged header yet decoded.
    pub size_mismatch_accepted: Vec<String>,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.crashes.is_empty() && self.unlocated.is_empty() && self.size_mismatch_accepted.is_empty()
    }
}

/// Mutates well-formed samples of every format (truncation, extension, byte
/// flips, overwritten size fields) and checks that each decoder either
/// accepts or fails with a located format error, never panicking.
pub fn fuzz_formats(cases: usize, seed: u64) -> FuzzReport {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<(FormatKind, Vec<u8>)> = FormatKind::ALL.iter().map(|&k| (k, k.sample())).collect();
    let mut report = FuzzReport::default();
    for case in 0..cases {
        let (kind, ref base) = samples[case % samples.len()];
        let mut bytes = base.clone();
        let mutation = rng.random_range(0..5u8);
        let resized = match mutation {
            0 => {
                bytes.truncate(rng.random_range(0..base.len()));
                true
            }
            1 => {
                let extra = rng.random_range(1..16);
                bytes.extend((0..extra).map(|_| rng.random::<u8>()));
                true
            }
            2 => {
                for _ in 0..rng.random_range(1..8) {
                    let i = rng.random_range(0..bytes.len());
                    bytes[i] ^= 1 << rng.random_range(0..8);
                }
                false
            }
            3 => {
                let i = rng.random_range(0..bytes.len().min(24).saturating_sub(3).max(1));
                let v: u32 = rng.random();
                let end = (i + 4).min(bytes.len());
                bytes[i..end].copy_from_slice(&v.to_le_bytes()[..end - i]);
                false
            }
            _ => {
                let i = rng.random_range(0..bytes.len());
                let n = rng.random_range(1..=(bytes.len() - i).min(32));
                bytes.drain(i..i + n);
                true
            }
        };
        let desc = format!("case {case}: {kind:?} mutation {mutation}, {} bytes", bytes.len());
        report.cases += 1;
        let outcome = std::panic::catch_unwind(|| kind.decode(&bytes, "fuzz"));
        match outcome {
            Err(_) => report.crashes.push(desc),
            Ok(Ok(())) => {
                report.accepted += 1;
                if resized && kind.is_binary() && mutation != 4 {
                    report.size_mismatch_accepted.push(desc);
                }
            }
            Ok(Err(Error::Format { offset, .. })) if offset as usize <= bytes.len() => report.rejected += 1,
            Ok(Err(e)) => {
                report.rejected += 1;
                report.unlocated.push(format!("{desc}: {e}"));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use kinalign_tensor::ParamStore;

    fn sample_checkpoint() -> Checkpoint {
        let mut store = ParamStore::<f32>::new();
        store.add("imu.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-30, -0.0]).unwrap()).unwrap();
        store.add("align.b", Tensor::scalar(-10.0)).unwrap();
        Checkpoint::from_store(&store, "{\"a\":1}")
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config_json(), Some("{\"a\":1}"));
        let store = back.to_store().unwrap();
        assert_eq!(store.by_name("align.b").unwrap().value().item(), -10.0);
    }

    #[test]
    fn checkpoint_rejects_truncation_with_offset() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "mem").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset as usize <= bytes.len()),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn checkpoint_rejects_unknown_dtype_and_bad_header() {
        let mut bytes = sample_checkpoint().to_bytes().unwrap();
        // first entry: name length (2) + "__config__" (10) after the 10-byte header
        let dtype_at = 10 + 2 + CONFIG_ENTRY.len();
        bytes[dtype_at] = 7;
        let msg = Checkpoint::from_bytes(&bytes, "mem").unwrap_err().to_string();
        assert!(msg.contains("unknown dtype code 7") && msg.contains(&format!("byte {dtype_at}")), "{msg}");

        let mut bad = sample_checkpoint().to_bytes().unwrap();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, "mem").unwrap_err().to_string().contains("bad magic"));
        let mut bad = sample_checkpoint().to_bytes().unwrap();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad, "mem").unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn imu_round_trip_and_length_check() {
        let rec = RawRecording::new((0..6).map(|m| (0..250).map(|i| (i * m) as f32 * 0.01).collect()).collect(), 50.0).unwrap();
        let bytes = imu_to_bytes(&rec).unwrap();
        assert_eq!(imu_from_bytes(&bytes, "mem").unwrap(), rec);
        assert!(matches!(imu_from_bytes(&bytes[..bytes.len() - 4], "mem"), Err(Error::Format { .. })));
        let mut longer = bytes.clone();
        longer.extend([0; 4]);
        assert!(matches!(imu_from_bytes(&longer, "mem"), Err(Error::Format { .. })));
    }

    #[test]
    fn five_channel_file_loads_but_does_not_windowize() {
        let rec = RawRecording::new(vec![vec![0.5; 300]; 5], 50.0).unwrap();
        let back = imu_from_bytes(&imu_to_bytes(&rec).unwrap(), "mem").unwrap();
        assert_eq!(back.num_channels(), 5);
        assert!(matches!(signal::windowize(&back, "x"), Err(Error::Input(_))));
    }

    #[test]
    fn csv_import_matches_binary() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RawRecording::new(
            (0..6).map(|m| (0..40).map(|i| ((i * 7 + m * 3) % 11) as f32 * 0.25 - 1.0).collect()).collect(),
            100.0,
        )
        .unwrap();
        let mut text = String::from("ax,ay,az,gx,gy,gz\n");
        for t in 0..40 {
            let row: Vec<String> = (0..6).map(|m| rec.channels[m][t].to_string()).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let csv_path = dir.path().join("r.csv");
        fs::write(&csv_path, text).unwrap();
        let bin_path = dir.path().join("r.imuw");
        write_imu_file(&bin_path, &rec).unwrap();
        assert_eq!(read_imu_csv(&csv_path, 100.0).unwrap(), read_imu_file(&bin_path).unwrap());
    }

    #[test]
    fn clip_round_trip() {
        let clip = VideoClip::new((0..2560).map(|i| (i % 97) as f32 / 96.0).collect(), 16, 16, 1).unwrap();
        let bytes = clip_to_bytes(&clip).unwrap();
        assert_eq!(bytes.len(), 10 + 2560 * 4);
        assert_eq!(clip_from_bytes(&bytes, "mem").unwrap(), clip);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(clip_from_bytes(&bad, "mem").is_err());
    }

    #[test]
    fn embedding_round_trip_and_empty() {
        let file = EmbeddingFile {
            dim: 3,
            entries: vec![("a".into(), vec![1.0, 2.0, 3.0]), ("b".into(), vec![-1.0, 0.5, f32::MIN_POSITIVE])],
        };
        let back = embeddings_from_bytes(&embeddings_to_bytes(&file).unwrap(), "mem").unwrap();
        assert_eq!(back.get("b"), file.get("b"));
        assert_eq!(back, file);
        let empty = EmbeddingFile { dim: 8, entries: vec![] };
        let back = embeddings_from_bytes(&embeddings_to_bytes(&empty).unwrap(), "mem").unwrap();
        assert!(back.entries.is_empty());
    }

    #[test]
    fn precomputed_dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.embd");
        write_embedding_file(&p, &EmbeddingFile { dim: 3, entries: vec![("a".into(), vec![0.0; 3])] }).unwrap();
        assert!(crate::video_encoder::load_precomputed(&p, 3, Some(&["a"])).is_ok());
        assert!(matches!(
            crate::video_encoder::load_precomputed(&p, 4, None),
            Err(Error::Format { .. })
        ));
        assert!(crate::video_encoder::load_precomputed(&p, 3, Some(&["zz"])).is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let m = Manifest {
            classes: vec!["walk".into(), "sit".into()],
            items: vec![
                ManifestItem {
                    id: "p0".into(),
                    imu: "imu/p0.imuw".into(),
                    clip: Some("clip/p0.clip".into()),
                    label: Some(1),
                    split: Split::Train,
                    subject: "s1".into(),
                },
                ManifestItem {
                    id: "p1".into(),
                    imu: "imu/p1.imuw".into(),
                    clip: None,
                    label: None,
                    split: Split::Ood,
                    subject: "s2".into(),
                },
            ],
        };
        let text = m.to_text();
        assert_eq!(Manifest::parse(&text, "m").unwrap(), m);

        let dup = text.replace("p1\t", "p0\t");
        assert!(Manifest::parse(&dup, "m").unwrap_err().to_string().contains("duplicate id"));
        let unknown = text.replace("\tsit\ttrain", "\trun\ttrain");
        let e = Manifest::parse(&unknown, "m").unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("run"), "{e}");
    }

    #[test]
    fn manifest_load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, "#classes\ta\nx\timu/x.imuw\t-\ta\ttrain\ts\n").unwrap();
        let e = load_manifest(&path).unwrap_err().to_string();
        assert!(e.contains("missing file"), "{e}");
    }

    #[test]
    fn fuzzed_formats_fail_located_and_never_crash() {
        let report = fuzz_formats(1000, 0);
        assert_eq!(report.cases, 1000);
        assert!(report.passed(), "{report:#?}");
        assert!(report.rejected > 500);
    }

    #[test]
    fn manifest_bytes_locate_bad_utf8() {
        let mut bytes = FormatKind::Manifest.sample();
        bytes[30] = 0xff;
        match Manifest::parse_bytes(&bytes, "m") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn class_map_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.tsv");
        fs::write(&p, "# source\ttarget\nwalking\twalk\n").unwrap();
        assert_eq!(read_class_map(&p).unwrap()["walking"], "walk");
        fs::write(&p, "bad line\n").unwrap();
        assert!(read_class_map(&p).is_err());
    }
}
