//! Core domain types: modalities, feature sequences, labels, clip records,
//! the dataset manifest schema and the binary feature-file format.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! "HCMF" | u32 version = 1 | u8 modality (0 text, 1 audio, 2 video)
//!        | u32 T | u32 D | T*D f32, row-major
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"HCMF";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Audio => 'a',
            Modality::Video => 'v',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            't' => Some(Modality::Text),
            'a' => Some(Modality::Audio),
            'v' => Some(Modality::Video),
            _ => None,
        }
    }

    /// The two other modalities in canonical order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::Text => [Modality::Audio, Modality::Video],
            Modality::Audio => [Modality::Text, Modality::Video],
            Modality::Video => [Modality::Text, Modality::Audio],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

/// A subset of the three modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const ALL: ModalitySet = ModalitySet(0b111);

    pub fn of(items: &[Modality]) -> Self {
        Self(items.iter().fold(0, |acc, m| acc | 1 << m.index()))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn insert(&mut self, m: Modality) {
        self.0 |= 1 << m.index();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    /// Parse letters such as `"ta"`, `"t,a"` or `"text,audio"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = ModalitySet::EMPTY;
        for tok in s.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let full = match tok.to_ascii_lowercase().as_str() {
                "text" => Some(Modality::Text),
                "audio" => Some(Modality::Audio),
                "video" => Some(Modality::Video),
                _ => None,
            };
            if let Some(m) = full {
                set.insert(m);
                continue;
            }
            for c in tok.chars() {
                let m = Modality::from_letter(c)
                    .ok_or_else(|| Error::Config(format!("unknown modality '{c}' in '{s}'")))?;
                set.insert(m);
            }
        }
        Ok(set)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.iter().map(Modality::letter).collect();
        f.write_str(if s.is_empty() { "-" } else { &s })
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ModalitySet::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Time-major `T x D` feature matrix of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    modality: Modality,
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, len: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != len * dim {
            return Err(Error::ShapeMismatch(format!(
                "{modality} sequence: {} values for {len}x{dim}",
                data.len()
            )));
        }
        Ok(Self {
            modality,
            len,
            dim,
            data,
        })
    }

    /// The single all-zeros timestep used for absent or masked modalities.
    pub fn zeros(modality: Modality, dim: usize) -> Self {
        Self {
            modality,
            len: 1,
            dim,
            data: vec![0.0; dim],
        }
    }

    pub fn from_matrix(modality: Modality, m: &Matrix) -> Self {
        Self {
            modality,
            len: m.nrows(),
            dim: m.ncols(),
            data: m.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_matrix(&self) -> Matrix {
        Array2::from_shape_fn((self.len, self.dim), |(t, j)| f64::from(self.data[t * self.dim + j]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&[self.modality.code()])?;
        w.write_all(&(self.len as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let schema = |m: &str| Error::SchemaMismatch(m.to_string());
        let io = |e: std::io::Error| Error::SchemaMismatch(format!("truncated feature file: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != FEATURE_MAGIC {
            return Err(schema("bad feature-file magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FEATURE_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "unsupported feature-file version {version}"
            )));
        }
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(io)?;
        let modality = Modality::from_code(code[0])
            .ok_or_else(|| Error::SchemaMismatch(format!("unknown modality code {}", code[0])))?;
        r.read_exact(&mut u32buf).map_err(io)?;
        let len = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf).map_err(io)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut bytes = vec![0u8; len * dim * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(schema("trailing bytes after feature payload"));
        }
        Self::new(modality, len, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        Self::read_from(&mut f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MatureHumor,
    GoryHumor,
    SlapstickHumor,
    Sarcasm,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::MatureHumor,
        Category::GoryHumor,
        Category::SlapstickHumor,
        Category::Sarcasm,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::MatureHumor => "mature_humor",
            Category::GoryHumor => "gory_humor",
            Category::SlapstickHumor => "slapstick_humor",
            Category::Sarcasm => "sarcasm",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Annotation channels for per-modality labels, in column order.
pub const LABEL_CHANNELS: [&str; 3] = ["dialogue", "sound", "video"];

/// Map a model modality to its annotation channel column.
pub fn channel_of(m: Modality) -> usize {
    m.index()
}

/// Clip labels. Category order is [`Category::ALL`]; per-modality columns
/// are [`LABEL_CHANNELS`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub categories: [bool; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_modality: Option<[[bool; 3]; 4]>,
    pub binary: bool,
}

impl LabelSet {
    pub fn from_categories(categories: [bool; 4]) -> Self {
        Self {
            categories,
            per_modality: None,
            binary: categories.iter().any(|&c| c),
        }
    }

    /// Categories derived as the OR of their channels.
    pub fn from_per_modality(per_modality: [[bool; 3]; 4]) -> Self {
        let categories = per_modality.map(|row| row.iter().any(|&x| x));
        Self {
            categories,
            per_modality: Some(per_modality),
            binary: categories.iter().any(|&c| c),
        }
    }

    pub fn category(&self, c: Category) -> bool {
        self.categories[c.index()]
    }

    pub fn is_consistent(&self) -> bool {
        validate_labels(self).is_empty()
    }
}

pub fn derive_binary(labels: &LabelSet) -> bool {
    labels.categories.iter().any(|&c| c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    Subtitle,
    Caption,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source_video_id: String,
    pub text: Option<FeatureSequence>,
    pub text_source: TextSource,
    pub audio: FeatureSequence,
    pub video: FeatureSequence,
    pub labels: Option<LabelSet>,
}

impl ClipRecord {
    pub fn sequence(&self, m: Modality) -> Option<&FeatureSequence> {
        match m {
            Modality::Text => self.text.as_ref(),
            Modality::Audio => Some(&self.audio),
            Modality::Video => Some(&self.video),
        }
    }

    pub fn binary_label(&self) -> Option<bool> {
        self.labels.as_ref().map(|l| l.binary)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub text: usize,
    pub audio: usize,
    pub video: usize,
}

impl Default for Dims {
    /// Conventional widths of BERT-base, VGGish and I3D features.
    fn default() -> Self {
        Self {
            text: 768,
            audio: 128,
            video: 1024,
        }
    }
}

impl Dims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub clip_id: String,
    pub video_id: String,
    pub text_path: Option<String>,
    pub text_source: TextSource,
    pub audio_path: String,
    pub video_path: String,
    pub labels: Option<LabelSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dims: Dims,
    pub clips: Vec<ManifestClip>,
}

impl DatasetManifest {
    pub fn new(dims: Dims) -> Self {
        Self {
            version: MANIFEST_VERSION,
            dims,
            clips: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// For each target modality, the ordered pair of context modalities fed to
/// the first and second cross-attention stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalityOrdering {
    contexts: [[Modality; 2]; 3],
}

impl ModalityOrdering {
    pub fn new(text: [Modality; 2], audio: [Modality; 2], video: [Modality; 2]) -> Result<Self> {
        let o = Self {
            contexts: [text, audio, video],
        };
        for m in Modality::ALL {
            let [a, b] = o.contexts(m);
            if a == b || a == m || b == m {
                return Err(Error::Config(format!(
                    "ordering for {m} must use the two other modalities, got ({a}, {b})"
                )));
            }
        }
        Ok(o)
    }

    /// Text, audio and video each serve as the second (value-providing)
    /// context exactly once: text <- (audio, video), audio <- (video, text),
    /// video <- (text, audio).
    pub fn cyclic() -> Self {
        use Modality::*;
        Self::new([Audio, Video], [Video, Text], [Text, Audio]).expect("valid ordering")
    }

    /// text <- (audio, video), audio <- (text, video), video <- (text, audio).
    pub fn canonical() -> Self {
        use Modality::*;
        Self::new([Audio, Video], [Text, Video], [Text, Audio]).expect("valid ordering")
    }

    pub fn contexts(&self, target: Modality) -> [Modality; 2] {
        self.contexts[target.index()]
    }

    /// All eight orderings (two per target modality).
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(8);
        for bits in 0..8u8 {
            let pick = |m: Modality| {
                let [a, b] = m.others();
                if bits & (1 << m.index()) == 0 {
                    [a, b]
                } else {
                    [b, a]
                }
            };
            out.push(
                Self::new(pick(Modality::Text), pick(Modality::Audio), pick(Modality::Video))
                    .expect("valid ordering"),
            );
        }
        out
    }

    /// Parse `"t:av,a:vt,v:ta"`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse ordering '{s}' (expected t:xy,a:xy,v:xy)"));
        let mut slots: [Option<[Modality; 2]>; 3] = [None; 3];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (target, ctx) = part.split_once(':').ok_or_else(bad)?;
            let mut tc = target.chars();
            let target = tc.next().and_then(Modality::from_letter).ok_or_else(bad)?;
            let ctx: Vec<Modality> = ctx.chars().map(Modality::from_letter).collect::<Option<_>>().ok_or_else(bad)?;
            if tc.next().is_some() || ctx.len() != 2 {
                return Err(bad());
            }
            slots[target.index()] = Some([ctx[0], ctx[1]]);
        }
        match slots {
            [Some(t), Some(a), Some(v)] => Self::new(t, a, v),
            _ => Err(bad()),
        }
    }
}

impl Default for ModalityOrdering {
    fn default() -> Self {
        Self::cyclic()
    }
}

impl fmt::Display for ModalityOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Modality::ALL
            .iter()
            .map(|m| {
                let [a, b] = self.contexts(*m);
                format!("{}:{}{}", m.letter(), a.letter(), b.letter())
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for ModalityOrdering {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalityOrdering {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ModalityOrdering::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// One broken invariant: the offending field and the rule it violates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn validate_labels(l: &LabelSet) -> Vec<Violation> {
    let mut out = Vec::new();
    if l.binary != derive_binary(l) {
        out.push(Violation::new("labels.binary", "binary != OR(categories)"));
    }
    if let Some(pm) = &l.per_modality {
        for c in Category::ALL {
            if l.categories[c.index()] != pm[c.index()].iter().any(|&x| x) {
                out.push(Violation::new(
                    format!("labels.per_modality.{c}"),
                    "category != OR(per_modality)",
                ));
            }
        }
    }
    out
}

fn validate_sequence(
    out: &mut Vec<Violation>,
    field: &str,
    seq: &FeatureSequence,
    expected: Modality,
    dims: &Dims,
) {
    if seq.modality() != expected {
        out.push(Violation::new(field, format!("modality must be {expected}")));
    }
    if seq.is_empty() {
        out.push(Violation::new(field, "T must be >= 1"));
    }
    if seq.dim() != dims.get(expected) {
        out.push(Violation::new(
            field,
            format!("D = {} but manifest declares {}", seq.dim(), dims.get(expected)),
        ));
    }
    if !seq.all_finite() {
        out.push(Violation::new(field, "entries must be finite"));
    }
}

/// Check every clip invariant; an empty list means the clip is valid.
pub fn validate_clip(record: &ClipRecord, dims: &Dims) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.clip_id.is_empty() {
        out.push(Violation::new("clip_id", "must be non-empty"));
    }
    match (&record.text, record.text_source) {
        (Some(_), TextSource::None) => out.push(Violation::new("text", "text must be absent")),
        (None, TextSource::Subtitle | TextSource::Caption) => {
            out.push(Violation::new("text", "text must be present for subtitle/caption source"))
        }
        _ => {}
    }
    if let Some(t) = &record.text {
        validate_sequence(&mut out, "text", t, Modality::Text, dims);
    }
    validate_sequence(&mut out, "audio", &record.audio, Modality::Audio, dims);
    validate_sequence(&mut out, "video", &record.video, Modality::Video, dims);
    if let Some(l) = &record.labels {
        out.extend(validate_labels(l));
    }
    out
}
