//! Dataset loading, annotation aggregation, partitioning and summary
//! statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_model::{
    validate_clip, Category, ClipRecord, DatasetManifest, Dims, FeatureSequence, LabelSet, Modality, TextSource,
    Violation,
};
use crate::error::{Error, Result};
use crate::metrics::{cohens_kappa, AgreementStats};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub clips: Vec<ClipRecord>,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_feature(clip: &str, path: &Path, m: Modality, dims: &Dims) -> Result<FeatureSequence> {
    if !path.is_file() {
        return Err(Error::MissingFile {
            clip: clip.to_string(),
            path: path.to_path_buf(),
        });
    }
    let seq = FeatureSequence::load(path).map_err(|e| match e {
        Error::SchemaMismatch(msg) => Error::SchemaMismatch(format!("clip {clip}, {}: {msg}", path.display())),
        other => other,
    })?;
    if seq.dim() != dims.get(m) {
        return Err(Error::DimMismatch {
            clip: clip.to_string(),
            detail: format!("{m} file has D = {}, manifest declares {}", seq.dim(), dims.get(m)),
        });
    }
    Ok(seq)
}

/// Outcome of scanning a manifest: clips that loaded, with any invariant
/// violations found in them.
#[derive(Clone, Debug, Default)]
pub struct ScanReport {
    pub clips: Vec<ClipRecord>,
    pub violations: Vec<(String, Vec<Violation>)>,
}

/// Load every clip of a manifest, collecting invariant violations instead of
/// failing on them. Missing files, schema and dimension problems are still
/// hard errors.
pub fn scan_dataset(manifest_path: &Path) -> Result<(Dims, ScanReport)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let dims = manifest.dims;
    let mut seen = HashSet::new();
    let mut report = ScanReport::default();
    for mc in &manifest.clips {
        if !seen.insert(mc.clip_id.clone()) {
            return Err(Error::SchemaMismatch(format!("duplicate clip_id {}", mc.clip_id)));
        }
        let id = &mc.clip_id;
        let text = match &mc.text_path {
            Some(p) => Some(read_feature(id, &resolve(base, p), Modality::Text, &dims)?),
            None => None,
        };
        let audio = read_feature(id, &resolve(base, &mc.audio_path), Modality::Audio, &dims)?;
        let video = read_feature(id, &resolve(base, &mc.video_path), Modality::Video, &dims)?;
        let rec = ClipRecord {
            clip_id: mc.clip_id.clone(),
            source_video_id: mc.video_id.clone(),
            text,
            text_source: mc.text_source,
            audio,
            video,
            labels: mc.labels.clone(),
        };
        let v = validate_clip(&rec, &dims);
        if !v.is_empty() {
            report.violations.push((mc.clip_id.clone(), v));
        }
        report.clips.push(rec);
    }
    Ok((dims, report))
}

/// Load and validate a dataset; the first clip with violations is an error.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let (dims, mut report) = scan_dataset(manifest_path)?;
    if !report.violations.is_empty() {
        let (clip, violations) = report.violations.swap_remove(0);
        return Err(Error::InvariantViolation { clip, violations });
    }
    Ok(Dataset {
        dims,
        clips: report.clips,
    })
}

/// Write a dataset as a manifest plus one feature file per modality per clip
/// under `dir`. Returns the manifest path.
pub fn write_dataset(dir: &Path, dims: &Dims, clips: &[ClipRecord]) -> Result<PathBuf> {
    let feat = dir.join("features");
    std::fs::create_dir_all(&feat).map_err(|e| Error::io(&feat, e))?;
    let mut manifest = DatasetManifest::new(*dims);
    for c in clips {
        let rel = |m: Modality| format!("features/{}.{}.hcmf", c.clip_id, m.letter());
        let text_path = match &c.text {
            Some(t) => {
                t.save(&dir.join(rel(Modality::Text)))?;
                Some(rel(Modality::Text))
            }
            None => None,
        };
        c.audio.save(&dir.join(rel(Modality::Audio)))?;
        c.video.save(&dir.join(rel(Modality::Video)))?;
        manifest.clips.push(crate::data_model::ManifestClip {
            clip_id: c.clip_id.clone(),
            video_id: c.source_video_id.clone(),
            text_path,
            text_source: c.text_source,
            audio_path: rel(Modality::Audio),
            video_path: rel(Modality::Video),
            labels: c.labels.clone(),
        });
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

// ---- annotations ----

/// One annotator's record: either per-category flags or per-modality flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<[bool; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_modality: Option<[[bool; 3]; 4]>,
}

impl Vote {
    fn category_flags(&self) -> Option<[bool; 4]> {
        match (&self.per_modality, &self.categories) {
            (Some(pm), _) => Some(pm.map(|row| row.iter().any(|&x| x))),
            (None, Some(c)) => Some(*c),
            (None, None) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub clip_id: String,
    #[serde(default)]
    pub annotators: Vec<String>,
    pub votes: Vec<Vote>,
}

impl AnnotationSet {
    fn annotator(&self, i: usize) -> String {
        self.annotators
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("annotator_{i}"))
    }
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn majority(flags: impl Iterator<Item = bool>, n: usize) -> bool {
    2 * flags.filter(|&x| x).count() > n
}

/// Flag-wise strict majority. With per-modality votes the vote is taken per
/// channel and categories are derived from the result.
pub fn majority_vote(ann: &AnnotationSet) -> Result<LabelSet> {
    let n = ann.votes.len();
    if n == 0 {
        return Err(Error::SchemaMismatch(format!("clip {} has no votes", ann.clip_id)));
    }
    if n % 2 == 0 {
        return Err(Error::EvenAnnotatorCount(n));
    }
    let per_modality = ann.votes[0].per_modality.is_some();
    for v in &ann.votes {
        if v.per_modality.is_some() != per_modality || (!per_modality && v.categories.is_none()) {
            return Err(Error::SchemaMismatch(format!(
                "clip {}: vote records differ in shape",
                ann.clip_id
            )));
        }
    }
    if per_modality {
        let mut pm = [[false; 3]; 4];
        for (c, row) in pm.iter_mut().enumerate() {
            for (k, cell) in row.iter_mut().enumerate() {
                *cell = majority(ann.votes.iter().map(|v| v.per_modality.expect("checked")[c][k]), n);
            }
        }
        Ok(LabelSet::from_per_modality(pm))
    } else {
        let mut cats = [false; 4];
        for (c, cell) in cats.iter_mut().enumerate() {
            *cell = majority(ann.votes.iter().map(|v| v.categories.expect("checked")[c]), n);
        }
        Ok(LabelSet::from_categories(cats))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgreementReport {
    /// Kappa of each annotator against the majority vote over every
    /// (clip, category) flag they labelled.
    pub per_annotator: BTreeMap<String, AgreementStats>,
    pub mean_kappa: f64,
    pub clips: usize,
}

pub fn annotation_agreement(sets: &[AnnotationSet]) -> Result<AgreementReport> {
    let mut pairs: BTreeMap<String, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for ann in sets {
        let gold = majority_vote(ann)?.categories;
        for (i, v) in ann.votes.iter().enumerate() {
            let flags = v.category_flags().expect("validated by majority_vote");
            let e = pairs.entry(ann.annotator(i)).or_default();
            e.0.extend(flags);
            e.1.extend(gold);
        }
    }
    if pairs.is_empty() {
        return Err(Error::SchemaMismatch("no annotations".into()));
    }
    let mut per_annotator = BTreeMap::new();
    for (name, (a, b)) in pairs {
        per_annotator.insert(name, cohens_kappa(&a, &b)?);
    }
    let mean_kappa = per_annotator.values().map(|s| s.kappa).sum::<f64>() / per_annotator.len() as f64;
    Ok(AgreementReport {
        per_annotator,
        mean_kappa,
        clips: sets.len(),
    })
}

// ---- partitioning ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    /// Keep all clips of one source video in the same partition.
    pub group_by_video: bool,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            train: 0.65,
            val: 0.10,
            test: 0.25,
            seed: 0,
            group_by_video: true,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "partition ratios must lie in [0, 1] and sum to 1, got {r:?}"
            )));
        }
        Ok(())
    }
}

/// Indices into the input, per partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Partitions {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `total` proportional to `weights`.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn floor_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 1e-9).floor() as usize
}

/// Split items given their `(group, stratum)` keys. Validation and test
/// targets are `floor(n * ratio)`, apportioned across strata; groups are
/// shuffled per stratum and assigned greedily without exceeding a target.
/// Everything left goes to train.
pub fn split_keys(keys: &[(String, String)], spec: &PartitionSpec) -> Result<Partitions> {
    spec.validate()?;
    let n = keys.len();
    // group -> members, in first-appearance order
    let mut group_order: Vec<String> = Vec::new();
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (g, _)) in keys.iter().enumerate() {
        let e = members.entry(g.clone()).or_default();
        if e.is_empty() {
            group_order.push(g.clone());
        }
        e.push(i);
    }
    // a group's stratum is its most common member stratum (ties: smallest)
    let mut strata: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for g in &group_order {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in &members[g] {
            *counts.entry(keys[i].1.as_str()).or_default() += 1;
        }
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(s, _)| s.to_string())
            .expect("non-empty group");
        strata.entry(best).or_default().push(g.clone());
    }
    let sizes: Vec<usize> = strata
        .values()
        .map(|gs| gs.iter().map(|g| members[g].len()).sum())
        .collect();
    let val_t = apportion(floor_count(n, spec.val), &sizes);
    let test_t = apportion(floor_count(n, spec.test), &sizes);
    let mut out = Partitions::default();
    for (si, (name, groups)) in strata.iter().enumerate() {
        let mut groups = groups.clone();
        let mut rng = Stream::new(spec.seed, &format!("split/{name}"));
        rng.shuffle(&mut groups);
        let (mut nv, mut nt) = (0, 0);
        for g in groups {
            let m = &members[&g];
            if nv + m.len() <= val_t[si] && nv < val_t[si] {
                nv += m.len();
                out.val.extend(m);
            } else if nt + m.len() <= test_t[si] && nt < test_t[si] {
                nt += m.len();
                out.test.extend(m);
            } else {
                out.train.extend(m);
            }
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Stratify by binary label (unlabeled clips form their own stratum); group
/// by source video when `spec.group_by_video` is set.
pub fn split_partitions(clips: &[ClipRecord], spec: &PartitionSpec) -> Result<Partitions> {
    let keys: Vec<(String, String)> = clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let group = if spec.group_by_video {
                format!("v:{}", c.source_video_id)
            } else {
                format!("c:{i}")
            };
            let stratum = match c.binary_label() {
                Some(true) => "1",
                Some(false) => "0",
                None => "unlabeled",
            };
            (group, stratum.to_string())
        })
        .collect();
    split_keys(&keys, spec)
}

// ---- statistics ----

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub max: f64,
    pub min: f64,
    pub avg: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[usize]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v: Vec<usize> = values.to_vec();
        v.sort_unstable();
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        };
        Self {
            count: n,
            max: v[n - 1] as f64,
            min: v[0] as f64,
            avg: v.iter().sum::<usize>() as f64 / n as f64,
            median,
        }
    }
}

/// Sequence-length statistics per binary class and category counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsTable {
    /// Keyed by class (`C0`, `C1`) then by feature (`text_timesteps`,
    /// `audio_timesteps`, `video_timesteps`).
    pub classes: BTreeMap<String, BTreeMap<String, Summary>>,
    /// Clips per category, plus `none` for clips with no category.
    pub categories: BTreeMap<String, usize>,
    pub text_sources: BTreeMap<String, usize>,
}

const STAT_FEATURES: [(&str, Modality); 3] = [
    ("text_timesteps", Modality::Text),
    ("audio_timesteps", Modality::Audio),
    ("video_timesteps", Modality::Video),
];

pub fn dataset_stats(clips: &[ClipRecord]) -> Result<StatsTable> {
    let mut lens: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    let mut categories: BTreeMap<String, usize> = Category::ALL.iter().map(|c| (c.name().to_string(), 0)).collect();
    categories.insert("none".into(), 0);
    let mut text_sources: BTreeMap<String, usize> = BTreeMap::new();
    for class in ["C0", "C1"] {
        lens.insert(class.into(), STAT_FEATURES.iter().map(|(f, _)| (f.to_string(), vec![])).collect());
    }
    for c in clips {
        let labels = c.labels.as_ref().ok_or_else(|| Error::NoLabels(c.clip_id.clone()))?;
        let class = if labels.binary { "C1" } else { "C0" };
        for (f, m) in STAT_FEATURES {
            let t = c.sequence(m).map_or(0, |s| s.len());
            lens.get_mut(class).expect("class").get_mut(f).expect("feature").push(t);
        }
        for cat in Category::ALL {
            if labels.category(cat) {
                *categories.get_mut(cat.name()).expect("category") += 1;
            }
        }
        if !labels.categories.iter().any(|&x| x) {
            *categories.get_mut("none").expect("none") += 1;
        }
        let src = match c.text_source {
            TextSource::Subtitle => "subtitle",
            TextSource::Caption => "caption",
            TextSource::None => "none",
        };
        *text_sources.entry(src.into()).or_default() += 1;
    }
    let classes = lens
        .into_iter()
        .map(|(class, feats)| (class, feats.into_iter().map(|(f, v)| (f, Summary::of(&v))).collect()))
        .collect();
    Ok(StatsTable {
        classes,
        categories,
        text_sources,
    })
}

impl StatsTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,feature,count,max,min,avg,median\n");
        for (class, feats) in &self.classes {
            for (f, v) in feats {
                s.push_str(&format!(
                    "{class},{f},{},{},{},{:.4},{}\n",
                    v.count, v.max, v.min, v.avg, v.median
                ));
            }
        }
        s.push_str("\ncategory,clips\n");
        for (c, n) in &self.categories {
            s.push_str(&format!("{c},{n}\n"));
        }
        s
    }
}

impl fmt::Display for StatsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6}{:<18}{:>7}{:>9}{:>9}{:>11}{:>9}",
            "class", "feature", "count", "max", "min", "avg", "median"
        )?;
        for (class, feats) in &self.classes {
            for (name, v) in feats {
                writeln!(
                    f,
                    "{:<6}{:<18}{:>7}{:>9}{:>9}{:>11.2}{:>9}",
                    class, name, v.count, v.max, v.min, v.avg, v.median
                )?;
            }
        }
        writeln!(f)?;
        for (c, n) in &self.categories {
            writeln!(f, "{c:<18}{n:>7}")?;
        }
        Ok(())
    }
}
