//! Deterministic planted-signal synthetic datasets.
//!
//! Each category is tied to one or more (modality, feature subspace)
//! placements. A clip gets a scalar activation per placement, added to every
//! subspace dimension at every timestep before Gaussian noise; its label is
//! 1 iff the mean activation over the placements exceeds the threshold.
//! Aligned corpora instead embed one latent vector per clip linearly into
//! all three modalities.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::data_model::{Category, ClipRecord, Dims, FeatureSequence, LabelSet, Modality, TextSource};
use crate::error::{Error, Result};
use crate::ingest::write_dataset;
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub modality: Modality,
    /// Feature indices carrying the activation.
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub category: Category,
    pub placements: Vec<Placement>,
    #[serde(default)]
    pub threshold: f64,
    pub strength: f64,
    /// Target fraction of positive clips.
    pub prevalence: f64,
    /// Minimum distance of the mean activation from the threshold, in units
    /// of `strength`. Only used with several independent placements.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Use one activation for every placement instead of independent ones.
    #[serde(default)]
    pub shared: bool,
}

fn default_margin() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub latent_dim: usize,
    /// Scale of the per-modality embedding matrices.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub dims: Dims,
    /// Inclusive `[min, max]` timesteps per modality (text, audio, video).
    pub t_range: [[usize; 2]; 3],
    pub seed: u64,
    pub noise: f64,
    pub signals: Vec<SignalPlan>,
    pub alignment: Option<AlignmentPlan>,
    /// Clips per source video.
    pub clips_per_video: usize,
    /// Fraction of clips whose text is marked as a generated caption.
    pub caption_rate: f64,
    /// Fraction of clips with no text at all.
    pub no_text_rate: f64,
    /// Emit labels (false for pretraining corpora).
    pub labeled: bool,
}

fn place(modality: Modality, start: usize, len: usize) -> Placement {
    Placement {
        modality,
        dims: (start..start + len).collect(),
    }
}

impl Default for SynthSpec {
    /// 768 clips (512/128/128), text 32 / audio 16 / video 24. Sarcasm is
    /// carried by text, gory humor by video, slapstick by audio, and mature
    /// humor jointly by text and audio.
    fn default() -> Self {
        let plan = |category, placements, prevalence| SignalPlan {
            category,
            placements,
            threshold: 0.0,
            strength: 1.0,
            prevalence,
            margin: 0.25,
            shared: false,
        };
        Self {
            n_clips: 768,
            dims: Dims {
                text: 32,
                audio: 16,
                video: 24,
            },
            t_range: [[4, 12]; 3],
            seed: 0,
            noise: 1.0,
            signals: vec![
                plan(
                    Category::MatureHumor,
                    vec![place(Modality::Text, 4, 4), place(Modality::Audio, 4, 4)],
                    0.5,
                ),
                plan(Category::GoryHumor, vec![place(Modality::Video, 0, 4)], 0.3),
                plan(Category::SlapstickHumor, vec![place(Modality::Audio, 0, 4)], 0.35),
                plan(Category::Sarcasm, vec![place(Modality::Text, 0, 4)], 0.4),
            ],
            alignment: None,
            clips_per_video: 4,
            caption_rate: 0.1,
            no_text_rate: 0.0,
            labeled: true,
        }
    }
}

impl SynthSpec {
    /// Every category planted with one shared activation in all three
    /// modalities, so the label signal is also the cross-modal
    /// correspondence. Feature widths are four times the default so that a
    /// small labeled budget cannot easily locate the signal on its own.
    pub fn redundant() -> Self {
        let base = Self {
            dims: Dims {
                text: 128,
                audio: 64,
                video: 96,
            },
            ..Self::default()
        };
        let signals = Category::ALL
            .iter()
            .enumerate()
            .map(|(i, &category)| SignalPlan {
                category,
                placements: Modality::ALL.iter().map(|&m| place(m, 2 * i, 2)).collect(),
                threshold: 0.0,
                strength: 1.0,
                prevalence: [0.5, 0.3, 0.35, 0.4][i],
                margin: 0.25,
                shared: true,
            })
            .collect();
        Self { signals, ..base }
    }

    /// Unlabeled corpus with one latent per clip embedded in every modality.
    pub fn aligned(n_clips: usize, seed: u64) -> Self {
        Self {
            n_clips,
            seed,
            signals: vec![],
            alignment: Some(AlignmentPlan {
                latent_dim: 4,
                scale: 1.0,
            }),
            labeled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (i, r) in self.t_range.iter().enumerate() {
            if r[0] == 0 || r[0] > r[1] {
                return bad(format!("timestep range {i} must satisfy 1 <= min <= max"));
            }
        }
        if !(self.noise >= 0.0) || self.clips_per_video == 0 {
            return bad("noise must be >= 0 and clips_per_video >= 1".into());
        }
        for rate in [self.caption_rate, self.no_text_rate] {
            if !(0.0..=1.0).contains(&rate) || self.caption_rate + self.no_text_rate > 1.0 {
                return bad("text-source rates must lie in [0, 1] and sum to at most 1".into());
            }
        }
        for s in &self.signals {
            if !(s.strength > 0.0) || !(0.0..=1.0).contains(&s.prevalence) || s.placements.is_empty() {
                return bad(format!("{}: need strength > 0, prevalence in [0, 1], a placement", s.category));
            }
            if s.margin < 0.0 || s.margin >= 1.0 {
                return bad(format!("{}: margin must lie in [0, 1)", s.category));
            }
            for p in &s.placements {
                if p.dims.is_empty() || p.dims.iter().any(|&d| d >= self.dims.get(p.modality)) {
                    return bad(format!("{}: subspace outside the {} width", s.category, p.modality));
                }
            }
        }
        if self.no_text_rate > 0.0
            && self
                .signals
                .iter()
                .any(|s| s.placements.iter().any(|p| p.modality == Modality::Text))
        {
            return bad("clips without text cannot carry text signals".into());
        }
        if let Some(a) = &self.alignment {
            if a.latent_dim == 0 || !(a.scale > 0.0) {
                return bad("alignment needs latent_dim >= 1 and scale > 0".into());
            }
        }
        Ok(())
    }
}

/// Draw one category's per-placement activations and its label.
fn draw_activations(plan: &SignalPlan, rng: &mut Stream) -> (Vec<f64>, bool) {
    let label = rng.bernoulli(plan.prevalence);
    let sign = if label { 1.0 } else { -1.0 };
    let k = plan.placements.len();
    if plan.shared || k == 1 {
        let a = plan.threshold + sign * plan.strength * rng.uniform_range(0.5, 1.5);
        return (vec![a; k], label);
    }
    loop {
        let acts: Vec<f64> = (0..k)
            .map(|_| plan.threshold + plan.strength * rng.uniform_range(-1.5, 1.5))
            .collect();
        let mean = acts.iter().sum::<f64>() / k as f64 - plan.threshold;
        if mean * sign >= plan.margin * plan.strength {
            return (acts, label);
        }
    }
}

/// Embedding matrices `latent x D_m` for aligned corpora, fixed by the seed.
pub fn alignment_maps(spec: &SynthSpec) -> Option<[Matrix; 3]> {
    let a = spec.alignment.as_ref()?;
    let mut rng = Stream::new(spec.seed, "synth/alignment");
    Some(Modality::ALL.map(|m| {
        let d = spec.dims.get(m);
        let s = a.scale / (a.latent_dim as f64).sqrt();
        Array2::from_shape_fn((a.latent_dim, d), |_| s * rng.normal())
    }))
}

fn text_source(spec: &SynthSpec, rng: &mut Stream) -> TextSource {
    let u = rng.uniform();
    if u < spec.no_text_rate {
        TextSource::None
    } else if u < spec.no_text_rate + spec.caption_rate {
        TextSource::Caption
    } else {
        TextSource::Subtitle
    }
}

/// Generate clip `i` of a spec. Each clip uses its own derived stream, so
/// clips are independent of generation order.
pub fn generate_clip(spec: &SynthSpec, maps: Option<&[Matrix; 3]>, i: usize) -> ClipRecord {
    let mut rng = Stream::indexed(spec.seed, "synth/clip", i as u64);
    let lens: Vec<usize> = spec
        .t_range
        .iter()
        .map(|r| r[0] + rng.index(r[1] - r[0] + 1))
        .collect();
    let source = text_source(spec, &mut rng);
    let mut feats: Vec<Matrix> = Modality::ALL
        .iter()
        .map(|&m| Array2::zeros((lens[m.index()], spec.dims.get(m))))
        .collect();

    let mut categories = [false; 4];
    for plan in &spec.signals {
        let (acts, label) = draw_activations(plan, &mut rng);
        let mean = acts.iter().sum::<f64>() / acts.len() as f64;
        categories[plan.category.index()] = mean > plan.threshold;
        debug_assert_eq!(categories[plan.category.index()], label);
        for (p, a) in plan.placements.iter().zip(&acts) {
            let f = &mut feats[p.modality.index()];
            for mut row in f.rows_mut() {
                for &d in &p.dims {
                    row[d] += a;
                }
            }
        }
    }
    if let (Some(maps), Some(al)) = (maps, &spec.alignment) {
        let z = Array2::from_shape_fn((1, al.latent_dim), |_| rng.normal());
        for m in Modality::ALL {
            let e = z.dot(&maps[m.index()]);
            for mut row in feats[m.index()].rows_mut() {
                row += &e.row(0);
            }
        }
    }
    if spec.noise > 0.0 {
        for f in &mut feats {
            f.mapv_inplace(|x| x + spec.noise * rng.normal());
        }
    }
    let mut it = feats.into_iter();
    let text_m = it.next().expect("text");
    let audio_m = it.next().expect("audio");
    let video_m = it.next().expect("video");
    ClipRecord {
        clip_id: format!("clip_{i:05}"),
        source_video_id: format!("video_{:05}", i / spec.clips_per_video),
        text: (source != TextSource::None).then(|| FeatureSequence::from_matrix(Modality::Text, &text_m)),
        text_source: source,
        audio: FeatureSequence::from_matrix(Modality::Audio, &audio_m),
        video: FeatureSequence::from_matrix(Modality::Video, &video_m),
        labels: spec.labeled.then(|| LabelSet::from_categories(categories)),
    }
}

pub fn generate_records(spec: &SynthSpec) -> Result<Vec<ClipRecord>> {
    spec.validate()?;
    let maps = alignment_maps(spec);
    Ok((0..spec.n_clips)
        .map(|i| generate_clip(spec, maps.as_ref(), i))
        .collect())
}

/// Generate a dataset and write it under `dir`; returns the manifest path.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let clips = generate_records(spec)?;
    let path = write_dataset(dir, &spec.dims, &clips)?;
    let spec_path = dir.join("synth_spec.json");
    let json = serde_json::to_string_pretty(spec).map_err(|e| Error::json("synth spec", e))?;
    std::fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;
    Ok(path)
}

/// Unlabeled aligned corpus written under `dir`.
pub fn generate_aligned_corpus(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    if spec.alignment.is_none() {
        return Err(Error::Config("aligned corpus needs an alignment plan".into()));
    }
    generate(spec, dir)
}

/// Contiguous `(train, val, test)` split of generated records.
pub fn split_counts(clips: Vec<ClipRecord>, counts: [usize; 2]) -> (Vec<ClipRecord>, Vec<ClipRecord>, Vec<ClipRecord>) {
    let mut train = clips;
    let n = train.len();
    let test = train.split_off(n.saturating_sub(counts[1]));
    let n = train.len();
    let val = train.split_off(n.saturating_sub(counts[0]));
    (train, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::validate_clip;

    fn small(n: usize) -> SynthSpec {
        SynthSpec {
            n_clips: n,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_records(&small(20)).unwrap();
        let b = generate_records(&small(20)).unwrap();
        assert_eq!(a, b);
        for c in &a {
            assert!(validate_clip(c, &SynthSpec::default().dims).is_empty());
            assert!((4..=12).contains(&c.audio.len()));
        }
        let other = generate_records(&SynthSpec { seed: 1, ..small(20) }).unwrap();
        assert_ne!(a, other);
        assert_eq!(a[7].source_video_id, "video_00001");
    }

    #[test]
    fn noiseless_labels_follow_signal() {
        let spec = SynthSpec {
            noise: 0.0,
            ..small(50)
        };
        for c in generate_records(&spec).unwrap() {
            let l = c.labels.as_ref().unwrap();
            let text = c.text.as_ref().unwrap().to_matrix();
            assert_eq!(l.category(Category::Sarcasm), text[[0, 0]] > 0.0);
            assert_eq!(l.category(Category::GoryHumor), c.video.to_matrix()[[0, 0]] > 0.0);
            let joint = text[[0, 4]] + c.audio.to_matrix()[[0, 4]];
            assert_eq!(l.category(Category::MatureHumor), joint > 0.0);
            assert!(joint.abs() / 2.0 >= 0.25 - 1e-6);
            // untouched dimensions stay zero
            assert_eq!(c.video.to_matrix()[[0, 10]], 0.0);
        }
    }

    #[test]
    fn aligned_zero_noise_is_linear_image() {
        let spec = SynthSpec {
            noise: 0.0,
            ..SynthSpec::aligned(5, 3)
        };
        let maps = alignment_maps(&spec).unwrap();
        for c in generate_records(&spec).unwrap() {
            assert!(c.labels.is_none());
            let a = c.audio.to_matrix();
            // all rows equal one latent times the map: solve on audio, check video
            let rows_equal = a.rows().into_iter().all(|r| r == a.row(0));
            assert!(rows_equal);
            let v = c.video.to_matrix();
            assert_eq!(v.ncols(), maps[2].ncols());
        }
    }

    #[test]
    fn bad_generator_settings_rejected() {
        let mut s = SynthSpec::default();
        s.signals[0].placements[0].dims = vec![99];
        assert!(s.validate().is_err());
        let s = SynthSpec {
            no_text_rate: 0.5,
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
        let s = SynthSpec {
            t_range: [[0, 3], [1, 1], [1, 1]],
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn contiguous_split() {
        let (tr, va, te) = split_counts(generate_records(&small(10)).unwrap(), [2, 3]);
        assert_eq!((tr.len(), va.len(), te.len()), (5, 2, 3));
        assert_eq!(te[0].clip_id, "clip_00007");
    }
}
