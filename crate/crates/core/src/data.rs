//! Dataset container, JSONL reader/writer, batch sampling and the synthetic generator.
//!
//! File format, one JSON object per line:
//!
//! ```text
//! {"kind":"class","id":0,"pos":"V","label":"pick"}
//! {"kind":"video","id":"v0","features":[0.1,0.2]}
//! {"kind":"caption","id":"c0","video":"v0","text":"pick flowerpot","verbs":[0],"nouns":[3]}
//! {"kind":"split","name":"train","ids":["v0"]}
//! ```
//!
//! Captions may carry an optional `features` array; when every caption omits it
//! the caption feature is the bag-of-class indicator over verbs then nouns.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::semantics::{
    aggregate_profiles, CaptionAnnotation, ClassId, LexiconTagger, PartOfSpeech, SemanticProfile,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class: ClassId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: Vec<f64>,
    /// Indices into [`Dataset::captions`], in file order.
    pub captions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub annotation: CaptionAnnotation,
    pub features: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    classes: Vec<ClassEntry>,
    videos: Vec<Video>,
    captions: Vec<Caption>,
    /// Video indices per split.
    splits: BTreeMap<Split, Vec<usize>>,
    class_slots: HashMap<ClassId, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Class {
        id: u32,
        pos: PartOfSpeech,
        label: String,
    },
    Video {
        id: String,
        features: Vec<f64>,
    },
    Caption {
        id: String,
        video: String,
        text: String,
        verbs: Vec<u32>,
        nouns: Vec<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        features: Option<Vec<f64>>,
    },
    Split {
        name: Split,
        ids: Vec<String>,
    },
}

/// Bag-of-class slot order: verbs by id, then nouns by id.
fn class_slots(classes: &[ClassEntry]) -> HashMap<ClassId, usize> {
    let mut ids: Vec<ClassId> = classes.iter().map(|c| c.class).collect();
    ids.sort();
    ids.into_iter().enumerate().map(|(slot, c)| (c, slot)).collect()
}

impl Dataset {
    /// Validates records tagged with their source line (0 for generated data).
    fn build(records: Vec<(usize, Record)>) -> Result<Self> {
        let mut classes = Vec::new();
        let mut class_seen = HashSet::new();
        let mut videos: Vec<Video> = Vec::new();
        let mut video_index: HashMap<String, usize> = HashMap::new();
        let mut pending_captions = Vec::new();
        let mut pending_splits = Vec::new();

        for (line, record) in records {
            match record {
                Record::Class { id, pos, label } => {
                    let class = ClassId { id, pos };
                    if !class_seen.insert(class) {
                        return Err(Error::DuplicateId { line, kind: "class", id: format!("{pos}{id}") });
                    }
                    classes.push(ClassEntry { class, label });
                }
                Record::Video { id, features } => {
                    if let Some(first) = videos.first() {
                        if first.features.len() != features.len() {
                            return Err(Error::DimensionMismatch { line, expected: first.features.len(), found: features.len() });
                        }
                    }
                    if features.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Parse { line, msg: format!("video '{id}' has non-finite features") });
                    }
                    if video_index.insert(id.clone(), videos.len()).is_some() {
                        return Err(Error::DuplicateId { line, kind: "video", id });
                    }
                    videos.push(Video { id, features, captions: Vec::new() });
                }
                Record::Caption { id, video, text, verbs, nouns, features } => {
                    pending_captions.push((line, id, video, text, verbs, nouns, features));
                }
                Record::Split { name, ids } => pending_splits.push((line, name, ids)),
            }
        }

        let mut captions: Vec<Caption> = Vec::new();
        let mut caption_seen = HashSet::new();
        let mut caption_dim: Option<Option<usize>> = None;
        for (line, id, video, text, verbs, nouns, features) in pending_captions {
            if !caption_seen.insert(id.clone()) {
                return Err(Error::DuplicateId { line, kind: "caption", id });
            }
            let &v = video_index
                .get(&video)
                .ok_or_else(|| Error::DanglingReference { line, kind: "video", id: video.clone() })?;
            for &c in &verbs {
                if !class_seen.contains(&ClassId::verb(c)) {
                    return Err(Error::DanglingReference { line, kind: "verb class", id: c.to_string() });
                }
            }
            for &c in &nouns {
                if !class_seen.contains(&ClassId::noun(c)) {
                    return Err(Error::DanglingReference { line, kind: "noun class", id: c.to_string() });
                }
            }
            let dim = features.as_ref().map(Vec::len);
            match caption_dim {
                None => caption_dim = Some(dim),
                Some(expected) if expected != dim => {
                    return Err(Error::DimensionMismatch {
                        line,
                        expected: expected.unwrap_or(0),
                        found: dim.unwrap_or(0),
                    });
                }
                _ => {}
            }
            if features.as_ref().is_some_and(|f| f.iter().any(|v| !v.is_finite())) {
                return Err(Error::Parse { line, msg: format!("caption '{id}' has non-finite features") });
            }
            videos[v].captions.push(captions.len());
            captions.push(Caption {
                annotation: CaptionAnnotation {
                    caption_id: id,
                    video_id: video,
                    text,
                    profile: SemanticProfile::new(verbs, nouns),
                },
                features,
            });
        }

        if let Some(v) = videos.iter().find(|v| v.captions.is_empty()) {
            return Err(Error::invalid(format!("video '{}' has no captions", v.id)));
        }

        let mut splits = BTreeMap::new();
        let mut assigned: HashMap<usize, Split> = HashMap::new();
        for (line, name, ids) in pending_splits {
            if splits.contains_key(&name) {
                return Err(Error::DuplicateId { line, kind: "split", id: name.to_string() });
            }
            let mut members = Vec::with_capacity(ids.len());
            for id in ids {
                let &v = video_index
                    .get(&id)
                    .ok_or_else(|| Error::DanglingReference { line, kind: "video", id: id.clone() })?;
                if let Some(prev) = assigned.insert(v, name) {
                    return Err(Error::invalid(format!(
                        "line {line}: video '{id}' appears in both {prev} and {name} splits"
                    )));
                }
                members.push(v);
            }
            splits.insert(name, members);
        }

        let class_slots = class_slots(&classes);
        Ok(Self { classes, videos, captions, splits, class_slots })
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn captions(&self) -> &[Caption] {
        &self.captions
    }

    pub fn video_dim(&self) -> usize {
        self.videos.first().map_or(0, |v| v.features.len())
    }

    pub fn text_dim(&self) -> usize {
        match self.captions.first().and_then(|c| c.features.as_ref()) {
            Some(f) => f.len(),
            None => self.classes.len(),
        }
    }

    /// Video indices of a split; empty when the file declares no such split.
    pub fn split(&self, split: Split) -> &[usize] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn caption_features(&self, caption: usize) -> Cow<'_, [f64]> {
        let c = &self.captions[caption];
        match &c.features {
            Some(f) => Cow::Borrowed(f),
            None => {
                let mut bag = vec![0.0; self.classes.len()];
                for class in c.annotation.profile.classes() {
                    bag[self.class_slots[&class]] = 1.0;
                }
                Cow::Owned(bag)
            }
        }
    }

    /// Aggregated class profile of every video.
    pub fn video_profiles(&self, rho: f64) -> Result<Vec<SemanticProfile>> {
        self.videos
            .iter()
            .map(|v| {
                let profiles: Vec<&SemanticProfile> =
                    v.captions.iter().map(|&c| &self.captions[c].annotation.profile).collect();
                aggregate_profiles(&profiles, rho)
            })
            .collect()
    }

    pub fn tagger(&self) -> LexiconTagger {
        LexiconTagger::new(self.classes.iter().map(|c| (c.label.as_str(), c.class)))
    }

    /// Stacks video features for the given indices into rows.
    pub fn video_matrix(&self, videos: &[usize]) -> Matrix {
        let d = self.video_dim();
        let mut m = Matrix::zeros(videos.len(), d);
        for (r, &v) in videos.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&self.videos[v].features);
        }
        m
    }

    /// Stacks caption features for the given indices into rows.
    pub fn caption_matrix(&self, captions: &[usize]) -> Matrix {
        let d = self.text_dim();
        let mut m = Matrix::zeros(captions.len(), d);
        for (r, &c) in captions.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&self.caption_features(c));
        }
        m
    }

    fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for c in &self.classes {
            out.push(Record::Class { id: c.class.id, pos: c.class.pos, label: c.label.clone() });
        }
        for v in &self.videos {
            out.push(Record::Video { id: v.id.clone(), features: v.features.clone() });
        }
        for c in &self.captions {
            let a = &c.annotation;
            out.push(Record::Caption {
                id: a.caption_id.clone(),
                video: a.video_id.clone(),
                text: a.text.clone(),
                verbs: a.profile.verb_ids().iter().copied().collect(),
                nouns: a.profile.noun_ids().iter().copied().collect(),
                features: c.features.clone(),
            });
        }
        for (name, members) in &self.splits {
            out.push(Record::Split {
                name: *name,
                ids: members.iter().map(|&v| self.videos[v].id.clone()).collect(),
            });
        }
        out
    }

    /// A stable fingerprint of everything a checkpoint depends on: feature
    /// dimensions and the class vocabulary.
    pub fn schema_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!("video_dim={};text_dim={};", self.video_dim(), self.text_dim()));
        let mut ids: Vec<ClassId> = self.classes.iter().map(|c| c.class).collect();
        ids.sort();
        for c in ids {
            h.update(format!("{}{},", c.pos, c.id));
        }
        hex::encode(h.finalize())
    }
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        records.push((line_no, record));
    }
    Dataset::build(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for record in dataset.records() {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(dataset, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One training pair: `(video index, caption index)`.
pub type Pair = (usize, usize);

/// How a multi-caption video picks the caption it is paired with each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionPairing {
    #[default]
    Uniform,
    First,
}

/// Seeded epoch-by-epoch shuffler over the videos of one split.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    videos: Vec<usize>,
    batch_size: usize,
    pairing: CaptionPairing,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, split: Split, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch size must be >= 2, got {batch_size}")));
        }
        let videos = dataset.split(split).to_vec();
        if videos.is_empty() {
            return Err(Error::invalid(format!("split '{split}' is empty")));
        }
        Ok(Self { videos, batch_size, pairing: CaptionPairing::default(), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn with_pairing(mut self, pairing: CaptionPairing) -> Self {
        self.pairing = pairing;
        self
    }

    /// Shuffles the split and cuts it into batches; the last batch may be short.
    pub fn next_epoch(&mut self, dataset: &Dataset) -> Vec<Vec<Pair>> {
        let mut order = self.videos.clone();
        order.shuffle(&mut self.rng);
        let pairs: Vec<Pair> = order
            .into_iter()
            .map(|v| {
                let caps = &dataset.videos[v].captions;
                let c = match self.pairing {
                    CaptionPairing::Uniform => *caps.choose(&mut self.rng).expect("videos have captions"),
                    CaptionPairing::First => caps[0],
                };
                (v, c)
            })
            .collect();
        pairs.chunks(self.batch_size).map(<[Pair]>::to_vec).collect()
    }
}

/// One epoch of batches for `split`.
pub fn sample_batches(dataset: &Dataset, split: Split, batch_size: usize, seed: u64) -> Result<Vec<Vec<Pair>>> {
    Ok(BatchSampler::new(dataset, split, batch_size, seed)?.next_epoch(dataset))
}

/// Parameters of the synthetic generator.
///
/// Each video gets `verbs_per_item` verb classes and `nouns_per_item` noun
/// classes. Every class slot reuses, with probability `overlap_rate`, a class
/// already given to an earlier video; otherwise it takes a class no video has
/// used yet. Captions keep each of their video's classes with probability
/// `caption_keep` (at least one per non-empty part of speech).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub captions_per_video: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub verbs_per_item: usize,
    pub nouns_per_item: usize,
    pub overlap_rate: f64,
    pub caption_keep: f64,
    pub feature_dim: usize,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_videos: 512,
            n_val: 128,
            n_test: 256,
            captions_per_video: 2,
            n_verbs: 8,
            n_nouns: 20,
            verbs_per_item: 1,
            nouns_per_item: 2,
            overlap_rate: 0.9,
            caption_keep: 0.75,
            feature_dim: 64,
            feature_noise_sigma: 0.2,
            seed: 2022,
        }
    }
}

impl SyntheticConfig {
    /// Named presets for the command line.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "default" => Ok(base),
            "small" => Ok(Self { n_videos: 96, n_val: 32, n_test: 32, ..base }),
            "disjoint" => Ok(Self {
                n_videos: 64,
                n_val: 16,
                n_test: 16,
                captions_per_video: 1,
                n_verbs: 96,
                n_nouns: 192,
                overlap_rate: 0.0,
                ..base
            }),
            other => Err(Error::InvalidConfig(format!("unknown synthetic preset '{other}'"))),
        }
    }

    pub fn total_videos(&self) -> usize {
        self.n_videos + self.n_val + self.n_test
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_videos == 0 || self.captions_per_video == 0 || self.feature_dim == 0 {
            return bad("n_videos, captions_per_video and feature_dim must be >= 1".into());
        }
        if self.n_verbs == 0 || self.n_nouns == 0 {
            return bad("vocabulary sizes must be >= 1".into());
        }
        if self.verbs_per_item + self.nouns_per_item == 0 {
            return bad("items need at least one class".into());
        }
        if self.verbs_per_item > self.n_verbs || self.nouns_per_item > self.n_nouns {
            return bad(format!(
                "vocabulary ({} verbs, {} nouns) too small for {} verbs and {} nouns per item",
                self.n_verbs, self.n_nouns, self.verbs_per_item, self.nouns_per_item
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) || !(0.0..=1.0).contains(&self.caption_keep) {
            return bad("overlap_rate and caption_keep must lie in [0, 1]".into());
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return bad("feature_noise_sigma must be >= 0".into());
        }
        if self.overlap_rate == 0.0 {
            let n = self.total_videos();
            if n * self.verbs_per_item > self.n_verbs || n * self.nouns_per_item > self.n_nouns {
                return bad(format!("vocabulary too small to give {n} videos disjoint classes"));
            }
        }
        Ok(())
    }
}

fn draw_classes(
    k: usize,
    vocab: usize,
    used: &mut Vec<u32>,
    overlap_rate: f64,
    rng: &mut ChaCha8Rng,
) -> BTreeSet<u32> {
    let mut chosen = BTreeSet::new();
    while chosen.len() < k {
        let reusable: Vec<u32> = used.iter().copied().filter(|c| !chosen.contains(c)).collect();
        let fresh_left = vocab - used.len();
        let reuse = !reusable.is_empty() && (fresh_left == 0 || rng.random_bool(overlap_rate));
        if reuse {
            chosen.insert(*reusable.choose(rng).expect("non-empty"));
        } else {
            let unused: Vec<u32> = (0..vocab as u32).filter(|c| !used.contains(c)).collect();
            let c = *unused.choose(rng).expect("fresh classes remain");
            used.push(c);
            chosen.insert(c);
        }
    }
    chosen
}

fn keep_subset(classes: &BTreeSet<u32>, keep: f64, rng: &mut ChaCha8Rng) -> BTreeSet<u32> {
    let mut kept: BTreeSet<u32> = classes.iter().copied().filter(|_| rng.random_bool(keep)).collect();
    if kept.is_empty() {
        if let Some(&c) = classes.iter().collect::<Vec<_>>().choose(rng) {
            kept.insert(*c);
        }
    }
    kept
}

/// Generates a seeded dataset whose caption semantics and video features share
/// the same latent class sets.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = config.n_verbs + config.n_nouns;

    // Feature direction per class: one-hot when the feature space is wide enough,
    // otherwise a random unit vector.
    let directions: Vec<Vec<f64>> = (0..vocab)
        .map(|slot| {
            if config.feature_dim >= vocab {
                let mut v = vec![0.0; config.feature_dim];
                v[slot] = 1.0;
                v
            } else {
                let v: Vec<f64> = (0..config.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            }
        })
        .collect();

    let mut records = Vec::new();
    for id in 0..config.n_verbs as u32 {
        records.push(Record::Class { id, pos: PartOfSpeech::Verb, label: format!("verb_{id}") });
    }
    for id in 0..config.n_nouns as u32 {
        records.push(Record::Class { id, pos: PartOfSpeech::Noun, label: format!("noun_{id}") });
    }

    let mut used_verbs = Vec::new();
    let mut used_nouns = Vec::new();
    let mut video_ids = Vec::new();
    let mut captions = Vec::new();
    for v in 0..config.total_videos() {
        let verbs = draw_classes(config.verbs_per_item, config.n_verbs, &mut used_verbs, config.overlap_rate, &mut rng);
        let nouns = draw_classes(config.nouns_per_item, config.n_nouns, &mut used_nouns, config.overlap_rate, &mut rng);

        let mut features: Vec<f64> = (0..config.feature_dim)
            .map(|_| config.feature_noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let slots = verbs.iter().map(|&c| c as usize).chain(nouns.iter().map(|&c| config.n_verbs + c as usize));
        for slot in slots {
            for (f, d) in features.iter_mut().zip(&directions[slot]) {
                *f += d;
            }
        }
        let video_id = format!("vid{v:04}");
        records.push(Record::Video { id: video_id.clone(), features });

        for k in 0..config.captions_per_video {
            let (cv, cn) = if config.captions_per_video == 1 {
                (verbs.clone(), nouns.clone())
            } else {
                (keep_subset(&verbs, config.caption_keep, &mut rng), keep_subset(&nouns, config.caption_keep, &mut rng))
            };
            let text = cv
                .iter()
                .map(|c| format!("verb_{c}"))
                .chain(cn.iter().map(|c| format!("noun_{c}")))
                .collect::<Vec<_>>()
                .join(" ");
            captions.push(Record::Caption {
                id: format!("{video_id}_c{k}"),
                video: video_id.clone(),
                text,
                verbs: cv.into_iter().collect(),
                nouns: cn.into_iter().collect(),
                features: None,
            });
        }
        video_ids.push(video_id);
    }
    records.extend(captions);

    let (train, rest) = video_ids.split_at(config.n_videos);
    let (val, test) = rest.split_at(config.n_val);
    for (name, ids) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
        if !ids.is_empty() {
            records.push(Record::Split { name, ids: ids.to_vec() });
        }
    }
    Dataset::build(records.into_iter().map(|r| (0, r)).collect())
}
