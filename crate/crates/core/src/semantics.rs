//! Verb/noun class profiles and the relevance function between captions and videos.
//!
//! Relevance is the mean of the verb-class and noun-class Jaccard indices of two
//! profiles. Videos with several captions get a profile built from the classes
//! that appear in at least `rho * |captions|` of them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartOfSpeech {
    #[serde(rename = "V")]
    Verb,
    #[serde(rename = "N")]
    Noun,
}

impl fmt::Display for PartOfSpeech {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartOfSpeech::Verb => write!(f, "V"),
            PartOfSpeech::Noun => write!(f, "N"),
        }
    }
}

/// A verb or noun class. Verb and noun ids live in separate namespaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId {
    pub id: u32,
    pub pos: PartOfSpeech,
}

impl ClassId {
    pub fn verb(id: u32) -> Self {
        Self { id, pos: PartOfSpeech::Verb }
    }

    pub fn noun(id: u32) -> Self {
        Self { id, pos: PartOfSpeech::Noun }
    }
}

/// Value used for a Jaccard term when both class sets are empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EmptyJaccard {
    #[default]
    One,
    Zero,
}

impl EmptyJaccard {
    fn value(self) -> f64 {
        match self {
            EmptyJaccard::One => 1.0,
            EmptyJaccard::Zero => 0.0,
        }
    }
}

/// Verb-class and noun-class sets of a caption or video.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticProfile {
    verbs: BTreeSet<u32>,
    nouns: BTreeSet<u32>,
}

impl SemanticProfile {
    pub fn new<V, N>(verbs: V, nouns: N) -> Self
    where
        V: IntoIterator<Item = u32>,
        N: IntoIterator<Item = u32>,
    {
        Self { verbs: verbs.into_iter().collect(), nouns: nouns.into_iter().collect() }
    }

    /// Builds a profile from mixed class ids, routing each by its part of speech.
    pub fn from_classes<I: IntoIterator<Item = ClassId>>(classes: I) -> Self {
        let mut profile = Self::default();
        for c in classes {
            profile.insert(c);
        }
        profile
    }

    pub fn insert(&mut self, class: ClassId) -> bool {
        match class.pos {
            PartOfSpeech::Verb => self.verbs.insert(class.id),
            PartOfSpeech::Noun => self.nouns.insert(class.id),
        }
    }

    pub fn verb_ids(&self) -> &BTreeSet<u32> {
        &self.verbs
    }

    pub fn noun_ids(&self) -> &BTreeSet<u32> {
        &self.nouns
    }

    pub fn verbs(&self) -> BTreeSet<ClassId> {
        self.verbs.iter().map(|&id| ClassId::verb(id)).collect()
    }

    pub fn nouns(&self) -> BTreeSet<ClassId> {
        self.nouns.iter().map(|&id| ClassId::noun(id)).collect()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.verbs
            .iter()
            .map(|&id| ClassId::verb(id))
            .chain(self.nouns.iter().map(|&id| ClassId::noun(id)))
    }

    pub fn contains(&self, class: ClassId) -> bool {
        match class.pos {
            PartOfSpeech::Verb => self.verbs.contains(&class.id),
            PartOfSpeech::Noun => self.nouns.contains(&class.id),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty() && self.nouns.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionAnnotation {
    pub caption_id: String,
    pub video_id: String,
    pub text: String,
    pub profile: SemanticProfile,
}

/// Semantic relevance in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Relevance(f64);

impl Relevance {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::invalid(format!("relevance {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn jaccard_ids(a: &BTreeSet<u32>, b: &BTreeSet<u32>, empty: EmptyJaccard) -> f64 {
    if a.is_empty() && b.is_empty() {
        return empty.value();
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

fn single_pos(set: &BTreeSet<ClassId>) -> Result<Option<PartOfSpeech>> {
    let mut pos = None;
    for c in set {
        match pos {
            None => pos = Some(c.pos),
            Some(p) if p != c.pos => {
                return Err(Error::invalid("class set mixes verbs and nouns"));
            }
            _ => {}
        }
    }
    Ok(pos)
}

/// Jaccard index `|a ∩ b| / |a ∪ b|` of two single-part-of-speech class sets.
pub fn class_jaccard(
    a: &BTreeSet<ClassId>,
    b: &BTreeSet<ClassId>,
    empty: EmptyJaccard,
) -> Result<f64> {
    match (single_pos(a)?, single_pos(b)?) {
        (Some(pa), Some(pb)) if pa != pb => {
            return Err(Error::invalid("class sets have different parts of speech"));
        }
        _ => {}
    }
    if a.is_empty() && b.is_empty() {
        return Ok(empty.value());
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Relevance under an explicit empty-set convention.
pub fn relevance_with(x: &SemanticProfile, y: &SemanticProfile, empty: EmptyJaccard) -> Relevance {
    let verbs = jaccard_ids(&x.verbs, &y.verbs, empty);
    let nouns = jaccard_ids(&x.nouns, &y.nouns, empty);
    Relevance(0.5 * (verbs + nouns))
}

pub fn relevance(x: &SemanticProfile, y: &SemanticProfile) -> Relevance {
    relevance_with(x, y, EmptyJaccard::default())
}

/// Profile of a video from its captions: classes present in at least
/// `rho * captions.len()` captions, per part of speech.
pub fn aggregate_video_profile(captions: &[CaptionAnnotation], rho: f64) -> Result<SemanticProfile> {
    let first = captions
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty caption list"))?;
    if captions.iter().any(|c| c.video_id != first.video_id) {
        return Err(Error::invalid("captions belong to different videos"));
    }
    let profiles: Vec<&SemanticProfile> = captions.iter().map(|c| &c.profile).collect();
    aggregate_profiles(&profiles, rho)
}

/// Same threshold rule as [`aggregate_video_profile`] over bare profiles.
pub fn aggregate_profiles(profiles: &[&SemanticProfile], rho: f64) -> Result<SemanticProfile> {
    if profiles.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty caption list"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho {rho} outside (0, 1]")));
    }
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for p in profiles {
        for c in p.classes() {
            *counts.entry(c).or_default() += 1;
        }
    }
    let threshold = rho * profiles.len() as f64;
    Ok(SemanticProfile::from_classes(
        counts.into_iter().filter(|&(_, n)| n as f64 >= threshold).map(|(c, _)| c),
    ))
}

/// Entry `(i, j)` is `relevance(anchors[i], candidates[j])`.
pub fn relevance_matrix(
    anchors: &[SemanticProfile],
    candidates: &[SemanticProfile],
    empty: EmptyJaccard,
) -> Result<Matrix> {
    if anchors.is_empty() || candidates.is_empty() {
        return Err(Error::invalid("relevance matrix needs non-empty anchors and candidates"));
    }
    let mut m = Matrix::zeros(anchors.len(), candidates.len());
    for (i, a) in anchors.iter().enumerate() {
        for (j, c) in candidates.iter().enumerate() {
            m.set(i, j, relevance_with(a, c, empty).value());
        }
    }
    Ok(m)
}

/// Exact-match tagger: every whitespace token equal to a class label maps to that class.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    lexicon: HashMap<String, ClassId>,
}

impl LexiconTagger {
    pub fn new<'a, I>(entries: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, ClassId)>,
    {
        Self {
            lexicon: entries.into_iter().map(|(label, c)| (label.to_lowercase(), c)).collect(),
        }
    }

    pub fn tag(&self, text: &str) -> SemanticProfile {
        SemanticProfile::from_classes(
            text.split(|ch: char| !ch.is_alphanumeric() && ch != '_')
                .filter(|t| !t.is_empty())
                .filter_map(|t| self.lexicon.get(&t.to_lowercase()).copied()),
        )
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Classes for the flowerpot example: verbs pick=0, pot=1, put=2;
    // nouns flowerpot=0, sunflower=1, lily=2, cake=3, oven=4.
    fn x1() -> SemanticProfile {
        SemanticProfile::new([0], [0, 1])
    }
    fn x2() -> SemanticProfile {
        SemanticProfile::new([0], [1, 0])
    }
    fn x3() -> SemanticProfile {
        SemanticProfile::new([1], [2, 0])
    }
    fn x4() -> SemanticProfile {
        SemanticProfile::new([2], [3, 4])
    }

    fn verbs(ids: &[u32]) -> BTreeSet<ClassId> {
        ids.iter().map(|&i| ClassId::verb(i)).collect()
    }

    fn caption(video: &str, verbs: &[u32], nouns: &[u32]) -> CaptionAnnotation {
        CaptionAnnotation {
            caption_id: format!("{video}-{verbs:?}-{nouns:?}"),
            video_id: video.into(),
            text: String::new(),
            profile: SemanticProfile::new(verbs.iter().copied(), nouns.iter().copied()),
        }
    }

    #[test]
    fn jaccard_examples() {
        let e = EmptyJaccard::One;
        assert_eq!(class_jaccard(&verbs(&[1, 2]), &verbs(&[1, 2]), e).unwrap(), 1.0);
        assert_eq!(class_jaccard(&verbs(&[1]), &verbs(&[2]), e).unwrap(), 0.0);
        assert_eq!(class_jaccard(&verbs(&[1, 2]), &verbs(&[2, 3]), e).unwrap(), 1.0 / 3.0);
        assert_eq!(class_jaccard(&verbs(&[]), &verbs(&[]), e).unwrap(), 1.0);
        assert_eq!(class_jaccard(&verbs(&[]), &verbs(&[]), EmptyJaccard::Zero).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_rejects_mixed_pos() {
        let mixed: BTreeSet<_> = [ClassId::verb(0), ClassId::noun(1)].into();
        assert!(matches!(
            class_jaccard(&mixed, &verbs(&[0]), EmptyJaccard::One),
            Err(Error::InvalidInput(_))
        ));
        let nouns: BTreeSet<_> = [ClassId::noun(0)].into();
        assert!(class_jaccard(&nouns, &verbs(&[0]), EmptyJaccard::One).is_err());
    }

    #[test]
    fn flowerpot_example() {
        assert_eq!(relevance(&x1(), &x2()).value(), 1.0);
        assert!((relevance(&x1(), &x3()).value() - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(relevance(&x1(), &x4()).value(), 0.0);
    }

    #[test]
    fn matrix_examples() {
        let m = relevance_matrix(&[x1()], &[x1()], EmptyJaccard::One).unwrap();
        assert_eq!(m.as_slice(), &[1.0]);
        let m = relevance_matrix(&[x1()], &[x2(), x3(), x4()], EmptyJaccard::One).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert!((m.get(0, 1) - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.get(0, 2), 0.0);
        assert!(relevance_matrix(&[], &[x1()], EmptyJaccard::One).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let single = [caption("v", &[3], &[1, 2])];
        for rho in [0.01, 0.25, 0.5, 1.0] {
            assert_eq!(aggregate_video_profile(&single, rho).unwrap(), single[0].profile);
        }

        // class 9 appears in exactly one of four captions: 1 >= 0.25 * 4
        let four = [
            caption("v", &[0], &[9]),
            caption("v", &[0], &[1]),
            caption("v", &[0], &[1]),
            caption("v", &[0], &[1]),
        ];
        let p = aggregate_video_profile(&four, 0.25).unwrap();
        assert!(p.contains(ClassId::noun(9)));

        // class 9 in 4 of 20 captions: 4 < 0.25 * 20
        let twenty: Vec<_> = (0..20)
            .map(|i| if i < 4 { caption("v", &[0], &[9]) } else { caption("v", &[0], &[1]) })
            .collect();
        let p = aggregate_video_profile(&twenty, 0.25).unwrap();
        assert!(!p.contains(ClassId::noun(9)));
        assert!(p.contains(ClassId::noun(1)));
    }

    #[test]
    fn aggregation_errors() {
        assert!(aggregate_video_profile(&[], 0.25).is_err());
        let mixed = [caption("a", &[0], &[]), caption("b", &[0], &[])];
        assert!(aggregate_video_profile(&mixed, 0.25).is_err());
        assert!(aggregate_video_profile(&mixed[..1], 0.0).is_err());
    }

    #[test]
    fn tagger_maps_labels() {
        let tagger = LexiconTagger::new([
            ("pick", ClassId::verb(0)),
            ("flowerpot", ClassId::noun(0)),
            ("sunflower", ClassId::noun(1)),
            ("helianthus", ClassId::noun(1)),
        ]);
        let a = tagger.tag("pick up a flowerpot and a sunflower");
        let b = tagger.tag("Pick an helianthus and a flowerpot");
        assert_eq!(a, x1());
        assert_eq!(relevance(&a, &b).value(), 1.0);
    }

    fn profile_strategy() -> impl Strategy<Value = SemanticProfile> {
        (
            proptest::collection::btree_set(0u32..6, 0..4),
            proptest::collection::btree_set(0u32..8, 0..5),
        )
            .prop_map(|(v, n)| SemanticProfile::new(v, n))
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(x in profile_strategy(), y in profile_strategy()) {
            let a = relevance(&x, &y).value();
            let b = relevance(&y, &x).value();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(relevance(&x, &x).value(), 1.0);
        }

        #[test]
        fn monotone_under_shared_and_private_additions(
            x in profile_strategy(),
            y in profile_strategy(),
            noun in 100u32..110,
        ) {
            let base = relevance(&x, &y).value();
            let mut xs = x.clone();
            let mut ys = y.clone();
            xs.insert(ClassId::noun(noun));
            ys.insert(ClassId::noun(noun));
            prop_assert!(relevance(&xs, &ys).value() >= base);

            let mut xp = x.clone();
            xp.insert(ClassId::noun(noun));
            prop_assert!(relevance(&xp, &y).value() <= base);
        }

        #[test]
        fn aggregation_limits(
            profiles in proptest::collection::vec(profile_strategy(), 1..6),
        ) {
            let refs: Vec<&SemanticProfile> = profiles.iter().collect();
            let union = SemanticProfile::from_classes(profiles.iter().flat_map(|p| p.classes()));
            prop_assert_eq!(aggregate_profiles(&refs, 1e-9).unwrap(), union);

            let all = SemanticProfile::from_classes(
                profiles[0].classes().filter(|c| profiles.iter().all(|p| p.contains(*c))),
            );
            prop_assert_eq!(aggregate_profiles(&refs, 1.0).unwrap(), all);
        }

        #[test]
        fn matrix_matches_scalar(
            a in proptest::collection::vec(profile_strategy(), 8),
            b in proptest::collection::vec(profile_strategy(), 8),
        ) {
            let m = relevance_matrix(&a, &b, EmptyJaccard::One).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    prop_assert_eq!(m.get(i, j), relevance(&a[i], &b[j]).value());
                }
            }
        }
    }
}
