//! Per-video feature records, alignment to a fixed horizon, splits, and a
//! synthetic corpus generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{scene_offsets, Emotion, EmotionProbs};
use crate::music::{parse_chord, ChordEvent, ChordVocabulary, Key};
use crate::tensor::Matrix;

pub const DEFAULT_T_MAX: usize = 300;
/// scene offset, motion, six emotion probabilities
pub const NON_SEMANTIC_FEATURES: usize = 8;

/// One video's aligned per-second features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub length_s: usize,
    pub key: Key,
    pub chords: Vec<ChordEvent>,
    pub semantic: Vec<Vec<f64>>,
    pub emotion: Vec<EmotionProbs>,
    pub scene_offset: Vec<u32>,
    pub motion: Vec<f64>,
    pub note_density: Vec<u32>,
    pub loudness: Vec<f64>,
}

impl FeatureRecord {
    pub fn d_sem(&self) -> usize {
        self.semantic.first().map_or(0, Vec::len)
    }

    /// Checks channel lengths, semantic width and value ranges. `d_sem`, when
    /// given, is the dataset-wide semantic width.
    pub fn validate(&self, d_sem: Option<usize>) -> Result<()> {
        let n = self.length_s;
        if n == 0 {
            return Err(Error::schema("length_s", None, "must be at least 1"));
        }
        let lens = [
            ("chords", self.chords.len()),
            ("semantic", self.semantic.len()),
            ("emotion", self.emotion.len()),
            ("scene_offset", self.scene_offset.len()),
            ("motion", self.motion.len()),
            ("note_density", self.note_density.len()),
            ("loudness", self.loudness.len()),
        ];
        for (field, len) in lens {
            if len != n {
                return Err(Error::schema(field, None, format!("length {len} != length_s {n}")));
            }
        }
        let width = d_sem.unwrap_or_else(|| self.d_sem());
        for (t, v) in self.semantic.iter().enumerate() {
            if v.len() != width {
                return Err(Error::schema(
                    "semantic",
                    Some(t),
                    format!("width {} != d_sem {width}", v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::schema("semantic", Some(t), "non-finite value"));
            }
        }
        for (t, e) in self.emotion.iter().enumerate() {
            if e.0.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::schema("emotion", Some(t), "probability outside [0, 1]"));
            }
        }
        for (t, m) in self.motion.iter().enumerate() {
            if !m.is_finite() || *m < 0.0 {
                return Err(Error::schema("motion", Some(t), "must be finite and >= 0"));
            }
        }
        for (t, l) in self.loudness.iter().enumerate() {
            if !(0.0..=1.0).contains(l) {
                return Err(Error::schema("loudness", Some(t), "outside [0, 1]"));
            }
        }
        if !self.key.is_normalized() {
            return Err(Error::schema(
                "key",
                None,
                format!("{} is not C:major or A:minor", self.key),
            ));
        }
        Ok(())
    }
}

pub fn save_record(record: &FeatureRecord, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(record)?)?;
    Ok(())
}

/// Loads and validates a record. Chord strings are parsed with the canonical
/// grammar and errors name the offending index.
pub fn load_record(path: &Path, d_sem: Option<usize>) -> Result<FeatureRecord> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(chords) = value.get("chords").and_then(|c| c.as_array()) {
        for (i, c) in chords.iter().enumerate() {
            let s = c
                .as_str()
                .ok_or_else(|| Error::schema("chords", Some(i), "not a string"))?;
            parse_chord(s).map_err(|e| Error::schema("chords", Some(i), e.to_string()))?;
        }
    }
    let record: FeatureRecord =
        serde_json::from_value(value).map_err(|e| Error::schema("record", None, e.to_string()))?;
    record.validate(d_sem)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub d_sem: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_sem: usize,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self> {
        let d_sem = records
            .first()
            .map(FeatureRecord::d_sem)
            .ok_or_else(|| Error::InvalidInput("dataset is empty".into()))?;
        for r in &records {
            r.validate(Some(d_sem))?;
        }
        Ok(Dataset { d_sem, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn subset(&self, ids: &[String]) -> Dataset {
        Dataset {
            d_sem: self.d_sem,
            records: ids.iter().filter_map(|id| self.get(id).cloned()).collect(),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for r in &self.records {
            save_record(r, &dir.join(format!("{}.json", r.id)))?;
        }
        let manifest = Manifest {
            ids: self.ids(),
            d_sem: self.d_sem,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let records = manifest
            .ids
            .iter()
            .map(|id| load_record(&dir.join(format!("{id}.json")), Some(manifest.d_sem)))
            .collect::<Result<Vec<_>>>()?;
        if records.is_empty() {
            return Err(Error::InvalidInput(format!("{} lists no records", MANIFEST_FILE)));
        }
        Ok(Dataset {
            d_sem: manifest.d_sem,
            records,
        })
    }
}

/// A record clipped or padded to a fixed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedExample {
    pub id: String,
    pub key: Key,
    /// Chord token ids, `PAD` past the real length.
    pub tokens: Vec<usize>,
    pub semantic: Vec<Vec<f64>>,
    pub emotion: Vec<EmotionProbs>,
    pub scene_offset: Vec<f64>,
    pub motion: Vec<f64>,
    pub note_density: Vec<f64>,
    pub loudness: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PaddedExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Per-step `[scene_offset, motion, emotion(6), semantic(d_sem)]` rows.
    pub fn video_features(&self) -> Matrix {
        video_matrix(&self.scene_offset, &self.motion, &self.emotion, &self.semantic)
    }
}

pub fn video_matrix(scene_offset: &[f64], motion: &[f64], emotion: &[EmotionProbs], semantic: &[Vec<f64>]) -> Matrix {
    let n = scene_offset.len();
    let d_sem = semantic.first().map_or(0, Vec::len);
    let mut m = Matrix::zeros(n, NON_SEMANTIC_FEATURES + d_sem);
    for t in 0..n {
        let row = m.row_mut(t);
        row[0] = scene_offset[t];
        row[1] = motion[t];
        row[2..8].copy_from_slice(&emotion[t].0);
        row[8..].copy_from_slice(&semantic[t]);
    }
    m
}

pub fn clip_or_pad(record: &FeatureRecord, t_max: usize) -> PaddedExample {
    let n = record.length_s.min(t_max);
    let d_sem = record.d_sem();
    fn fit<T: Clone>(src: &[T], n: usize, t_max: usize, pad: T) -> Vec<T> {
        let mut v: Vec<T> = src[..n].to_vec();
        v.resize(t_max, pad);
        v
    }
    let tokens: Vec<usize> = record.chords[..n]
        .iter()
        .map(|&c| ChordVocabulary::event_id(c))
        .collect();
    let widen = |v: &[u32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    PaddedExample {
        id: record.id.clone(),
        key: record.key,
        tokens: fit(&tokens, n, t_max, ChordVocabulary::PAD),
        semantic: fit(&record.semantic, n, t_max, vec![0.0; d_sem]),
        emotion: fit(&record.emotion, n, t_max, EmotionProbs::default()),
        scene_offset: fit(&widen(&record.scene_offset), n, t_max, 0.0),
        motion: fit(&record.motion, n, t_max, 0.0),
        note_density: fit(&widen(&record.note_density), n, t_max, 0.0),
        loudness: fit(&record.loudness, n, t_max, 0.0),
        mask: fit(&vec![true; n], n, t_max, false),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (u32, u32, u32),
    pub shuffle_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: (8, 1, 1),
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then `floor(train/total * n)` and `floor(val/total * n)`
/// items with the remainder going to test.
pub fn split_dataset(ids: &[String], spec: &SplitSpec) -> Split {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.shuffle_seed));
    let (a, b, c) = spec.ratios;
    let total = (a + b + c).max(1) as usize;
    let n = shuffled.len();
    let n_train = n * a as usize / total;
    let n_val = n * b as usize / total;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Split {
        train: shuffled,
        val,
        test,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub length_s: usize,
    pub d_sem: usize,
    /// Probability that an emotion segment is neutral.
    pub neutral_rate: f64,
    /// Probability that a chord change ignores the segment's emotion.
    pub off_palette_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            length_s: 30,
            d_sem: 16,
            neutral_rate: 0.1,
            off_palette_rate: 0.04,
        }
    }
}

/// Chords used for each emotion, spelled relative to C major / A minor; each
/// quality belongs to that emotion's row of the emotion/chord-type table.
fn palette(emotion: Emotion) -> &'static [&'static str] {
    match emotion {
        Emotion::Exciting => &["C:maj", "G:dom7", "F:maj", "D:sus4", "G:maj", "C:dom7"],
        Emotion::Fearful => &["B:dim", "D:min7", "G#:dim7", "B:hdim7", "E:min7"],
        Emotion::Tense => &["B:dim", "G:sus4", "E:min7", "E:dom7", "A:sus4"],
        Emotion::Sad => &["A:min", "D:min", "E:min7", "A:min7", "D:sus2"],
        Emotion::Relaxing => &["C:maj7", "F:maj7", "C:maj6", "F:maj", "G:maj"],
        Emotion::Neutral => &["C:maj", "A:min", "F:maj", "G:maj"],
    }
}

const OFF_PALETTE: &[&str] = &["C:aug", "F:min6", "A:maj", "E:maj"];

/// Generates `n` records whose chords follow short diatonic loops drawn from
/// the current emotion's chord types, whose dominant emotion tracks those
/// chord types, and whose note density and loudness follow motion:
/// `density = 3 + 20 * motion + N(0, 1)` (rounded, floored at 0) and
/// `loudness = 0.2 + 0.6 * motion + N(0, 0.03)` (clamped to `[0, 1]`).
pub fn synthesize_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<FeatureRecord>> {
    if n == 0 {
        return Err(Error::InvalidInput("synthesize_dataset needs n >= 1".into()));
    }
    if cfg.length_s == 0 {
        return Err(Error::InvalidInput("synthetic records need length_s >= 1".into()));
    }
    // emotion signature shared by every record: a fixed direction per class
    let mut sig_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_51A7);
    let signatures: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..cfg.d_sem).map(|_| sig_rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            synth_record(&format!("synth_{i:05}"), cfg, &signatures, &mut rng)
        })
        .collect()
}

fn synth_record(id: &str, cfg: &SynthConfig, signatures: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<FeatureRecord> {
    let len = cfg.length_s;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let key = if rng.gen_bool(0.5) { Key::C_MAJOR } else { Key::A_MINOR };

    let mut emotions = Vec::with_capacity(len);
    let mut chords = Vec::with_capacity(len);
    let mut scene_ids = Vec::with_capacity(len);
    let mut scene = 0i64;
    while emotions.len() < len {
        let emotion = if rng.gen_bool(cfg.neutral_rate) {
            Emotion::Neutral
        } else {
            Emotion::ALL[rng.gen_range(0..5)]
        };
        let seg_len = rng.gen_range(4..=8).min(len - emotions.len());
        let pal = palette(emotion);
        // a short loop through the palette, each chord held 1-3 seconds
        let start = rng.gen_range(0..pal.len());
        let step = rng.gen_range(1..pal.len());
        let mut k = 0;
        let mut filled = 0;
        scene += 1;
        while filled < seg_len {
            let name = if rng.gen_bool(cfg.off_palette_rate) {
                OFF_PALETTE[rng.gen_range(0..OFF_PALETTE.len())]
            } else {
                pal[(start + k * step) % pal.len()]
            };
            k += 1;
            let chord = parse_chord(name)?;
            let hold = rng.gen_range(1..=3).min(seg_len - filled);
            for _ in 0..hold {
                chords.push(chord);
                emotions.push(emotion);
                if rng.gen_bool(0.08) {
                    scene += 1;
                }
                scene_ids.push(scene);
            }
            filled += hold;
        }
    }

    let offsets = scene_offsets(&scene_ids);
    let mut motion = Vec::with_capacity(len);
    let mut semantic = Vec::with_capacity(len);
    let mut level = 0.0;
    let mut base: Vec<f64> = Vec::new();
    for t in 0..len {
        if t == 0 || scene_ids[t] != scene_ids[t - 1] {
            level = rng.gen_range(0.0..1.0);
            base = (0..cfg.d_sem).map(|_| 0.5 * unit.sample(rng)).collect();
        }
        motion.push((level + 0.05 * unit.sample(rng)).clamp(0.0, 1.0));
        let sig = &signatures[emotions[t].index()];
        semantic.push(
            (0..cfg.d_sem)
                .map(|d| sig[d] + base[d] + 0.1 * unit.sample(rng))
                .collect(),
        );
    }

    let emotion_probs = emotions
        .iter()
        .map(|&e| {
            let top = rng.gen_range(0.45..0.8);
            let mut rest: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.05..1.0));
            rest[e.index()] = 0.0;
            let s: f64 = rest.iter().sum();
            let mut p: [f64; 6] = std::array::from_fn(|c| rest[c] / s * (1.0 - top));
            p[e.index()] = top;
            EmotionProbs::clamped(p)
        })
        .collect();

    let note_density = motion
        .iter()
        .map(|m| (3.0 + 20.0 * m + unit.sample(rng)).round().max(0.0) as u32)
        .collect();
    let loudness = motion
        .iter()
        .map(|m| (0.2 + 0.6 * m + 0.03 * unit.sample(rng)).clamp(0.0, 1.0))
        .collect();

    let record = FeatureRecord {
        id: id.to_string(),
        length_s: len,
        key,
        chords,
        semantic,
        emotion: emotion_probs,
        scene_offset: offsets,
        motion,
        note_density,
        loudness,
    };
    record.validate(Some(cfg.d_sem))?;
    Ok(record)
}

/// Whether a chord's quality is one the emotion/chord-type table lists for
/// the step's dominant emotion.
pub fn quality_matches_emotion(chord: ChordEvent, emotion: Emotion) -> bool {
    match chord.quality() {
        Some(q) => crate::train::EmotionChordTable::paper().allows(emotion, q),
        None => false,
    }
}

/// Fraction of non-neutral steps whose chord quality fits the dominant emotion.
pub fn emotion_agreement(records: &[FeatureRecord]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for r in records {
        for (c, e) in r.chords.iter().zip(&r.emotion) {
            let dom = e.dominant();
            if dom == Emotion::Neutral {
                continue;
            }
            total += 1;
            hits += quality_matches_emotion(*c, dom) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_record(len: usize) -> FeatureRecord {
        synthesize_dataset(
            1,
            7,
            &SynthConfig {
                length_s: len,
                d_sem: 3,
                ..Default::default()
            },
        )
        .unwrap()
        .remove(0)
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = tiny_record(1);
        let path = dir.path().join("r.json");
        save_record(&r, &path).unwrap();
        assert_eq!(load_record(&path, Some(3)).unwrap(), r);

        let r = tiny_record(40);
        save_record(&r, &path).unwrap();
        assert_eq!(load_record(&path, None).unwrap(), r);
    }

    #[test]
    fn schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");

        let mut r = tiny_record(5);
        r.chords.pop();
        save_record(&r, &path).unwrap();
        match load_record(&path, None) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "chords"),
            other => panic!("{other:?}"),
        }

        let r = tiny_record(5);
        save_record(&r, &path).unwrap();
        assert!(
            matches!(load_record(&path, Some(4)), Err(Error::Schema { field, index: Some(0), .. }) if field == "semantic")
        );

        let text = fs::read_to_string(&path).unwrap();
        let bad = text.replacen(&format!("\"{}\"", r.chords[2]), "\"Q:maj\"", 1);
        fs::write(&path, bad).unwrap();
        match load_record(&path, None) {
            Err(Error::Schema { field, index, reason }) => {
                assert_eq!(field, "chords");
                assert!(index.is_some());
                assert!(reason.contains("Q:maj"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clip_and_pad() {
        let long = clip_or_pad(&tiny_record(400), DEFAULT_T_MAX);
        assert_eq!(long.len(), 300);
        assert!(long.mask.iter().all(|&m| m));

        let short_rec = tiny_record(10);
        let short = clip_or_pad(&short_rec, DEFAULT_T_MAX);
        assert_eq!(short.len(), 300);
        assert_eq!(short.valid_len(), 10);
        assert!(short.mask[..10].iter().all(|&m| m));
        assert!(short.tokens[10..].iter().all(|&t| t == ChordVocabulary::PAD));
        assert!(short.motion[10..].iter().all(|&m| m == 0.0));
        assert!(short.emotion[10..].iter().all(|e| e.0 == [0.0; 6]));

        let exact_rec = tiny_record(300);
        let exact = clip_or_pad(&exact_rec, 300);
        assert_eq!(exact.valid_len(), 300);
        let ids: Vec<usize> = exact_rec.chords.iter().map(|&c| ChordVocabulary::event_id(c)).collect();
        assert_eq!(exact.tokens, ids);
        assert_eq!(exact.motion, exact_rec.motion);
        let v = exact.video_features();
        assert_eq!(v.shape(), (300, 8 + 3));
        assert_eq!(v.get(4, 1), exact_rec.motion[4]);
        assert_eq!(v.get(4, 8 + 2), exact_rec.semantic[4][2]);
    }

    #[test]
    fn split_sizes() {
        let ids = |n: usize| (0..n).map(|i| format!("v{i}")).collect::<Vec<_>>();
        let s = split_dataset(&ids(10), &SplitSpec::default());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(&ids(10), &SplitSpec::default()));
        let s = split_dataset(&ids(748), &SplitSpec::default());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (598, 74, 76));
    }

    #[test]
    fn synthetic_corpus_properties() {
        let cfg = SynthConfig::default();
        assert_eq!(
            synthesize_dataset(1, 0, &cfg).unwrap(),
            synthesize_dataset(1, 0, &cfg).unwrap()
        );
        assert!(synthesize_dataset(0, 0, &cfg).is_err());
        let recs = synthesize_dataset(40, 11, &cfg).unwrap();
        for r in &recs {
            for &c in &r.chords {
                assert!(ChordVocabulary::event_id(c) < ChordVocabulary::SIZE);
                assert_ne!(ChordVocabulary::event_id(c), ChordVocabulary::PAD);
            }
        }
        let agreement = emotion_agreement(&recs);
        assert!(agreement >= 0.9, "agreement {agreement}");
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(synthesize_dataset(3, 2, &SynthConfig::default()).unwrap()).unwrap();
        ds.save_dir(dir.path()).unwrap();
        assert_eq!(Dataset::load_dir(dir.path()).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn splits_partition(n in 1usize..200, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let s = split_dataset(&ids, &SplitSpec { ratios: (8, 1, 1), shuffle_seed: seed });
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            all.sort();
            let mut want = ids.clone();
            want.sort();
            prop_assert_eq!(all, want);
            prop_assert_eq!(s.train.len(), n * 8 / 10);
            prop_assert_eq!(s.val.len(), n / 10);
        }

        #[test]
        fn padding_aligns_channels(len in 1usize..40, t_max in 1usize..50) {
            let r = tiny_record(len);
            let p = clip_or_pad(&r, t_max);
            prop_assert_eq!(p.tokens.len(), t_max);
            prop_assert_eq!(p.semantic.len(), t_max);
            prop_assert_eq!(p.emotion.len(), t_max);
            prop_assert_eq!(p.scene_offset.len(), t_max);
            prop_assert_eq!(p.motion.len(), t_max);
            prop_assert_eq!(p.note_density.len(), t_max);
            prop_assert_eq!(p.loudness.len(), t_max);
            prop_assert_eq!(p.valid_len(), len.min(t_max));
        }
    }
}
