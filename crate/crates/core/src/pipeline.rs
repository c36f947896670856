//! End-to-end pieces shared by the command-line tool and the tests: model
//! checkpoints, evaluation reports, and chords-to-MIDI composition.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::dataset::{video_matrix, FeatureRecord};
use crate::error::{Error, Result};
use crate::expressive::{apply_velocities, arpeggiate, density_to_level};
use crate::features::{Emotion, EmotionProbs, NoteEvent};
use crate::metrics::ConfusionMatrices;
use crate::midi::render_midi;
use crate::model::{AmtModel, Decoding, GenerationConstraints, ModelConfig};
use crate::music::{ChordEvent, Key};
use crate::regressor::Regressor;
use crate::tensor::Matrix;
use crate::train::{emotion_loss, prepare, teacher_forced_hits, Adam, EmotionChordTable, OptimizerSpec, Resume};

pub const MODEL_KIND: &str = "amt";

/// Video-side channels of a record. Parses full feature records too (their
/// music fields are ignored unless they are the optional expressive ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFeatures {
    pub id: String,
    pub length_s: usize,
    pub semantic: Vec<Vec<f64>>,
    pub emotion: Vec<EmotionProbs>,
    pub scene_offset: Vec<u32>,
    pub motion: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note_density: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loudness: Option<Vec<f64>>,
}

impl VideoFeatures {
    pub fn from_record(r: &FeatureRecord) -> Self {
        VideoFeatures {
            id: r.id.clone(),
            length_s: r.length_s,
            semantic: r.semantic.clone(),
            emotion: r.emotion.clone(),
            scene_offset: r.scene_offset.clone(),
            motion: r.motion.clone(),
            note_density: Some(r.note_density.clone()),
            loudness: Some(r.loudness.clone()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: VideoFeatures = serde_json::from_str(&text)?;
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.length_s;
        let check = |field: &'static str, len: usize| {
            if len != n {
                Err(Error::Schema {
                    field: field.into(),
                    index: None,
                    reason: format!("length {len} != length_s {n}"),
                })
            } else {
                Ok(())
            }
        };
        if n == 0 {
            return Err(Error::InvalidInput("video features need length_s >= 1".into()));
        }
        check("semantic", self.semantic.len())?;
        check("emotion", self.emotion.len())?;
        check("scene_offset", self.scene_offset.len())?;
        check("motion", self.motion.len())?;
        if let Some(d) = &self.note_density {
            check("note_density", d.len())?;
        }
        if let Some(l) = &self.loudness {
            check("loudness", l.len())?;
        }
        let d_sem = self.semantic[0].len();
        if let Some(i) = self.semantic.iter().position(|s| s.len() != d_sem) {
            return Err(Error::Schema {
                field: "semantic".into(),
                index: Some(i),
                reason: format!("width {} != {d_sem}", self.semantic[i].len()),
            });
        }
        Ok(())
    }

    pub fn d_sem(&self) -> usize {
        self.semantic.first().map_or(0, Vec::len)
    }

    /// Feature rows for the first `min(length_s, t_max)` seconds.
    pub fn matrix(&self, t_max: usize) -> Matrix {
        let n = self.length_s.min(t_max);
        let offsets: Vec<f64> = self.scene_offset[..n].iter().map(|&v| v as f64).collect();
        video_matrix(&offsets, &self.motion[..n], &self.emotion[..n], &self.semantic[..n])
    }
}

pub fn model_checkpoint(model: &AmtModel, optimizer: Option<&Adam>, epochs_done: usize) -> Result<Checkpoint> {
    let meta = json!({
        "epochs_done": epochs_done,
        "optimizer_steps": optimizer.map_or(0, Adam::steps_taken),
        "optimizer": optimizer.map(|a| serde_json::to_value(a.spec())).transpose()?,
    });
    let mut ck = Checkpoint::new(MODEL_KIND, serde_json::to_value(model.config())?, meta);
    ck.extend_params("param.", model.params());
    if let Some(adam) = optimizer {
        let (m, v) = adam.state();
        for ((name, _), (m, v)) in model.params().iter().zip(m.iter().zip(v)) {
            ck.push(format!("opt.m.{name}"), m.clone());
            ck.push(format!("opt.v.{name}"), v.clone());
        }
    }
    Ok(ck)
}

/// The model plus, when the checkpoint carries optimizer state, what is
/// needed to resume training.
pub fn load_model_checkpoint(ck: &Checkpoint) -> Result<(AmtModel, Option<Resume>)> {
    ck.expect_kind(MODEL_KIND)?;
    let config: ModelConfig = serde_json::from_value(ck.config.clone())?;
    let model = AmtModel::from_params(config, &ck.params("param."))?;
    let epochs_done = ck.meta["epochs_done"].as_u64().unwrap_or(0) as usize;
    let resume = match ck.meta.get("optimizer") {
        Some(spec) if !spec.is_null() => {
            let spec: OptimizerSpec = serde_json::from_value(spec.clone())?;
            let steps = ck.meta["optimizer_steps"].as_u64().unwrap_or(0) as usize;
            let m_store = ck.params("opt.m.");
            let v_store = ck.params("opt.v.");
            let collect = |store: &crate::autograd::ParamStore| -> Result<Vec<Matrix>> {
                model
                    .params()
                    .iter()
                    .map(|(name, _)| {
                        store
                            .find(name)
                            .map(|id| store.get(id).clone())
                            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))
                    })
                    .collect()
            };
            let mut adam = Adam::new(spec, model.params());
            adam.restore(steps, collect(&m_store)?, collect(&v_store)?)?;
            Some(Resume {
                epochs_done,
                optimizer: adam,
            })
        }
        _ => None,
    };
    Ok((model, resume))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub steps: usize,
    /// Teacher-forced Hits@1, @3, @5.
    pub hits: [f64; 3],
    /// Emotion loss on teacher-forced logits.
    pub affective_loss_teacher_forced: f64,
    /// Emotion loss on the logits each free-running step was chosen from.
    pub affective_loss_free_running: f64,
    /// Share of non-neutral free-running steps whose chord quality fits the
    /// video emotion.
    pub emotion_match_free_running: f64,
    /// Chord and root grids from teacher-forced argmax predictions; quality
    /// grid from free-running generations.
    pub confusion: ConfusionMatrices,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "steps={}\nhits@1={:.4}\nhits@3={:.4}\nhits@5={:.4}\naffective_loss_teacher_forced={:.4}\naffective_loss_free_running={:.4}\nemotion_match_free_running={:.4}\n",
            self.steps,
            self.hits[0],
            self.hits[1],
            self.hits[2],
            self.affective_loss_teacher_forced,
            self.affective_loss_free_running,
            self.emotion_match_free_running
        )
    }

    pub fn write_confusion(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("confusion_chord.csv"), self.confusion.chord.to_csv())?;
        std::fs::write(dir.join("confusion_root.csv"), self.confusion.root.to_csv())?;
        std::fs::write(dir.join("confusion_quality.csv"), self.confusion.quality.to_csv())?;
        Ok(())
    }
}

/// Fraction of non-neutral steps whose chord quality is in the emotion row.
pub fn emotion_match(chords: &[ChordEvent], emotion: &[EmotionProbs], table: &EmotionChordTable) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (c, e) in chords.iter().zip(emotion) {
        let d = e.dominant();
        if d == Emotion::Neutral {
            continue;
        }
        total += 1;
        if c.quality().is_some_and(|q| table.allows(d, q)) {
            hits += 1;
        }
    }
    (hits, total)
}

pub fn evaluate_model(
    model: &AmtModel,
    records: &[FeatureRecord],
    t_max: usize,
    constraints: &GenerationConstraints,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let table = EmotionChordTable::paper();
    let prepared: Vec<_> = records.iter().map(|r| prepare(r, t_max, &table)).collect();
    let hits = teacher_forced_hits(model, &prepared)?;
    let mut confusion = ConfusionMatrices::empty();
    let (mut tf_sum, mut free_sum, mut active_steps) = (0.0, 0.0, 0usize);
    let (mut match_hits, mut match_total, mut steps) = (0, 0, 0);
    for ex in &prepared {
        let n = ex.targets.len();
        steps += n;
        let valid = vec![true; n];
        let tf = model.logits(&ex.decoder_input, ex.example.key, &ex.video, &valid)?;
        let generated = model.generate(&ex.video, ex.example.key, &[], constraints, Decoding::Greedy)?;
        let active = ex.emotion_active.iter().filter(|&&a| a).count();
        tf_sum += emotion_loss(&tf, &ex.emotion_targets, &ex.emotion_active)? * active as f64;
        free_sum += emotion_loss(&generated.logits, &ex.emotion_targets, &ex.emotion_active)? * active as f64;
        active_steps += active;
        let argmax: Vec<ChordEvent> = (0..n)
            .map(|t| crate::music::ChordVocabulary::event(tf.argmax_row(t)).unwrap_or(ChordEvent::Silence))
            .collect();
        let reference: Vec<ChordEvent> = ex
            .targets
            .iter()
            .map(|&id| crate::music::ChordVocabulary::event(id))
            .collect::<Result<_>>()?;
        let mut tf_grid = ConfusionMatrices::empty();
        tf_grid.accumulate(&argmax, &reference, &ex.example.emotion, &table)?;
        let mut free_grid = ConfusionMatrices::empty();
        free_grid.accumulate(&generated.chords, &reference, &ex.example.emotion, &table)?;
        add_grid(&mut confusion.chord.counts, &tf_grid.chord.counts);
        add_grid(&mut confusion.root.counts, &tf_grid.root.counts);
        add_grid(&mut confusion.quality.counts, &free_grid.quality.counts);
        let (h, t) = emotion_match(&generated.chords, &ex.example.emotion, &table);
        match_hits += h;
        match_total += t;
    }
    let per_active = |s: f64| {
        if active_steps == 0 {
            0.0
        } else {
            s / active_steps as f64
        }
    };
    Ok(EvalReport {
        steps,
        hits,
        affective_loss_teacher_forced: per_active(tf_sum),
        affective_loss_free_running: per_active(free_sum),
        emotion_match_free_running: if match_total == 0 {
            0.0
        } else {
            match_hits as f64 / match_total as f64
        },
        confusion,
    })
}

fn add_grid(acc: &mut [Vec<u64>], other: &[Vec<u64>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Where per-second density and loudness come from when composing.
pub enum ExpressiveSource<'a> {
    Regressor(&'a Regressor),
    GroundTruth,
}

#[derive(Debug, Clone)]
pub struct Song {
    /// One chord per second in the requested key.
    pub chords: Vec<ChordEvent>,
    pub note_density: Vec<f64>,
    pub loudness: Vec<f64>,
    pub levels: Vec<u8>,
    pub notes: Vec<NoteEvent>,
    pub midi: Vec<u8>,
}

impl Song {
    pub fn chord_text(&self) -> String {
        self.chords.iter().map(|c| format!("{c}\n")).collect()
    }
}

/// Chords plus per-second density/loudness to arpeggiated, velocity-mapped
/// MIDI.
pub fn render_song(chords: Vec<ChordEvent>, note_density: Vec<f64>, loudness: Vec<f64>) -> Result<Song> {
    if note_density.len() != chords.len() || loudness.len() != chords.len() {
        return Err(Error::Shape(format!(
            "{} chords, {} density values, {} loudness values",
            chords.len(),
            note_density.len(),
            loudness.len()
        )));
    }
    let levels: Vec<u8> = note_density.iter().map(|&d| density_to_level(d)).collect();
    let mut notes = arpeggiate(&chords, &levels)?;
    apply_velocities(&mut notes, &loudness)?;
    let midi = render_midi(&notes)?;
    Ok(Song {
        chords,
        note_density,
        loudness,
        levels,
        notes,
        midi,
    })
}

/// Generates chords for the video in `key` (the model works in C major /
/// A minor, so the primer is transposed in and the result back out), then
/// renders them.
pub fn compose(
    model: &AmtModel,
    video: &VideoFeatures,
    key: Key,
    primer: &[ChordEvent],
    constraints: &GenerationConstraints,
    expressive: ExpressiveSource<'_>,
    t_max: usize,
) -> Result<Song> {
    video.validate()?;
    if video.d_sem() != model.config().d_sem {
        return Err(Error::Shape(format!(
            "features have d_sem {}, the checkpoint expects {}",
            video.d_sem(),
            model.config().d_sem
        )));
    }
    let features = video.matrix(t_max.min(model.config().max_len));
    let n = features.rows();
    let shift = key.normalizing_shift();
    let normalized_key = key.transpose(shift);
    let primer: Vec<ChordEvent> = primer.iter().map(|c| c.transpose(shift)).collect();
    let generated = model.generate(&features, normalized_key, &primer, constraints, Decoding::Greedy)?;
    let chords: Vec<ChordEvent> = generated.chords.iter().map(|c| c.transpose(-shift)).collect();
    let (density, loudness) = match expressive {
        ExpressiveSource::Regressor(reg) => {
            let p = reg.predict(&features)?;
            (p.note_density, p.loudness)
        }
        ExpressiveSource::GroundTruth => {
            let missing =
                || Error::InvalidInput("ground-truth mode needs note_density and loudness in the features".into());
            let d = video.note_density.as_ref().ok_or_else(missing)?;
            let l = video.loudness.as_ref().ok_or_else(missing)?;
            (d[..n].iter().map(|&v| v as f64).collect(), l[..n].to_vec())
        }
    };
    render_song(chords, density, loudness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_dataset, SynthConfig};
    use crate::music::parse_progression;
    use crate::train::{train, TrainConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_rel_dist: 8,
            ..ModelConfig::small(4)
        }
    }

    fn records() -> Vec<FeatureRecord> {
        synthesize_dataset(
            3,
            2,
            &SynthConfig {
                d_sem: 4,
                length_s: 10,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let recs = records();
        let mut model = AmtModel::new(tiny(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            deterministic: true,
            ..Default::default()
        };
        let out = train(&mut model, &recs, &[], &cfg, None, |_| {}).unwrap();
        let ck = model_checkpoint(&model, Some(&out.optimizer), out.epochs_done).unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let (loaded, resume) = load_model_checkpoint(&ck).unwrap();
        assert_eq!(loaded.params(), model.params());
        let resume = resume.unwrap();
        assert_eq!(resume.epochs_done, 2);

        // resuming for one epoch equals training three epochs straight
        let mut resumed = loaded;
        let more = TrainConfig { epochs: 1, ..cfg };
        let log = train(&mut resumed, &recs, &[], &more, Some(resume), |_| {})
            .unwrap()
            .log;
        assert_eq!(log[0].epoch, 3);
        let mut straight = AmtModel::new(tiny(), 0).unwrap();
        train(
            &mut straight,
            &recs,
            &[],
            &TrainConfig { epochs: 3, ..cfg },
            None,
            |_| {},
        )
        .unwrap();
        assert_eq!(straight.params(), resumed.params());
    }

    #[test]
    fn compose_honours_primer_and_key() {
        let recs = records();
        let model = AmtModel::new(tiny(), 1).unwrap();
        let video = VideoFeatures::from_record(&recs[0]);
        let primer = parse_progression("C Am F G").unwrap();
        let c = GenerationConstraints::default();
        let song = compose(
            &model,
            &video,
            Key::C_MAJOR,
            &primer,
            &c,
            ExpressiveSource::GroundTruth,
            300,
        )
        .unwrap();
        assert_eq!(song.chords.len(), 10);
        assert_eq!(
            song.chords[..4].iter().map(|c| c.to_string()).collect::<Vec<_>>(),
            ["C:maj", "A:min", "F:maj", "G:maj"]
        );
        let d_major = compose(
            &model,
            &video,
            "D:major".parse().unwrap(),
            &parse_progression("D Bm").unwrap(),
            &c,
            ExpressiveSource::GroundTruth,
            300,
        )
        .unwrap();
        // same normalized primer, so the output is the C-major song moved up a tone
        let again = compose(
            &model,
            &video,
            Key::C_MAJOR,
            &parse_progression("C Am").unwrap(),
            &c,
            ExpressiveSource::GroundTruth,
            300,
        )
        .unwrap();
        for (a, b) in d_major.chords.iter().zip(&again.chords) {
            assert_eq!(*a, b.transpose(2));
        }
        let again2 = compose(
            &model,
            &video,
            Key::C_MAJOR,
            &parse_progression("C Am").unwrap(),
            &c,
            ExpressiveSource::GroundTruth,
            300,
        )
        .unwrap();
        assert_eq!(again.midi, again2.midi);
    }

    #[test]
    fn evaluation_report_is_consistent() {
        let recs = records();
        let model = AmtModel::new(tiny(), 2).unwrap();
        let report = evaluate_model(&model, &recs, 300, &GenerationConstraints::default()).unwrap();
        assert_eq!(report.steps, 30);
        assert!(report.hits[0] <= report.hits[1] && report.hits[1] <= report.hits[2]);
        assert_eq!(report.confusion.chord.total(), 30);
        // chord-grid row sums are the reference token frequencies
        let mut freq = vec![0u64; 159];
        for r in &recs {
            for c in &r.chords {
                freq[crate::music::ChordVocabulary::event_id(*c)] += 1;
            }
        }
        assert_eq!(report.confusion.chord.row_sums(), freq);
    }

    #[test]
    fn video_features_parse_record_files() {
        let recs = records();
        let text = serde_json::to_string(&recs[0]).unwrap();
        let v: VideoFeatures = serde_json::from_str(&text).unwrap();
        assert_eq!(v, VideoFeatures::from_record(&recs[0]));
        let mut bad = v.clone();
        bad.motion.pop();
        assert!(bad.validate().is_err());
    }
}
