//! Losses, the emotion/chord-type table, the optimizer schedule and the
//! teacher-forced training loop.

use std::fmt::Write as _;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::dataset::{clip_or_pad, FeatureRecord, PaddedExample};
use crate::error::{Error, Result};
use crate::features::{Emotion, EmotionProbs};
use crate::metrics::hits_at_k;
use crate::model::{AmtModel, Pass};
use crate::music::{ChordQuality, ChordVocabulary};
use crate::tensor::Matrix;

/// Which chord qualities each of the five non-neutral emotions is paired with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionChordTable {
    cells: [[bool; ChordQuality::COUNT]; 5],
}

impl EmotionChordTable {
    pub fn paper() -> Self {
        use ChordQuality::*;
        let rows: [(Emotion, &[ChordQuality]); 5] = [
            (Emotion::Exciting, &[Maj, Sus4, Dom7]),
            (Emotion::Fearful, &[Dim, Min7, Dim7, Hdim7]),
            (Emotion::Tense, &[Dim, Sus4, Min7, Dom7]),
            (Emotion::Sad, &[Min7, Min, Sus2]),
            (Emotion::Relaxing, &[Maj, Maj6, Maj7]),
        ];
        let mut cells = [[false; ChordQuality::COUNT]; 5];
        for (emotion, qualities) in rows {
            for q in qualities {
                cells[emotion.index()][q.index()] = true;
            }
        }
        EmotionChordTable { cells }
    }

    pub fn allows(&self, emotion: Emotion, quality: ChordQuality) -> bool {
        match emotion {
            Emotion::Neutral => false,
            e => self.cells[e.index()][quality.index()],
        }
    }

    /// The row for `emotion` in quality-index order; empty for neutral.
    pub fn qualities(&self, emotion: Emotion) -> Vec<ChordQuality> {
        ChordQuality::ALL
            .into_iter()
            .filter(|&q| self.allows(emotion, q))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.4 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        let w = LossWeights { lambda };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidInput(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

pub fn total_loss(chord: f64, emo: f64, w: LossWeights) -> f64 {
    w.lambda * chord + (1.0 - w.lambda) * emo
}

/// Plain chord cross-entropy: mean over unmasked steps.
pub fn chord_loss(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<f64> {
    check_rows(logits, targets.len(), mask.len())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for t in (0..targets.len()).filter(|&t| mask[t]) {
        let target = targets[t];
        if target >= logits.cols() {
            return Err(Error::TokenOutOfRange(target));
        }
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += log_norm - row[target];
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("chord loss over an all-masked sequence".into()));
    }
    Ok(total / n as f64)
}

/// Multi-hot target over the vocabulary for one step, or `None` when the
/// dominant emotion is neutral.
pub fn emotion_target(emotion: &EmotionProbs, table: &EmotionChordTable) -> Option<Vec<f64>> {
    let dominant = emotion.dominant();
    if dominant == Emotion::Neutral {
        return None;
    }
    let mut y = vec![0.0; ChordVocabulary::SIZE];
    for (id, slot) in y.iter_mut().enumerate() {
        if let Some(q) = ChordVocabulary::quality_of(id) {
            if table.allows(dominant, q) {
                *slot = 1.0;
            }
        }
    }
    Some(y)
}

/// Target matrix and activity mask for a sequence of steps; `mask` marks
/// real (non-pad) steps.
pub fn emotion_targets(emotion: &[EmotionProbs], mask: &[bool], table: &EmotionChordTable) -> (Matrix, Vec<bool>) {
    let mut targets = Matrix::zeros(emotion.len(), ChordVocabulary::SIZE);
    let mut active = vec![false; emotion.len()];
    for (t, e) in emotion.iter().enumerate() {
        if !mask[t] {
            continue;
        }
        if let Some(y) = emotion_target(e, table) {
            targets.row_mut(t).copy_from_slice(&y);
            active[t] = true;
        }
    }
    (targets, active)
}

/// Mean over active steps of the per-token binary cross-entropy averaged
/// across the vocabulary; zero when nothing is active.
pub fn emotion_loss(logits: &Matrix, targets: &Matrix, active: &[bool]) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    check_rows(logits, active.len(), active.len())?;
    let n = active.iter().filter(|&&a| a).count();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in (0..active.len()).filter(|&t| active[t]) {
        for (&x, &y) in logits.row(t).iter().zip(targets.row(t)) {
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
    }
    Ok(total / (n * logits.cols()) as f64)
}

fn check_rows(m: &Matrix, a: usize, b: usize) -> Result<()> {
    if m.rows() != a || m.rows() != b {
        return Err(Error::Shape(format!(
            "{} logit rows for {a} targets / {b} mask entries",
            m.rows()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            base_lr: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 4000,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let open = |b: f64| b > 0.0 && b < 1.0;
        if !open(self.beta1) || !open(self.beta2) {
            return Err(Error::InvalidInput("betas must lie in (0, 1)".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.warmup_steps == 0 || self.eps <= 0.0 {
            return Err(Error::InvalidInput(
                "base_lr, eps and warmup_steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Step size at 1-based `step`: linear warmup then inverse-square-root
    /// decay, scaled by `base_lr / sqrt(d_model)`.
    pub fn learning_rate(&self, step: usize, d_model: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.base_lr * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

/// Adam state over every tensor in a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    spec: OptimizerSpec,
    step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(spec: OptimizerSpec, params: &ParamStore) -> Self {
        let zeros = |(_, p): (&str, &Matrix)| Matrix::zeros(p.rows(), p.cols());
        Adam {
            spec,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    /// Restores moments and step count saved alongside a checkpoint.
    pub fn restore(&mut self, step: usize, m: Vec<Matrix>, v: Vec<Matrix>) -> Result<()> {
        let same =
            |a: &[Matrix], b: &[Matrix]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update with the given learning rate.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Matrix], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.spec.beta1, self.spec.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.spec.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub t_max: usize,
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    pub loss: LossWeights,
    /// Zero the wall-clock column so logs are reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 1,
            t_max: crate::dataset::DEFAULT_T_MAX,
            seed: 0,
            optimizer: OptimizerSpec::default(),
            loss: LossWeights::default(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.t_max == 0 {
            return Err(Error::InvalidInput("batch_size and t_max must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub chord_loss: f64,
    pub emotion_loss: f64,
    pub total_loss: f64,
    pub val_hits: Option<[f64; 3]>,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub const HEADER: &'static str =
        "# epoch,chord_loss,emotion_loss,total_loss,val_hits@1,val_hits@3,val_hits@5,wall_seconds";

    pub fn line(&self) -> String {
        let mut s = format!(
            "{},{:.6},{:.6},{:.6}",
            self.epoch, self.chord_loss, self.emotion_loss, self.total_loss
        );
        match self.val_hits {
            Some(h) => {
                for v in h {
                    let _ = write!(s, ",{v:.4}");
                }
            }
            None => s.push_str(",na,na,na"),
        }
        let _ = write!(s, ",{:.3}", self.wall_seconds);
        s
    }
}

/// A clipped example with its decoder input, targets and emotion targets
/// prepared once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub example: PaddedExample,
    pub video: Matrix,
    pub decoder_input: Vec<usize>,
    pub targets: Vec<usize>,
    pub emotion_targets: Rc<Matrix>,
    pub emotion_active: Vec<bool>,
}

/// Clips to `t_max` and drops padding: pad steps are masked out of every
/// loss and attention, so leaving them off changes no value.
pub fn prepare(record: &FeatureRecord, t_max: usize, table: &EmotionChordTable) -> Prepared {
    let padded = clip_or_pad(record, t_max);
    let n = padded.valid_len();
    let mut example = padded;
    example.tokens.truncate(n);
    example.semantic.truncate(n);
    example.emotion.truncate(n);
    example.scene_offset.truncate(n);
    example.motion.truncate(n);
    example.note_density.truncate(n);
    example.loudness.truncate(n);
    example.mask.truncate(n);
    let video = example.video_features();
    let mut decoder_input = Vec::with_capacity(n);
    decoder_input.push(ChordVocabulary::SOS);
    decoder_input.extend_from_slice(&example.tokens[..n.saturating_sub(1)]);
    let (targets, active) = emotion_targets(&example.emotion, &example.mask, table);
    Prepared {
        targets: example.tokens.clone(),
        video,
        decoder_input,
        emotion_targets: Rc::new(targets),
        emotion_active: active,
        example,
    }
}

/// Graph nodes for the losses of one example.
pub struct LossNodes {
    pub logits: Var,
    pub chord: Var,
    pub emotion: Var,
    pub total: Var,
}

pub fn loss_graph(
    model: &AmtModel,
    tape: &mut Tape,
    ex: &Prepared,
    weights: LossWeights,
    pass: &mut Pass,
) -> Result<LossNodes> {
    let valid = vec![true; ex.video.rows()];
    let logits = model.forward(tape, &ex.decoder_input, ex.example.key, &ex.video, &valid, pass)?;
    let chord = tape.cross_entropy(logits, ex.targets.clone(), vec![1.0; ex.targets.len()]);
    let emotion = tape.bce_with_logits(logits, Rc::clone(&ex.emotion_targets), ex.emotion_active.clone());
    let a = tape.scale(chord, weights.lambda);
    let b = tape.scale(emotion, 1.0 - weights.lambda);
    let total = tape.add(a, b);
    Ok(LossNodes {
        logits,
        chord,
        emotion,
        total,
    })
}

/// Teacher-forced Hits@1/3/5 pooled over every step of every example.
pub fn teacher_forced_hits(model: &AmtModel, examples: &[Prepared]) -> Result<[f64; 3]> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for ex in examples {
        let valid = vec![true; ex.video.rows()];
        let z = model.logits(&ex.decoder_input, ex.example.key, &ex.video, &valid)?;
        for t in 0..z.rows() {
            rows.push(z.row(t).to_vec());
        }
        targets.extend_from_slice(&ex.targets);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("no steps to score".into()));
    }
    let m = Matrix::from_rows(&rows);
    Ok([
        hits_at_k(&m, &targets, 1)?,
        hits_at_k(&m, &targets, 3)?,
        hits_at_k(&m, &targets, 5)?,
    ])
}

/// Where training resumes from.
#[derive(Debug, Clone)]
pub struct Resume {
    pub epochs_done: usize,
    pub optimizer: Adam,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub optimizer: Adam,
    pub epochs_done: usize,
}

/// Teacher-forced training. The callback sees each epoch's log entry as it
/// is produced.
pub fn train(
    model: &mut AmtModel,
    train_set: &[FeatureRecord],
    val_set: &[FeatureRecord],
    cfg: &TrainConfig,
    resume: Option<Resume>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let table = EmotionChordTable::paper();
    let train_ex: Vec<Prepared> = train_set.iter().map(|r| prepare(r, cfg.t_max, &table)).collect();
    let val_ex: Vec<Prepared> = val_set.iter().map(|r| prepare(r, cfg.t_max, &table)).collect();
    let (mut adam, start) = match resume {
        Some(r) => (r.optimizer, r.epochs_done),
        None => (Adam::new(cfg.optimizer, model.params()), 0),
    };
    let d_model = model.config().d_model;
    let dropout = model.config().dropout;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in start + 1..=start + cfg.epochs {
        // one stream per epoch so a resumed run matches an uninterrupted one
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_chord, mut sum_emo, mut sum_total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<Vec<Matrix>> = None;
            for &i in batch {
                let ex = &train_ex[i];
                let tape_grads = {
                    let mut tape = Tape::new(model.params());
                    let mut pass = Pass::train(dropout, &mut rng);
                    let nodes = loss_graph(model, &mut tape, ex, cfg.loss, &mut pass)?;
                    let total = tape.value(nodes.total).item();
                    if !total.is_finite() {
                        return Err(Error::Diverged(format!(
                            "non-finite loss {total} at epoch {epoch} on record `{}`",
                            ex.example.id
                        )));
                    }
                    sum_chord += tape.value(nodes.chord).item();
                    sum_emo += tape.value(nodes.emotion).item();
                    sum_total += total;
                    tape.backward(nodes.total)
                };
                match grads.as_mut() {
                    None => grads = Some(tape_grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&tape_grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            for g in &mut grads {
                g.scale_assign(1.0 / batch.len() as f64);
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient at epoch {epoch}")));
            }
            let lr = cfg.optimizer.learning_rate(adam.steps_taken() + 1, d_model);
            adam.apply(model.params_mut(), &grads, lr);
        }
        if !model.params().all_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        let n = train_ex.len() as f64;
        let val_hits = if val_ex.is_empty() {
            None
        } else {
            Some(teacher_forced_hits(model, &val_ex)?)
        };
        let entry = EpochLog {
            epoch,
            chord_loss: sum_chord / n,
            emotion_loss: sum_emo / n,
            total_loss: sum_total / n,
            val_hits,
            wall_seconds: if cfg.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        };
        log::info!("{}", entry.line());
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        log,
        optimizer: adam,
        epochs_done: start + cfg.epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Emotion;

    fn probs(e: Emotion) -> EmotionProbs {
        let mut p = [0.02; 6];
        p[e.index()] = 0.9;
        EmotionProbs(p)
    }

    #[test]
    fn table_rows() {
        use ChordQuality::*;
        let t = EmotionChordTable::paper();
        let set = |e| t.qualities(e).into_iter().collect::<std::collections::HashSet<_>>();
        assert_eq!(set(Emotion::Sad), [Min7, Min, Sus2].into());
        assert_eq!(set(Emotion::Relaxing), [Maj, Maj6, Maj7].into());
        assert_eq!(set(Emotion::Exciting), [Maj, Sus4, Dom7].into());
        assert_eq!(set(Emotion::Fearful), [Dim, Min7, Dim7, Hdim7].into());
        assert_eq!(set(Emotion::Tense), [Dim, Sus4, Min7, Dom7].into());
        assert!(t.qualities(Emotion::Neutral).is_empty());
        for e in Emotion::ALL {
            assert!(!t.allows(e, Aug));
            assert!(!t.allows(e, Min6));
        }
    }

    #[test]
    fn emotion_targets_count_tokens() {
        let t = EmotionChordTable::paper();
        let y = emotion_target(&probs(Emotion::Sad), &t).unwrap();
        assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 36);
        for id in [ChordVocabulary::PAD, ChordVocabulary::SOS, ChordVocabulary::SILENCE] {
            assert_eq!(y[id], 0.0);
        }
        for e in Emotion::ALL {
            match emotion_target(&probs(e), &t) {
                Some(y) => assert_eq!(y.iter().sum::<f64>() as usize, 12 * t.qualities(e).len()),
                None => assert_eq!(e, Emotion::Neutral),
            }
        }
    }

    #[test]
    fn loss_closed_forms() {
        let z = Matrix::zeros(3, 159);
        let l = chord_loss(&z, &[5, 6, 7], &[true; 3]).unwrap();
        assert!((l - 159f64.ln()).abs() < 1e-12);
        let mut peaked = Matrix::zeros(2, 159);
        peaked.set(0, 9, 60.0);
        peaked.set(1, 3, -4.0);
        let masked = chord_loss(&peaked, &[9, 100], &[true, false]).unwrap();
        assert!(masked < 1e-20);
        assert!(chord_loss(&z, &[1, 2, 3], &[false; 3]).is_err());
        assert!(chord_loss(&z, &[1, 2, 159], &[true; 3]).is_err());

        let t = EmotionChordTable::paper();
        let (y, active) = emotion_targets(&[probs(Emotion::Sad); 3], &[true; 3], &t);
        let e = emotion_loss(&z, &y, &active).unwrap();
        assert!((e - 2f64.ln()).abs() < 1e-12);
        let (y, active) = emotion_targets(&[probs(Emotion::Neutral); 3], &[true; 3], &t);
        assert_eq!(emotion_loss(&z, &y, &active).unwrap(), 0.0);

        assert!((total_loss(2.0, 1.0, LossWeights { lambda: 0.4 }) - 1.4).abs() < 1e-12);
        assert_eq!(total_loss(2.0, 1.0, LossWeights { lambda: 1.0 }), 2.0);
        assert_eq!(total_loss(2.0, 1.0, LossWeights { lambda: 0.0 }), 1.0);
        assert!(LossWeights::new(1.5).is_err());
    }

    #[test]
    fn schedule_shape() {
        let spec = OptimizerSpec {
            warmup_steps: 100,
            ..Default::default()
        };
        let lr = |s| spec.learning_rate(s, 64);
        assert!(lr(50) < lr(100));
        assert!(lr(200) < lr(100));
        assert!((lr(100) - 64f64.powf(-0.5) * 100f64.powf(-0.5)).abs() < 1e-15);
        assert!((lr(400) / lr(100) - 0.5).abs() < 1e-12);
        assert!(OptimizerSpec { beta2: 1.0, ..spec }.validate().is_err());
    }

    #[test]
    fn log_line_format() {
        let e = EpochLog {
            epoch: 3,
            chord_loss: 1.0,
            emotion_loss: 0.5,
            total_loss: 0.7,
            val_hits: Some([0.25, 0.5, 0.75]),
            wall_seconds: 0.0,
        };
        assert_eq!(e.line(), "3,1.000000,0.500000,0.700000,0.2500,0.5000,0.7500,0.000");
    }
}
