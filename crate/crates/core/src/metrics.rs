//! Objective metrics: Hits@k, RMSE and confusion matrices.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::features::{Emotion, EmotionProbs};
use crate::music::{ChordEvent, ChordQuality, ChordVocabulary};
use crate::tensor::Matrix;
use crate::train::EmotionChordTable;

/// 1-based rank of `target` in `row`: classes with a strictly greater logit,
/// or an equal logit and a lower id, rank ahead of it.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let z = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > z || (v == z && i < target))
        .count()
}

/// Fraction of rows whose target ranks within the top `k`.
pub fn hits_at_k(logits: &Matrix, targets: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut hits = 0usize;
    for (t, &target) in targets.iter().enumerate() {
        if target >= logits.cols() {
            return Err(Error::TokenOutOfRange(target));
        }
        hits += (rank_of(logits.row(t), target) <= k) as usize;
    }
    Ok(hits as f64 / targets.len() as f64)
}

pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::Shape(format!(
            "rmse over {} predictions and {} targets",
            predicted.len(),
            actual.len()
        )));
    }
    let sse: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

/// Square count grid with row (reference) and column (predicted) labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        Confusion {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn record(&mut self, reference: usize, predicted: usize) {
        self.counts[reference][predicted] += 1;
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().enumerate().all(|(j, &c)| i == j || c == 0))
    }

    /// Comma-separated grid; the first row and column carry the labels.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("reference\\predicted");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(l);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrices {
    /// Token-id indexed, 159 x 159.
    pub chord: Confusion,
    /// 12 roots then silence.
    pub root: Confusion,
    /// Generated quality against the video emotion's quality row.
    pub quality: Confusion,
}

fn root_index(e: ChordEvent) -> usize {
    match e {
        ChordEvent::Silence => 12,
        ChordEvent::Chord(c) => c.root.value() as usize,
    }
}

impl ConfusionMatrices {
    pub fn empty() -> Self {
        let chord_labels = (0..ChordVocabulary::SIZE)
            .map(|id| match ChordVocabulary::detokenize(id) {
                Ok(crate::music::Token::Event(e)) => e.to_string(),
                Ok(crate::music::Token::Pad) => "PAD".into(),
                Ok(crate::music::Token::Sos) => "SOS".into(),
                Err(_) => unreachable!("every id below SIZE decodes"),
            })
            .collect();
        let mut root_labels: Vec<String> = (0..12)
            .map(|pc| crate::music::PitchClass::new(pc).name().to_string())
            .collect();
        root_labels.push("N".into());
        let quality_labels = ChordQuality::ALL.iter().map(|q| q.tag().to_string()).collect();
        ConfusionMatrices {
            chord: Confusion::new(chord_labels),
            root: Confusion::new(root_labels),
            quality: Confusion::new(quality_labels),
        }
    }

    /// Adds aligned `predicted`/`reference` chords and the per-step video
    /// emotion. Chord and root grids count every step. The quality grid
    /// skips neutral steps and silent predictions; a predicted quality that
    /// belongs to the emotion's row is credited on the diagonal, any other is
    /// counted against the row's first quality.
    pub fn accumulate(
        &mut self,
        predicted: &[ChordEvent],
        reference: &[ChordEvent],
        emotion: &[EmotionProbs],
        table: &EmotionChordTable,
    ) -> Result<()> {
        if predicted.len() != reference.len() || predicted.len() != emotion.len() {
            return Err(Error::Shape(format!(
                "confusion over {} predictions, {} references, {} emotion steps",
                predicted.len(),
                reference.len(),
                emotion.len()
            )));
        }
        for ((&p, &r), e) in predicted.iter().zip(reference).zip(emotion) {
            self.chord
                .record(ChordVocabulary::event_id(r), ChordVocabulary::event_id(p));
            self.root.record(root_index(r), root_index(p));
            let dominant = e.dominant();
            if dominant == Emotion::Neutral {
                continue;
            }
            if let Some(q) = p.quality() {
                let row = table.qualities(dominant);
                let reference_q = if row.contains(&q) { q } else { row[0] };
                self.quality.record(reference_q.index(), q.index());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::parse_chord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hits_examples() {
        // ranks 1, 2, 4, 6 for target id 0
        let mut rows = Vec::new();
        for rank in [1usize, 2, 4, 6] {
            let mut r = vec![0.0; 10];
            r[0] = 5.0;
            for slot in r.iter_mut().skip(1).take(rank - 1) {
                *slot = 9.0;
            }
            rows.push(r);
        }
        let m = Matrix::from_rows(&rows);
        assert_eq!(hits_at_k(&m, &[0; 4], 3).unwrap(), 0.5);
        assert_eq!(hits_at_k(&m, &[0; 4], 10).unwrap(), 1.0);
        assert!(hits_at_k(&m, &[0; 4], 0).is_err());
    }

    #[test]
    fn ties_rank_lower_id_first() {
        let row = [1.0, 1.0, 1.0];
        assert_eq!(rank_of(&row, 0), 1);
        assert_eq!(rank_of(&row, 2), 3);
    }

    #[test]
    fn hits_monotone_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::randn(50, 159, 1.0, &mut rng);
        let targets: Vec<usize> = (0..50).map(|_| rng.gen_range(0..159)).collect();
        let mut prev = 0.0;
        for k in 1..=159 {
            let h = hits_at_k(&m, &targets, k).unwrap();
            assert!(h >= prev);
            prev = h;
        }
        assert_eq!(prev, 1.0);
        let scaled = m.map(|v| 3.5 * v);
        for k in [1, 3, 5] {
            assert_eq!(
                hits_at_k(&m, &targets, k).unwrap(),
                hits_at_k(&scaled, &targets, k).unwrap()
            );
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            rmse(&[0.0, 1.0], &[3.0, 4.0]).unwrap(),
            rmse(&[3.0, 4.0], &[0.0, 1.0]).unwrap()
        );
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn confusion_counts() {
        let table = EmotionChordTable::paper();
        let c = parse_chord("C:maj").unwrap();
        let am = parse_chord("A:min").unwrap();
        let mut p = EmotionProbs::default();
        p.0[Emotion::Sad.index()] = 1.0;
        let mut m = ConfusionMatrices::empty();
        m.accumulate(&[c], &[am], &[p], &table).unwrap();
        let off = |g: &Confusion| g.total() == 1 && !g.is_diagonal();
        assert!(off(&m.chord));
        assert!(off(&m.root));
        // C:maj under sad: counted against min7, the row's first quality
        assert_eq!(
            m.quality.counts[ChordQuality::Min7.index()][ChordQuality::Maj.index()],
            1
        );

        let mut perfect = ConfusionMatrices::empty();
        let mut relaxed = EmotionProbs::default();
        relaxed.0[Emotion::Relaxing.index()] = 1.0;
        perfect.accumulate(&[am, c], &[am, c], &[p, relaxed], &table).unwrap();
        assert!(perfect.chord.is_diagonal() && perfect.root.is_diagonal() && perfect.quality.is_diagonal());
        let csv = perfect.root.to_csv();
        assert_eq!(csv.lines().count(), 14);
        assert!(csv.starts_with("reference\\predicted,C,C#"));
    }
}
