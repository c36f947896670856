//! Turning per-second chords plus density/loudness into notes: density
//! levels, arpeggio patterns and velocities.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::NoteEvent;
use crate::music::ChordEvent;

/// Seconds per pattern slot.
pub const SLOT_SECONDS: f64 = 0.125;
pub const SLOTS_PER_HALF: usize = 8;
pub const BASE_OCTAVE: i32 = 4;

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Arpeggio level 1..=5 for a predicted note density.
pub fn density_to_level(density: f64) -> u8 {
    let n = round_half_up(density.max(0.0));
    match n as u64 {
        0..=5 => 1,
        6..=10 => 2,
        11..=15 => 3,
        16..=20 => 4,
        _ => 5,
    }
}

pub fn loudness_to_velocity(loudness: f64) -> u8 {
    let l = if loudness.is_nan() {
        0.0
    } else {
        loudness.clamp(0.0, 1.0)
    };
    round_half_up(49.0 + 63.0 * l) as u8
}

/// Sixteen eighth-second slots; `Some(i)` sounds chord tone `i` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArpeggioPattern {
    slots: [Option<u8>; 16],
}

impl ArpeggioPattern {
    /// The pattern for a density level (clamped into 1..=5).
    pub fn for_level(level: u8) -> Self {
        const PATTERNS: [&str; 5] = [
            "1 * * * 2 * * * 3 * * * 4 * * *",
            "1 * 2 * 3 * * * 4 * 2 * 3 * * *",
            "1 * 2 * 3 * 4 * 3 * 2 * 3 * 4 *",
            "1 2 3 2 4 * 3 * 2 1 2 3 4 * 3 *",
            "1 2 3 2 4 3 2 3 2 1 2 3 4 3 2 3",
        ];
        let i = level.clamp(1, 5) as usize - 1;
        PATTERNS[i].parse().expect("built-in patterns are well formed")
    }

    pub fn slots(&self) -> &[Option<u8>; 16] {
        &self.slots
    }

    /// Slots for the first (`0`) or second (`1`) second of the pattern.
    pub fn half(&self, which: usize) -> &[Option<u8>] {
        let start = (which % 2) * SLOTS_PER_HALF;
        &self.slots[start..start + SLOTS_PER_HALF]
    }
}

impl FromStr for ArpeggioPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let symbols: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
        if symbols.len() != 16 {
            return Err(Error::InvalidInput(format!(
                "arpeggio pattern needs 16 slots, got {}",
                symbols.len()
            )));
        }
        let mut slots = [None; 16];
        for (slot, c) in slots.iter_mut().zip(symbols) {
            *slot = match c {
                '*' => None,
                '1'..='4' => Some(c as u8 - b'0'),
                other => {
                    return Err(Error::InvalidInput(format!("bad arpeggio symbol `{other}`")));
                }
            };
        }
        Ok(ArpeggioPattern { slots })
    }
}

impl fmt::Display for ArpeggioPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.slots.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match s {
                Some(t) => write!(f, "{t}")?,
                None => f.write_str("*")?,
            }
        }
        Ok(())
    }
}

/// Spreads each second's chord over its level's pattern. The first second
/// of a run of identical chords plays the first half of the pattern, the
/// next second the second half, alternating for longer runs. A note rings
/// until the next sounded slot of the same run or the end of the run.
/// Velocities are left at 0 for [`apply_velocities`].
pub fn arpeggiate(chords: &[ChordEvent], levels: &[u8]) -> Result<Vec<NoteEvent>> {
    if chords.len() != levels.len() {
        return Err(Error::Shape(format!(
            "{} chords but {} density levels",
            chords.len(),
            levels.len()
        )));
    }
    let mut notes = Vec::new();
    let mut t = 0;
    while t < chords.len() {
        let mut end = t + 1;
        while end < chords.len() && chords[end] == chords[t] {
            end += 1;
        }
        if let ChordEvent::Chord(symbol) = chords[t] {
            let tones = symbol.tones(BASE_OCTAVE)?;
            // (onset, pitch) for every sounded slot of the run
            let mut onsets: Vec<(f64, u8)> = Vec::new();
            for (k, second) in (t..end).enumerate() {
                let pattern = ArpeggioPattern::for_level(levels[second]);
                for (slot, tone) in pattern.half(k).iter().enumerate() {
                    if let Some(tone) = tone {
                        let pitch = *tones.get(*tone as usize - 1).unwrap_or(&tones[0]);
                        onsets.push((second as f64 + slot as f64 * SLOT_SECONDS, pitch));
                    }
                }
            }
            let run_end = end as f64;
            for (i, &(onset, pitch)) in onsets.iter().enumerate() {
                let stop = onsets.get(i + 1).map_or(run_end, |n| n.0);
                notes.push(NoteEvent {
                    onset,
                    duration: stop - onset,
                    pitch,
                    velocity: 0,
                });
            }
        }
        t = end;
    }
    Ok(notes)
}

/// Sets every note's velocity from the loudness of the second it starts in.
pub fn apply_velocities(notes: &mut [NoteEvent], loudness: &[f64]) -> Result<()> {
    for n in notes.iter_mut() {
        let second = n.onset.floor() as usize;
        let l = loudness.get(second).ok_or_else(|| {
            Error::Shape(format!(
                "note at {}s but loudness covers {} seconds",
                n.onset,
                loudness.len()
            ))
        })?;
        n.velocity = loudness_to_velocity(*l);
    }
    Ok(())
}
