//! Browser bindings for the expressive back end: turn a typed progression
//! into an arpeggiated piano roll and a MIDI file, and detect/normalize the
//! key of a progression.
//!
//! The plain functions return `Result<_, String>` so they can be tested off
//! the browser; the `#[wasm_bindgen]` wrappers convert errors to JS.

use serde::Serialize;
use v2m_core::expressive::{density_to_level, loudness_to_velocity};
use v2m_core::features::{chords_to_notes, default_key_profiles, detect_key};
use v2m_core::music::{normalize_sequence, parse_progression, ChordEvent};
use v2m_core::pipeline::render_song;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RollNote {
    pub onset: f64,
    pub duration: f64,
    pub pitch: u8,
    pub velocity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PianoRoll {
    pub chords: Vec<String>,
    pub level: u8,
    pub velocity: u8,
    pub seconds: usize,
    pub notes: Vec<RollNote>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyReport {
    pub key: String,
    /// Semitones applied to reach C major / A minor.
    pub shift: i32,
    pub normalized_key: String,
    pub normalized: Vec<String>,
}

fn chords(text: &str) -> Result<Vec<ChordEvent>, String> {
    let chords = parse_progression(text).map_err(|e| e.to_string())?;
    if chords.is_empty() {
        return Err("enter at least one chord".into());
    }
    Ok(chords)
}

fn song(text: &str, density: f64, loudness: f64) -> Result<v2m_core::pipeline::Song, String> {
    if !density.is_finite() || density < 0.0 {
        return Err(format!("density {density} must be a non-negative number"));
    }
    if !(0.0..=1.0).contains(&loudness) {
        return Err(format!("loudness {loudness} must lie in [0, 1]"));
    }
    let chords = chords(text)?;
    let n = chords.len();
    render_song(chords, vec![density; n], vec![loudness; n]).map_err(|e| e.to_string())
}

/// One chord per second, arpeggiated at a constant density and loudness.
pub fn piano_roll(text: &str, density: f64, loudness: f64) -> Result<PianoRoll, String> {
    let s = song(text, density, loudness)?;
    Ok(PianoRoll {
        chords: s.chords.iter().map(ToString::to_string).collect(),
        level: density_to_level(density),
        velocity: loudness_to_velocity(loudness),
        seconds: s.chords.len(),
        notes: s
            .notes
            .iter()
            .map(|n| RollNote {
                onset: n.onset,
                duration: n.duration,
                pitch: n.pitch,
                velocity: n.velocity,
            })
            .collect(),
    })
}

pub fn midi_bytes(text: &str, density: f64, loudness: f64) -> Result<Vec<u8>, String> {
    Ok(song(text, density, loudness)?.midi)
}

/// Votes a key from the progression's chord tones and transposes the
/// progression to C major / A minor.
pub fn key_report(text: &str) -> Result<KeyReport, String> {
    let chords = chords(text)?;
    let notes = chords_to_notes(&chords);
    if notes.is_empty() {
        return Err("the progression has no sounding chords".into());
    }
    let key = detect_key(&notes, &default_key_profiles()).map_err(|e| e.to_string())?;
    let (normalized, normalized_key) = normalize_sequence(&chords, key);
    Ok(KeyReport {
        key: key.to_string(),
        shift: key.normalizing_shift(),
        normalized_key: normalized_key.to_string(),
        normalized: normalized.iter().map(ToString::to_string).collect(),
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// JSON piano roll for the page's canvas.
#[wasm_bindgen(js_name = pianoRoll)]
pub fn piano_roll_js(chords: &str, density: f64, loudness: f64) -> Result<String, JsError> {
    piano_roll(chords, density, loudness)
        .and_then(|r| to_json(&r))
        .map_err(|e| JsError::new(&e))
}

/// Standard MIDI file bytes for download.
#[wasm_bindgen(js_name = midiBytes)]
pub fn midi_bytes_js(chords: &str, density: f64, loudness: f64) -> Result<Vec<u8>, JsError> {
    midi_bytes(chords, density, loudness).map_err(|e| JsError::new(&e))
}

/// JSON key report.
#[wasm_bindgen(js_name = keyReport)]
pub fn key_report_js(chords: &str) -> Result<String, JsError> {
    key_report(chords)
        .and_then(|r| to_json(&r))
        .map_err(|e| JsError::new(&e))
}
