//! Per-second music and video features computed from ingested primitives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::music::{ChordEvent, Key, Mode, PitchClass};

/// Full-scale amplitude of 16-bit audio.
pub const RMS_FULL_SCALE: f64 = 32767.0;
const RMS_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    /// Seconds from the start.
    pub onset: f64,
    /// Seconds, strictly positive.
    pub duration: f64,
    pub pitch: u8,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(onset: f64, duration: f64, pitch: u8, velocity: u8) -> Result<Self> {
        if !(onset.is_finite() && onset >= 0.0) {
            return Err(Error::InvalidInput(format!("note onset {onset} must be >= 0")));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::InvalidInput(format!("note duration {duration} must be > 0")));
        }
        if pitch > 127 {
            return Err(Error::PitchOutOfRange(pitch as i32));
        }
        if !(1..=127).contains(&velocity) {
            return Err(Error::InvalidInput(format!("velocity {velocity} outside 1..=127")));
        }
        Ok(NoteEvent {
            onset,
            duration,
            pitch,
            velocity,
        })
    }

    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

/// Number of note onsets in each one-second window `[t, t + 1)`.
pub fn note_density(notes: &[NoteEvent], total_seconds: usize) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; total_seconds];
    for n in notes {
        if n.onset.is_nan() || n.onset < 0.0 {
            return Err(Error::InvalidInput(format!("negative onset {}", n.onset)));
        }
        let second = n.onset.floor() as usize;
        if let Some(c) = counts.get_mut(second) {
            *c += 1;
        }
    }
    Ok(counts)
}

/// Maps an RMS amplitude onto `[0, 1]` through the decibel scale:
/// `dB = 20 log10(rms / 32767)`, then `10^(dB / 20)`.
pub fn loudness_from_rms(rms: f64) -> f64 {
    let rms = if rms > RMS_FULL_SCALE {
        log::warn!("RMS {rms} above full scale, clamped to {RMS_FULL_SCALE}");
        RMS_FULL_SCALE
    } else {
        rms
    };
    if rms.is_nan() || rms < RMS_EPSILON {
        return 0.0;
    }
    let db = 20.0 * (rms / RMS_FULL_SCALE).log10();
    10f64.powf(db / 20.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyAlgorithm {
    KrumhanslSchmuckler,
    TemperleyKostkaPayne,
    BellmanBudge,
}

impl KeyAlgorithm {
    pub const VOTING_ORDER: [KeyAlgorithm; 3] = [
        KeyAlgorithm::KrumhanslSchmuckler,
        KeyAlgorithm::TemperleyKostkaPayne,
        KeyAlgorithm::BellmanBudge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KeyAlgorithm::KrumhanslSchmuckler => "krumhansl_schmuckler",
            KeyAlgorithm::TemperleyKostkaPayne => "temperley_kostka_payne",
            KeyAlgorithm::BellmanBudge => "bellman_budge",
        }
    }
}

impl FromStr for KeyAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::VOTING_ORDER
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown key profile `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyProfileSet {
    pub algorithm: KeyAlgorithm,
    pub major: [f64; 12],
    pub minor: [f64; 12],
}

const DEFAULT_PROFILES: &str = include_str!("../data/key_profiles.txt");

/// Parses the key-profile text format: `[name]` headers followed by
/// `major:` and `minor:` lines of twelve comma-separated numbers.
pub fn parse_key_profiles(text: &str) -> Result<Vec<KeyProfileSet>> {
    struct Partial {
        algorithm: KeyAlgorithm,
        major: Option<[f64; 12]>,
        minor: Option<[f64; 12]>,
    }
    fn finish(p: Partial) -> Result<KeyProfileSet> {
        let missing = |m: &str| Error::InvalidInput(format!("profile `{}` lacks a {m} line", p.algorithm.name()));
        Ok(KeyProfileSet {
            algorithm: p.algorithm,
            major: p.major.ok_or_else(|| missing("major"))?,
            minor: p.minor.ok_or_else(|| missing("minor"))?,
        })
    }

    let mut sets = Vec::new();
    let mut current: Option<Partial> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if let Some(p) = current.take() {
                sets.push(finish(p)?);
            }
            current = Some(Partial {
                algorithm: name.trim().parse()?,
                major: None,
                minor: None,
            });
            continue;
        }
        let bad = |why: &str| Error::InvalidInput(format!("key profiles line {}: {why}", lineno + 1));
        let p = current.as_mut().ok_or_else(|| bad("values before a [name] header"))?;
        let (label, values) = line
            .split_once(':')
            .ok_or_else(|| bad("expected `major:` or `minor:`"))?;
        let parsed: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(&e.to_string()))?;
        let arr: [f64; 12] = parsed
            .try_into()
            .map_err(|v: Vec<f64>| bad(&format!("expected 12 entries, found {}", v.len())))?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite entry"));
        }
        match label.trim() {
            "major" => p.major = Some(arr),
            "minor" => p.minor = Some(arr),
            other => return Err(bad(&format!("unknown label `{other}`"))),
        }
    }
    if let Some(p) = current.take() {
        sets.push(finish(p)?);
    }
    Ok(sets)
}

/// Parses a profile file and arranges its tables in voting order; every
/// algorithm must be present.
pub fn load_key_profiles(text: &str) -> Result<[KeyProfileSet; 3]> {
    let sets = parse_key_profiles(text)?;
    let mut out = Vec::with_capacity(3);
    for a in KeyAlgorithm::VOTING_ORDER {
        let set = sets
            .iter()
            .find(|s| s.algorithm == a)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("key profiles lack a [{}] block", a.name())))?;
        out.push(set);
    }
    Ok(out.try_into().expect("three algorithms"))
}

/// The three bundled profile tables in voting order.
pub fn default_key_profiles() -> [KeyProfileSet; 3] {
    load_key_profiles(DEFAULT_PROFILES).expect("bundled key profiles are valid")
}

/// Duration-weighted pitch-class histogram.
pub fn pitch_class_histogram(notes: &[NoteEvent]) -> [f64; 12] {
    let mut hist = [0.0; 12];
    for n in notes {
        hist[(n.pitch % 12) as usize] += n.duration;
    }
    hist
}

fn pearson(x: &[f64; 12], y: &[f64; 12]) -> f64 {
    let mx = x.iter().sum::<f64>() / 12.0;
    let my = y.iter().sum::<f64>() / 12.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..12 {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Correlation of the histogram against all 24 keys, majors (C..B) then minors.
pub fn key_correlations(hist: &[f64; 12], profiles: &KeyProfileSet) -> [(Key, f64); 24] {
    std::array::from_fn(|i| {
        let (mode, profile) = if i < 12 {
            (Mode::Major, &profiles.major)
        } else {
            (Mode::Minor, &profiles.minor)
        };
        let tonic = i % 12;
        // profile rotated so index `tonic` carries the tonic weight
        let rotated: [f64; 12] = std::array::from_fn(|pc| profile[(pc + 12 - tonic) % 12]);
        (Key::new(PitchClass::new(tonic as i32), mode), pearson(hist, &rotated))
    })
}

pub fn detect_key_single(notes: &[NoteEvent], profiles: &KeyProfileSet) -> Result<Key> {
    if notes.is_empty() {
        return Err(Error::InvalidInput("key detection needs at least one note".into()));
    }
    let hist = pitch_class_histogram(notes);
    let mut best = (Key::C_MAJOR, f64::NEG_INFINITY);
    for (key, r) in key_correlations(&hist, profiles) {
        if r > best.1 {
            best = (key, r);
        }
    }
    Ok(best.0)
}

/// Majority vote; a three-way split goes to the first candidate.
pub fn vote_key(candidates: [Key; 3]) -> Key {
    let [a, b, c] = candidates;
    if a == b || a == c {
        a
    } else if b == c {
        b
    } else {
        a
    }
}

/// Runs all three profile detectors and votes.
pub fn detect_key(notes: &[NoteEvent], profiles: &[KeyProfileSet; 3]) -> Result<Key> {
    let mut candidates = [Key::C_MAJOR; 3];
    for (slot, p) in candidates.iter_mut().zip(profiles) {
        *slot = detect_key_single(notes, p)?;
    }
    Ok(vote_key(candidates))
}

/// Renders a one-chord-per-second sequence as sustained chord tones, the
/// MIDI that key detection runs on.
pub fn chords_to_notes(chords: &[ChordEvent]) -> Vec<NoteEvent> {
    let mut notes = Vec::new();
    let mut t = 0;
    while t < chords.len() {
        let mut end = t + 1;
        while end < chords.len() && chords[end] == chords[t] {
            end += 1;
        }
        if let ChordEvent::Chord(c) = chords[t] {
            let template = c.quality.intervals();
            for &i in template {
                notes.push(NoteEvent {
                    onset: t as f64,
                    duration: (end - t) as f64,
                    pitch: 60 + ((c.root.value() + i) % 12),
                    velocity: 100,
                });
            }
        }
        t = end;
    }
    notes
}

/// Position of each frame within its run of identical scene ids.
pub fn scene_offsets(scene_ids: &[i64]) -> Vec<u32> {
    let mut out = Vec::with_capacity(scene_ids.len());
    for (t, id) in scene_ids.iter().enumerate() {
        let offset = if t > 0 && scene_ids[t - 1] == *id {
            out[t - 1] + 1
        } else {
            0
        };
        out.push(offset);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    width: usize,
    height: usize,
    /// Interleaved `r, g, b` bytes, row-major.
    pixels: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("frame dimensions must be positive".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "frame {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(RgbFrame { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
    }

    /// Decodes a binary portable pixmap (`P6`, maxval 255).
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::InvalidInput(format!("ppm: {why}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("only binary P6 pixmaps are supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        // exactly one whitespace byte separates header from raster
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        Self::new(w, h, data.get(..w * h * 3).ok_or_else(|| bad("short raster"))?.to_vec())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Mean absolute RGB difference against the previous frame; the first
/// frame has no predecessor and scores 0.
pub fn motion_values(frames: &[RgbFrame]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        if t == 0 {
            out.push(0.0);
            continue;
        }
        let prev = &frames[t - 1];
        if (prev.width, prev.height) != (frame.width, frame.height) {
            return Err(Error::Shape(format!(
                "frame {t} is {}x{}, previous is {}x{}",
                frame.width, frame.height, prev.width, prev.height
            )));
        }
        let total: u64 = prev
            .pixels
            .iter()
            .zip(&frame.pixels)
            .map(|(a, b)| a.abs_diff(*b) as u64)
            .sum();
        out.push(total as f64 / frame.pixels.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Emotion {
    Exciting,
    Fearful,
    Tense,
    Sad,
    Relaxing,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; 6] = [
        Emotion::Exciting,
        Emotion::Fearful,
        Emotion::Tense,
        Emotion::Sad,
        Emotion::Relaxing,
        Emotion::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Exciting => "exciting",
            Emotion::Fearful => "fearful",
            Emotion::Tense => "tense",
            Emotion::Sad => "sad",
            Emotion::Relaxing => "relaxing",
            Emotion::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-second class probabilities in [`Emotion::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionProbs(pub [f64; 6]);

impl EmotionProbs {
    /// Clamps each component into `[0, 1]`, logging any adjustment.
    pub fn clamped(values: [f64; 6]) -> Self {
        let mut out = values;
        for (i, v) in out.iter_mut().enumerate() {
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if c != *v {
                log::warn!("emotion {} probability {} clamped to {}", Emotion::ALL[i], v, c);
                *v = c;
            }
        }
        EmotionProbs(out)
    }

    pub fn get(&self, e: Emotion) -> f64 {
        self.0[e.index()]
    }

    /// Highest-probability class; ties resolve to the earlier class.
    pub fn dominant(&self) -> Emotion {
        let mut best = 0;
        for i in 1..6 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Emotion::ALL[best]
    }
}

/// Trailing mean over the last `window` seconds (fewer at the start).
pub fn smooth_emotions(series: &[EmotionProbs], window: usize) -> Vec<EmotionProbs> {
    let window = window.max(1);
    (0..series.len())
        .map(|t| {
            let start = (t + 1).saturating_sub(window);
            let slice = &series[start..=t];
            let n = slice.len() as f64;
            EmotionProbs(std::array::from_fn(|c| slice.iter().map(|p| p.0[c]).sum::<f64>() / n))
        })
        .collect()
}
