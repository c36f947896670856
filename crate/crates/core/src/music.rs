//! Chord and key domain model.
//!
//! Chords are a root pitch class plus one of thirteen qualities. The decoder
//! vocabulary is every (root, quality) pair plus three special tokens:
//! `PAD = 0`, `SOS = 1`, `SILENCE = 2`, then chords at `3 + root * 13 + quality`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PitchClass(u8);

const SHARP_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

impl PitchClass {
    pub const C: PitchClass = PitchClass(0);
    pub const A: PitchClass = PitchClass(9);

    /// Reduces any integer modulo 12.
    pub fn new(value: i32) -> Self {
        PitchClass(value.rem_euclid(12) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn shift(self, semitones: i32) -> Self {
        PitchClass::new(self.0 as i32 + semitones)
    }

    pub fn name(self) -> &'static str {
        SHARP_NAMES[self.0 as usize]
    }

    /// Parses a root spelling such as `A`, `F#` or `Bb`; returns the pitch
    /// class and the number of bytes consumed.
    fn parse_prefix(text: &str) -> Option<(PitchClass, usize)> {
        let mut chars = text.chars();
        let base = match chars.next()? {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return None,
        };
        match chars.next() {
            Some('#') => Some((PitchClass::new(base + 1), 2)),
            Some('b') => Some((PitchClass::new(base - 1), 2)),
            _ => Some((PitchClass::new(base), 1)),
        }
    }
}

impl fmt::Display for PitchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChordQuality {
    Maj,
    Dim,
    Sus4,
    Min7,
    Min,
    Sus2,
    Aug,
    Dim7,
    Maj6,
    Hdim7,
    Dom7,
    Min6,
    Maj7,
}

impl ChordQuality {
    pub const COUNT: usize = 13;

    pub const ALL: [ChordQuality; 13] = [
        ChordQuality::Maj,
        ChordQuality::Dim,
        ChordQuality::Sus4,
        ChordQuality::Min7,
        ChordQuality::Min,
        ChordQuality::Sus2,
        ChordQuality::Aug,
        ChordQuality::Dim7,
        ChordQuality::Maj6,
        ChordQuality::Hdim7,
        ChordQuality::Dom7,
        ChordQuality::Min6,
        ChordQuality::Maj7,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            ChordQuality::Maj => "maj",
            ChordQuality::Dim => "dim",
            ChordQuality::Sus4 => "sus4",
            ChordQuality::Min7 => "min7",
            ChordQuality::Min => "min",
            ChordQuality::Sus2 => "sus2",
            ChordQuality::Aug => "aug",
            ChordQuality::Dim7 => "dim7",
            ChordQuality::Maj6 => "maj6",
            ChordQuality::Hdim7 => "hdim7",
            ChordQuality::Dom7 => "dom7",
            ChordQuality::Min6 => "min6",
            ChordQuality::Maj7 => "maj7",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.tag() == tag)
    }

    /// Semitones above the root.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            ChordQuality::Maj => &[0, 4, 7],
            ChordQuality::Min => &[0, 3, 7],
            ChordQuality::Dim => &[0, 3, 6],
            ChordQuality::Aug => &[0, 4, 8],
            ChordQuality::Sus2 => &[0, 2, 7],
            ChordQuality::Sus4 => &[0, 5, 7],
            ChordQuality::Dom7 => &[0, 4, 7, 10],
            ChordQuality::Maj7 => &[0, 4, 7, 11],
            ChordQuality::Min7 => &[0, 3, 7, 10],
            ChordQuality::Dim7 => &[0, 3, 6, 9],
            ChordQuality::Hdim7 => &[0, 3, 6, 10],
            ChordQuality::Maj6 => &[0, 4, 7, 9],
            ChordQuality::Min6 => &[0, 3, 7, 9],
        }
    }
}

impl fmt::Display for ChordQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChordSymbol {
    pub root: PitchClass,
    pub quality: ChordQuality,
}

impl ChordSymbol {
    pub fn new(root: PitchClass, quality: ChordQuality) -> Self {
        ChordSymbol { root, quality }
    }

    pub fn transpose(self, shift: i32) -> Self {
        ChordSymbol {
            root: self.root.shift(shift),
            quality: self.quality,
        }
    }

    /// MIDI pitches of the chord rooted in `base_octave` (C4 = 60). Triads
    /// get the root doubled an octave up so every chord has at least four tones.
    pub fn tones(self, base_octave: i32) -> Result<Vec<u8>> {
        let base = 12 * (base_octave + 1) + self.root.value() as i32;
        let mut pitches: Vec<i32> = self.quality.intervals().iter().map(|&i| base + i as i32).collect();
        if pitches.len() < 4 {
            pitches.push(base + 12);
        }
        pitches
            .into_iter()
            .map(|p| {
                if (0..=127).contains(&p) {
                    Ok(p as u8)
                } else {
                    Err(Error::PitchOutOfRange(p))
                }
            })
            .collect()
    }
}

impl fmt::Display for ChordSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.root, self.quality)
    }
}

/// One second of harmony: either a sounding chord or silence (`N`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChordEvent {
    Silence,
    Chord(ChordSymbol),
}

impl ChordEvent {
    pub fn transpose(self, shift: i32) -> Self {
        match self {
            ChordEvent::Silence => ChordEvent::Silence,
            ChordEvent::Chord(c) => ChordEvent::Chord(c.transpose(shift)),
        }
    }

    pub fn symbol(self) -> Option<ChordSymbol> {
        match self {
            ChordEvent::Silence => None,
            ChordEvent::Chord(c) => Some(c),
        }
    }

    pub fn quality(self) -> Option<ChordQuality> {
        self.symbol().map(|c| c.quality)
    }
}

impl From<ChordSymbol> for ChordEvent {
    fn from(c: ChordSymbol) -> Self {
        ChordEvent::Chord(c)
    }
}

impl fmt::Display for ChordEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChordEvent::Silence => f.write_str("N"),
            ChordEvent::Chord(c) => c.fmt(f),
        }
    }
}

impl FromStr for ChordEvent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_chord(s)
    }
}

impl Serialize for ChordEvent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChordEvent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_chord(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses the canonical grammar `<A-G>[#|b]?:<quality>` or the literal `N`.
pub fn parse_chord(text: &str) -> Result<ChordEvent> {
    if text == "N" {
        return Ok(ChordEvent::Silence);
    }
    let err = || Error::ChordParse(text.to_string());
    let (root_text, quality_text) = text.split_once(':').ok_or_else(err)?;
    let (root, used) = PitchClass::parse_prefix(root_text).ok_or_else(err)?;
    if used != root_text.len() {
        return Err(err());
    }
    let quality = ChordQuality::from_tag(quality_text).ok_or_else(err)?;
    Ok(ChordEvent::Chord(ChordSymbol::new(root, quality)))
}

/// Parses lead-sheet shorthand (`C`, `Am`, `G7`, `Fmaj7`, `Bdim`, `Em7b5`, ...)
/// and also accepts the canonical grammar.
pub fn parse_compact_chord(text: &str) -> Result<ChordEvent> {
    if text == "N" || text.contains(':') {
        return parse_chord(text);
    }
    let err = || Error::ChordParse(text.to_string());
    let (root, used) = PitchClass::parse_prefix(text).ok_or_else(err)?;
    let quality = match &text[used..] {
        "" | "maj" | "M" => ChordQuality::Maj,
        "m" | "min" | "-" => ChordQuality::Min,
        "7" | "dom7" => ChordQuality::Dom7,
        "maj7" | "M7" => ChordQuality::Maj7,
        "m7" | "min7" | "-7" => ChordQuality::Min7,
        "dim" | "o" => ChordQuality::Dim,
        "dim7" | "o7" => ChordQuality::Dim7,
        "m7b5" | "hdim7" | "ø" | "ø7" => ChordQuality::Hdim7,
        "aug" | "+" => ChordQuality::Aug,
        "sus2" => ChordQuality::Sus2,
        "sus4" | "sus" => ChordQuality::Sus4,
        "6" | "maj6" => ChordQuality::Maj6,
        "m6" | "min6" => ChordQuality::Min6,
        _ => return Err(err()),
    };
    Ok(ChordEvent::Chord(ChordSymbol::new(root, quality)))
}

/// Whitespace-separated progression in shorthand, e.g. `"C Am F G"`.
pub fn parse_progression(text: &str) -> Result<Vec<ChordEvent>> {
    text.split_whitespace().map(parse_compact_chord).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Key {
    pub tonic: PitchClass,
    pub mode: Mode,
}

impl Key {
    pub const C_MAJOR: Key = Key {
        tonic: PitchClass::C,
        mode: Mode::Major,
    };
    pub const A_MINOR: Key = Key {
        tonic: PitchClass::A,
        mode: Mode::Minor,
    };

    pub fn new(tonic: PitchClass, mode: Mode) -> Self {
        Key { tonic, mode }
    }

    pub fn major(tonic: i32) -> Self {
        Key::new(PitchClass::new(tonic), Mode::Major)
    }

    pub fn minor(tonic: i32) -> Self {
        Key::new(PitchClass::new(tonic), Mode::Minor)
    }

    pub fn transpose(self, shift: i32) -> Self {
        Key::new(self.tonic.shift(shift), self.mode)
    }

    /// The semitone shift that takes this key to C major or A minor.
    pub fn normalizing_shift(self) -> i32 {
        let target = match self.mode {
            Mode::Major => 0,
            Mode::Minor => 9,
        };
        (target - self.tonic.value() as i32).rem_euclid(12)
    }

    pub fn is_normalized(self) -> bool {
        self == Key::C_MAJOR || self == Key::A_MINOR
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{}:{}", self.tonic, mode)
    }
}

impl FromStr for Key {
    type Err = Error;

    /// Accepts `C:major`, `A:minor`, `C major`, `Am`, `F#`.
    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::KeyParse(s.to_string());
        let s = s.trim();
        let (root, used) = PitchClass::parse_prefix(s).ok_or_else(err)?;
        let rest = s[used..].trim_start_matches([':', ' ']);
        let mode = match rest {
            "" | "major" | "maj" => Mode::Major,
            "minor" | "min" | "m" => Mode::Minor,
            _ => return Err(err()),
        };
        Ok(Key::new(root, mode))
    }
}

impl Serialize for Key {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

pub fn transpose_chord(chord: ChordEvent, shift: i32) -> ChordEvent {
    chord.transpose(shift)
}

/// Transposes a song to C major (major keys) or A minor (minor keys).
pub fn normalize_sequence(chords: &[ChordEvent], key: Key) -> (Vec<ChordEvent>, Key) {
    let shift = key.normalizing_shift();
    (
        chords.iter().map(|c| c.transpose(shift)).collect(),
        key.transpose(shift),
    )
}

/// Decoder token alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Sos,
    Event(ChordEvent),
}

impl From<ChordEvent> for Token {
    fn from(e: ChordEvent) -> Self {
        Token::Event(e)
    }
}

pub struct ChordVocabulary;

impl ChordVocabulary {
    pub const PAD: usize = 0;
    pub const SOS: usize = 1;
    pub const SILENCE: usize = 2;
    const FIRST_CHORD: usize = 3;
    pub const SIZE: usize = 12 * ChordQuality::COUNT + 3;

    pub fn tokenize(token: Token) -> usize {
        match token {
            Token::Pad => Self::PAD,
            Token::Sos => Self::SOS,
            Token::Event(ChordEvent::Silence) => Self::SILENCE,
            Token::Event(ChordEvent::Chord(c)) => Self::chord_id(c),
        }
    }

    pub fn chord_id(c: ChordSymbol) -> usize {
        Self::FIRST_CHORD + c.root.value() as usize * ChordQuality::COUNT + c.quality.index()
    }

    pub fn event_id(e: ChordEvent) -> usize {
        Self::tokenize(Token::Event(e))
    }

    pub fn detokenize(id: usize) -> Result<Token> {
        match id {
            Self::PAD => Ok(Token::Pad),
            Self::SOS => Ok(Token::Sos),
            Self::SILENCE => Ok(Token::Event(ChordEvent::Silence)),
            id if id < Self::SIZE => {
                let k = id - Self::FIRST_CHORD;
                let root = PitchClass::new((k / ChordQuality::COUNT) as i32);
                let quality = ChordQuality::ALL[k % ChordQuality::COUNT];
                Ok(Token::Event(ChordEvent::Chord(ChordSymbol::new(root, quality))))
            }
            id => Err(Error::TokenOutOfRange(id)),
        }
    }

    /// Like [`detokenize`](Self::detokenize) but rejects `PAD`/`SOS`.
    pub fn event(id: usize) -> Result<ChordEvent> {
        match Self::detokenize(id)? {
            Token::Event(e) => Ok(e),
            _ => Err(Error::InvalidInput(format!("token {id} is not a chord event"))),
        }
    }

    /// Quality of a chord token, `None` for specials and silence.
    pub fn quality_of(id: usize) -> Option<ChordQuality> {
        if (Self::FIRST_CHORD..Self::SIZE).contains(&id) {
            Some(ChordQuality::ALL[(id - Self::FIRST_CHORD) % ChordQuality::COUNT])
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chord(text: &str) -> ChordEvent {
        parse_chord(text).unwrap()
    }

    #[test]
    fn parses_canonical_chords() {
        assert_eq!(
            chord("C:maj"),
            ChordEvent::Chord(ChordSymbol::new(PitchClass::new(0), ChordQuality::Maj))
        );
        assert_eq!(chord("N"), ChordEvent::Silence);
        assert_eq!(
            chord("A:min7"),
            ChordEvent::Chord(ChordSymbol::new(PitchClass::new(9), ChordQuality::Min7))
        );
        assert_eq!(chord("Bb:dom7"), chord("A#:dom7"));
    }

    #[test]
    fn parse_errors_name_the_token() {
        for bad in ["H:maj", "C:major", "Cmaj", "c:maj", "C#b:maj", "", "n"] {
            match parse_chord(bad) {
                Err(Error::ChordParse(t)) => assert_eq!(t, bad),
                other => panic!("{bad:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn compact_grammar() {
        let prog = parse_progression("C Am F G G7 Bdim Em7b5").unwrap();
        let canon: Vec<String> = prog.iter().map(|c| c.to_string()).collect();
        assert_eq!(
            canon,
            ["C:maj", "A:min", "F:maj", "G:maj", "G:dom7", "B:dim", "E:hdim7"]
        );
        assert!(matches!(parse_progression("C Xm"), Err(Error::ChordParse(t)) if t == "Xm"));
    }

    #[test]
    fn transposition_examples() {
        assert_eq!(transpose_chord(chord("C:maj"), 0), chord("C:maj"));
        assert_eq!(transpose_chord(chord("G:maj"), 5), chord("C:maj"));
        assert_eq!(transpose_chord(chord("D:dom7"), 5), chord("G:dom7"));
        assert_eq!(transpose_chord(ChordEvent::Silence, 3), ChordEvent::Silence);
    }

    #[test]
    fn normalization_examples() {
        let seq: Vec<_> = ["G:maj", "C:maj", "D:dom7"].map(chord).to_vec();
        let (out, key) = normalize_sequence(&seq, Key::major(7));
        assert_eq!(out, ["C:maj", "F:maj", "G:dom7"].map(chord).to_vec());
        assert_eq!(key, Key::C_MAJOR);

        let (out, key) = normalize_sequence(&[chord("A:min")], Key::A_MINOR);
        assert_eq!(out, vec![chord("A:min")]);
        assert_eq!(key, Key::A_MINOR);

        let seq: Vec<_> = ["E:min", "B:dom7", "N"].map(chord).to_vec();
        let (out, key) = normalize_sequence(&seq, Key::minor(4));
        assert_eq!(out, ["A:min", "E:dom7", "N"].map(chord).to_vec());
        assert_eq!(key, Key::A_MINOR);
    }

    #[test]
    fn chord_tone_examples() {
        let tones = |t: &str| chord(t).symbol().unwrap().tones(4).unwrap();
        assert_eq!(tones("C:maj"), vec![60, 64, 67, 72]);
        assert_eq!(tones("C:min7"), vec![60, 63, 67, 70]);
        assert_eq!(tones("A:min"), vec![69, 72, 76, 81]);
        let high = chord("G:maj").symbol().unwrap();
        assert!(matches!(high.tones(9), Err(Error::PitchOutOfRange(_))));
        assert!(matches!(high.tones(-2), Err(Error::PitchOutOfRange(_))));
    }

    #[test]
    fn vocabulary_constants() {
        assert_eq!(ChordVocabulary::SIZE, 159);
        assert_eq!(ChordVocabulary::tokenize(Token::Pad), 0);
        assert_eq!(ChordVocabulary::detokenize(0).unwrap(), Token::Pad);
        assert_eq!(ChordVocabulary::tokenize(Token::Event(ChordEvent::Silence)), 2);
        assert_eq!(
            ChordVocabulary::detokenize(2).unwrap(),
            Token::Event(ChordEvent::Silence)
        );
        let t = ChordVocabulary::detokenize(57).unwrap();
        assert_eq!(ChordVocabulary::tokenize(t), 57);
        assert!(matches!(
            ChordVocabulary::detokenize(159),
            Err(Error::TokenOutOfRange(159))
        ));
    }

    #[test]
    fn key_text() {
        assert_eq!("C:major".parse::<Key>().unwrap(), Key::C_MAJOR);
        assert_eq!("Am".parse::<Key>().unwrap(), Key::A_MINOR);
        assert_eq!("F# minor".parse::<Key>().unwrap(), Key::minor(6));
        assert_eq!(Key::minor(6).to_string(), "F#:minor");
        assert!("H:major".parse::<Key>().is_err());
    }

    fn any_event() -> impl Strategy<Value = ChordEvent> {
        prop_oneof![
            Just(ChordEvent::Silence),
            (0i32..12, 0usize..13)
                .prop_map(|(r, q)| ChordEvent::Chord(ChordSymbol::new(PitchClass::new(r), ChordQuality::ALL[q]))),
        ]
    }

    fn any_key() -> impl Strategy<Value = Key> {
        (0i32..12, any::<bool>()).prop_map(|(t, major)| if major { Key::major(t) } else { Key::minor(t) })
    }

    proptest! {
        #[test]
        fn transpose_round_trips(c in any_event(), s in -100i32..100) {
            prop_assert_eq!(c.transpose(s).transpose(-s), c);
        }

        #[test]
        fn normalization_is_idempotent(seq in prop::collection::vec(any_event(), 0..20), key in any_key()) {
            let once = normalize_sequence(&seq, key);
            let twice = normalize_sequence(&once.0, once.1);
            prop_assert!(once.1.is_normalized());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn chord_tones_are_ascending(r in 0i32..12, q in 0usize..13, octave in 0i32..8) {
            let tones = ChordSymbol::new(PitchClass::new(r), ChordQuality::ALL[q]).tones(octave).unwrap();
            prop_assert!(tones.len() >= 4);
            for w in tones.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for w in tones[..4].windows(2) {
                prop_assert!(w[1] - w[0] <= 12);
            }
        }

        #[test]
        fn event_text_round_trips(c in any_event()) {
            prop_assert_eq!(parse_chord(&c.to_string()).unwrap(), c);
        }
    }

    #[test]
    fn vocabulary_is_a_bijection() {
        for id in 0..ChordVocabulary::SIZE {
            let t = ChordVocabulary::detokenize(id).unwrap();
            assert_eq!(ChordVocabulary::tokenize(t), id);
        }
        for r in 0..12 {
            for q in ChordQuality::ALL {
                let e = ChordEvent::Chord(ChordSymbol::new(PitchClass::new(r), q));
                let id = ChordVocabulary::event_id(e);
                assert_eq!(ChordVocabulary::event(id).unwrap(), e);
                assert_eq!(ChordVocabulary::quality_of(id), Some(q));
            }
        }
    }
}
