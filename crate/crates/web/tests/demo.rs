use v2m_core::midi::parse_midi;
use v2m_web::{key_report, midi_bytes, piano_roll};

#[test]
fn roll_for_level_one() {
    let roll = piano_roll("C C", 2.0, 0.5).unwrap();
    assert_eq!(roll.level, 1);
    assert_eq!(roll.velocity, 81);
    assert_eq!(roll.chords, ["C:maj", "C:maj"]);
    let onsets: Vec<(f64, u8)> = roll.notes.iter().map(|n| (n.onset, n.pitch)).collect();
    assert_eq!(onsets, [(0.0, 60), (0.5, 64), (1.0, 67), (1.5, 72)]);
}

#[test]
fn midi_matches_roll() {
    let text = "C Am F G7";
    let roll = piano_roll(text, 18.0, 1.0).unwrap();
    let parsed = parse_midi(&midi_bytes(text, 18.0, 1.0).unwrap()).unwrap();
    assert_eq!(parsed.notes.len(), roll.notes.len());
    assert!(parsed.notes.iter().all(|n| n.velocity == 112));
    assert_eq!(parsed.notes[0].start, 0);
}

#[test]
fn key_is_normalized() {
    let r = key_report("G D Em C G D G").unwrap();
    assert_eq!(r.key, "G:major");
    assert_eq!(r.normalized_key, "C:major");
    assert_eq!(r.normalized[0], "C:maj");
    assert_eq!(r.normalized[2], "A:min");
}

#[test]
fn bad_input_is_an_error_message() {
    assert!(piano_roll("C Zz", 4.0, 0.5).unwrap_err().contains("Zz"));
    assert!(piano_roll("", 4.0, 0.5).is_err());
    assert!(piano_roll("C", 4.0, 1.5).is_err());
    assert!(key_report("N N").is_err());
}
