//! Building feature records from per-record input directories.
//!
//! Layout of one record directory (its name becomes the record id):
//!
//! ```text
//! notes.csv      onset,duration,pitch,velocity   (seconds; header optional)
//! chords.txt     one chord per second, whitespace separated ("C:maj", "Am", "N")
//! rms.txt        one RMS value per second on the 16-bit scale
//! scenes.txt     one integer scene id per second
//! emotion.csv    six comma-separated probabilities per second
//! semantic.csv   d_sem comma-separated reals per second
//! frames/        one frame per second, binary PPM (P6), sorted by file name
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::FeatureRecord;
use crate::error::{Error, Result};
use crate::features::{
    detect_key, loudness_from_rms, motion_values, note_density, scene_offsets, smooth_emotions, EmotionProbs,
    KeyProfileSet, NoteEvent, RgbFrame,
};
use crate::music::{normalize_sequence, parse_compact_chord, ChordEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOptions {
    pub emotion_window: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions { emotion_window: 5 }
    }
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_reals(line: &str, file: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("{file}:{lineno}: `{}` is not a number", v.trim())))
        })
        .collect()
}

pub fn parse_notes_csv(text: &str) -> Result<Vec<NoteEvent>> {
    let mut notes = Vec::new();
    for (n, line) in lines(text) {
        if line.starts_with(|c: char| c.is_ascii_alphabetic()) {
            continue;
        }
        let v = parse_reals(line, "notes.csv", n)?;
        if v.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "notes.csv:{n}: expected 4 columns, got {}",
                v.len()
            )));
        }
        if v[2].fract() != 0.0
            || !(0.0..=127.0).contains(&v[2])
            || v[3].fract() != 0.0
            || !(1.0..=127.0).contains(&v[3])
        {
            return Err(Error::InvalidInput(format!(
                "notes.csv:{n}: pitch/velocity must be MIDI integers"
            )));
        }
        notes.push(NoteEvent::new(v[0], v[1], v[2] as u8, v[3] as u8)?);
    }
    Ok(notes)
}

fn parse_column(text: &str, file: &str) -> Result<Vec<f64>> {
    lines(text)
        .map(|(n, l)| {
            l.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("{file}:{n}: `{l}` is not a number")))
        })
        .collect()
}

fn check_len(file: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidInput(format!(
            "{file} has {got} seconds, chords.txt has {want}"
        )));
    }
    Ok(())
}

fn load_frames(dir: &Path) -> Result<Vec<RgbFrame>> {
    let frames_dir = dir.join("frames");
    let mut paths: Vec<PathBuf> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", frames_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| RgbFrame::from_ppm(&fs::read(p)?)).collect()
}

/// Builds one record from a directory of raw channels. Chords are
/// normalized to C major / A minor using the key voted from `notes.csv`.
pub fn extract_record(dir: &Path, profiles: &[KeyProfileSet; 3], opts: &ExtractOptions) -> Result<FeatureRecord> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("bad record directory {}", dir.display())))?
        .to_string();
    let chords: Vec<ChordEvent> = read(dir, "chords.txt")?
        .split_whitespace()
        .map(parse_compact_chord)
        .collect::<Result<_>>()?;
    let len = chords.len();
    if len == 0 {
        return Err(Error::InvalidInput("chords.txt is empty".into()));
    }
    let notes = parse_notes_csv(&read(dir, "notes.csv")?)?;
    let key = detect_key(&notes, profiles)?;
    let (chords, key) = normalize_sequence(&chords, key);
    let density = note_density(&notes, len)?;

    let rms = parse_column(&read(dir, "rms.txt")?, "rms.txt")?;
    check_len("rms.txt", rms.len(), len)?;
    let loudness = rms.iter().map(|&r| loudness_from_rms(r)).collect();

    let scenes: Vec<i64> = parse_column(&read(dir, "scenes.txt")?, "scenes.txt")?
        .into_iter()
        .map(|v| v as i64)
        .collect();
    check_len("scenes.txt", scenes.len(), len)?;

    let emotion_text = read(dir, "emotion.csv")?;
    let mut emotion = Vec::with_capacity(len);
    for (n, line) in lines(&emotion_text) {
        let v = parse_reals(line, "emotion.csv", n)?;
        let arr: [f64; 6] = v.try_into().map_err(|v: Vec<f64>| {
            Error::InvalidInput(format!("emotion.csv:{n}: expected 6 columns, got {}", v.len()))
        })?;
        emotion.push(EmotionProbs::clamped(arr));
    }
    check_len("emotion.csv", emotion.len(), len)?;

    let semantic_text = read(dir, "semantic.csv")?;
    let semantic = lines(&semantic_text)
        .map(|(n, l)| parse_reals(l, "semantic.csv", n))
        .collect::<Result<Vec<_>>>()?;
    check_len("semantic.csv", semantic.len(), len)?;

    let frames = load_frames(dir)?;
    check_len("frames/", frames.len(), len)?;

    let record = FeatureRecord {
        id,
        length_s: len,
        key,
        chords,
        semantic,
        emotion: smooth_emotions(&emotion, opts.emotion_window),
        scene_offset: scene_offsets(&scenes),
        motion: motion_values(&frames)?,
        note_density: density,
        loudness,
    };
    record.validate(None)?;
    Ok(record)
}

/// Successful records and `(directory name, reason)` for each failure.
pub type ExtractOutcome = (Vec<FeatureRecord>, Vec<(String, Error)>);

/// Extracts every subdirectory of `inputs`, in name order. Failures are
/// returned alongside the successes rather than aborting the batch.
pub fn extract_all(inputs: &Path, profiles: &[KeyProfileSet; 3], opts: &ExtractOptions) -> Result<ExtractOutcome> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(inputs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match extract_record(&dir, profiles, opts) {
            Ok(r) => ok.push(r),
            Err(e) => {
                log::warn!("skipping `{name}`: {e}");
                failed.push((name, e));
            }
        }
    }
    Ok((ok, failed))
}

/// Writes a small, internally consistent input directory; used by tests and
/// the demo data command.
pub fn write_example_inputs(dir: &Path, chords: &[&str], d_sem: usize) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let len = chords.len();
    fs::write(dir.join("chords.txt"), chords.join(" "))?;
    let mut notes = String::from("onset,duration,pitch,velocity\n");
    for (t, c) in chords.iter().enumerate() {
        if let Some(sym) = parse_compact_chord(c)?.symbol() {
            for (i, p) in sym.tones(4)?.into_iter().enumerate() {
                notes.push_str(&format!("{},{},{},80\n", t as f64 + 0.25 * i as f64, 0.25, p));
            }
        }
    }
    fs::write(dir.join("notes.csv"), notes)?;
    let rms: Vec<String> = (0..len).map(|t| format!("{}", 1000.0 + 500.0 * t as f64)).collect();
    fs::write(dir.join("rms.txt"), rms.join("\n"))?;
    let scenes: Vec<String> = (0..len).map(|t| (t / 3).to_string()).collect();
    fs::write(dir.join("scenes.txt"), scenes.join("\n"))?;
    let emotion: Vec<String> = (0..len).map(|_| "0.1,0.05,0.05,0.6,0.1,0.1".to_string()).collect();
    fs::write(dir.join("emotion.csv"), emotion.join("\n"))?;
    let semantic: Vec<String> = (0..len)
        .map(|t| {
            (0..d_sem)
                .map(|d| format!("{}", ((t * 7 + d) % 5) as f64 * 0.1))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    fs::write(dir.join("semantic.csv"), semantic.join("\n"))?;
    for t in 0..len {
        let shade = (t * 40 % 256) as u8;
        let frame = RgbFrame::filled(4, 3, [shade, 0, 255 - shade])?;
        fs::write(dir.join("frames").join(format!("{t:06}.ppm")), frame.to_ppm())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::default_key_profiles;
    use crate::music::Key;

    #[test]
    fn extracts_and_normalizes() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("clip_a");
        // G major material
        write_example_inputs(&dir, &["G", "G", "D", "Em", "C", "D"], 3).unwrap();
        let r = extract_record(&dir, &default_key_profiles(), &ExtractOptions::default()).unwrap();
        assert_eq!(r.id, "clip_a");
        assert_eq!(r.key, Key::C_MAJOR);
        assert_eq!(r.chords[0].to_string(), "C:maj");
        assert_eq!(r.chords[3].to_string(), "A:min");
        assert_eq!(r.note_density, vec![4, 4, 4, 4, 4, 4]);
        assert_eq!(r.scene_offset, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(r.motion[0], 0.0);
        assert!(r.motion[1] > 0.0);
        assert!((r.loudness[0] - 1000.0 / 32767.0).abs() < 1e-12);
    }

    #[test]
    fn missing_channel_is_reported_per_record() {
        let tmp = tempfile::tempdir().unwrap();
        write_example_inputs(&tmp.path().join("a"), &["C", "F", "G"], 2).unwrap();
        write_example_inputs(&tmp.path().join("b"), &["C", "F", "G"], 2).unwrap();
        fs::remove_file(tmp.path().join("b/emotion.csv")).unwrap();
        let (ok, failed) = extract_all(tmp.path(), &default_key_profiles(), &ExtractOptions::default()).unwrap();
        assert_eq!(ok.len(), 1);
        assert_eq!(failed.len(), 1);
        assert!(failed[0].1.to_string().contains("emotion.csv"));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("a");
        write_example_inputs(&dir, &["C", "F", "G"], 2).unwrap();
        fs::write(dir.join("rms.txt"), "1\n2").unwrap();
        let err = extract_record(&dir, &default_key_profiles(), &ExtractOptions::default()).unwrap_err();
        assert!(err.to_string().contains("rms.txt"));
    }
}
