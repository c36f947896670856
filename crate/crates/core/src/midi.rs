//! Standard MIDI file writing (format 0) and a small reader used to check
//! rendered output.

use crate::error::{Error, Result};
use crate::features::NoteEvent;

pub const TICKS_PER_QUARTER: u16 = 480;
pub const TEMPO_BPM: u32 = 120;
/// Ticks per second at the fixed tempo.
pub const TICKS_PER_SECOND: u32 = TICKS_PER_QUARTER as u32 * TEMPO_BPM / 60;
const MICROS_PER_QUARTER: u32 = 60_000_000 / TEMPO_BPM;

pub fn seconds_to_ticks(s: f64) -> u32 {
    (s * TICKS_PER_SECOND as f64).round() as u32
}

/// A note in tick units, as laid out in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TickNote {
    pub start: u32,
    pub end: u32,
    pub pitch: u8,
    pub velocity: u8,
}

/// Converts notes to ticks, drops zero-length results, and truncates an
/// earlier note of the same pitch where a later one starts inside it.
pub fn to_tick_notes(events: &[NoteEvent]) -> Result<Vec<TickNote>> {
    let mut notes = Vec::with_capacity(events.len());
    for e in events {
        if e.pitch > 127 {
            return Err(Error::PitchOutOfRange(e.pitch as i32));
        }
        if !(1..=127).contains(&e.velocity) {
            return Err(Error::InvalidInput(format!(
                "note at {}s has velocity {}, expected 1..=127",
                e.onset, e.velocity
            )));
        }
        if !(e.onset.is_finite() && e.onset >= 0.0 && e.duration.is_finite() && e.duration > 0.0) {
            return Err(Error::InvalidInput(format!(
                "note timing onset={} duration={} is invalid",
                e.onset, e.duration
            )));
        }
        notes.push(TickNote {
            start: seconds_to_ticks(e.onset),
            end: seconds_to_ticks(e.onset + e.duration),
            pitch: e.pitch,
            velocity: e.velocity,
        });
    }
    notes.sort();
    let mut out: Vec<TickNote> = Vec::with_capacity(notes.len());
    for n in notes {
        if let Some(prev) = out.iter_mut().rev().find(|p| p.pitch == n.pitch && p.end > n.start) {
            prev.end = n.start;
        }
        out.push(n);
    }
    out.retain(|n| n.end > n.start);
    Ok(out)
}

fn write_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (v & 0x7F) as u8;
    v >>= 7;
    while v > 0 {
        i -= 1;
        buf[i] = 0x80 | (v & 0x7F) as u8;
        v >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

/// Renders notes to a format-0 file at 480 ticks per quarter and 120 bpm on
/// channel 1. At equal ticks note-offs precede note-ons.
pub fn render_midi(events: &[NoteEvent]) -> Result<Vec<u8>> {
    let notes = to_tick_notes(events)?;
    // (tick, is_on, pitch, velocity)
    let mut msgs: Vec<(u32, bool, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in &notes {
        msgs.push((n.start, true, n.pitch, n.velocity));
        msgs.push((n.end, false, n.pitch, 0));
    }
    msgs.sort_by_key(|&(tick, on, pitch, _)| (tick, on, pitch));

    let mut track = Vec::new();
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
    track.extend_from_slice(&MICROS_PER_QUARTER.to_be_bytes()[1..]);
    let mut now = 0;
    for (tick, on, pitch, vel) in msgs {
        write_vlq(&mut track, tick - now);
        now = tick;
        if on {
            track.extend_from_slice(&[0x90, pitch, vel]);
        } else {
            track.extend_from_slice(&[0x80, pitch, 0]);
        }
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(22 + track.len());
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&TICKS_PER_QUARTER.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

/// Contents recovered from a standard MIDI file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    pub format: u16,
    pub division: u16,
    /// Microseconds per quarter from the first tempo event, if any.
    pub tempo: Option<u32>,
    /// Notes sorted by start tick then pitch.
    pub notes: Vec<TickNote>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::InvalidInput("truncated MIDI data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::InvalidInput(
            "variable-length quantity longer than 4 bytes".into(),
        ))
    }
}

/// Parses every track, pairing note-ons with the next note-off (or
/// zero-velocity note-on) of the same channel and pitch.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiFile> {
    let bad = |m: &str| Error::InvalidInput(format!("MIDI: {m}"));
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"MThd" {
        return Err(bad("missing MThd"));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(bad("short header"));
    }
    let format = r.u16()?;
    let ntrks = r.u16()?;
    let division = r.u16()?;
    r.take(header_len - 6)?;
    let mut tempo = None;
    let mut notes = Vec::new();
    for _ in 0..ntrks {
        if r.take(4)? != b"MTrk" {
            return Err(bad("missing MTrk"));
        }
        let len = r.u32()? as usize;
        let mut t = Reader {
            bytes: r.take(len)?,
            pos: 0,
        };
        let mut now = 0u32;
        let mut status = 0u8;
        let mut open: Vec<(u8, u8, u32, u8)> = Vec::new();
        while t.pos < t.bytes.len() {
            now += t.vlq()?;
            let mut b = t.u8()?;
            if b < 0x80 {
                if status == 0 {
                    return Err(bad("running status without a status byte"));
                }
                t.pos -= 1;
                b = status;
            }
            match b {
                0xFF => {
                    let kind = t.u8()?;
                    let n = t.vlq()? as usize;
                    let data = t.take(n)?;
                    if kind == 0x51 && n == 3 && tempo.is_none() {
                        tempo = Some(u32::from_be_bytes([0, data[0], data[1], data[2]]));
                    }
                    if kind == 0x2F {
                        break;
                    }
                }
                0xF0 | 0xF7 => {
                    let n = t.vlq()? as usize;
                    t.take(n)?;
                }
                _ => {
                    status = b;
                    let channel = b & 0x0F;
                    match b & 0xF0 {
                        0x80 | 0x90 => {
                            let pitch = t.u8()?;
                            let vel = t.u8()?;
                            if b & 0xF0 == 0x90 && vel > 0 {
                                open.push((channel, pitch, now, vel));
                            } else if let Some(i) = open.iter().position(|o| o.0 == channel && o.1 == pitch) {
                                let (_, pitch, start, velocity) = open.remove(i);
                                notes.push(TickNote {
                                    start,
                                    end: now,
                                    pitch,
                                    velocity,
                                });
                            }
                        }
                        0xA0 | 0xB0 | 0xE0 => {
                            t.take(2)?;
                        }
                        0xC0 | 0xD0 => {
                            t.take(1)?;
                        }
                        _ => return Err(bad("unknown status byte")),
                    }
                }
            }
        }
        if !open.is_empty() {
            return Err(bad("note-on without a matching note-off"));
        }
    }
    notes.sort();
    Ok(MidiFile {
        format,
        division,
        tempo,
        notes,
    })
}
