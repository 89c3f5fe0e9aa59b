//! Event stream parsing, validation and the temporal reversal used by the
//! reversed-consistency filter.
//!
//! Two on-disk encodings are supported:
//!
//! * the 5-byte binary record layout used by the N-Caltech101 distribution:
//!   `byte0 = x`, `byte1 = y`, bit 7 of `byte2` is the polarity and the
//!   remaining 23 bits (`byte2 & 0x7F`, `byte3`, `byte4`, big-endian) are the
//!   timestamp in microseconds;
//! * a text fixture format with one `t x y p` event per line, where blank
//!   lines and `#` comments are ignored.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 5;
const MAX_BINARY_TIMESTAMP: u64 = 0x7F_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Off = 0,
    On = 1,
}

impl Polarity {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }

    /// Accepts both `{0, 1}` and `{-1, +1}` conventions.
    pub fn from_signed(value: i64) -> Option<Self> {
        match value {
            0 | -1 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// A non-empty, time-ordered event sequence together with its sensor geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
}

impl EventStream {
    /// Validates bounds and stably sorts by timestamp.
    pub fn new(mut events: Vec<Event>, width: u32, height: u32) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::EmptyStream);
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "sensor geometry {width}x{height} is empty"
            )));
        }
        for (index, e) in events.iter().enumerate() {
            if u32::from(e.x) >= width || u32::from(e.y) >= height {
                return Err(Error::OutOfBounds {
                    index,
                    x: e.x.into(),
                    y: e.y.into(),
                    width,
                    height,
                });
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            events,
            width,
            height,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn t_min(&self) -> u64 {
        self.events[0].t
    }

    pub fn t_max(&self) -> u64 {
        self.events[self.events.len() - 1].t
    }
}

pub fn parse_dataset_binary(raw: &[u8], width: u32, height: u32) -> Result<EventStream> {
    if !raw.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::MalformedFile(format!(
            "length {} is not a multiple of {RECORD_BYTES}",
            raw.len()
        )));
    }
    let events = raw
        .chunks_exact(RECORD_BYTES)
        .map(|r| {
            let p = if r[2] & 0x80 != 0 {
                Polarity::On
            } else {
                Polarity::Off
            };
            let t = (u64::from(r[2] & 0x7F) << 16) | (u64::from(r[3]) << 8) | u64::from(r[4]);
            Event::new(r[0].into(), r[1].into(), t, p)
        })
        .collect();
    EventStream::new(events, width, height)
}

pub fn serialize_dataset_binary(stream: &EventStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(stream.len() * RECORD_BYTES);
    for (i, e) in stream.events().iter().enumerate() {
        if e.x > 0xFF || e.y > 0xFF {
            return Err(Error::Validation(format!(
                "event {i}: coordinates ({}, {}) do not fit the 8-bit record layout",
                e.x, e.y
            )));
        }
        if e.t > MAX_BINARY_TIMESTAMP {
            return Err(Error::Validation(format!(
                "event {i}: timestamp {} exceeds the 23-bit record layout",
                e.t
            )));
        }
        let pol = if e.p == Polarity::On { 0x80 } else { 0 };
        out.extend_from_slice(&[
            e.x as u8,
            e.y as u8,
            pol | ((e.t >> 16) as u8 & 0x7F),
            (e.t >> 8) as u8,
            e.t as u8,
        ]);
    }
    Ok(out)
}

pub fn parse_text_events(text: &str, width: u32, height: u32) -> Result<EventStream> {
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line_no = lineno + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields `t x y p`, found {}", fields.len()),
            });
        }
        let num = |idx: usize, name: &str| -> Result<i64> {
            fields[idx].parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("field `{name}` is not an integer: {:?}", fields[idx]),
            })
        };
        let (t, x, y, p) = (num(0, "t")?, num(1, "x")?, num(2, "y")?, num(3, "p")?);
        let p = Polarity::from_signed(p).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("polarity {p} out of range"),
        })?;
        if t < 0 || x < 0 || y < 0 || x > i64::from(u16::MAX) || y > i64::from(u16::MAX) {
            return Err(Error::Parse {
                line: line_no,
                message: "negative or oversized field".into(),
            });
        }
        events.push(Event::new(x as u16, y as u16, t as u64, p));
    }
    EventStream::new(events, width, height)
}

pub fn format_text_events(stream: &EventStream) -> String {
    let mut s = String::new();
    for e in stream.events() {
        s.push_str(&format!("{} {} {} {}\n", e.t, e.x, e.y, e.p.index()));
    }
    s
}

/// Maps event `i` to `(x_i, y_i, max_j t_j - t_i, p_i)` and emits the
/// events in reverse order, which keeps timestamps non-decreasing.
/// Polarity is not flipped.
pub fn reverse_time(stream: &EventStream) -> EventStream {
    let t_max = stream.t_max();
    let events = stream
        .events()
        .iter()
        .rev()
        .map(|e| Event::new(e.x, e.y, t_max - e.t, e.p))
        .collect();
    EventStream {
        events,
        width: stream.width,
        height: stream.height,
    }
}

pub fn read_event_file(path: &Path, width: u32, height: u32) -> Result<EventStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_text = path.extension().map(|e| e == "txt").unwrap_or(false);
    if is_text {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::MalformedFile(format!("{} is not UTF-8", path.display())))?;
        parse_text_events(&text, width, height)
    } else {
        parse_dataset_binary(&bytes, width, height)
    }
}

pub fn write_event_file(path: &Path, stream: &EventStream) -> Result<()> {
    let bytes = serialize_dataset_binary(stream)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub relative_path: PathBuf,
    pub category_name: String,
    pub split: Split,
}

/// Dataset manifest: a CSV file with a `relative_path,category_name,split`
/// header. Paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (i, rec) in reader.deserialize::<ManifestEntry>().enumerate() {
            let entry = rec.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("relative_path,category_name,split\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{}\n",
                e.relative_path.display(),
                e.category_name,
                e.split
            ));
        }
        s
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Category names in order of first appearance.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.category_name) {
                out.push(e.category_name.clone());
            }
        }
        out
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.relative_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(x: u16, y: u16, t: u64, p: u8) -> Event {
        Event::new(x, y, t, Polarity::from_bit(p).unwrap())
    }

    #[test]
    fn decodes_worked_record() {
        let s = parse_dataset_binary(&[0x10, 0x20, 0x80, 0x00, 0x05], 64, 64).unwrap();
        assert_eq!(s.events(), &[ev(16, 32, 5, 1)]);
    }

    #[test]
    fn decodes_zero_record() {
        let s = parse_dataset_binary(&[0; 5], 1, 1).unwrap();
        assert_eq!(s.events(), &[ev(0, 0, 0, 0)]);
    }

    #[test]
    fn rejects_misaligned_length() {
        assert!(matches!(
            parse_dataset_binary(&[0; 7], 8, 8),
            Err(Error::MalformedFile(_))
        ));
    }

    #[test]
    fn out_of_bounds_names_record() {
        let raw = [0, 0, 0, 0, 1, 9, 0, 0, 0, 2];
        match parse_dataset_binary(&raw, 8, 8) {
            Err(Error::OutOfBounds { index, x, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(x, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_sort_is_stable() {
        // two records at t=3 followed by one at t=1
        let raw = [1, 0, 0, 0, 3, 2, 0, 0, 0, 3, 3, 0, 0, 0, 1];
        let s = parse_dataset_binary(&raw, 8, 8).unwrap();
        let xs: Vec<u16> = s.events().iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![3, 1, 2]);
    }

    #[test]
    fn text_fixture() {
        let s = parse_text_events("0 1 2 1\n10 3 4 0", 8, 8).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.events()[1], ev(3, 4, 10, 0));

        let s = parse_text_events("# header\n\n5 1 1 -1\n", 8, 8).unwrap();
        assert_eq!(s.events()[0].p, Polarity::Off);
    }

    #[test]
    fn text_errors() {
        assert!(matches!(
            parse_text_events("", 8, 8),
            Err(Error::EmptyStream)
        ));
        assert!(matches!(
            parse_text_events("5 1 2 7", 8, 8),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_text_events("0 0 0 0\nabc 1 2 1", 8, 8),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn reversal_examples() {
        let s = EventStream::new(vec![ev(1, 2, 0, 1), ev(3, 4, 10, 0)], 8, 8).unwrap();
        let r = reverse_time(&s);
        assert_eq!(r.events(), &[ev(3, 4, 0, 0), ev(1, 2, 10, 1)]);

        let single = EventStream::new(vec![ev(5, 6, 7, 1)], 8, 8).unwrap();
        assert_eq!(reverse_time(&single).events(), &[ev(5, 6, 0, 1)]);
    }

    #[test]
    fn double_reversal_is_time_shift() {
        let s = EventStream::new(
            vec![
                ev(1, 1, 5, 1),
                ev(2, 2, 9, 0),
                ev(3, 3, 9, 1),
                ev(4, 4, 20, 0),
            ],
            8,
            8,
        )
        .unwrap();
        let rr = reverse_time(&reverse_time(&s));
        let shift = s.t_min();
        let mut a: Vec<_> = s
            .events()
            .iter()
            .map(|e| (e.x, e.y, e.t - shift, e.p))
            .collect();
        let mut b: Vec<_> = rr.events().iter().map(|e| (e.x, e.y, e.t, e.p)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_roundtrip() {
        let text = "relative_path,category_name,split\na/0.bin,anchor,train\nb/1.bin,camera,test\n";
        let m = Manifest::parse(text, "/data").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].split, Split::Test);
        assert_eq!(m.categories(), vec!["anchor", "camera"]);
        assert_eq!(m.to_csv(), text);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/a/0.bin"));
    }

    #[test]
    fn manifest_rejects_bad_split() {
        let text = "relative_path,category_name,split\na.bin,anchor,validation\n";
        assert!(Manifest::parse(text, ".").is_err());
    }
}
