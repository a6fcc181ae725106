//! Event records, stream headers, ground truth, and their file formats.
//!
//! Binary event files start with a 24-byte header followed by fixed-width
//! 13-byte records, all little-endian:
//!
//! ```text
//! header:  magic "EVS1" | width u16 | height u16 | duration_us u64 | event_count u64
//! record:  t_us u64 | x u16 | y u16 | polarity u8
//! ```
//!
//! Files whose name ends in `.csv` use the interchange form instead: an
//! optional `# width=.. height=.. duration_us=..` line, a `t,x,y,p` header
//! row, then one event per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EVS1";
pub const HEADER_SIZE: u64 = 24;
pub const RECORD_SIZE: u64 = 13;

pub const DEFAULT_WIDTH: u16 = 640;
pub const DEFAULT_HEIGHT: u16 = 480;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("timestamp regression at event {index}: {t} < {previous}")]
    TimestampRegression { index: usize, previous: u64, t: u64 },
    #[error("event {index} at ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },
    #[error("header declares {declared} events but {actual} were supplied")]
    CountMismatch { declared: u64, actual: u64 },
    #[error("invalid ground truth at sample {index}: {message}")]
    GroundTruth { index: usize, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A single contrast-change event from the sensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// ON (`true`) or OFF polarity. Carried through the formats but unused
    /// by the trackers.
    pub p: bool,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: bool) -> Self {
        Self { t, x, y, p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    pub event_count: u64,
}

impl Default for StreamHeader {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            duration_us: 0,
            event_count: 0,
        }
    }
}

impl StreamHeader {
    pub fn new(width: u16, height: u16, duration_us: u64, event_count: u64) -> Self {
        Self {
            width,
            height,
            duration_us,
            event_count,
        }
    }

    /// Header describing `events` on a sensor of the given size.
    pub fn for_events(width: u16, height: u16, events: &[Event]) -> Self {
        Self {
            width,
            height,
            duration_us: events.last().map_or(0, |e| e.t),
            event_count: events.len() as u64,
        }
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    fn encode(&self) -> [u8; HEADER_SIZE as usize] {
        let mut buf = [0u8; HEADER_SIZE as usize];
        buf[0..4].copy_from_slice(MAGIC);
        buf[4..6].copy_from_slice(&self.width.to_le_bytes());
        buf[6..8].copy_from_slice(&self.height.to_le_bytes());
        buf[8..16].copy_from_slice(&self.duration_us.to_le_bytes());
        buf[16..24].copy_from_slice(&self.event_count.to_le_bytes());
        buf
    }

    fn decode(buf: &[u8; HEADER_SIZE as usize]) -> Result<Self, StreamError> {
        if &buf[0..4] != MAGIC {
            return Err(StreamError::Parse {
                offset: 0,
                message: format!("bad magic {:?}", &buf[0..4]),
            });
        }
        let width = u16::from_le_bytes([buf[4], buf[5]]);
        let height = u16::from_le_bytes([buf[6], buf[7]]);
        if width == 0 || height == 0 {
            return Err(StreamError::Parse {
                offset: 4,
                message: format!("degenerate resolution {width}x{height}"),
            });
        }
        Ok(Self {
            width,
            height,
            duration_us: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
            event_count: u64::from_le_bytes(buf[16..24].try_into().unwrap()),
        })
    }
}

/// Exact puck state produced by the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSample {
    pub t: u64,
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Checks ordering and bounds of an in-memory stream.
pub fn validate_events(header: &StreamHeader, events: &[Event]) -> Result<(), StreamError> {
    let mut previous = 0u64;
    for (index, e) in events.iter().enumerate() {
        if !header.contains(e.x, e.y) {
            return Err(StreamError::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width: header.width,
                height: header.height,
            });
        }
        if e.t < previous {
            return Err(StreamError::TimestampRegression {
                index,
                previous,
                t: e.t,
            });
        }
        previous = e.t;
    }
    Ok(())
}

/// Incremental reader over a binary event file. Yields events one by one
/// and validates order and bounds on the fly, so it can feed the pipeline
/// without materialising the whole stream.
pub struct EventReader<R> {
    inner: R,
    header: StreamHeader,
    index: u64,
    previous_t: u64,
    failed: bool,
}

impl EventReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StreamError> {
        Self::new(BufReader::with_capacity(1 << 16, File::open(path)?))
    }
}

impl<R: Read> EventReader<R> {
    pub fn new(mut inner: R) -> Result<Self, StreamError> {
        let mut buf = [0u8; HEADER_SIZE as usize];
        read_exact_at(&mut inner, &mut buf, 0)?;
        let header = StreamHeader::decode(&buf)?;
        Ok(Self {
            inner,
            header,
            index: 0,
            previous_t: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    fn next_event(&mut self) -> Result<Event, StreamError> {
        let offset = HEADER_SIZE + self.index * RECORD_SIZE;
        let mut rec = [0u8; RECORD_SIZE as usize];
        read_exact_at(&mut self.inner, &mut rec, offset)?;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = match rec[12] {
            0 => false,
            1 => true,
            other => {
                return Err(StreamError::Parse {
                    offset: offset + 12,
                    message: format!("polarity byte {other} is not 0 or 1"),
                })
            }
        };
        let index = self.index as usize;
        if !self.header.contains(x, y) {
            return Err(StreamError::OutOfBounds {
                index,
                x,
                y,
                width: self.header.width,
                height: self.header.height,
            });
        }
        if t < self.previous_t {
            return Err(StreamError::TimestampRegression {
                index,
                previous: self.previous_t,
                t,
            });
        }
        self.previous_t = t;
        self.index += 1;
        Ok(Event { t, x, y, p })
    }
}

impl<R: Read> Iterator for EventReader<R> {
    type Item = Result<Event, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.index >= self.header.event_count {
            return None;
        }
        let item = self.next_event();
        self.failed = item.is_err();
        Some(item)
    }
}

fn read_exact_at<R: Read>(reader: &mut R, buf: &mut [u8], offset: u64) -> Result<(), StreamError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StreamError::Parse {
                offset,
                message: format!("truncated: expected {} more bytes", buf.len()),
            }
        } else {
            StreamError::Io(e)
        }
    })
}

/// Reads a whole event file (binary, or CSV when the extension is `.csv`).
pub fn read_stream(path: impl AsRef<Path>) -> Result<(StreamHeader, Vec<Event>), StreamError> {
    let path = path.as_ref();
    if is_csv(path) {
        return read_stream_csv(BufReader::new(File::open(path)?));
    }
    let reader = EventReader::open(path)?;
    let header = *reader.header();
    let events = reader.collect::<Result<Vec<_>, _>>()?;
    // Anything left over means the header undercounts.
    let len = std::fs::metadata(path)?.len();
    let expected = HEADER_SIZE + header.event_count * RECORD_SIZE;
    if len != expected {
        return Err(StreamError::Parse {
            offset: expected.min(len),
            message: format!("file is {len} bytes, header implies {expected}"),
        });
    }
    Ok((header, events))
}

/// Writes an event file; the format follows the path's extension.
pub fn write_stream(
    header: &StreamHeader,
    events: &[Event],
    path: impl AsRef<Path>,
) -> Result<(), StreamError> {
    if header.event_count != events.len() as u64 {
        return Err(StreamError::CountMismatch {
            declared: header.event_count,
            actual: events.len() as u64,
        });
    }
    validate_events(header, events)?;
    let path = path.as_ref();
    let file = BufWriter::with_capacity(1 << 16, File::create(path)?);
    if is_csv(path) {
        write_stream_csv(header, events, file)
    } else {
        write_stream_binary(header, events, file)
    }
}

pub fn write_stream_binary<W: Write>(
    header: &StreamHeader,
    events: &[Event],
    mut out: W,
) -> Result<(), StreamError> {
    out.write_all(&header.encode())?;
    let mut rec = [0u8; RECORD_SIZE as usize];
    for e in events {
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.p as u8;
        out.write_all(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CsvEvent {
    t: u64,
    x: u16,
    y: u16,
    p: u8,
}

pub fn write_stream_csv<W: Write>(
    header: &StreamHeader,
    events: &[Event],
    mut out: W,
) -> Result<(), StreamError> {
    writeln!(
        out,
        "# width={} height={} duration_us={}",
        header.width, header.height, header.duration_us
    )?;
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(CsvEvent {
            t: e.t,
            x: e.x,
            y: e.y,
            p: e.p as u8,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stream_csv<R: BufRead>(mut input: R) -> Result<(StreamHeader, Vec<Event>), StreamError> {
    let mut header = StreamHeader::default();
    let mut duration = None;
    let mut first = String::new();
    input.read_line(&mut first)?;
    let first_len = first.len() as u64;
    let had_meta = first.trim_start().starts_with('#');
    let rest: Box<dyn Read + '_> = if let Some(meta) = first.trim().strip_prefix('#') {
        for kv in meta.split_whitespace() {
            let Some((k, v)) = kv.split_once('=') else { continue };
            let bad = |_| StreamError::Parse {
                offset: 0,
                message: format!("bad metadata value {kv:?}"),
            };
            match k {
                "width" => header.width = v.parse().map_err(bad)?,
                "height" => header.height = v.parse().map_err(bad)?,
                "duration_us" => duration = Some(v.parse().map_err(bad)?),
                _ => {}
            }
        }
        Box::new(input)
    } else {
        Box::new(io::Cursor::new(first.into_bytes()).chain(input))
    };
    let base = if had_meta { first_len } else { 0 };

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rest);
    let mut events = Vec::new();
    for row in reader.deserialize::<CsvEvent>() {
        let row = row.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte()) + base;
            StreamError::Parse {
                offset,
                message: e.to_string(),
            }
        })?;
        if row.p > 1 {
            return Err(StreamError::Parse {
                offset: base,
                message: format!("polarity {} is not 0 or 1", row.p),
            });
        }
        events.push(Event::new(row.t, row.x, row.y, row.p == 1));
    }
    header.event_count = events.len() as u64;
    header.duration_us = duration.unwrap_or_else(|| events.last().map_or(0, |e| e.t));
    validate_events(&header, &events)?;
    Ok((header, events))
}

pub fn write_ground_truth(
    samples: &[GroundTruthSample],
    path: impl AsRef<Path>,
) -> Result<(), StreamError> {
    validate_ground_truth(samples)?;
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthSample>, StreamError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let samples = r.deserialize().collect::<Result<Vec<GroundTruthSample>, _>>()?;
    validate_ground_truth(&samples)?;
    Ok(samples)
}

pub fn validate_ground_truth(samples: &[GroundTruthSample]) -> Result<(), StreamError> {
    for (index, pair) in samples.windows(2).enumerate() {
        if pair[1].t <= pair[0].t {
            return Err(StreamError::GroundTruth {
                index: index + 1,
                message: format!("t={} does not follow t={}", pair[1].t, pair[0].t),
            });
        }
    }
    for (index, s) in samples.iter().enumerate() {
        if !(s.a > 0.0 && s.b > 0.0) || !s.cx.is_finite() || !s.cy.is_finite() {
            return Err(StreamError::GroundTruth {
                index,
                message: format!("non-positive axes or non-finite centre: {s:?}"),
            });
        }
    }
    Ok(())
}
