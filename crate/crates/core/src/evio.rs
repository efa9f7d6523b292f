//! Event stream container, EVT1/CSV persistence and event-frame
//! accumulation.
//!
//! EVT1 layout (little-endian):
//!
//! ```text
//! header  magic "EVT1" | version u16 = 1 | width u16 | height u16 | reserved u16 = 0 | count u64
//! record  t u64 | x u16 | y u16 | p u8 | reserved [u8; 3] = 0        (16 bytes)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::dvs::{Event, Polarity};

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const EVT1_VERSION: u16 = 1;
pub const EVT1_HEADER_LEN: usize = 20;
pub const EVT1_RECORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum EvioError {
    #[error("bad magic {0:?}, expected \"EVT1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported EVT1 version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated EVT1 data: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("event {index} at ({x}, {y}) is outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: i64,
        y: i64,
        width: u16,
        height: u16,
    },
    #[error("event {index} at t={t} breaks stream order")]
    Unsorted { index: usize, t: u64 },
    #[error("event {index} has invalid polarity {value}")]
    BadPolarity { index: usize, value: u8 },
    #[error("line {line}: {message}")]
    CsvParse { line: u64, message: String },
    #[error("line {line}: event at ({x}, {y}) is outside the {width}x{height} sensor")]
    CsvOutOfBounds {
        line: u64,
        x: i64,
        y: i64,
        width: u16,
        height: u16,
    },
    #[error("line {line}: event at t={t} breaks stream order")]
    CsvUnsorted { line: u64, t: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A time-ordered event stream on a fixed sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self, EvioError> {
        validate(width, height, &events)?;
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    /// Caller guarantees the stream invariants (emulator output).
    pub(crate) fn from_sorted_unchecked(width: u32, height: u32, events: Vec<Event>) -> Self {
        debug_assert!(events.windows(2).all(|w| w[0] <= w[1]));
        Self {
            width: width as u16,
            height: height as u16,
            events,
        }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn on_count(&self) -> usize {
        self.events.iter().filter(|e| e.p == Polarity::On).count()
    }

    /// Keeps the events for which `keep` is true, preserving order.
    pub fn filtered<F: FnMut(&Event) -> bool>(&self, mut keep: F) -> Self {
        Self {
            width: self.width,
            height: self.height,
            events: self.events.iter().copied().filter(|e| keep(e)).collect(),
        }
    }
}

fn validate(width: u16, height: u16, events: &[Event]) -> Result<(), EvioError> {
    for (index, e) in events.iter().enumerate() {
        if e.x >= width || e.y >= height {
            return Err(EvioError::OutOfBounds {
                index,
                x: e.x as i64,
                y: e.y as i64,
                width,
                height,
            });
        }
        if index > 0 && events[index - 1] > *e {
            return Err(EvioError::Unsorted { index, t: e.t });
        }
    }
    Ok(())
}

pub fn write_evt1<W: Write>(stream: &EventStream, mut out: W) -> Result<(), EvioError> {
    out.write_all(&encode_evt1(stream))?;
    Ok(())
}

pub fn encode_evt1(stream: &EventStream) -> Vec<u8> {
    let mut buf = Vec::with_capacity(EVT1_HEADER_LEN + EVT1_RECORD_LEN * stream.len());
    buf.extend_from_slice(EVT1_MAGIC);
    buf.extend_from_slice(&EVT1_VERSION.to_le_bytes());
    buf.extend_from_slice(&stream.width.to_le_bytes());
    buf.extend_from_slice(&stream.height.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&encode_record(e));
    }
    buf
}

pub fn encode_record(e: &Event) -> [u8; EVT1_RECORD_LEN] {
    let mut rec = [0u8; EVT1_RECORD_LEN];
    rec[0..8].copy_from_slice(&e.t.to_le_bytes());
    rec[8..10].copy_from_slice(&e.x.to_le_bytes());
    rec[10..12].copy_from_slice(&e.y.to_le_bytes());
    rec[12] = e.p.bit();
    rec
}

pub fn read_evt1<R: Read>(mut input: R) -> Result<EventStream, EvioError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_evt1(&bytes)
}

pub fn decode_evt1(bytes: &[u8]) -> Result<EventStream, EvioError> {
    if bytes.len() < 4 {
        return Err(EvioError::Truncated {
            expected: EVT1_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != EVT1_MAGIC {
        return Err(EvioError::BadMagic(magic));
    }
    if bytes.len() < EVT1_HEADER_LEN {
        return Err(EvioError::Truncated {
            expected: EVT1_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(4);
    if version != EVT1_VERSION {
        return Err(EvioError::UnsupportedVersion(version));
    }
    let width = u16_at(6);
    let height = u16_at(8);
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (count as u128 * EVT1_RECORD_LEN as u128 + EVT1_HEADER_LEN as u128)
        .min(usize::MAX as u128) as usize;
    if bytes.len() < expected {
        return Err(EvioError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }

    let mut events = Vec::with_capacity(count as usize);
    for (index, rec) in bytes[EVT1_HEADER_LEN..expected]
        .chunks_exact(EVT1_RECORD_LEN)
        .enumerate()
    {
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = Polarity::from_bit(rec[12]).ok_or(EvioError::BadPolarity {
            index,
            value: rec[12],
        })?;
        events.push(Event::new(t, x, y, p));
    }
    EventStream::new(width, height, events)
}

pub fn save_evt1(stream: &EventStream, path: &Path) -> Result<(), EvioError> {
    std::fs::write(path, encode_evt1(stream))?;
    Ok(())
}

pub fn load_evt1(path: &Path) -> Result<EventStream, EvioError> {
    decode_evt1(&std::fs::read(path)?)
}

/// `t,x,y,p` lines after a header line.
pub fn write_csv<W: Write>(stream: &EventStream, out: W) -> Result<(), EvioError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["t", "x", "y", "p"]).map_err(csv_io)?;
    for e in &stream.events {
        wtr.write_record(&[
            e.t.to_string(),
            e.x.to_string(),
            e.y.to_string(),
            e.p.bit().to_string(),
        ])
        .map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> EvioError {
    EvioError::Io(std::io::Error::other(e))
}

/// Parses the CSV form. The sensor size is not stored in the file and must
/// be supplied. Reported line numbers are 1-based, counting the header.
pub fn read_csv<R: Read>(input: R, width: u16, height: u16) -> Result<EventStream, EvioError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut events: Vec<Event> = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line_hint = rdr.position().line() + 1;
        let more = rdr.read_record(&mut record).map_err(|e| EvioError::CsvParse {
            line: e.position().map_or(line_hint, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(line_hint, |p| p.line());
        if record.len() != 4 {
            return Err(EvioError::CsvParse {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<i64, EvioError> {
            record[i].parse::<i64>().map_err(|_| EvioError::CsvParse {
                line,
                message: format!("invalid {name} value {:?}", &record[i]),
            })
        };
        let t = field(0, "t")?;
        let x = field(1, "x")?;
        let y = field(2, "y")?;
        let p = field(3, "p")?;
        if t < 0 {
            return Err(EvioError::CsvParse {
                line,
                message: format!("negative timestamp {t}"),
            });
        }
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return Err(EvioError::CsvOutOfBounds {
                line,
                x,
                y,
                width,
                height,
            });
        }
        let p = match p {
            0 => Polarity::Off,
            1 => Polarity::On,
            other => {
                return Err(EvioError::CsvParse {
                    line,
                    message: format!("invalid polarity {other}"),
                })
            }
        };
        let e = Event::new(t as u64, x as u16, y as u16, p);
        if events.last().is_some_and(|prev| *prev > e) {
            return Err(EvioError::CsvUnsorted { line, t: e.t });
        }
        events.push(e);
    }
    Ok(EventStream {
        width,
        height,
        events,
    })
}

/// Per-pixel ON/OFF histogram of the events in `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFrame {
    pub t_start: u64,
    pub t_end: u64,
    pub width: u16,
    pub height: u16,
    pub on_counts: Vec<u32>,
    pub off_counts: Vec<u32>,
}

impl EventFrame {
    pub fn zeros(t_start: u64, t_end: u64, width: u16, height: u16) -> Self {
        let n = width as usize * height as usize;
        Self {
            t_start,
            t_end,
            width,
            height,
            on_counts: vec![0; n],
            off_counts: vec![0; n],
        }
    }

    pub fn add(&mut self, e: &Event) {
        let i = e.y as usize * self.width as usize + e.x as usize;
        match e.p {
            Polarity::On => self.on_counts[i] += 1,
            Polarity::Off => self.off_counts[i] += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.on_counts.iter().map(|&c| c as u64).sum::<u64>()
            + self.off_counts.iter().map(|&c| c as u64).sum::<u64>()
    }
}

/// Lazily bins a stream into consecutive windows starting at `t0`.
pub struct Accumulator<'a> {
    stream: &'a EventStream,
    window_us: u64,
    next_start: u64,
    t_end: u64,
    cursor: usize,
}

impl<'a> Accumulator<'a> {
    /// Windows cover `[t0, t_end)`; the last window may extend past `t_end`.
    pub fn new(stream: &'a EventStream, window_us: u64, t0: u64, t_end: u64) -> Self {
        assert!(window_us > 0, "window must be positive");
        let cursor = stream.events.partition_point(|e| e.t < t0);
        Self {
            stream,
            window_us,
            next_start: t0,
            t_end,
            cursor,
        }
    }

    /// Windows up to and including the last event.
    pub fn covering(stream: &'a EventStream, window_us: u64, t0: u64) -> Self {
        let t_end = stream.events.last().map_or(t0, |e| e.t + 1);
        Self::new(stream, window_us, t0, t_end)
    }

    pub fn window_count(&self) -> usize {
        window_count(self.next_start, self.t_end, self.window_us)
    }
}

impl Iterator for Accumulator<'_> {
    type Item = EventFrame;

    fn next(&mut self) -> Option<EventFrame> {
        if self.next_start >= self.t_end {
            return None;
        }
        let start = self.next_start;
        let end = start + self.window_us;
        let mut frame = EventFrame::zeros(start, end, self.stream.width, self.stream.height);
        let events = &self.stream.events;
        while self.cursor < events.len() && events[self.cursor].t < end {
            frame.add(&events[self.cursor]);
            self.cursor += 1;
        }
        self.next_start = end;
        Some(frame)
    }
}

pub fn window_count(t0: u64, t_end: u64, window_us: u64) -> usize {
    if t_end <= t0 {
        0
    } else {
        (t_end - t0).div_ceil(window_us) as usize
    }
}

/// Bins every event from `t0` through the last event.
pub fn accumulate(stream: &EventStream, window_us: u64, t0: u64) -> Vec<EventFrame> {
    Accumulator::covering(stream, window_us, t0).collect()
}

/// Bins `[t0, t_end)`, producing empty frames where there are no events.
pub fn accumulate_until(stream: &EventStream, window_us: u64, t0: u64, t_end: u64) -> Vec<EventFrame> {
    Accumulator::new(stream, window_us, t0, t_end).collect()
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn put(&mut self, x: i64, y: i64, value: u8) {
        if x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height {
            self.data[(y as u32 * self.width + x as u32) as usize] = value;
        }
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), image::ImageError> {
        assert_eq!(self.data.len(), self.width as usize * self.height as usize);
        crate::frames::save_p5_u8(path, self.width, self.height, &self.data)
    }
}

/// Majority polarity per pixel: 255 for ON, 0 for OFF, 128 for none or a tie.
pub fn render_event_frame(frame: &EventFrame) -> GrayImage {
    let data = frame
        .on_counts
        .iter()
        .zip(&frame.off_counts)
        .map(|(&on, &off)| match on.cmp(&off) {
            std::cmp::Ordering::Greater => 255,
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => 128,
        })
        .collect();
    GrayImage {
        width: frame.width as u32,
        height: frame.height as u32,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16, on: bool) -> Event {
        Event::new(t, x, y, if on { Polarity::On } else { Polarity::Off })
    }

    #[test]
    fn empty_stream_header() {
        let s = EventStream::empty(100, 100);
        let bytes = encode_evt1(&s);
        assert_eq!(bytes.len(), EVT1_HEADER_LEN);
        assert_eq!(&bytes[0..4], b"EVT1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[100, 0]);
        assert_eq!(&bytes[8..10], &[100, 0]);
        assert_eq!(&bytes[10..12], &[0, 0]);
        assert_eq!(&bytes[12..20], &[0; 8]);
        assert_eq!(decode_evt1(&bytes).unwrap(), s);
    }

    #[test]
    fn record_layout() {
        let rec = encode_record(&ev(33333, 12, 7, true));
        assert_eq!(
            rec,
            [0x35, 0x82, 0, 0, 0, 0, 0, 0, 0x0C, 0x00, 0x07, 0x00, 0x01, 0, 0, 0]
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_evt1(&EventStream::empty(4, 4));
        bytes[3] = b'0';
        assert!(matches!(decode_evt1(&bytes), Err(EvioError::BadMagic(m)) if &m == b"EVT0"));
    }

    #[test]
    fn truncated_payload() {
        let s = EventStream::new(20, 20, vec![ev(1, 1, 1, true), ev(2, 2, 2, false)]).unwrap();
        let bytes = encode_evt1(&s);
        assert!(matches!(
            decode_evt1(&bytes[..bytes.len() - 1]),
            Err(EvioError::Truncated { .. })
        ));
        assert!(matches!(decode_evt1(&bytes[..10]), Err(EvioError::Truncated { .. })));
    }

    #[test]
    fn out_of_bounds_and_unsorted_records() {
        let s = EventStream::new(20, 20, vec![ev(5, 1, 1, true), ev(9, 2, 2, false)]).unwrap();
        let mut bytes = encode_evt1(&s);
        // x of the second record -> 20
        bytes[EVT1_HEADER_LEN + EVT1_RECORD_LEN + 8] = 20;
        assert!(matches!(
            decode_evt1(&bytes),
            Err(EvioError::OutOfBounds { index: 1, .. })
        ));

        let mut bytes = encode_evt1(&s);
        bytes[EVT1_HEADER_LEN + EVT1_RECORD_LEN] = 1; // t = 1 < 5
        assert!(matches!(decode_evt1(&bytes), Err(EvioError::Unsorted { index: 1, t: 1 })));

        let mut bytes = encode_evt1(&s);
        bytes[EVT1_HEADER_LEN + 12] = 2;
        assert!(matches!(
            decode_evt1(&bytes),
            Err(EvioError::BadPolarity { index: 0, value: 2 })
        ));
    }

    #[test]
    fn ties_must_follow_row_column_polarity_order() {
        assert!(EventStream::new(10, 10, vec![ev(5, 3, 1, true), ev(5, 2, 1, true)]).is_err());
        assert!(EventStream::new(10, 10, vec![ev(5, 3, 1, false), ev(5, 3, 1, true)]).is_ok());
        assert!(EventStream::new(10, 10, vec![ev(5, 9, 0, true), ev(5, 0, 1, false)]).is_ok());
    }

    #[test]
    fn csv_single_event() {
        let s = EventStream::new(20, 20, vec![ev(33333, 12, 7, true)]).unwrap();
        let mut out = Vec::new();
        write_csv(&s, &mut out).unwrap();
        assert_eq!(String::from_utf8(out.clone()).unwrap(), "t,x,y,p\n33333,12,7,1\n");
        assert_eq!(read_csv(&out[..], 20, 20).unwrap(), s);
    }

    #[test]
    fn csv_header_only() {
        let s = read_csv("t,x,y,p\n".as_bytes(), 8, 8).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn csv_negative_coordinate_reports_line() {
        let err = read_csv("t,x,y,p\n5,-1,0,1\n".as_bytes(), 8, 8).unwrap_err();
        assert!(matches!(err, EvioError::CsvOutOfBounds { line: 2, x: -1, .. }), "{err}");
    }

    #[test]
    fn csv_malformed_lines() {
        let err = read_csv("t,x,y,p\n1,1,1,1\nabc,1,1,1\n".as_bytes(), 8, 8).unwrap_err();
        assert!(matches!(err, EvioError::CsvParse { line: 3, .. }), "{err}");
        let err = read_csv("t,x,y,p\n1,1,1\n".as_bytes(), 8, 8).unwrap_err();
        assert!(matches!(err, EvioError::CsvParse { line: 2, .. }), "{err}");
        let err = read_csv("t,x,y,p\n9,1,1,1\n3,1,1,1\n".as_bytes(), 8, 8).unwrap_err();
        assert!(matches!(err, EvioError::CsvUnsorted { line: 3, t: 3 }), "{err}");
    }

    #[test]
    fn accumulation_conserves_counts() {
        let events: Vec<Event> = (0..1000u64).map(|i| ev(i * 100, (i % 7) as u16, (i % 5) as u16, i % 3 == 0)).collect();
        let mut sorted = events.clone();
        sorted.sort();
        let s = EventStream::new(8, 8, sorted).unwrap();
        let frames = accumulate(&s, 33333, 0);
        assert_eq!(frames.len(), window_count(0, 99_901, 33333));
        assert_eq!(frames.len(), 3);
        let total: u64 = frames.iter().map(|f| f.total()).sum();
        assert_eq!(total, 1000);
    }

    #[test]
    fn empty_stream_gives_zero_frames() {
        let s = EventStream::empty(4, 4);
        let frames = accumulate_until(&s, 1000, 0, 5000);
        assert_eq!(frames.len(), 5);
        assert!(frames.iter().all(|f| f.total() == 0));
    }

    #[test]
    fn window_boundary_is_half_open() {
        let s = EventStream::new(4, 4, vec![ev(1500, 1, 1, true)]).unwrap();
        let frames = accumulate_until(&s, 1000, 500, 3000);
        assert_eq!(frames[0].total(), 0);
        assert_eq!(frames[1].total(), 1);
        assert_eq!(frames[1].t_start, 1500);
    }

    #[test]
    fn event_frame_rendering() {
        let mut f = EventFrame::zeros(0, 10, 3, 1);
        f.on_counts = vec![3, 2, 0];
        f.off_counts = vec![1, 2, 4];
        let img = render_event_frame(&f);
        assert_eq!(img.data, vec![255, 128, 0]);
        let blank = render_event_frame(&EventFrame::zeros(0, 10, 5, 5));
        assert!(blank.data.iter().all(|&v| v == 128));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn stream() -> impl Strategy<Value = EventStream> {
            (1u16..300, 1u16..300).prop_flat_map(|(w, h)| {
                prop::collection::vec((0u64..5_000_000, 0..w, 0..h, any::<bool>()), 0..200).prop_map(
                    move |raw| {
                        let mut events: Vec<Event> =
                            raw.into_iter().map(|(t, x, y, p)| ev(t, x, y, p)).collect();
                        events.sort();
                        EventStream::new(w, h, events).unwrap()
                    },
                )
            })
        }

        proptest! {
            #[test]
            fn evt1_round_trip(s in stream()) {
                prop_assert_eq!(decode_evt1(&encode_evt1(&s)).unwrap(), s);
            }

            #[test]
            fn csv_round_trip(s in stream()) {
                let mut out = Vec::new();
                write_csv(&s, &mut out).unwrap();
                prop_assert_eq!(read_csv(&out[..], s.width(), s.height()).unwrap(), s);
            }

            #[test]
            fn windows_partition_the_covered_span(
                s in stream(), window in 1u64..2_000_000, t0 in 0u64..1_000_000
            ) {
                let frames = accumulate(&s, window, t0);
                let total: u64 = frames.iter().map(|f| f.total()).sum();
                let in_span = s.events().iter().filter(|e| e.t >= t0).count() as u64;
                prop_assert_eq!(total, in_span);
                for (i, f) in frames.iter().enumerate() {
                    prop_assert_eq!(f.t_start, t0 + i as u64 * window);
                }
            }

            #[test]
            fn rendering_depends_on_sign_only(
                on in prop::collection::vec(0u32..50, 16), off in prop::collection::vec(0u32..50, 16), k in 1u32..5
            ) {
                let mut a = EventFrame::zeros(0, 1, 4, 4);
                a.on_counts = on.clone();
                a.off_counts = off.clone();
                let mut b = a.clone();
                b.on_counts = on.iter().map(|v| v * k).collect();
                b.off_counts = off.iter().map(|v| v * k).collect();
                prop_assert_eq!(render_event_frame(&a), render_event_frame(&b));
            }
        }
    }
}
