//! Frame directories: 16-bit PGM images plus a `frames.txt` manifest of
//! `<filename> <timestamp_us>` lines in ascending time order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::render::LuminanceFrame;

pub const MANIFEST_NAME: &str = "frames.txt";

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error("cannot read manifest {}: {source}", path.display())]
    MissingManifest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{MANIFEST_NAME} line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{MANIFEST_NAME} lists no frames")]
    Empty,
    #[error("{}: {message}", path.display())]
    Frame { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    pub timestamp_us: u64,
}

pub fn frame_filename(index: usize) -> String {
    format!("frame_{index:05}.pgm")
}

fn quantize(l: f32) -> u16 {
    (l.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn p5_encoder<W: Write>(w: W, width: u32, height: u32, maxwhite: u32) -> image::codecs::pnm::PnmEncoder<W> {
    use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
    PnmEncoder::new(w).with_header(
        GraymapHeader {
            encoding: SampleEncoding::Binary,
            width,
            height,
            maxwhite,
        }
        .into(),
    )
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, image::ImageError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(image::ImageError::IoError)?))
}

/// Writes an 8-bit binary (P5) PGM.
pub(crate) fn save_p5_u8(path: &Path, width: u32, height: u32, samples: &[u8]) -> Result<(), image::ImageError> {
    let mut w = create(path)?;
    p5_encoder(&mut w, width, height, 255).encode(samples, width, height, image::ExtendedColorType::L8)?;
    w.flush().map_err(image::ImageError::IoError)
}

/// Writes a 16-bit binary (P5) PGM; samples are stored big-endian.
pub(crate) fn save_p5_u16(path: &Path, width: u32, height: u32, samples: &[u16]) -> Result<(), image::ImageError> {
    let mut w = create(path)?;
    p5_encoder(&mut w, width, height, 65535).encode(samples, width, height, image::ExtendedColorType::L16)?;
    w.flush().map_err(image::ImageError::IoError)
}

pub fn write_pgm16(frame: &LuminanceFrame, path: &Path) -> Result<(), FrameIoError> {
    let samples: Vec<u16> = frame.pixels().iter().map(|&l| quantize(l)).collect();
    save_p5_u16(path, frame.width(), frame.height(), &samples).map_err(|e| FrameIoError::Frame {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads an 8- or 16-bit grayscale PGM as luminance in `[0, 1]`.
pub fn read_pgm(path: &Path, timestamp_us: u64) -> Result<LuminanceFrame, FrameIoError> {
    let err = |message: String| FrameIoError::Frame {
        path: path.to_path_buf(),
        message,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|source| FrameIoError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| FrameIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let img = reader.decode().map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    let pixels: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|s| s as f32 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|s| s as f32 / 65535.0).collect(),
        other => return Err(err(format!("expected a grayscale image, got {:?}", other.color()))),
    };
    LuminanceFrame::new(timestamp_us, w, h, pixels).map_err(|e| err(e.to_string()))
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, FrameIoError> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| FrameIoError::Manifest { line: i + 1, message };
        let mut parts = line.split_whitespace();
        let (Some(name), Some(ts), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("expected `<filename> <timestamp_us>`, got {line:?}")));
        };
        let timestamp_us: u64 = ts.parse().map_err(|_| bad(format!("bad timestamp {ts:?}")))?;
        if let Some(prev) = entries.last() {
            if timestamp_us <= prev.timestamp_us {
                return Err(bad(format!(
                    "timestamp {timestamp_us} does not increase (previous {})",
                    prev.timestamp_us
                )));
            }
        }
        entries.push(ManifestEntry {
            filename: name.to_string(),
            timestamp_us,
        });
    }
    if entries.is_empty() {
        return Err(FrameIoError::Empty);
    }
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, FrameIoError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|source| FrameIoError::MissingManifest { path, source })?;
    parse_manifest(&text)
}

/// Loads the frames of a directory lazily, checking that every frame has the
/// dimensions of the first one.
pub struct FrameDirReader {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
    next: usize,
    dims: Option<(u32, u32)>,
}

impl FrameDirReader {
    pub fn open(dir: &Path) -> Result<Self, FrameIoError> {
        let entries = read_manifest(dir)?;
        for e in &entries {
            let p = dir.join(&e.filename);
            if !p.is_file() {
                return Err(FrameIoError::Frame {
                    path: p,
                    message: format!("listed in {MANIFEST_NAME} but missing"),
                });
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
            next: 0,
            dims: None,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Iterator for FrameDirReader {
    type Item = Result<LuminanceFrame, FrameIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.entries.get(self.next)?;
        self.next += 1;
        let path = self.dir.join(&entry.filename);
        Some(read_pgm(&path, entry.timestamp_us).and_then(|f| {
            let dims = (f.width(), f.height());
            match self.dims {
                None => self.dims = Some(dims),
                Some(want) if want != dims => {
                    return Err(FrameIoError::Frame {
                        path,
                        message: format!("is {}x{}, expected {}x{}", dims.0, dims.1, want.0, want.1),
                    })
                }
                Some(_) => {}
            }
            Ok(f)
        }))
    }
}

/// Writes frames one at a time and the manifest on [`FrameDirWriter::finish`].
pub struct FrameDirWriter {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl FrameDirWriter {
    pub fn create(dir: &Path) -> Result<Self, FrameIoError> {
        fs::create_dir_all(dir).map_err(|source| FrameIoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn push(&mut self, frame: &LuminanceFrame) -> Result<(), FrameIoError> {
        let filename = frame_filename(self.entries.len());
        write_pgm16(frame, &self.dir.join(&filename))?;
        self.entries.push(ManifestEntry {
            filename,
            timestamp_us: frame.timestamp_us(),
        });
        Ok(())
    }

    pub fn finish(self) -> Result<usize, FrameIoError> {
        let path = self.dir.join(MANIFEST_NAME);
        let io = |source| FrameIoError::Io {
            path: path.clone(),
            source,
        };
        let file = fs::File::create(&path).map_err(io)?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            writeln!(w, "{} {}", e.filename, e.timestamp_us).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(self.entries.len())
    }
}

pub fn write_frame_dir(dir: &Path, frames: &[LuminanceFrame]) -> Result<(), FrameIoError> {
    let mut w = FrameDirWriter::create(dir)?;
    for f in frames {
        w.push(f)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_frame_dir(dir: &Path) -> Result<Vec<LuminanceFrame>, FrameIoError> {
    FrameDirReader::open(dir)?.collect()
}

/// Writes a binary mask as an 8-bit PGM, 255 for excluded pixels.
pub fn write_mask_pgm(width: u32, height: u32, mask: &[bool], path: &Path) -> Result<(), FrameIoError> {
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255u8 } else { 0 }).collect();
    save_p5_u8(path, width, height, &data).map_err(|e| FrameIoError::Frame {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Reads a mask PGM; any nonzero sample marks an excluded pixel.
pub fn read_mask_pgm(path: &Path) -> Result<(u32, u32, Vec<bool>), FrameIoError> {
    let f = read_pgm(path, 0)?;
    Ok((f.width(), f.height(), f.pixels().iter().map(|&s| s > 0.0).collect()))
}
