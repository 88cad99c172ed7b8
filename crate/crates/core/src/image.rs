//! Netpbm image buffers: PGM (P2/P5) and PPM (P3/P6), 8-bit or 16-bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image must have 1 or 3 channels, got {0}")]
    Channels(usize),
    #[error("image dimensions must be non-zero, got {height}x{width}")]
    Empty { height: usize, width: usize },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("value {value} at index {index} is outside [0, 1]")]
    Range { index: usize, value: f64 },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    Mismatch { left: (usize, usize, usize), right: (usize, usize, usize) },
    #[error("malformed netpbm data: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if height == 0 || width == 0 {
            return Err(ImageError::Empty { height, width });
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(ImageError::Length {
                expected,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::Range { index, value });
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self, ImageError> {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// `1 - v` for every value.
    pub fn negated(&self) -> Self {
        ImageBuffer {
            values: self.values.iter().map(|v| 1.0 - v).collect(),
            ..self.clone()
        }
    }

    pub(crate) fn check_same_dims(&self, other: &Self) -> Result<(), ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::Mismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmEncoding {
    Ascii,
    Binary,
}

/// Encode as PGM (1 channel) or PPM (3 channels) with the given max value
/// (255 or 65535 for binary output).
pub fn encode_pnm(img: &ImageBuffer, encoding: PnmEncoding, maxval: u16) -> Result<Vec<u8>, ImageError> {
    if maxval == 0 {
        return Err(ImageError::Format("maxval must be positive".into()));
    }
    let magic = match (img.channels, encoding) {
        (1, PnmEncoding::Ascii) => "P2",
        (1, PnmEncoding::Binary) => "P5",
        (3, PnmEncoding::Ascii) => "P3",
        (_, PnmEncoding::Binary) => "P6",
        (_, PnmEncoding::Ascii) => "P3",
    };
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width, img.height).into_bytes();
    let quant = |v: f64| (v * maxval as f64).round() as u16;
    match encoding {
        PnmEncoding::Ascii => {
            let row_len = img.width * img.channels;
            for row in img.values.chunks(row_len) {
                let line: Vec<String> = row.iter().map(|&v| quant(v).to_string()).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
        PnmEncoding::Binary => {
            for &v in &img.values {
                let q = quant(v);
                if maxval < 256 {
                    out.push(q as u8);
                } else {
                    out.extend_from_slice(&q.to_be_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct HeaderReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn token(&mut self) -> Result<&str, ImageError> {
        loop {
            while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.data.len() && self.data[self.pos] == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Format("unexpected end of data".into()));
        }
        std::str::from_utf8(&self.data[start..self.pos]).map_err(|_| ImageError::Format("non-ASCII header".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageError> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| ImageError::Format(format!("bad {what}: {t:?}")))
    }
}

pub fn decode_pnm(data: &[u8]) -> Result<ImageBuffer, ImageError> {
    let mut r = HeaderReader { data, pos: 0 };
    let (channels, binary) = match r.token()? {
        "P2" => (1, false),
        "P5" => (1, true),
        "P3" => (3, false),
        "P6" => (3, true),
        other => return Err(ImageError::Format(format!("unsupported magic {other:?}"))),
    };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::Format(format!("maxval {maxval} out of range")));
    }
    let count = width * height * channels;
    let scale = maxval as f64;
    let raw: Vec<usize> = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = r.pos + 1;
        let bytes = if maxval < 256 { 1 } else { 2 };
        let body = data.get(start..).unwrap_or(&[]);
        if body.len() < count * bytes {
            return Err(ImageError::Format(format!(
                "raster has {} bytes, need {}",
                body.len(),
                count * bytes
            )));
        }
        if bytes == 1 {
            body[..count].iter().map(|&b| b as usize).collect()
        } else {
            body[..count * 2]
                .chunks(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
                .collect()
        }
    } else {
        (0..count).map(|_| r.number("sample")).collect::<Result<_, _>>()?
    };
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(ImageError::Format(format!("sample {v} exceeds maxval {maxval}")));
    }
    ImageBuffer::new(height, width, channels, raw.into_iter().map(|v| v as f64 / scale).collect())
}

pub fn write_pnm(path: impl AsRef<Path>, img: &ImageBuffer, encoding: PnmEncoding) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes = encode_pnm(img, encoding, 255)?;
    let io = |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pnm(&data)
}
