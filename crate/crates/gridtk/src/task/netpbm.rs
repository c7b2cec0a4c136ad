//! Netpbm image decoding and encoding, 8-bit only.
//!
//! Reads the four classic variants (P2/P5 grayscale, P3/P6 color, plain and
//! binary) with maxval 255, producing floats in [0, 1]. Parse errors carry
//! the byte offset where decoding stopped making sense.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("byte {offset}: not a netpbm magic number (want P2, P3, P5, or P6)")]
    BadMagic { offset: usize },
    #[error("byte {offset}: expected {expected}, found end of file")]
    UnexpectedEof { offset: usize, expected: &'static str },
    #[error("byte {offset}: malformed integer in header")]
    BadInteger { offset: usize },
    #[error("byte {offset}: {what} is {value}, must be in 1..=65535")]
    BadDimension {
        offset: usize,
        what: &'static str,
        value: u64,
    },
    #[error("byte {offset}: maxval {maxval} unsupported, only 255 (8-bit) is accepted")]
    WrongMaxval { offset: usize, maxval: u64 },
    #[error("byte {offset}: raster truncated, expected {expected} more samples")]
    TruncatedRaster { offset: usize, expected: usize },
    #[error("byte {offset}: sample value {value} exceeds maxval 255")]
    SampleOutOfRange { offset: usize, value: u64 },
}

/// A decoded raster: row-major, `channels` floats per pixel, values in
/// [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(data.len(), height * width * channels);
        RawImage {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.width + c) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Byte-offset-tracking cursor over the input.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(b) = self.peek() {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_integer(&mut self, expected: &'static str) -> Result<u64, NetpbmError> {
        self.skip_separators();
        let start = self.pos;
        if self.peek().is_none() {
            return Err(NetpbmError::UnexpectedEof {
                offset: self.pos,
                expected,
            });
        }
        let mut value: u64 = 0;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() {
                value = value
                    .saturating_mul(10)
                    .saturating_add(u64::from(b - b'0'));
                self.pos += 1;
            } else if b.is_ascii_whitespace() || b == b'#' {
                break;
            } else {
                return Err(NetpbmError::BadInteger { offset: self.pos });
            }
        }
        if self.pos == start {
            return Err(NetpbmError::BadInteger { offset: start });
        }
        Ok(value)
    }
}

fn read_dimension(
    cursor: &mut Cursor,
    what: &'static str,
) -> Result<usize, NetpbmError> {
    let offset = {
        cursor.skip_separators();
        cursor.pos
    };
    let value = cursor.read_integer(what)?;
    if value == 0 || value > 65535 {
        return Err(NetpbmError::BadDimension {
            offset,
            what,
            value,
        });
    }
    Ok(value as usize)
}

/// Decode any of P2/P3/P5/P6 with maxval 255 into unit-range floats.
pub fn decode(bytes: &[u8]) -> Result<RawImage, NetpbmError> {
    let mut cursor = Cursor::new(bytes);
    cursor.skip_separators();
    let magic_offset = cursor.pos;
    let magic = [
        cursor.peek(),
        cursor.bytes.get(cursor.pos + 1).copied(),
    ];
    let (channels, binary) = match magic {
        [Some(b'P'), Some(b'2')] => (1, false),
        [Some(b'P'), Some(b'3')] => (3, false),
        [Some(b'P'), Some(b'5')] => (1, true),
        [Some(b'P'), Some(b'6')] => (3, true),
        _ => {
            return Err(NetpbmError::BadMagic {
                offset: magic_offset,
            })
        }
    };
    cursor.pos += 2;

    let width = read_dimension(&mut cursor, "width")?;
    let height = read_dimension(&mut cursor, "height")?;
    let maxval_offset = {
        cursor.skip_separators();
        cursor.pos
    };
    let maxval = cursor.read_integer("maxval")?;
    if maxval != 255 {
        return Err(NetpbmError::WrongMaxval {
            offset: maxval_offset,
            maxval,
        });
    }

    let count = height * width * channels;
    let mut data = Vec::with_capacity(count);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        match cursor.peek() {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            Some(_) => return Err(NetpbmError::BadInteger { offset: cursor.pos }),
            None => {
                return Err(NetpbmError::UnexpectedEof {
                    offset: cursor.pos,
                    expected: "raster separator",
                })
            }
        }
        let raster = &cursor.bytes[cursor.pos.min(cursor.bytes.len())..];
        if raster.len() < count {
            return Err(NetpbmError::TruncatedRaster {
                offset: cursor.bytes.len(),
                expected: count - raster.len(),
            });
        }
        data.extend(raster[..count].iter().map(|&b| f64::from(b) / 255.0));
    } else {
        for i in 0..count {
            cursor.skip_separators();
            let offset = cursor.pos;
            if cursor.peek().is_none() {
                return Err(NetpbmError::TruncatedRaster {
                    offset,
                    expected: count - i,
                });
            }
            let value = cursor.read_integer("sample")?;
            if value > 255 {
                return Err(NetpbmError::SampleOutOfRange { offset, value });
            }
            data.push(value as f64 / 255.0);
        }
    }
    Ok(RawImage::new(height, width, channels, data))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(img: &RawImage, magic: &str) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

/// Encode a grayscale image as binary PGM (P5).
pub fn encode_pgm(img: &RawImage) -> Vec<u8> {
    assert_eq!(img.channels, 1, "PGM is single-channel");
    encode(img, "P5")
}

/// Encode an RGB image as binary PPM (P6).
pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    assert_eq!(img.channels, 3, "PPM is three-channel");
    encode(img, "P6")
}
