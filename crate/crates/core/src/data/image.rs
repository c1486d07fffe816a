//! 8-bit raster images and their PNG / PNM encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::with_channels(width, height, 1, data)
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::with_channels(width, height, 3, data)
    }

    fn with_channels(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image8 { width, height, channels, data })
    }

    /// Channel `c` as a single-channel image.
    pub fn channel(&self, c: usize) -> Image8 {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image8 { width: self.width, height: self.height, channels: 1, data }
    }

    /// Green channel of RGB input, or the image itself if already gray.
    pub fn green(&self) -> Image8 {
        if self.channels == 1 {
            self.clone()
        } else {
            self.channel(1)
        }
    }

    /// Gray image thresholded at > 127.
    pub fn to_mask(&self) -> Vec<bool> {
        self.green().data.iter().map(|&v| v > 127).collect()
    }

    pub fn from_mask(width: usize, height: usize, mask: &[bool]) -> Image8 {
        Image8 { width, height, channels: 1, data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect() }
    }

    /// Gray image from values in `[lo, hi]`, linearly mapped onto 0..=255.
    pub fn from_unit(width: usize, height: usize, values: &[f32], lo: f32, hi: f32) -> Image8 {
        let data = values.iter().map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Image8 { width, height, channels: 1, data }
    }
}

fn ext(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

pub fn read_image(path: &Path) -> Result<Image8> {
    match ext(path).as_str() {
        "png" => read_png(path),
        "pgm" | "ppm" | "pnm" => read_pnm(path),
        other => Err(Error::Data(format!(
            "{}: unsupported image format '{other}' (convert to PNG or PGM/PPM)",
            path.display()
        ))),
    }
}

pub fn write_image(path: &Path, img: &Image8) -> Result<()> {
    match ext(path).as_str() {
        "png" => write_png(path, img),
        "pgm" | "ppm" | "pnm" => write_pnm(path, img),
        other => Err(Error::Data(format!("{}: unsupported output format '{other}'", path.display()))),
    }
}

fn read_png(path: &Path) -> Result<Image8> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|c| c[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect()),
        png::ColorType::Indexed => return Err(Error::Png(format!("{}: palette not expanded", path.display()))),
    };
    Image8::with_channels(w, h, channels, data)
}

fn write_png(path: &Path, img: &Image8) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), img.width as u32, img.height as u32);
    enc.set_color(if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    w.write_image_data(&img.data).map_err(|e| Error::Png(e.to_string()))?;
    w.finish().map_err(|e| Error::Png(e.to_string()))
}

/// Binary PGM (P5) / PPM (P6), maxval 255.
fn read_pnm(path: &Path) -> Result<Image8> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image8, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PNM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported PNM type {m} (need binary P5 or P6)")),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad PNM header field '{s}'"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let need = w * h * channels;
    if bytes.len() < start + need {
        return Err("truncated PNM raster".into());
    }
    Image8::with_channels(w, h, channels, bytes[start..start + need].to_vec()).map_err(|e| e.to_string())
}

pub fn encode_pnm(img: &Image8) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn write_pnm(path: &Path, img: &Image8) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode_pnm(img)).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}
