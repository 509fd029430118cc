//! 8-bit grayscale rasters and their file formats.

use std::io::Read;
use std::path::{Path, PathBuf};

use super::TrackingError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub image: Option<GrayImage>,
}

fn pgm_token<'a>(data: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &data[start..*pos])
}

fn pgm_number(data: &[u8], pos: &mut usize, what: &str) -> Result<usize, TrackingError> {
    let tok = pgm_token(data, pos).ok_or_else(|| TrackingError::Decode(format!("pgm: missing {what}")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| TrackingError::Decode(format!("pgm: bad {what}")))
}

/// Decodes a binary (P5) PGM. 16-bit samples are reduced to their high byte.
pub fn decode_pgm(data: &[u8]) -> Result<GrayImage, TrackingError> {
    let mut pos = 0;
    match pgm_token(data, &mut pos) {
        Some(b"P5") => {}
        _ => return Err(TrackingError::Decode("pgm: expected P5 magic".into())),
    }
    let width = pgm_number(data, &mut pos, "width")?;
    let height = pgm_number(data, &mut pos, "height")?;
    let maxval = pgm_number(data, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(TrackingError::Decode(format!("pgm: maxval {maxval} out of range")));
    }
    if width == 0 || height == 0 {
        return Err(TrackingError::EmptyImage);
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(TrackingError::Decode("pgm: truncated header".into()));
    }
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bytes_per))
        .ok_or_else(|| TrackingError::Decode("pgm: dimensions overflow".into()))?;
    let raster = data
        .get(pos..pos.checked_add(n).unwrap_or(usize::MAX))
        .ok_or_else(|| TrackingError::Decode("pgm: truncated raster".into()))?;
    let scale = |v: usize| ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8;
    let pixels = if bytes_per == 1 {
        raster.iter().map(|&v| scale(v as usize)).collect()
    } else {
        raster.chunks_exact(2).map(|c| scale(((c[0] as usize) << 8) | c[1] as usize)).collect()
    };
    Ok(GrayImage { width, height, data: pixels })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Decodes a PNG, converting color to luma.
pub fn decode_png(data: &[u8]) -> Result<GrayImage, TrackingError> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(data));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| TrackingError::Decode(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| TrackingError::Decode("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| TrackingError::Decode(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(TrackingError::Decode("png: unexpanded palette".into())),
    };
    let row = w * channels;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let line = &buf[y * row..(y + 1) * row];
        for px in line.chunks_exact(channels) {
            data.push(match channels {
                1 | 2 => px[0],
                _ => (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64).round() as u8,
            });
        }
    }
    if w == 0 || h == 0 {
        return Err(TrackingError::EmptyImage);
    }
    Ok(GrayImage { width: w, height: h, data })
}

pub fn read_image(path: &Path) -> Result<GrayImage, TrackingError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TrackingError::Io(format!("{}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => decode_png(&bytes),
        _ => decode_pgm(&bytes),
    }
}

/// Image files (`.pgm`/`.png`) of a directory in lexicographic order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, TrackingError> {
    let entries = std::fs::read_dir(dir).map_err(|e| TrackingError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("pgm") | Some("png")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Parses `times.txt`: one timestamp in seconds per line.
pub fn parse_times(text: &str) -> Result<Vec<f64>, TrackingError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: f64 = line
            .parse()
            .map_err(|_| TrackingError::Parse { line: n + 1, message: format!("bad timestamp {line:?}") })?;
        if !t.is_finite() {
            return Err(TrackingError::Parse { line: n + 1, message: "non-finite timestamp".into() });
        }
        if out.last().is_some_and(|&prev| t < prev) {
            return Err(TrackingError::Parse { line: n + 1, message: "timestamps must be non-decreasing".into() });
        }
        out.push(t);
    }
    Ok(out)
}

/// Loads an image directory with optional `times.txt`, else `index / fps`.
pub fn load_frames(dir: &Path, fps: f64) -> Result<Vec<Frame>, TrackingError> {
    let paths = list_frames(dir)?;
    let times_path = dir.join("times.txt");
    let times = if times_path.exists() {
        let text = std::fs::read_to_string(&times_path).map_err(|e| TrackingError::Io(e.to_string()))?;
        let t = parse_times(&text)?;
        if t.len() < paths.len() {
            return Err(TrackingError::Parse { line: t.len() + 1, message: "fewer timestamps than frames".into() });
        }
        Some(t)
    } else {
        None
    };
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(Frame {
                index: i,
                timestamp: times.as_ref().map_or(i as f64 / fps, |t| t[i]),
                image: Some(read_image(p)?),
            })
        })
        .collect()
}
