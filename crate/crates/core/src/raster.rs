//! In-memory rasters and the netpbm codecs used for frames, masks and patches.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("malformed netpbm data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Wraps an existing buffer; `None` when the length is not `width * height * 3`.
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, color: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.put(x, y, color);
            }
        }
    }

    /// Copies `src` with its top-left corner at `(x0, y0)`, clipping at the borders.
    pub fn paste(&mut self, src: &RgbImage, x0: i64, y0: i64) {
        for sy in 0..src.height {
            let y = y0 + sy as i64;
            if y < 0 || y >= self.height as i64 {
                continue;
            }
            for sx in 0..src.width {
                let x = x0 + sx as i64;
                if x < 0 || x >= self.width as i64 {
                    continue;
                }
                self.put(x as usize, y as usize, src.get(sx, sy));
            }
        }
    }

    /// Sub-image covering `[x0, x0+w) × [y0, y0+h)`; pixels outside `self` are black.
    pub fn crop(&self, x0: i64, y0: i64, w: usize, h: usize) -> RgbImage {
        let mut out = RgbImage::new(w, h);
        out.paste(self, -x0, -y0);
        out
    }

    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Bilinear resampling to `new_w × new_h`, sampling at pixel centers.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> RgbImage {
        let mut out = RgbImage::new(new_w, new_h);
        if self.width == 0 || self.height == 0 {
            return out;
        }
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        let xs: Vec<(usize, usize, f64)> = (0..new_w)
            .map(|x| sample_axis((x as f64 + 0.5) * sx - 0.5, self.width))
            .collect();
        for y in 0..new_h {
            let (y0, y1, fy) = sample_axis((y as f64 + 0.5) * sy - 0.5, self.height);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let a = self.get(x0, y0);
                let b = self.get(x1, y0);
                let c = self.get(x0, y1);
                let d = self.get(x1, y1);
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                    let bot = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                    px[ch] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
                }
                out.put(x, y, px);
            }
        }
        out
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.data.len() + 20);
        self.write_ppm(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<Self, NetpbmError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_ppm_bytes(&bytes)
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self, NetpbmError> {
        let (width, height, body) = parse_netpbm(bytes, b"P6")?;
        let need = width * height * 3;
        if body.len() < need {
            return Err(NetpbmError::Malformed(format!(
                "pixel data truncated: {} of {need} bytes",
                body.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: body[..need].to_vec(),
        })
    }
}

/// Row-major 8-bit single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Binary PGM (P5, maxval 255).
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, NetpbmError> {
        let (width, height, body) = parse_netpbm(bytes, b"P5")?;
        let need = width * height;
        if body.len() < need {
            return Err(NetpbmError::Malformed(format!(
                "pixel data truncated: {} of {need} bytes",
                body.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: body[..need].to_vec(),
        })
    }
}

/// ITU-R BT.601 luma, rounded.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

fn sample_axis(pos: f64, len: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Parses a binary netpbm header with maxval 255 and returns `(width, height, body)`.
fn parse_netpbm<'a>(
    bytes: &'a [u8],
    magic: &[u8],
) -> Result<(usize, usize, &'a [u8]), NetpbmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(NetpbmError::Malformed(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(NetpbmError::Malformed("missing header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NetpbmError::Malformed("header field out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(NetpbmError::Malformed(
                "missing separator after maxval".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(NetpbmError::Malformed("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(NetpbmError::Malformed(format!(
            "unsupported maxval {maxval}"
        )));
    }
    Ok((width, height, &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let mut img = RgbImage::new(3, 2);
        img.put(2, 1, [1, 2, 3]);
        let mut bytes = b"P6\n# made by hand\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(img.as_raw());
        assert_eq!(RgbImage::from_ppm_bytes(&bytes).unwrap(), img);
        assert_eq!(RgbImage::from_ppm_bytes(&img.to_ppm_bytes()).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_bad_headers() {
        assert!(RgbImage::from_ppm_bytes(b"P3\n1 1\n255\n000").is_err());
        assert!(RgbImage::from_ppm_bytes(b"P6\n1 1\n65535\n000000").is_err());
        assert!(RgbImage::from_ppm_bytes(b"P6\n2 2\n255\n000").is_err());
        assert!(RgbImage::from_ppm_bytes(b"P6\n0 2\n255\n").is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut img = RgbImage::new(4, 3);
        for y in 0..3 {
            for x in 0..4 {
                img.put(x, y, [(x * 40) as u8, (y * 70) as u8, 9]);
            }
        }
        assert_eq!(img.resize_bilinear(4, 3), img);
        let flat = RgbImage::filled(7, 5, [12, 200, 33]);
        assert_eq!(
            flat.resize_bilinear(448, 448),
            RgbImage::filled(448, 448, [12, 200, 33])
        );
    }

    #[test]
    fn crop_pads_outside_with_black() {
        let img = RgbImage::filled(4, 4, [9, 9, 9]);
        let c = img.crop(-1, -1, 3, 3);
        assert_eq!(c.get(0, 0), [0, 0, 0]);
        assert_eq!(c.get(1, 1), [9, 9, 9]);
    }
}
