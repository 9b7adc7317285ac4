//! 8-bit RGB images, binary PPM I/O, and the pixel operations used by
//! curation and preprocessing.

use thiserror::Error;

use crate::geometry::Rect;

pub type Rgb = [u8; 3];

/// Fill used to cover neighbouring objects when none is configured.
pub const DEFAULT_FILL: Rgb = [128, 128, 128];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a netpbm file (magic {0:?})")]
    BadMagic(Vec<u8>),
    #[error("unsupported netpbm variant {0}; only binary P6 and P5 are read")]
    UnsupportedFormat(String),
    #[error("maxval must be 255, got {0}")]
    UnsupportedMaxval(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("pixel data truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("{width}x{height} RGB image needs {expected} bytes, got {actual}")]
    PixelCount {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("image dimensions must be positive, got {0}x{1}")]
    Empty(usize, usize),
    #[error("rectangle {rect:?} exceeds {width}x{height} image")]
    OutOfBounds {
        rect: Rect,
        width: usize,
        height: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageRecord {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRecord {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty(width, height));
        }
        let expected = 3 * width * height;
        if pixels.len() != expected {
            return Err(ImageError::PixelCount {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            pixels: color.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, color: Rgb) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    fn check_rect(&self, rect: &Rect) -> Result<(), ImageError> {
        if rect.fits_in(self.width, self.height) {
            Ok(())
        } else {
            Err(ImageError::OutOfBounds {
                rect: *rect,
                width: self.width,
                height: self.height,
            })
        }
    }

    pub fn crop(&self, rect: &Rect) -> Result<ImageRecord, ImageError> {
        self.check_rect(rect)?;
        if rect.is_empty() {
            return Err(ImageError::Empty(rect.w, rect.h));
        }
        let mut pixels = Vec::with_capacity(3 * rect.area());
        for y in rect.y..rect.bottom() {
            let start = 3 * (y * self.width + rect.x);
            pixels.extend_from_slice(&self.pixels[start..start + 3 * rect.w]);
        }
        ImageRecord::new(rect.w, rect.h, pixels)
    }

    /// In-place variant of [`mask_region`].
    pub fn fill_rect(&mut self, rect: &Rect, color: Rgb) -> Result<(), ImageError> {
        self.check_rect(rect)?;
        for y in rect.y..rect.bottom() {
            for x in rect.x..rect.right() {
                self.set(x, y, color);
            }
        }
        Ok(())
    }
}

/// Covers `rect` with a solid colour; pixels outside are untouched.
pub fn mask_region(image: &ImageRecord, rect: &Rect, fill: Rgb) -> Result<ImageRecord, ImageError> {
    let mut out = image.clone();
    out.fill_rect(rect, fill)?;
    Ok(out)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &ImageRecord, out_w: usize, out_h: usize) -> ImageRecord {
    assert!(out_w > 0 && out_h > 0, "resize target must be positive");
    if out_w == image.width && out_h == image.height {
        return image.clone();
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = taps(out_w, image.width);
    let ys = taps(out_h, image.height);
    let mut pixels = Vec::with_capacity(3 * out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (a, b, c, d) = (
                image.get(x0, y0),
                image.get(x1, y0),
                image.get(x0, y1),
                image.get(x1, y1),
            );
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRecord::new(out_w, out_h, pixels).expect("sizes consistent")
}

/// Encodes as binary P6 with maxval 255.
pub fn encode_ppm(image: &ImageRecord) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PpmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PpmError::Header(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ascii")
            .parse()
            .map_err(|_| PpmError::Header(format!("{what} out of range")))
    }
}

/// Decodes binary P6 (RGB) or P5 (grey, replicated to RGB) with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRecord, PpmError> {
    if bytes.len() < 2 {
        return Err(PpmError::BadMagic(bytes.to_vec()));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        [b'P', b'1'..=b'4' | b'7'] => {
            return Err(PpmError::UnsupportedFormat(
                String::from_utf8_lossy(&bytes[..2]).into_owned(),
            ))
        }
        other => return Err(PpmError::BadMagic(other.to_vec())),
    };
    let mut reader = HeaderReader { bytes, pos: 2 };
    let width = reader.number("width")? as usize;
    let height = reader.number("height")? as usize;
    let maxval = reader.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PpmError::Header(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    match bytes.get(reader.pos) {
        Some(b) if b.is_ascii_whitespace() => reader.pos += 1,
        _ => return Err(PpmError::Header("missing whitespace after maxval".into())),
    }
    let data = &bytes[reader.pos..];
    let expected = channels * width * height;
    if data.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            actual: data.len(),
        });
    }
    let data = &data[..expected];
    let pixels = if channels == 3 {
        data.to_vec()
    } else {
        data.iter().flat_map(|&g| [g, g, g]).collect()
    };
    Ok(ImageRecord::new(width, height, pixels).expect("sizes consistent"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_p6_exact_pixels() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.get(0, 0), [255, 0, 0]);
        assert_eq!(img.get(1, 0), [0, 0, 255]);
        assert_eq!(encode_ppm(&img), bytes);
    }

    #[test]
    fn decode_p5_replicates_grey() {
        let img = decode_ppm(b"P5 1 1 255 d").unwrap();
        assert_eq!(img.get(0, 0), [100, 100, 100]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_ppm(b"P6\n# made by hand\n1 1 # trailing\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert_eq!(
            decode_ppm(b"P3\n1 1\n255\n0 0 0\n"),
            Err(PpmError::UnsupportedFormat("P3".into()))
        );
        assert!(matches!(decode_ppm(b"XX\n1 1\n255\n"), Err(PpmError::BadMagic(_))));
        assert_eq!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(PpmError::UnsupportedMaxval(65535))
        );
        assert_eq!(
            decode_ppm(b"P6\n2 2\n255\n\0\0\0"),
            Err(PpmError::Truncated {
                expected: 12,
                actual: 3
            })
        );
        assert!(matches!(decode_ppm(b"P6\n2\n"), Err(PpmError::Header(_))));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageRecord::new(2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2), img);
        let flat = ImageRecord::filled(5, 3, [12, 200, 77]);
        let big = resize_bilinear(&flat, 11, 7);
        let small = resize_bilinear(&flat, 2, 1);
        assert!(big.pixels().chunks(3).all(|p| p == [12, 200, 77]));
        assert!(small.pixels().chunks(3).all(|p| p == [12, 200, 77]));
    }

    #[test]
    fn resize_checkerboard_to_single_pixel() {
        // The single output centre maps to source (0.5, 0.5): all four
        // neighbours weigh 1/4, so (0+255+255+0)/4 = 127.5 rounds to 128.
        let mut img = ImageRecord::filled(2, 2, [0, 0, 0]);
        img.set(1, 0, [255, 255, 255]);
        img.set(0, 1, [255, 255, 255]);
        assert_eq!(resize_bilinear(&img, 1, 1).get(0, 0), [128, 128, 128]);
    }

    #[test]
    fn mask_examples() {
        let img = ImageRecord::new(4, 4, (0..48).collect()).unwrap();
        let full = mask_region(&img, &Rect::full(4, 4), [9, 8, 7]).unwrap();
        assert!(full.pixels().chunks(3).all(|p| p == [9, 8, 7]));

        assert_eq!(mask_region(&img, &Rect::new(2, 2, 0, 0), [9, 8, 7]).unwrap(), img);

        let masked = mask_region(&img, &Rect::new(1, 1, 2, 2), [128, 128, 128]).unwrap();
        let changed = img
            .pixels()
            .chunks(3)
            .zip(masked.pixels().chunks(3))
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 4);

        assert!(matches!(
            mask_region(&img, &Rect::new(3, 3, 2, 1), [0, 0, 0]),
            Err(ImageError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn crop_copies_rows() {
        let img = ImageRecord::new(3, 2, (0..18).collect()).unwrap();
        let c = img.crop(&Rect::new(1, 1, 2, 1)).unwrap();
        assert_eq!(c.pixels(), &[12, 13, 14, 15, 16, 17]);
    }
}
