//! 8-bit RGB images, binary PPM (P6) as the canonical on-disk format, and
//! the resize/crop/scale steps that turn a photo into a sampling frame.
//!
//! P6 was chosen so tests can be bit-exact without codec dependencies;
//! convert other formats with e.g. `magick in.jpg out.ppm` or
//! `ffmpeg -i in.png out.ppm`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<ImageRGB> {
        if width == 0 || height == 0 {
            return Err(Error::contract(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::contract(format!(
                "image {width}x{height} needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(ImageRGB {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> ImageRGB {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(3 * width * height)
            .collect();
        ImageRGB {
            width,
            height,
            pixels,
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

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `side`x`side` square whose top-left corner is (x0, y0).
    pub fn crop(&self, x0: usize, y0: usize, side: usize) -> Result<ImageRGB> {
        if x0 + side > self.width || y0 + side > self.height {
            return Err(Error::contract(format!(
                "crop {side}x{side}@({x0},{y0}) exceeds image {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(3 * side * side);
        for y in y0..y0 + side {
            let start = 3 * (y * self.width + x0);
            pixels.extend_from_slice(&self.pixels[start..start + 3 * side]);
        }
        ImageRGB::new(side, side, pixels)
    }
}

// ---------------------------------------------------------------------------
// PPM (P6)
// ---------------------------------------------------------------------------

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_separators(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => {
                    return Err(Error::format(self.pos, "unexpected end of header"));
                }
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators()?;
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(
                start,
                format!("expected {what}, found non-digit"),
            ));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("invalid {what}")))
    }
}

/// Decodes a binary PPM (P6, maxval 255) byte stream. Pixel values pass
/// through untouched.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRGB> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::format(0, "expected P6 magic"));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.read_number("width")?;
    let height = r.read_number("height")?;
    let maxval_at = {
        r.skip_separators()?;
        r.pos
    };
    r.pos = maxval_at;
    let maxval = r.read_number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_at,
            format!("maxval {maxval} unsupported (expected 255)"),
        ));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => {
            return Err(Error::format(
                r.pos,
                "expected single whitespace after maxval",
            ))
        }
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, "image dimensions must be positive"));
    }
    let need = 3 * width * height;
    let have = bytes.len() - r.pos;
    if have < need {
        return Err(Error::format(
            r.pos,
            format!("payload needs {need} bytes, found {have}"),
        ));
    }
    ImageRGB::new(width, height, bytes[r.pos..r.pos + need].to_vec())
}

/// Encodes to binary PPM with the canonical `P6\n{w} {h}\n255\n` header.
pub fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_ppm(path: &std::path::Path) -> Result<ImageRGB> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(path: &std::path::Path, img: &ImageRGB) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// resize / crop / model range
// ---------------------------------------------------------------------------

/// Scales so the shorter dimension equals `side` (bilinear, pixel-center
/// convention), then center-crops to `side`x`side`.
pub fn resize_square_crop(img: &ImageRGB, side: usize) -> Result<ImageRGB> {
    if side == 0 {
        return Err(Error::contract("resize side must be positive"));
    }
    let (w, h) = (img.width, img.height);
    let (new_w, new_h) = if w <= h {
        let nh = ((h * side) as f64 / w as f64).round() as usize;
        (side, nh.max(side))
    } else {
        let nw = ((w * side) as f64 / h as f64).round() as usize;
        (nw.max(side), side)
    };
    let resized = bilinear_resize(img, new_w, new_h);
    let x0 = (new_w - side) / 2;
    let y0 = (new_h - side) / 2;
    resized.crop(x0, y0, side)
}

fn bilinear_resize(img: &ImageRGB, new_w: usize, new_h: usize) -> ImageRGB {
    let (w, h) = (img.width, img.height);
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    let mut pixels = vec![0u8; 3 * new_w * new_h];
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let p00 = img.pixels[3 * (y0 * w + x0) + c] as f64;
                let p01 = img.pixels[3 * (y0 * w + x1) + c] as f64;
                let p10 = img.pixels[3 * (y1 * w + x0) + c] as f64;
                let p11 = img.pixels[3 * (y1 * w + x1) + c] as f64;
                let top = p00 + (p01 - p00) * tx;
                let bot = p10 + (p11 - p10) * tx;
                let v = top + (bot - top) * ty;
                pixels[3 * (y * new_w + x) + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageRGB {
        width: new_w,
        height: new_h,
        pixels,
    }
}

/// Maps 8-bit pixels to the network input range: `v -> v / 127.5 - 1`,
/// yielding an `[H, W, 3]` tensor in [-1, 1].
pub fn to_model_range(img: &ImageRGB) -> Tensor {
    let data: Vec<f32> = img
        .pixels
        .iter()
        .map(|&v| v as f32 / 127.5 - 1.0)
        .collect();
    Tensor::from_raw(vec![img.height, img.width, 3], data)
}

/// Inverse of [`to_model_range`]; exact for every original 8-bit value.
pub fn model_range_to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_minimal_p6() {
        let bytes = b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixels(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn decode_handles_comments() {
        let bytes = b"P6\n# made by hand\n2 1 # trailing\n255\n\x01\x02\x03\x04\x05\x06";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let bytes = b"P6\n2 2\n255\n\x01\x02\x03";
        let err = decode_ppm(bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("needs 12 bytes, found 3"), "got: {msg}");
    }

    #[test]
    fn rejects_wrong_maxval_and_magic() {
        assert!(decode_ppm(b"P6\n1 1\n64\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn resize_long_portrait_to_frame() {
        let img = ImageRGB::filled(796, 1200, [10, 20, 30]);
        let out = resize_square_crop(&img, 398).unwrap();
        assert_eq!((out.width(), out.height()), (398, 398));
        assert_eq!(out.pixel(0, 0), [10, 20, 30]);
    }

    #[test]
    fn resize_to_own_side_is_identity() {
        let pixels: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5 % 251) as u8).collect();
        let img = ImageRGB::new(4, 4, pixels).unwrap();
        let out = resize_square_crop(&img, 4).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn checkerboard_crop_matches_hand_result() {
        // 4x2 checkerboard; the shorter side already equals the target so the
        // resample is an exact copy and only the center crop remains.
        let b = [0u8, 0, 0];
        let w = [255u8, 255, 255];
        let mut pixels = Vec::new();
        for rgb in [b, w, b, w, w, b, w, b] {
            pixels.extend_from_slice(&rgb);
        }
        let img = ImageRGB::new(4, 2, pixels).unwrap();
        let out = resize_square_crop(&img, 2).unwrap();
        assert_eq!(out.pixel(0, 0), w);
        assert_eq!(out.pixel(1, 0), b);
        assert_eq!(out.pixel(0, 1), b);
        assert_eq!(out.pixel(1, 1), w);
    }

    /// Independent bilinear resampler used as an oracle: computes the same
    /// pixel-center convention directly from the definition.
    fn oracle_bilinear(img: &ImageRGB, nw: usize, nh: usize) -> Vec<u8> {
        let (w, h) = (img.width(), img.height());
        let mut out = Vec::new();
        for y in 0..nh {
            for x in 0..nw {
                for c in 0..3 {
                    let fx = ((x as f64 + 0.5) * (w as f64 / nw as f64) - 0.5)
                        .clamp(0.0, (w - 1) as f64);
                    let fy = ((y as f64 + 0.5) * (h as f64 / nh as f64) - 0.5)
                        .clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                    let sample = |xx: usize, yy: usize| img.pixel(xx, yy)[c] as f64;
                    let v = sample(x0, y0) * (1.0 - tx) * (1.0 - ty)
                        + sample(x1, y0) * tx * (1.0 - ty)
                        + sample(x0, y1) * (1.0 - tx) * ty
                        + sample(x1, y1) * tx * ty;
                    out.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    #[test]
    fn bilinear_matches_independent_oracle() {
        let pixels: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImageRGB::new(5, 3, pixels).unwrap();
        for (nw, nh) in [(2, 2), (3, 2), (7, 4)] {
            let got = bilinear_resize(&img, nw, nh);
            assert_eq!(got.pixels(), &oracle_bilinear(&img, nw, nh)[..]);
        }
    }

    #[test]
    fn model_range_endpoints_and_interior() {
        let img = ImageRGB::new(4, 1, vec![0, 0, 0, 255, 255, 255, 127, 127, 127, 191, 191, 191])
            .unwrap();
        let t = to_model_range(&img);
        let d = t.data();
        assert_eq!(d[0], -1.0);
        assert_eq!(d[3], 1.0);
        assert!((d[6] - (-0.003_921_57)).abs() < 1e-6);
        assert!((d[9] - 0.498_039_2).abs() < 1e-6);
    }

    #[test]
    fn model_range_roundtrips_every_byte() {
        for v in 0..=255u8 {
            let m = v as f32 / 127.5 - 1.0;
            assert_eq!(model_range_to_u8(m), v);
        }
    }

    proptest! {
        #[test]
        fn ppm_roundtrip_is_identity(
            w in 1usize..6,
            h in 1usize..6,
            seed in 0u64..1000
        ) {
            let n = 3 * w * h;
            let pixels: Vec<u8> = (0..n).map(|i| ((i as u64 * 31 + seed * 17) % 256) as u8).collect();
            let img = ImageRGB::new(w, h, pixels).unwrap();
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        }

        #[test]
        fn model_range_is_monotonic_affine(a in 0u8..255) {
            let lo = a as f32 / 127.5 - 1.0;
            let hi = (a + 1) as f32 / 127.5 - 1.0;
            prop_assert!(hi > lo);
            prop_assert!((-1.0..=1.0).contains(&lo) && (-1.0..=1.0).contains(&hi));
        }

        #[test]
        fn resize_output_is_always_square(
            w in 2usize..24,
            h in 2usize..24,
            side in 1usize..8
        ) {
            let img = ImageRGB::filled(w, h, [100, 150, 200]);
            let out = resize_square_crop(&img, side).unwrap();
            prop_assert_eq!((out.width(), out.height()), (side, side));
        }
    }
}
