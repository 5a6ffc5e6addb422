//! Binary PPM (P6) loading and the image transform pipeline.
//!
//! Images come in as P6 PPM — the one raster format that needs no codec —
//! and go out as normalized `[3×S×S]` tensors: resize (bilinear, to a side
//! ~256/224 of the target), optional train-time horizontal flip and random
//! crop, scale to `[0,1]`, then per-channel standardization.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

use super::DataError;

pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
#[error("invalid PPM at byte {offset}: {reason}")]
pub struct PpmError {
    pub offset: usize,
    pub reason: String,
}

/// A decoded P6 image: interleaved RGB rows, top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

fn err(offset: usize, reason: impl Into<String>) -> PpmError {
    PpmError {
        offset,
        reason: reason.into(),
    }
}

/// Parse a binary P6 stream. Header comments (`#` to end of line) are
/// honored; only 8-bit channels (maxval ≤ 255) are supported.
pub fn parse_ppm(bytes: &[u8]) -> Result<PpmImage, PpmError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(err(0, "expected magic \"P6\""));
    }
    let mut pos = 2;
    let mut read_field = |name: &str| -> Result<usize, PpmError> {
        // Whitespace and comments separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        let mut value: usize = 0;
        while let Some(b) = bytes.get(pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| err(start, format!("{name} overflows")))?;
            pos += 1;
        }
        if pos == start {
            return Err(err(start, format!("expected decimal {name}")));
        }
        Ok(value)
    };

    let width = read_field("width")?;
    let height = read_field("height")?;
    let maxval = read_field("maxval")?;
    if width == 0 || height == 0 {
        return Err(err(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected single whitespace before pixel data")),
    }
    let need = width * height * 3;
    let have = bytes.len() - pos;
    if have < need {
        return Err(err(
            bytes.len(),
            format!("pixel data truncated: need {need} bytes, found {have}"),
        ));
    }
    Ok(PpmImage {
        width,
        height,
        maxval: maxval as u16,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn encode_ppm(img: &PpmImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Channel-planar float image, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planar {
    pub width: usize,
    pub height: usize,
    /// `[3][height][width]`.
    pub data: Vec<f32>,
}

impl Planar {
    pub fn from_ppm(img: &PpmImage) -> Planar {
        let scale = 1.0 / f32::from(img.maxval);
        let (w, h) = (img.width, img.height);
        let mut data = vec![0.0f32; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[c * w * h + y * w + x] =
                        f32::from(img.pixels[(y * w + x) * 3 + c]) * scale;
                }
            }
        }
        Planar {
            width: w,
            height: h,
            data,
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }
}

/// Bilinear resample with half-pixel centers (output pixel `d` samples source
/// coordinate `(d + 0.5)·in/out − 0.5`, clamped at the borders).
pub fn resize_bilinear(src: &Planar, out_w: usize, out_h: usize) -> Planar {
    let sx_scale = src.width as f32 / out_w as f32;
    let sy_scale = src.height as f32 / out_h as f32;
    let mut data = vec![0.0f32; 3 * out_w * out_h];
    for c in 0..3 {
        for dy in 0..out_h {
            let sy = ((dy as f32 + 0.5) * sy_scale - 0.5).max(0.0);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(src.height - 1);
            let fy = sy - y0 as f32;
            for dx in 0..out_w {
                let sx = ((dx as f32 + 0.5) * sx_scale - 0.5).max(0.0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(src.width - 1);
                let fx = sx - x0 as f32;
                let top = src.at(c, y0, x0) * (1.0 - fx) + src.at(c, y0, x1) * fx;
                let bottom = src.at(c, y1, x0) * (1.0 - fx) + src.at(c, y1, x1) * fx;
                data[c * out_w * out_h + dy * out_w + dx] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Planar {
        width: out_w,
        height: out_h,
        data,
    }
}

pub fn hflip(src: &Planar) -> Planar {
    let (w, h) = (src.width, src.height);
    let mut data = vec![0.0f32; src.data.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[c * w * h + y * w + x] = src.at(c, y, w - 1 - x);
            }
        }
    }
    Planar {
        width: w,
        height: h,
        data,
    }
}

pub fn crop(src: &Planar, x0: usize, y0: usize, side: usize) -> Planar {
    debug_assert!(x0 + side <= src.width && y0 + side <= src.height);
    let mut data = vec![0.0f32; 3 * side * side];
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                data[c * side * side + y * side + x] = src.at(c, y0 + y, x0 + x);
            }
        }
    }
    Planar {
        width: side,
        height: side,
        data,
    }
}

/// Standardize each channel and pack into a `[3×S×S]` tensor.
pub fn normalize(src: &Planar) -> Tensor<f32> {
    let plane = src.width * src.height;
    let mut data = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            data[c * plane + i] = (src.data[c * plane + i] - NORM_MEAN[c]) / NORM_STD[c];
        }
    }
    Tensor::new(vec![3, src.height, src.width], data).expect("non-empty image")
}

/// Target geometry of the transform pipeline.
#[derive(Debug, Clone, Copy)]
pub struct ImagePrep {
    pub image_size: usize,
}

impl ImagePrep {
    /// Side length of the pre-crop resize; scales the conventional
    /// 256-resize/224-crop ratio to the configured size.
    pub fn resize_side(&self) -> usize {
        let s = self.image_size;
        s.max((s * 256 + 112) / 224)
    }
}

/// Run the full transform on a decoded image. In train mode the flip and the
/// choice between random and center crop each fire with probability 1/2,
/// drawn from `rng`; eval mode is deterministic (center crop only).
pub fn prepare_ppm(
    img: &PpmImage,
    prep: ImagePrep,
    train_mode: bool,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let side = prep.resize_side();
    let size = prep.image_size;
    let mut planar = resize_bilinear(&Planar::from_ppm(img), side, side);
    if train_mode && rng.random_bool(0.5) {
        planar = hflip(&planar);
    }
    let margin = side - size;
    let (x0, y0) = if train_mode && margin > 0 && rng.random_bool(0.5) {
        (
            rng.random_range(0..=margin),
            rng.random_range(0..=margin),
        )
    } else {
        (margin / 2, margin / 2)
    };
    let planar = crop(&planar, x0, y0, size);
    normalize(&planar)
}

/// Read, decode, and transform one image file.
pub fn load_and_augment(
    path: &Path,
    prep: ImagePrep,
    train_mode: bool,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let img = parse_ppm(&bytes).map_err(|source| DataError::Ppm {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(prepare_ppm(&img, prep, train_mode, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn gradient_ppm(w: usize, h: usize) -> PpmImage {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                pixels.extend_from_slice(&[
                    (x * 255 / w.max(1)) as u8,
                    (y * 255 / h.max(1)) as u8,
                    ((x + y) % 256) as u8,
                ]);
            }
        }
        PpmImage {
            width: w,
            height: h,
            maxval: 255,
            pixels,
        }
    }

    #[test]
    fn ppm_roundtrip_and_comment_handling() {
        let img = gradient_ppm(5, 3);
        assert_eq!(parse_ppm(&encode_ppm(&img)).unwrap(), img);

        let mut with_comment = b"P6\n# a comment\n5 3\n# another\n255\n".to_vec();
        with_comment.extend_from_slice(&img.pixels);
        assert_eq!(parse_ppm(&with_comment).unwrap(), img);
    }

    #[test]
    fn ppm_errors_carry_byte_offsets() {
        let e = parse_ppm(b"P5\n1 1\n255\nxxx").unwrap_err();
        assert_eq!(e.offset, 0);

        let e = parse_ppm(b"P6\nab").unwrap_err();
        assert_eq!(e.offset, 3);
        assert!(e.reason.contains("width"));

        let good = encode_ppm(&gradient_ppm(4, 4));
        let e = parse_ppm(&good[..good.len() - 5]).unwrap_err();
        assert_eq!(e.offset, good.len() - 5);
        assert!(e.reason.contains("truncated"));

        let e = parse_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(e.reason.contains("maxval"));
    }

    #[test]
    fn resize_identity_and_hand_oracle() {
        let src = Planar::from_ppm(&gradient_ppm(6, 4));
        let same = resize_bilinear(&src, 6, 4);
        assert_eq!(same.data, src.data);

        // 2→4 upscale along one row: [a, b] → [a, ¾a+¼b, ¼a+¾b, b].
        let (a, b) = (0.2f32, 0.8f32);
        let row = Planar {
            width: 2,
            height: 1,
            data: vec![a, b, a, b, a, b],
        };
        let up = resize_bilinear(&row, 4, 1);
        let want = [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
        for c in 0..3 {
            for (got, want) in up.data[c * 4..(c + 1) * 4].iter().zip(want) {
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let src = Planar::from_ppm(&gradient_ppm(7, 5));
        assert_eq!(hflip(&hflip(&src)), src);
        assert_ne!(hflip(&src), src);
    }

    #[test]
    fn normalization_cancels_the_channel_means() {
        let mut data = Vec::new();
        for c in 0..3 {
            data.extend(std::iter::repeat(NORM_MEAN[c]).take(16));
        }
        let planar = Planar {
            width: 4,
            height: 4,
            data,
        };
        let t = normalize(&planar);
        assert_eq!(t.shape(), &[3, 4, 4]);
        assert!(t.to_vec().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn resize_side_scales_the_256_over_224_ratio() {
        assert_eq!(ImagePrep { image_size: 224 }.resize_side(), 256);
        assert_eq!(ImagePrep { image_size: 32 }.resize_side(), 37);
        assert_eq!(ImagePrep { image_size: 1 }.resize_side(), 1);
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_is_seeded() {
        let img = gradient_ppm(40, 40);
        let prep = ImagePrep { image_size: 32 };
        let a = prepare_ppm(&img, prep, false, &mut seeded_rng(1));
        let b = prepare_ppm(&img, prep, false, &mut seeded_rng(99));
        assert_eq!(a.to_vec(), b.to_vec()); // rng unused in eval mode

        let t1 = prepare_ppm(&img, prep, true, &mut seeded_rng(5));
        let t2 = prepare_ppm(&img, prep, true, &mut seeded_rng(5));
        assert_eq!(t1.to_vec(), t2.to_vec());

        // Across many seeds, at least one augmented view must differ from
        // the eval view (flip and random crop both fire half the time).
        let differs = (0..8).any(|s| {
            prepare_ppm(&img, prep, true, &mut seeded_rng(s)).to_vec() != a.to_vec()
        });
        assert!(differs);
    }

    #[test]
    fn load_and_augment_reports_file_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let prep = ImagePrep { image_size: 8 };
        let missing = dir.path().join("nope.ppm");
        assert!(matches!(
            load_and_augment(&missing, prep, false, &mut seeded_rng(0)),
            Err(DataError::Io { .. })
        ));

        let bad = dir.path().join("bad.ppm");
        std::fs::write(&bad, b"P6\n2 2\n255\nshort").unwrap();
        assert!(matches!(
            load_and_augment(&bad, prep, false, &mut seeded_rng(0)),
            Err(DataError::Ppm { .. })
        ));

        let good = dir.path().join("good.ppm");
        std::fs::write(&good, encode_ppm(&gradient_ppm(10, 10))).unwrap();
        let t = load_and_augment(&good, prep, false, &mut seeded_rng(0)).unwrap();
        assert_eq!(t.shape(), &[3, 8, 8]);
    }
}
