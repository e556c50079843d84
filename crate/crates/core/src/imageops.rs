//! Image pre/post-processing: center crop and resize, background-mask
//! application, sRGB(D65) <-> CIE Lab conversion, and Lab-statistics color
//! transfer. Images travel as binary PPM (P6) and masks as PGM (P5);
//! internal processing is double precision.

use std::path::Path;

use crate::error::{Error, Result};

// sRGB D65 reference: the published linear RGB -> XYZ matrix and white
// point. The reverse matrix is derived from the forward one at full double
// precision (the published 7-digit inverse is too coarse for exact
// round-trips).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

fn xyz_to_rgb_matrix() -> &'static [[f64; 3]; 3] {
    static INV: std::sync::OnceLock<[[f64; 3]; 3]> = std::sync::OnceLock::new();
    INV.get_or_init(|| {
        let m = &RGB_TO_XYZ;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let cof = |r1: usize, c1: usize, r2: usize, c2: usize| {
            m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
        };
        [
            [cof(1, 1, 2, 2) / det, -cof(0, 1, 2, 2) / det, cof(0, 1, 1, 2) / det],
            [-cof(1, 0, 2, 2) / det, cof(0, 0, 2, 2) / det, -cof(0, 0, 1, 2) / det],
            [cof(1, 0, 2, 1) / det, -cof(0, 0, 2, 1) / det, cof(0, 0, 1, 1) / det],
        ]
    })
}

/// RGB image with interleaved channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidSpec(format!(
                "rgb image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidSpec("rgb values must lie in [0, 1]".into()));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        RgbImage::new(height, width, data)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// CIE Lab image, interleaved `L, a, b` per pixel. `L` lies in `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl LabImage {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Foreground mask; true marks pixels to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    fg: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, fg: Vec<bool>) -> Result<Self> {
        if fg.len() != height * width {
            return Err(Error::InvalidSpec(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                fg.len()
            )));
        }
        Ok(BinaryMask { height, width, fg })
    }

    pub fn foreground(&self) -> &[bool] {
        &self.fg
    }
}

/// Center crop to `crop x crop` (floor offsets on odd excess), then resize
/// to `out x out`: an exact 2x2 box average when `crop = 2 * out`, bilinear
/// interpolation otherwise.
pub fn center_crop_resize(img: &RgbImage, crop: usize, out: usize) -> Result<RgbImage> {
    if crop == 0 || out == 0 {
        return Err(Error::InvalidSpec("crop and output sizes must be positive".into()));
    }
    if img.height < crop || img.width < crop {
        return Err(Error::InvalidSpec(format!(
            "image {}x{} smaller than crop {crop}",
            img.height, img.width
        )));
    }
    let oy = (img.height - crop) / 2;
    let ox = (img.width - crop) / 2;
    let at = |y: usize, x: usize, c: usize| img.data[((oy + y) * img.width + (ox + x)) * 3 + c];

    let mut data = vec![0.0; out * out * 3];
    if crop == 2 * out {
        for y in 0..out {
            for x in 0..out {
                for c in 0..3 {
                    let s = at(2 * y, 2 * x, c)
                        + at(2 * y, 2 * x + 1, c)
                        + at(2 * y + 1, 2 * x, c)
                        + at(2 * y + 1, 2 * x + 1, c);
                    data[(y * out + x) * 3 + c] = s / 4.0;
                }
            }
        }
    } else {
        let scale = crop as f64 / out as f64;
        let sample = |i: usize| {
            let s = (i as f64 + 0.5) * scale - 0.5;
            let lo = s.floor().clamp(0.0, (crop - 1) as f64);
            let frac = (s - lo).clamp(0.0, 1.0);
            let lo = lo as usize;
            let hi = (lo + 1).min(crop - 1);
            (lo, hi, frac)
        };
        for y in 0..out {
            let (y0, y1, fy) = sample(y);
            for x in 0..out {
                let (x0, x1, fx) = sample(x);
                for c in 0..3 {
                    let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
                    let bot = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
                    data[(y * out + x) * 3 + c] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    RgbImage::new(out, out, data)
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    let mut data = vec![0.0; img.data.len()];
    for y in 0..img.height {
        for x in 0..img.width {
            let from = (y * img.width + x) * 3;
            let to = (y * img.width + (img.width - 1 - x)) * 3;
            data[to..to + 3].copy_from_slice(&img.data[from..from + 3]);
        }
    }
    RgbImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Keeps foreground pixels, replaces background with a constant gray level.
pub fn apply_mask(img: &RgbImage, mask: &BinaryMask, background_value: f64) -> Result<RgbImage> {
    if mask.height != img.height || mask.width != img.width {
        return Err(Error::ShapeMismatch {
            expected: vec![img.height, img.width],
            got: vec![mask.height, mask.width],
        });
    }
    if !(0.0..=1.0).contains(&background_value) {
        return Err(Error::InvalidSpec(format!(
            "background value {background_value} outside [0, 1]"
        )));
    }
    let mut data = img.data.clone();
    for (i, keep) in mask.fg.iter().enumerate() {
        if !keep {
            data[i * 3..i * 3 + 3].fill(background_value);
        }
    }
    RgbImage::new(img.height, img.width, data)
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    const CUTOFF: f64 = (6.0 / 29.0) * (6.0 / 29.0) * (6.0 / 29.0);
    if t > CUTOFF {
        t.cbrt()
    } else {
        t / (3.0 * (6.0 / 29.0) * (6.0 / 29.0)) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let lin = [
            srgb_to_linear(px[0]),
            srgb_to_linear(px[1]),
            srgb_to_linear(px[2]),
        ];
        let mut xyz = [0.0; 3];
        for (row, slot) in RGB_TO_XYZ.iter().zip(xyz.iter_mut()) {
            *slot = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        }
        let fx = lab_f(xyz[0] / WHITE[0]);
        let fy = lab_f(xyz[1] / WHITE[1]);
        let fz = lab_f(xyz[2] / WHITE[2]);
        data.push(116.0 * fy - 16.0);
        data.push(500.0 * (fx - fy));
        data.push(200.0 * (fy - fz));
    }
    LabImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Inverse conversion; out-of-gamut values are clipped to `[0, 1]` and the
/// number of clipped channel values is returned alongside the image.
pub fn lab_to_rgb(img: &LabImage) -> (RgbImage, usize) {
    let mut data = Vec::with_capacity(img.data.len());
    let mut clipped = 0usize;
    for px in img.data.chunks_exact(3) {
        let fy = (px[0] + 16.0) / 116.0;
        let fx = fy + px[1] / 500.0;
        let fz = fy - px[2] / 200.0;
        let xyz = [
            WHITE[0] * lab_f_inv(fx),
            WHITE[1] * lab_f_inv(fy),
            WHITE[2] * lab_f_inv(fz),
        ];
        for row in xyz_to_rgb_matrix().iter() {
            let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
            let mut v = linear_to_srgb(lin);
            if !(0.0..=1.0).contains(&v) {
                clipped += 1;
                v = v.clamp(0.0, 1.0);
            }
            data.push(v);
        }
    }
    let rgb = RgbImage {
        height: img.height,
        width: img.width,
        data,
    };
    (rgb, clipped)
}

/// Population mean and standard deviation of one Lab channel, optionally
/// restricted to mask foreground.
fn channel_stats(img: &LabImage, channel: usize, mask: Option<&BinaryMask>) -> (f64, f64) {
    let mut total = 0.0;
    let mut count = 0usize;
    let selected = |i: usize| mask.map(|m| m.fg[i]).unwrap_or(true);
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        if selected(i) {
            total += px[channel];
            count += 1;
        }
    }
    let mean = total / count as f64;
    let mut var = 0.0;
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        if selected(i) {
            let d = px[channel] - mean;
            var += d * d;
        }
    }
    (mean, (var / count as f64).sqrt())
}

/// Lab-space statistics transfer: each target channel is standardized and
/// re-expressed with the source channel's mean and deviation. Channels with
/// (near) zero deviation are shifted to the source mean without scaling.
pub fn color_correct_lab(
    target: &LabImage,
    source: &LabImage,
    target_mask: Option<&BinaryMask>,
    source_mask: Option<&BinaryMask>,
) -> LabImage {
    let mut data = target.data.clone();
    for c in 0..3 {
        let (t_mean, t_std) = channel_stats(target, c, target_mask);
        let (s_mean, s_std) = channel_stats(source, c, source_mask);
        for px in data.chunks_exact_mut(3) {
            px[c] = if t_std < 1e-8 {
                px[c] - t_mean + s_mean
            } else {
                (px[c] - t_mean) / t_std * s_std + s_mean
            };
        }
    }
    LabImage {
        height: target.height,
        width: target.width,
        data,
    }
}

/// Full RGB color-correction pipeline: to Lab, transfer statistics, back to
/// RGB with gamut clipping. The optional mask restricts the statistics of
/// both images (its size must match each image it is applied to).
pub fn color_correct(
    target: &RgbImage,
    source: &RgbImage,
    mask: Option<&BinaryMask>,
) -> Result<(RgbImage, usize)> {
    if let Some(m) = mask {
        for (h, w) in [(target.height, target.width), (source.height, source.width)] {
            if m.height != h || m.width != w {
                return Err(Error::ShapeMismatch {
                    expected: vec![h, w],
                    got: vec![m.height, m.width],
                });
            }
        }
    }
    let t_lab = rgb_to_lab(target);
    let s_lab = rgb_to_lab(source);
    let out = color_correct_lab(&t_lab, &s_lab, mask, mask);
    Ok(lab_to_rgb(&out))
}

// --- netpbm I/O ---

struct PnmHeader {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &str, path: &str) -> Result<PnmHeader> {
    let bad = |msg: &str| Error::InvalidSpec(format!("{path}: {msg}"));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(bad(&format!("expected {magic} file")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("bad header number"))?;
    }
    if fields[2] != 255 {
        return Err(bad(&format!("only maxval 255 is supported, got {}", fields[2])));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after header"));
    }
    Ok(PnmHeader {
        width: fields[0],
        height: fields[1],
        data_offset: pos + 1,
    })
}

/// Reads a binary 8-bit PPM (P6).
pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let header = parse_pnm_header(&bytes, "P6", &display)?;
    let n = header.width * header.height * 3;
    let body = &bytes[header.data_offset..];
    if body.len() != n {
        return Err(Error::InvalidSpec(format!(
            "{display}: expected {n} pixel bytes, found {}",
            body.len()
        )));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    RgbImage::new(header.height, header.width, data)
}

/// Writes a binary 8-bit PPM (P6); quantization is round-half-up.
pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.data.iter().map(|&v| (v * 255.0).round() as u8));
    crate::manifest::atomic_write(path, &bytes)
}

/// Reads a binary PGM (P5) whose values are exactly 0 or 255; 255 marks
/// foreground.
pub fn read_pgm_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let header = parse_pnm_header(&bytes, "P5", &display)?;
    let n = header.width * header.height;
    let body = &bytes[header.data_offset..];
    if body.len() != n {
        return Err(Error::InvalidSpec(format!(
            "{display}: expected {n} mask bytes, found {}",
            body.len()
        )));
    }
    let mut fg = Vec::with_capacity(n);
    for &b in body {
        match b {
            0 => fg.push(false),
            255 => fg.push(true),
            other => {
                return Err(Error::InvalidSpec(format!(
                    "{display}: mask values must be 0 or 255, found {other}"
                )))
            }
        }
    }
    BinaryMask::new(header.height, header.width, fg)
}

pub fn write_pgm_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend(mask.fg.iter().map(|&b| if b { 255u8 } else { 0u8 }));
    crate::manifest::atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = RngStream::new(seed);
        let data = (0..h * w * 3).map(|_| rng.next_uniform()).collect();
        RgbImage::new(h, w, data).unwrap()
    }

    #[test]
    fn constant_image_survives_crop_resize() {
        let img = RgbImage::constant(130, 140, [0.25, 0.5, 0.75]).unwrap();
        let out = center_crop_resize(&img, 128, 64).unwrap();
        assert_eq!(out.height, 64);
        for px in out.data().chunks_exact(3) {
            assert!((px[0] - 0.25).abs() < 1e-12);
            assert!((px[1] - 0.5).abs() < 1e-12);
            assert!((px[2] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_size_input_only_resizes() {
        let img = random_image(128, 128, 3);
        let out = center_crop_resize(&img, 128, 64).unwrap();
        // Box average of the top-left 2x2 block.
        let expect = (img.pixel(0, 0)[0]
            + img.pixel(0, 1)[0]
            + img.pixel(1, 0)[0]
            + img.pixel(1, 1)[0])
            / 4.0;
        assert!((out.pixel(0, 0)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_averages_to_half() {
        let mut data = Vec::with_capacity(128 * 128 * 3);
        for y in 0..128 {
            for x in 0..128 {
                let v = ((x + y) % 2) as f64;
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let img = RgbImage::new(128, 128, data).unwrap();
        let out = center_crop_resize(&img, 128, 64).unwrap();
        for v in out.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let img = RgbImage::constant(100, 100, [0.0, 0.0, 0.0]).unwrap();
        assert!(center_crop_resize(&img, 128, 64).is_err());
    }

    #[test]
    fn bilinear_path_used_for_odd_ratio() {
        let img = random_image(96, 96, 5);
        let out = center_crop_resize(&img, 96, 64).unwrap();
        assert_eq!(out.width, 64);
        for v in out.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn crop_resize_commutes_with_flip() {
        for (crop, out) in [(128, 64), (96, 64)] {
            let img = random_image(crop, crop, 11);
            let a = center_crop_resize(&flip_horizontal(&img), crop, out).unwrap();
            let b = flip_horizontal(&center_crop_resize(&img, crop, out).unwrap());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_application() {
        let img = random_image(4, 4, 7);
        let all = BinaryMask::new(4, 4, vec![true; 16]).unwrap();
        assert_eq!(apply_mask(&img, &all, 0.5).unwrap(), img);

        let none = BinaryMask::new(4, 4, vec![false; 16]).unwrap();
        let out = apply_mask(&img, &none, 0.25).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));

        let mut half = vec![false; 16];
        half[..8].fill(true);
        let half = BinaryMask::new(4, 4, half).unwrap();
        let out = apply_mask(&img, &half, 0.0).unwrap();
        for i in 0..16 {
            for c in 0..3 {
                let expect = if i < 8 { img.data()[i * 3 + c] } else { 0.0 };
                assert_eq!(out.data()[i * 3 + c], expect);
            }
        }

        let wrong = BinaryMask::new(2, 2, vec![true; 4]).unwrap();
        assert!(apply_mask(&img, &wrong, 0.0).is_err());
    }

    #[test]
    fn white_and_black_anchor_points() {
        let white = RgbImage::constant(1, 1, [1.0, 1.0, 1.0]).unwrap();
        let lab = rgb_to_lab(&white);
        let px = lab.pixel(0, 0);
        assert!((px[0] - 100.0).abs() < 1e-3, "L {}", px[0]);
        assert!(px[1].abs() < 1e-3 && px[2].abs() < 1e-3);

        let black = RgbImage::constant(1, 1, [0.0, 0.0, 0.0]).unwrap();
        let px = rgb_to_lab(&black).pixel(0, 0);
        assert!(px[0].abs() < 1e-9 && px[1].abs() < 1e-9 && px[2].abs() < 1e-9);
    }

    #[test]
    fn lab_roundtrip_on_random_pixels() {
        let mut rng = RngStream::new(13);
        let data: Vec<f64> = (0..1000 * 3).map(|_| rng.next_uniform()).collect();
        let img = RgbImage::new(1, 1000, data).unwrap();
        let (back, clipped) = lab_to_rgb(&rgb_to_lab(&img));
        assert_eq!(clipped, 0);
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-6, "max abs error {worst}");
    }

    #[test]
    fn luminance_is_monotone_for_grays() {
        let mut last = -1.0;
        for k in 0..=20 {
            let g = k as f64 / 20.0;
            let img = RgbImage::constant(1, 1, [g, g, g]).unwrap();
            let l = rgb_to_lab(&img).pixel(0, 0)[0];
            assert!(l > last, "L({g}) = {l} not above {last}");
            last = l;
        }
    }

    #[test]
    fn color_correct_fixed_point() {
        let img = random_image(8, 8, 17);
        let lab = rgb_to_lab(&img);
        let out = color_correct_lab(&lab, &lab, None, None);
        for (a, b) in out.data().iter().zip(lab.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn color_correct_matches_source_statistics() {
        let target = random_image(16, 16, 19);
        let source = random_image(16, 16, 23);
        let t_lab = rgb_to_lab(&target);
        let s_lab = rgb_to_lab(&source);
        let out = color_correct_lab(&t_lab, &s_lab, None, None);
        for c in 0..3 {
            let (sm, ss) = channel_stats(&s_lab, c, None);
            let (om, os) = channel_stats(&out, c, None);
            assert!((sm - om).abs() < 1e-6, "channel {c} mean");
            assert!((ss - os).abs() < 1e-6, "channel {c} std");
        }
        // Idempotence: correcting again against the same source is stable.
        let again = color_correct_lab(&out, &s_lab, None, None);
        for (a, b) in again.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_target_takes_source_means() {
        let target = RgbImage::constant(4, 4, [0.5, 0.5, 0.5]).unwrap();
        let source = random_image(4, 4, 29);
        let t_lab = rgb_to_lab(&target);
        let s_lab = rgb_to_lab(&source);
        let out = color_correct_lab(&t_lab, &s_lab, None, None);
        for c in 0..3 {
            let (sm, _) = channel_stats(&s_lab, c, None);
            for px in out.data().chunks_exact(3) {
                assert!((px[c] - sm).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ppm_roundtrip_and_mask_validation() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(5, 7, 31);
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.height, 5);
        assert_eq!(back.width, 7);
        // 8-bit quantization bounds the error by half a level.
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let mask = BinaryMask::new(2, 3, vec![true, false, true, false, true, false]).unwrap();
        let mpath = dir.path().join("m.pgm");
        write_pgm_mask(&mpath, &mask).unwrap();
        assert_eq!(read_pgm_mask(&mpath).unwrap(), mask);

        // Non-binary grays must be rejected.
        let bad = b"P5\n2 1\n255\n\x7f\x00".to_vec();
        let bad_path = dir.path().join("bad.pgm");
        std::fs::write(&bad_path, bad).unwrap();
        assert!(read_pgm_mask(&bad_path).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(0, 1), [0.0, 1.0, 0.0]);
    }
}
