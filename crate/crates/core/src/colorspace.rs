//! sRGB, linear RGB, grayscale and CIELAB conversions.
//!
//! All in-memory rasters are interleaved RGB reals in `[0, 1]`, sRGB encoded.
//! CIELAB uses the D65 white point (2° observer) and the piecewise cube-root
//! companding with threshold `(6/29)^3`.

use std::path::Path;
use std::sync::LazyLock;

use image::{ImageReader, Rgb, RgbImage};

use crate::error::{Error, IoContext, Result};

/// sRGB primaries to XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Rec. 709 luminance weights, applied in linear light.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

const DELTA: f64 = 6.0 / 29.0;

// White is the image of RGB (1, 1, 1) so that the neutral axis maps to a = b = 0 exactly.
static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    let mut w = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        w[i] = row.iter().sum();
    }
    w
});

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Standard sRGB decoding of one channel.
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Standard sRGB encoding of one channel.
pub fn linear_to_srgb(l: f64) -> f64 {
    if l <= 0.0031308 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    if f > DELTA {
        f * f * f
    } else {
        3.0 * DELTA * DELTA * (f - 4.0 / 29.0)
    }
}

/// Converts one sRGB pixel to `(L, a, b)`.
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = mat_vec(&RGB_TO_XYZ, lin);
    let white = *WHITE;
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts one `(L, a, b)` triple to sRGB. The flag is set when any channel
/// had to be clamped into `[0, 1]`.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> ([f64; 3], bool) {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let white = *WHITE;
    let xyz = [
        white[0] * lab_f_inv(fx),
        white[1] * lab_f_inv(fy),
        white[2] * lab_f_inv(fz),
    ];
    let lin = mat_vec(&XYZ_TO_RGB, xyz);
    let mut clamped = false;
    let rgb = lin.map(|l| {
        let v = linear_to_srgb(l.max(0.0));
        // Tolerate round-off so in-gamut colors (e.g. white) are not flagged.
        if !(-1e-9..=1.0 + 1e-9).contains(&v) || l < -1e-12 {
            clamped = true;
        }
        v.clamp(0.0, 1.0)
    });
    (rgb, clamped)
}

/// Relative luminance of an sRGB pixel, re-encoded to sRGB.
pub fn gray_level(rgb: [f64; 3]) -> f64 {
    let lin = rgb.map(srgb_to_linear);
    let y = LUMA_WEIGHTS[0] * lin[0] + LUMA_WEIGHTS[1] * lin[1] + LUMA_WEIGHTS[2] * lin[2];
    linear_to_srgb(y).clamp(0.0, 1.0)
}

/// An H×W×3 sRGB raster with every channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelImage {
    /// Wraps interleaved RGB data, rejecting non-finite or out-of-range values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfRange { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Like [`PixelImage::new`] but clamps into `[0, 1]` instead of rejecting
    /// out-of-range values. Non-finite values are still an error.
    pub fn new_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Applies a per-pixel map; the result is clamped into range.
    pub fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        let data = self.pixels().flat_map(f).collect();
        Self::new_clamped(self.height, self.width, data)
    }

    pub fn is_achromatic(&self, tol: f64) -> bool {
        self.pixels()
            .all(|p| (p[0] - p[1]).abs() <= tol && (p[1] - p[2]).abs() <= tol)
    }

    /// Channel values quantized to 8 bits and decoded back (`n / 255`).
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| f64::from(quantize_u8(v)) / 255.0)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&n| f64::from(n) / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in out.pixels_mut().enumerate() {
            let c = &self.data[i * 3..i * 3 + 3];
            *px = Rgb([quantize_u8(c[0]), quantize_u8(c[1]), quantize_u8(c[2])]);
        }
        out
    }

    /// Decodes a PNG or JPEG file; 8-bit value `n` maps to `n / 255`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = ImageReader::open(path)
            .at(path)?
            .with_guessed_format()
            .at(path)?;
        let img = reader.decode()?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A CIELAB raster: `L` in `[0, 100]`, `a`, `b` roughly in `[-128, 128]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LabImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} LAB values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

pub fn rgb_to_lab(img: &PixelImage) -> LabImage {
    let data = img.pixels().flat_map(rgb_to_lab_pixel).collect();
    LabImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Result of converting LAB back to sRGB.
#[derive(Debug, Clone)]
pub struct LabToRgb {
    pub image: PixelImage,
    /// Pixels with at least one channel clamped into gamut.
    pub clamped: usize,
}

pub fn lab_to_rgb(img: &LabImage) -> LabToRgb {
    let mut clamped = 0;
    let mut data = Vec::with_capacity(img.data.len());
    for p in img.pixels() {
        let (rgb, c) = lab_to_rgb_pixel(p);
        clamped += usize::from(c);
        data.extend_from_slice(&rgb);
    }
    LabToRgb {
        image: PixelImage {
            height: img.height,
            width: img.width,
            data,
        },
        clamped,
    }
}

/// Luminance grayscale (Rec. 709 weights in linear light), replicated to three channels.
pub fn to_grayscale(img: &PixelImage) -> PixelImage {
    let data = img
        .pixels()
        .flat_map(|p| {
            let g = gray_level(p);
            [g, g, g]
        })
        .collect();
    PixelImage {
        height: img.height,
        width: img.width,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn white_and_black_golden() {
        let w = rgb_to_lab_pixel([1.0, 1.0, 1.0]);
        assert!(close(w, [100.0, 0.0, 0.0], 1e-9), "{w:?}");
        let k = rgb_to_lab_pixel([0.0, 0.0, 0.0]);
        assert!(close(k, [0.0, 0.0, 0.0], 1e-12), "{k:?}");
    }

    #[test]
    fn red_golden() {
        // Hand-computed: X=0.4124564/0.95047, Y=0.2126729/1.0000001, Z=0.0193339/1.08883.
        let r = rgb_to_lab_pixel([1.0, 0.0, 0.0]);
        assert!(close(r, [53.2408, 80.0925, 67.2032], 1e-3), "{r:?}");
        let (back, _) = lab_to_rgb_pixel([53.24, 80.09, 67.20]);
        assert!(close(back, [1.0, 0.0, 0.0], 1e-2), "{back:?}");
    }

    #[test]
    fn inverse_of_white() {
        let (rgb, clamped) = lab_to_rgb_pixel([100.0, 0.0, 0.0]);
        assert!(close(rgb, [1.0, 1.0, 1.0], 1e-9), "{rgb:?}");
        assert!(!clamped);
    }

    #[test]
    fn out_of_gamut_is_clamped_and_counted() {
        let lab = LabImage::new(1, 2, vec![50.0, 120.0, -120.0, 50.0, 0.0, 0.0]).unwrap();
        let out = lab_to_rgb(&lab);
        assert_eq!(out.clamped, 1);
        assert!(out.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn green_gray_level() {
        // linear 0.7152 encoded: 1.055 * 0.7152^(1/2.4) - 0.055
        let g = to_grayscale(&PixelImage::filled(1, 1, [0.0, 1.0, 0.0]).unwrap());
        assert!((g.get(0, 0)[0] - 0.862481368529148).abs() < 1e-9);
        assert!(g.is_achromatic(0.0));
    }

    #[test]
    fn round_trip_ten_thousand_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let p = [rng.random::<f64>(), rng.random(), rng.random()];
            let (back, clamped) = lab_to_rgb_pixel(rgb_to_lab_pixel(p));
            assert!(!clamped);
            for c in 0..3 {
                worst = worst.max((back[c] - p[c]).abs());
            }
        }
        assert!(worst <= 1e-3, "max round-trip error {worst}");
    }

    #[test]
    fn lightness_monotone_on_gray_axis() {
        let mut prev = -1.0;
        for n in 0..=255 {
            let g = f64::from(n) / 255.0;
            let l = rgb_to_lab_pixel([g, g, g])[0];
            assert!(l > prev);
            assert!((0.0..=100.0 + 1e-9).contains(&l));
            prev = l;
        }
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            PixelImage::new(1, 1, vec![0.0, f64::NAN, 0.0]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            PixelImage::new(1, 1, vec![0.0, 1.5, 0.0]),
            Err(Error::OutOfRange { .. })
        ));
        assert!(PixelImage::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = PixelImage::from_fn(4, 5, |y, x| {
            [(y * 40) as f64 / 255.0, (x * 50) as f64 / 255.0, 7.0 / 255.0]
        })
        .unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(PixelImage::load(&path).unwrap(), img);
    }

    proptest! {
        #[test]
        fn achromatic_axis(g in 0.0f64..=1.0) {
            let lab = rgb_to_lab_pixel([g, g, g]);
            prop_assert!(lab[1].abs() <= 1e-6 && lab[2].abs() <= 1e-6, "{lab:?}");
        }

        #[test]
        fn grayscale_idempotent(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let img = PixelImage::filled(1, 1, [r, g, b]).unwrap();
            let once = to_grayscale(&img);
            let twice = to_grayscale(&once);
            prop_assert!(close(once.get(0, 0), twice.get(0, 0), 1e-6));
        }

        #[test]
        fn achromatic_is_grayscale_fixed_point(g in 0.0f64..=1.0) {
            let img = PixelImage::filled(1, 1, [g, g, g]).unwrap();
            prop_assert!(close(to_grayscale(&img).get(0, 0), [g, g, g], 1e-6));
        }

        #[test]
        fn lightness_in_range(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let l = rgb_to_lab_pixel([r, g, b])[0];
            prop_assert!((-1e-9..=100.0 + 1e-9).contains(&l));
        }
    }
}
