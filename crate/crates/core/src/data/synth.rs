//! Procedural portrait-like images for tests and demos.
//!
//! Each image has a background, a shaded face ellipse, hair, eyes, lips and a
//! shirt. Every region picks its color from a small palette whose entries
//! differ in luminance, so color is mostly recoverable from the gray level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::PixelImage;

const BACKGROUNDS: [[f64; 3]; 3] = [[0.55, 0.75, 0.95], [0.25, 0.52, 0.30], [0.45, 0.12, 0.18]];
const SKIN: [[f64; 3]; 3] = [[0.96, 0.80, 0.69], [0.78, 0.57, 0.42], [0.45, 0.30, 0.21]];
const HAIR: [[f64; 3]; 3] = [[0.88, 0.74, 0.42], [0.40, 0.24, 0.12], [0.08, 0.07, 0.07]];
const SHIRT: [[f64; 3]; 3] = [[0.92, 0.92, 0.90], [0.80, 0.18, 0.16], [0.10, 0.16, 0.42]];
const LIPS: [f64; 3] = [0.74, 0.27, 0.30];
const EYES: [f64; 3] = [0.12, 0.09, 0.07];

fn smooth_inside(d: f64, soft: f64) -> f64 {
    // d < 1 inside the shape; blend over a band of width `soft`.
    ((1.0 - d) / soft + 0.5).clamp(0.0, 1.0)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt()
}

/// One synthetic portrait of `size`×`size` pixels.
pub fn portrait(size: usize, rng: &mut impl Rng) -> PixelImage {
    let s = size as f64;
    let bg = BACKGROUNDS[rng.random_range(0..3)];
    let skin = SKIN[rng.random_range(0..3)];
    let hair = HAIR[rng.random_range(0..3)];
    let shirt = SHIRT[rng.random_range(0..3)];
    let bright = rng.random_range(0.95..1.05);
    let cx = s * (0.5 + rng.random_range(-0.06..0.06));
    let cy = s * (0.45 + rng.random_range(-0.04..0.04));
    let rx = s * rng.random_range(0.19..0.24);
    let ry = s * rng.random_range(0.25..0.30);
    let hair_len = rng.random_range(0.0..0.6);
    let shirt_top = s * rng.random_range(0.78..0.84);
    let soft = 1.5 / (rx.min(ry));

    PixelImage::from_fn(size, size, |yi, xi| {
        let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
        let mut c = scale(bg, bright * (1.08 - 0.16 * y / s));

        // Hair: a larger ellipse behind the face, cut off below by hair_len.
        let hd = ellipse(x, y, cx, cy - ry * 0.12, rx * 1.22, ry * 1.15);
        let hair_cut = cy + ry * hair_len;
        if y < hair_cut + 1.0 {
            let t = smooth_inside(hd, soft) * (hair_cut + 1.0 - y).clamp(0.0, 1.0);
            c = mix(c, hair, t);
        }

        // Shirt: shoulders under the face.
        let sd = ellipse(x, y, cx, s * 1.15, s * 0.48, s * 1.15 - shirt_top);
        c = mix(c, scale(shirt, 1.04 - 0.08 * (x / s)), smooth_inside(sd, 0.04));

        // Face with a left-to-right light falloff.
        let fd = ellipse(x, y, cx, cy, rx, ry);
        let shade = 1.06 - 0.12 * ((x - cx + rx) / (2.0 * rx)).clamp(0.0, 1.0);
        c = mix(c, scale(skin, shade * bright), smooth_inside(fd, soft));

        // Hair fringe over the top of the face.
        let fringe = ellipse(x, y, cx, cy - ry * 0.95, rx * 1.05, ry * 0.35);
        c = mix(c, hair, smooth_inside(fringe, 0.15));

        for side in [-1.0, 1.0] {
            let ed = ellipse(x, y, cx + side * rx * 0.4, cy - ry * 0.1, rx * 0.13, ry * 0.07);
            c = mix(c, EYES, smooth_inside(ed, 0.4));
        }
        let ld = ellipse(x, y, cx, cy + ry * 0.55, rx * 0.32, ry * 0.08);
        mix(c, LIPS, smooth_inside(ld, 0.4))
    })
    .expect("synthetic colors are finite and in range")
}

/// `n` portraits from a seeded stream.
pub fn portraits(n: usize, size: usize, seed: u64) -> Vec<PixelImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| portrait(size, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{rgb_to_lab, to_grayscale};

    #[test]
    fn deterministic_and_colorful() {
        let a = portraits(4, 32, 1);
        let b = portraits(4, 32, 1);
        assert_eq!(a, b);
        for img in &a {
            assert!(!img.is_achromatic(0.05));
            let lab = rgb_to_lab(img);
            let chroma: f64 = lab.pixels().map(|p| p[1].hypot(p[2])).sum::<f64>() / (32.0 * 32.0);
            assert!(chroma > 5.0, "mean chroma {chroma}");
            assert!(to_grayscale(img).is_achromatic(1e-12));
        }
        assert_ne!(portraits(1, 32, 2), portraits(1, 32, 3));
    }
}
