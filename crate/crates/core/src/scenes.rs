//! Procedural toy scenes: gradient backgrounds, textured polygons and
//! bitmap glyphs, rendered with 4× supersampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageArray;

const SUPERSAMPLE: usize = 4;

// 5×7 glyphs, one row per byte (low 5 bits, MSB = left column).
const GLYPHS: [[u8; 7]; 8] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x0E, 0x11, 0x10, 0x0E, 0x01, 0x11, 0x0E], // S
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
];

type Color = [f64; 3];

fn random_color(rng: &mut ChaCha8Rng) -> Color {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

struct Canvas {
    w: usize,
    px: Vec<Color>,
}

impl Canvas {
    fn put(&mut self, y: usize, x: usize, c: Color) {
        self.px[y * self.w + x] = c;
    }
}

fn inside_convex(poly: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let (ay, ax) = poly[i];
        let (by, bx) = poly[(i + 1) % poly.len()];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

fn random_convex(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Vec<(f64, f64)> {
    let cy = rng.random_range(0.1..0.9) * h;
    let cx = rng.random_range(0.1..0.9) * w;
    let r = rng.random_range(0.12..0.35) * h.min(w);
    let k = rng.random_range(3..=6);
    let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.iter().map(|a| (cy + r * a.sin(), cx + r * a.cos())).collect()
}

/// Renders a deterministic scene for `seed`.
pub fn render_scene(seed: u64, height: usize, width: usize, channels: usize) -> ImageArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4_e5ce_4e5c_e4e5);
    let (hs, ws) = (height * SUPERSAMPLE, width * SUPERSAMPLE);
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (theta.sin(), theta.cos());
    let mut canvas = Canvas { w: ws, px: vec![[0.0; 3]; hs * ws] };
    for y in 0..hs {
        for x in 0..ws {
            let u = ((y as f64 / hs as f64 - 0.5) * gy + (x as f64 / ws as f64 - 0.5) * gx + 0.75) / 1.5;
            let u = u.clamp(0.0, 1.0);
            canvas.put(y, x, std::array::from_fn(|c| c0[c] * (1.0 - u) + c1[c] * u));
        }
    }

    let polygons = rng.random_range(3..=6);
    for _ in 0..polygons {
        let poly = random_convex(&mut rng, hs as f64, ws as f64);
        let base = random_color(&mut rng);
        let alt = random_color(&mut rng);
        let striped = rng.random_bool(0.5);
        let period = rng.random_range(2.0..5.0) * SUPERSAMPLE as f64;
        let phi: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sy, sx) = (phi.sin(), phi.cos());
        for y in 0..hs {
            for x in 0..ws {
                if !inside_convex(&poly, y as f64 + 0.5, x as f64 + 0.5) {
                    continue;
                }
                let col = if striped && ((y as f64 * sy + x as f64 * sx) / period).rem_euclid(2.0) < 1.0 { alt } else { base };
                canvas.put(y, x, col);
            }
        }
    }

    let glyphs = rng.random_range(1..=2);
    for _ in 0..glyphs {
        let glyph = &GLYPHS[rng.random_range(0..GLYPHS.len())];
        let cell = SUPERSAMPLE * rng.random_range(1..=2);
        let gh = 7 * cell;
        let gw = 5 * cell;
        if gh >= hs || gw >= ws {
            continue;
        }
        let oy = rng.random_range(0..hs - gh);
        let ox = rng.random_range(0..ws - gw);
        let ink = random_color(&mut rng);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) == 0 {
                    continue;
                }
                for yy in 0..cell {
                    for xx in 0..cell {
                        canvas.put(oy + row * cell + yy, ox + col * cell + xx, ink);
                    }
                }
            }
        }
    }

    let mut data = vec![0.0; channels * height * width];
    let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            for yy in 0..SUPERSAMPLE {
                for xx in 0..SUPERSAMPLE {
                    let p = canvas.px[(y * SUPERSAMPLE + yy) * canvas.w + x * SUPERSAMPLE + xx];
                    (0..3).for_each(|c| acc[c] += p[c]);
                }
            }
            if channels == 3 {
                for c in 0..3 {
                    data[(c * height + y) * width + x] = acc[c] / norm;
                }
            } else {
                data[y * width + x] = (0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2]) / norm;
            }
        }
    }
    ImageArray::new(channels, height, width, data).expect("scene pixels are finite").quantize8()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = render_scene(3, 32, 32, 3);
        let b = render_scene(3, 32, 32, 3);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, render_scene(4, 32, 32, 3));
    }

    #[test]
    fn scenes_have_structure() {
        let img = render_scene(11, 32, 32, 1);
        let mean = img.mean();
        let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.data().len() as f64;
        assert!(var > 1e-3, "scene is nearly flat: var {var}");
    }
}
