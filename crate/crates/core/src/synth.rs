//! Synthetic eye images: concentric pupil, iris and elliptical sclera on a
//! shaded background. Used for fixtures, smoke runs and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::label::{LabelMap, BACKGROUND, IRIS, PUPIL, SCLERA};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeGeometry {
    pub cy: f64,
    pub cx: f64,
    pub pupil_r: f64,
    pub iris_r: f64,
    /// Sclera ellipse semi-axes.
    pub sclera_ry: f64,
    pub sclera_rx: f64,
}

impl EyeGeometry {
    /// A centred eye scaled to an `h × w` frame.
    pub fn centered(h: usize, w: usize) -> Self {
        let s = h.min(w) as f64;
        EyeGeometry {
            cy: h as f64 / 2.0,
            cx: w as f64 / 2.0,
            pupil_r: 0.1 * s,
            iris_r: 0.22 * s,
            sclera_ry: 0.34 * h as f64,
            sclera_rx: 0.42 * w as f64,
        }
    }

    pub fn label_at(&self, y: usize, x: usize) -> u8 {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let r = (dy * dy + dx * dx).sqrt();
        if r < self.pupil_r {
            PUPIL
        } else if r < self.iris_r {
            IRIS
        } else if (dy / self.sclera_ry).powi(2) + (dx / self.sclera_rx).powi(2) < 1.0 {
            SCLERA
        } else {
            BACKGROUND
        }
    }

    pub fn mask(&self, h: usize, w: usize) -> LabelMap {
        LabelMap::from_fn(h, w, |y, x| self.label_at(y, x))
    }
}

const INTENSITY: [f32; 4] = [0.45, 0.85, 0.35, 0.08];

/// Image and mask for `geom`, with uniform pixel noise of the given amplitude.
pub fn render(geom: &EyeGeometry, h: usize, w: usize, noise: f32, seed: u64, id: &str) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = geom.mask(h, w);
    let image = Tensor4::from_fn([1, 1, h, w], |_, _, y, x| {
        let base = INTENSITY[mask.get(y, x) as usize] + 0.1 * (y as f32 / h as f32 - 0.5);
        let n = if noise > 0.0 {
            rng.random_range(-noise..noise)
        } else {
            0.0
        };
        (base + n).clamp(0.0, 1.0)
    });
    Sample::new(image, mask, id).expect("rendered sample is consistent")
}

/// `count` eyes with jittered centres and radii.
pub fn eye_set(count: usize, h: usize, w: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut g = EyeGeometry::centered(h, w);
            let s = h.min(w) as f64;
            g.cy += rng.random_range(-0.08..0.08) * h as f64;
            g.cx += rng.random_range(-0.1..0.1) * w as f64;
            g.pupil_r *= rng.random_range(0.8..1.2);
            g.iris_r *= rng.random_range(0.9..1.1);
            g.pupil_r = g.pupil_r.min(g.iris_r - 0.05 * s);
            render(
                &g,
                h,
                w,
                0.03,
                seed.wrapping_mul(31).wrapping_add(i as u64),
                &format!("eye{i:02}"),
            )
        })
        .collect()
}
