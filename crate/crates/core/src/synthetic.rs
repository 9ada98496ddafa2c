//! Procedural textures for tests, demos and smoke runs.
//!
//! A [`Texture`] is a continuous function of the plane, so translated copies
//! at sub-pixel offsets are exact and the true middle frame of a moving scene
//! is known.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{Image, CHANNELS};

#[derive(Debug, Clone)]
struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    weight: f64,
}

#[derive(Debug, Clone)]
pub struct Texture {
    mean: [f64; CHANNELS],
    amplitude: [f64; CHANNELS],
    waves: Vec<[Wave; CHANNELS]>,
}

impl Texture {
    /// Sum of oriented sinusoids with periods between 6 and 40 pixels around
    /// a random base color.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = std::array::from_fn(|_| rng.random_range(0.25..0.75));
        let amplitude = std::array::from_fn(|_| rng.random_range(0.12..0.22));
        let waves = (0..6)
            .map(|_| {
                let period: f64 = rng.random_range(6.0..40.0);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let f = std::f64::consts::TAU / period;
                std::array::from_fn(|_| Wave {
                    fy: f * angle.sin(),
                    fx: f * angle.cos(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    weight: rng.random_range(0.5..1.0),
                })
            })
            .collect();
        Texture {
            mean,
            amplitude,
            waves,
        }
    }

    /// Value of channel `c` at a real-valued position; always inside `[0, 1]`.
    pub fn sample(&self, c: usize, y: f64, x: f64) -> f32 {
        let (mut s, mut norm) = (0.0, 0.0);
        for w in &self.waves {
            let w = &w[c];
            s += w.weight * (w.fy * y + w.fx * x + w.phase).sin();
            norm += w.weight;
        }
        (self.mean[c] + self.amplitude[c] * s / norm).clamp(0.0, 1.0) as f32
    }

    /// Render a `height`×`width` view whose content is shifted by `(dy, dx)`.
    pub fn render(&self, height: usize, width: usize, dy: f64, dx: f64) -> Image {
        Image::from_fn(height, width, |c, y, x| {
            self.sample(c, y as f64 - dy, x as f64 - dx)
        })
    }
}

/// `frames` views of `texture` translating at `velocity = (vy, vx)` pixels per frame.
pub fn translating_sequence(
    texture: &Texture,
    height: usize,
    width: usize,
    frames: usize,
    velocity: (f64, f64),
) -> Vec<Image> {
    (0..frames)
        .map(|t| texture.render(height, width, velocity.0 * t as f64, velocity.1 * t as f64))
        .collect()
}

/// A `(first, middle, last)` triplet of a translation by `2·velocity` over
/// the triplet, with the exact middle frame.
pub fn moving_triplet(seed: u64, height: usize, width: usize, velocity: (f64, f64)) -> [Image; 3] {
    let tex = Texture::random(seed);
    let v = translating_sequence(&tex, height, width, 3, velocity);
    let mut it = v.into_iter();
    [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
}
