//! Synthetic training pairs: procedural textures under random homographies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidense_tensor::Tensor;

use crate::geometry::Homography;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(octave ^ splitmix(ix as u64 ^ splitmix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise defined on the whole plane, so it can be sampled
/// at any warped location.
#[derive(Clone, Debug)]
pub struct Texture {
    seed: u64,
    octaves: Vec<(f64, f64, (f64, f64))>,
    contrast: f64,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let periods = [24.0, 12.0, 6.0, 3.0];
        let amps = [1.0, 0.8, 0.6, 0.35];
        let octaves = periods
            .iter()
            .zip(amps)
            .map(|(&p, a)| {
                let p = p * rng.random_range(0.8..1.25);
                (p, a, (rng.random_range(0.0..p), rng.random_range(0.0..p)))
            })
            .collect();
        Texture { seed: rng.random(), octaves, contrast: rng.random_range(2.2..3.2) }
    }

    /// Intensity in `[0, 1]` at continuous position `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let mut sum = 0.0;
        let mut norm = 0.0;
        for (o, &(period, amp, (ox, oy))) in self.octaves.iter().enumerate() {
            let (u, v) = ((x + ox) / period, (y + oy) / period);
            let (iu, iv) = (u.floor(), v.floor());
            let (fu, fv) = (smooth(u - iu), smooth(v - iv));
            let (iu, iv) = (iu as i64, iv as i64);
            let l = |dx: i64, dy: i64| lattice(self.seed, o as u64, iu + dx, iv + dy);
            let top = l(0, 0) * (1.0 - fu) + l(1, 0) * fu;
            let bot = l(0, 1) * (1.0 - fu) + l(1, 1) * fu;
            sum += amp * (top * (1.0 - fv) + bot * fv);
            norm += amp;
        }
        (0.5 + (sum / norm - 0.5) * self.contrast).clamp(0.0, 1.0)
    }
}

/// Random homography about the image centre: rotation and perspective tilt up
/// to 15 degrees, scale in `[0.7, 1.4]`, translation up to `size / 8`.
pub fn random_homography(rng: &mut impl Rng, size: usize) -> Homography {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let max = 15f64.to_radians();
    let theta = rng.random_range(-max..max);
    let scale = rng.random_range(0.7f64.ln()..1.4f64.ln()).exp();
    let (px, py) = (rng.random_range(-max..max).tan() / s, rng.random_range(-max..max).tan() / s);
    let (tx, ty) = (rng.random_range(-s / 8.0..s / 8.0), rng.random_range(-s / 8.0..s / 8.0));
    let (co, si) = (theta.cos() * scale, theta.sin() * scale);
    let to_origin = nalgebra::Matrix3::new(1.0, 0.0, -c, 0.0, 1.0, -c, 0.0, 0.0, 1.0);
    let persp = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
    let rot = nalgebra::Matrix3::new(co, -si, 0.0, si, co, 0.0, 0.0, 0.0, 1.0);
    let back = nalgebra::Matrix3::new(1.0, 0.0, c + tx, 0.0, 1.0, c + ty, 0.0, 0.0, 1.0);
    Homography::new(back * rot * persp * to_origin).expect("sampled homography is well conditioned")
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    /// Maps pixel coordinates of `a` to pixel coordinates of `b`.
    pub h: Homography,
}

/// Same rounding as an 8-bit image load, so saved pairs reload bit-identically.
fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// One `size x size` pair. `b(p) = gain * texture(H^-1 p) + bias`, both
/// images quantized to 8 bits.
pub fn generate_pair(size: usize, seed: u64) -> SynthPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::new(rng.random());
    let h = random_homography(&mut rng, size);
    let hinv = h.inverse().expect("invertible");
    let gain = rng.random_range(0.8..1.2);
    let bias = rng.random_range(-0.1..0.1);
    let a = Tensor::from_fn([1, size, size], |i| quantize(tex.sample(i[2] as f64, i[1] as f64)));
    let b = Tensor::from_fn([1, size, size], |i| {
        let (x, y) = hinv.apply((i[2] as f64, i[1] as f64)).unwrap_or((f64::MAX, f64::MAX));
        let v = if x.abs() < 1e9 && y.abs() < 1e9 { tex.sample(x, y) } else { 0.0 };
        quantize(gain * v + bias)
    });
    SynthPair { a, b, h }
}

/// Seed of the `index`-th pair of a dataset.
pub fn pair_seed(base: u64, index: usize) -> u64 {
    splitmix(base ^ splitmix(index as u64 + 1))
}

pub fn generate_set(size: usize, count: usize, seed: u64) -> Vec<SynthPair> {
    (0..count).map(|i| generate_pair(size, pair_seed(seed, i))).collect()
}
