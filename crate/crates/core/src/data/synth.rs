use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Family;
use crate::error::{arg_err, Result};
use crate::imaging::Image;

/// Strengths of the procedural generator traces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtifactConfig {
    /// Period-2 checkerboard amplitude (fakeA).
    pub checker_amp: f64,
    /// Diagonal sinusoid amplitude (fakeB).
    pub sine_amp: f64,
    /// Sinusoid frequency in cycles per pixel along `x + y`.
    pub sine_freq: f64,
    /// Quantization step of the 8×8 block means (fakeB).
    pub block_step: f64,
    pub block: usize,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        Self {
            checker_amp: 0.03,
            sine_amp: 0.03,
            sine_freq: 0.25,
            block_step: 0.02,
            block: 8,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator of sample `index` of `family` under `seed`.
pub fn sample_rng(seed: u64, family: Family, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ splitmix((family.code() << 32) ^ index))
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 {
        return arg_err(format!("synthetic images need size >= 16, got {size}"));
    }
    Ok(())
}

/// Value noise: octave `k` is a random `(2^{k+1} + 1)²` lattice per channel,
/// bilinearly upsampled and weighted `0.5^k`; 3–6 octaves, then min–max
/// normalized over the whole image.
pub fn gen_real<R: Rng>(rng: &mut R, size: usize) -> Result<Image> {
    check_size(size)?;
    let octaves = rng.gen_range(3..=6);
    let mut acc = vec![0.0; size * size * 3];
    for k in 0..octaves {
        let cells = 1usize << (k + 1);
        let amp = 0.5f64.powi(k);
        let n = cells + 1;
        let lattice: Vec<f64> = (0..n * n * 3).map(|_| rng.gen::<f64>()).collect();
        let scale = cells as f64 / (size - 1) as f64;
        for y in 0..size {
            let fy = y as f64 * scale;
            let y0 = (fy.floor() as usize).min(cells - 1);
            let ty = fy - y0 as f64;
            for x in 0..size {
                let fx = x as f64 * scale;
                let x0 = (fx.floor() as usize).min(cells - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| lattice[(yy * n + xx) * 3 + c];
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                    let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                    acc[(y * size + x) * 3 + c] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut acc {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
    }
    Image::new(size, size, acc)
}

/// A real-family base image plus a family-specific trace, clipped to [0, 1].
///
/// fakeA adds `±checker_amp` in a period-2 checkerboard. fakeB adds a
/// diagonal sinusoid with a random phase and shifts every 8×8 block of each
/// channel so its mean lands on a multiple of `block_step`.
pub fn gen_fake<R: Rng>(rng: &mut R, family: Family, size: usize, art: &ArtifactConfig) -> Result<Image> {
    let base = gen_real(rng, size)?;
    let mut data = base.data().to_vec();
    match family {
        Family::FakeA => {
            for y in 0..size {
                for x in 0..size {
                    let s = if (x + y) % 2 == 0 { art.checker_amp } else { -art.checker_amp };
                    for c in 0..3 {
                        data[(y * size + x) * 3 + c] += s;
                    }
                }
            }
        }
        Family::FakeB => {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for y in 0..size {
                for x in 0..size {
                    let s = art.sine_amp * (std::f64::consts::TAU * art.sine_freq * (x + y) as f64 + phase).sin();
                    for c in 0..3 {
                        data[(y * size + x) * 3 + c] += s;
                    }
                }
            }
            if art.block_step > 0.0 && art.block > 0 {
                quantize_block_means(&mut data, size, art.block, art.block_step);
            }
        }
        other => return arg_err(format!("`{other}` is not a synthetic fake family")),
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(size, size, data)
}

fn quantize_block_means(data: &mut [f64], size: usize, block: usize, step: f64) {
    for by in (0..size).step_by(block) {
        for bx in (0..size).step_by(block) {
            let (ye, xe) = ((by + block).min(size), (bx + block).min(size));
            for c in 0..3 {
                let mut sum = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        sum += data[(y * size + x) * 3 + c];
                    }
                }
                let mean = sum / ((ye - by) * (xe - bx)) as f64;
                let shift = (mean / step).round() * step - mean;
                for y in by..ye {
                    for x in bx..xe {
                        data[(y * size + x) * 3 + c] += shift;
                    }
                }
            }
        }
    }
}
