//! Fixed high-pass residual filters from the rich-model steganalysis family.

use super::image::Image;
use crate::tensor::Tensor;

/// A small correlation kernel with its quantization constant.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    pub id: &'static str,
    pub rows: usize,
    pub cols: usize,
    /// Anchor (row, col) within the kernel.
    pub anchor: (usize, usize),
    pub weights: &'static [f64],
    pub q: f64,
}

pub const FIRST_ORDER_H: Kernel = Kernel {
    id: "first_order_h",
    rows: 1,
    cols: 2,
    anchor: (0, 0),
    weights: &[-1.0, 1.0],
    q: 1.0,
};

pub const SECOND_ORDER_H: Kernel = Kernel {
    id: "second_order_h",
    rows: 1,
    cols: 3,
    anchor: (0, 1),
    weights: &[1.0, -2.0, 1.0],
    q: 2.0,
};

pub const SECOND_ORDER_V: Kernel = Kernel {
    id: "second_order_v",
    rows: 3,
    cols: 1,
    anchor: (1, 0),
    weights: &[1.0, -2.0, 1.0],
    q: 2.0,
};

pub const KB: Kernel = Kernel {
    id: "kb",
    rows: 3,
    cols: 3,
    anchor: (1, 1),
    weights: &[-1.0, 2.0, -1.0, 2.0, -4.0, 2.0, -1.0, 2.0, -1.0],
    q: 4.0,
};

pub const DEFAULT_KERNELS: [Kernel; 4] = [FIRST_ORDER_H, SECOND_ORDER_H, SECOND_ORDER_V, KB];

/// Residual planes `[3 * K, H, W]`, channel-major: plane `c * K + k` holds
/// kernel `k` applied to channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    pub planes: Tensor,
    pub filter_ids: Vec<&'static str>,
}

impl ResidualStack {
    pub fn kernel_count(&self) -> usize {
        self.filter_ids.len()
    }

    pub fn plane(&self, idx: usize) -> &[f64] {
        let s = self.planes.shape();
        let hw = s[1] * s[2];
        &self.planes.data()[idx * hw..(idx + 1) * hw]
    }
}

/// Correlates one `h × w` plane with `k`, divided by `k.q`. The output keeps
/// the input size; positions where the kernel support leaves the plane are 0.
pub fn filter_plane(plane: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let (ay, ax) = k.anchor;
    if h < k.rows || w < k.cols {
        return out;
    }
    for y in ay..h - (k.rows - 1 - ay) {
        for x in ax..w - (k.cols - 1 - ax) {
            let mut acc = 0.0;
            for i in 0..k.rows {
                let row = &plane[(y + i - ay) * w..];
                for j in 0..k.cols {
                    acc += k.weights[i * k.cols + j] * row[x + j - ax];
                }
            }
            out[y * w + x] = acc / k.q;
        }
    }
    out
}

pub fn highpass_residual_with(patch: &Image, kernels: &[Kernel]) -> ResidualStack {
    let (h, w) = (patch.height(), patch.width());
    let mut data = Vec::with_capacity(3 * kernels.len() * h * w);
    for c in 0..3 {
        let plane: Vec<f64> = patch.data().iter().skip(c).step_by(3).copied().collect();
        for k in kernels {
            data.extend(filter_plane(&plane, h, w, k));
        }
    }
    ResidualStack {
        planes: Tensor::new(vec![3 * kernels.len(), h, w], data).expect("plane count matches"),
        filter_ids: kernels.iter().map(|k| k.id).collect(),
    }
}

pub fn highpass_residual(patch: &Image) -> ResidualStack {
    highpass_residual_with(patch, &DEFAULT_KERNELS)
}

/// Mean absolute residual over all planes.
pub fn residual_energy(stack: &ResidualStack) -> f64 {
    let d = stack.planes.data();
    d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_patch_has_zero_residual() {
        let img = Image::filled(8, 8, 0.6).unwrap();
        let r = highpass_residual(&img);
        assert_eq!(r.planes.shape(), &[12, 8, 8]);
        assert_eq!(r.kernel_count(), 4);
        assert!(r.planes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_difference_of_ramp_vanishes() {
        let img = Image::from_fn(6, 10, |_, x| [x as f64 / 9.0; 3]).unwrap();
        let r = highpass_residual(&img);
        let plane = r.plane(1); // channel 0, second_order_h
        for y in 0..6 {
            for x in 1..9 {
                assert!(plane[y * 10 + x].abs() < 1e-15);
            }
        }
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let (h, w) = (7, 7);
        let mut plane = vec![0.0; h * w];
        plane[3 * w + 3] = 1.0;
        for k in DEFAULT_KERNELS {
            let out = filter_plane(&plane, h, w, &k);
            for y in 0..h {
                for x in 0..w {
                    // out(p - (i - anchor)) = k(i) / q
                    let i = 3 + k.anchor.0 as isize - y as isize;
                    let j = 3 + k.anchor.1 as isize - x as isize;
                    let want = if (0..k.rows as isize).contains(&i) && (0..k.cols as isize).contains(&j) {
                        k.weights[i as usize * k.cols + j as usize] / k.q
                    } else {
                        0.0
                    };
                    assert_eq!(out[y * w + x], want, "kernel {} at ({y},{x})", k.id);
                }
            }
        }
    }

    #[test]
    fn residual_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng| {
            Image::new(9, 9, (0..243).map(|_| rng.gen_range(0.0..0.4)).collect()).unwrap()
        };
        let (x, y) = (mk(&mut rng), mk(&mut rng));
        let (a, b) = (0.7, 1.3);
        let mix = Image::new(9, 9, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (rx, ry, rm) = (highpass_residual(&x), highpass_residual(&y), highpass_residual(&mix));
        for ((m, p), q) in rm.planes.data().iter().zip(rx.planes.data()).zip(ry.planes.data()) {
            assert!((m - (a * p + b * q)).abs() < 1e-9);
        }
    }
}
