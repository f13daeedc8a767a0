//! Orthonormal type-II DCT and the patch texture score built on it.

use super::image::Image;
use super::patches::PatchGrid;
use crate::error::{arg_err, Result};

/// Orthonormal DCT-II basis, `basis[u * n + x]`.
fn basis(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for u in 0..n {
        let alpha = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for x in 0..n {
            c[u * n + x] =
                alpha * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

fn check_square(m: &[f64], n: usize) -> Result<()> {
    if n == 0 || m.len() != n * n {
        return arg_err(format!("expected a {n}x{n} matrix, got {} values", m.len()));
    }
    Ok(())
}

/// 2-D orthonormal DCT-II of a row-major `n × n` matrix.
pub fn dct2(m: &[f64], n: usize) -> Result<Vec<f64>> {
    check_square(m, n)?;
    let c = basis(n);
    // rows then columns: Y = C X C^T
    let mut tmp = vec![0.0; n * n];
    for u in 0..n {
        for x in 0..n {
            let cu = c[u * n + x];
            for y in 0..n {
                tmp[u * n + y] += cu * m[x * n + y];
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            out[u * n + v] = (0..n).map(|y| tmp[u * n + y] * c[v * n + y]).sum();
        }
    }
    Ok(out)
}

/// Inverse of [`dct2`].
pub fn idct2(coeffs: &[f64], n: usize) -> Result<Vec<f64>> {
    check_square(coeffs, n)?;
    let c = basis(n);
    let mut tmp = vec![0.0; n * n];
    for x in 0..n {
        for u in 0..n {
            let cu = c[u * n + x];
            for v in 0..n {
                tmp[x * n + v] += cu * coeffs[u * n + v];
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            out[x * n + y] = (0..n).map(|v| tmp[x * n + v] * c[v * n + y]).sum();
        }
    }
    Ok(out)
}

/// High-frequency DCT mass of a square patch: sum of `|coeff|` over the
/// band `u + v >= side / 4` of the grayscale transform.
pub fn dct_richness(patch: &Image) -> Result<f64> {
    let n = patch.height();
    if patch.width() != n {
        return arg_err("dct_richness expects a square patch");
    }
    let mut gray = patch.to_gray();
    // DC lies outside the band, so removing an offset changes nothing in it;
    // subtracting a sample makes flat patches score exactly zero.
    let offset = gray[0];
    for g in &mut gray {
        *g -= offset;
    }
    let coeffs = dct2(&gray, n)?;
    let mut score = 0.0;
    for u in 0..n {
        for v in 0..n {
            if 4 * (u + v) >= n {
                score += coeffs[u * n + v].abs();
            }
        }
    }
    Ok(score)
}

/// Patch with the largest [`dct_richness`]; ties go to the lowest index.
pub fn select_richest_patch(grid: &PatchGrid) -> Result<(usize, &Image, (usize, usize))> {
    if grid.is_empty() {
        return arg_err("cannot select from an empty patch grid");
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, p) in grid.patches.iter().enumerate() {
        let s = dct_richness(p)?;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok((best, &grid.patches[best], grid.positions[best]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::patches::partition_patches;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the DCT-II definition.
    fn dct_definition(m: &[f64], n: usize) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        let a = |u: usize| if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let mut s = 0.0;
                for x in 0..n {
                    for y in 0..n {
                        s += m[x * n + y]
                            * (pi * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos()
                            * (pi * (2 * y + 1) as f64 * v as f64 / (2 * n) as f64).cos();
                    }
                }
                out[u * n + v] = a(u) * a(v) * s;
            }
        }
        out
    }

    #[test]
    fn two_by_two_impulse() {
        let out = dct2(&[1.0, 0.0, 0.0, 0.0], 2).unwrap();
        for v in out {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_matrix_has_only_dc() {
        let n = 6;
        let out = dct2(&vec![0.7; n * n], n).unwrap();
        assert!((out[0] - 0.7 * n as f64).abs() < 1e-12);
        assert!(out[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn matches_definition_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 3, 8] {
            let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = dct2(&m, n).unwrap();
            for (a, b) in fast.iter().zip(dct_definition(&m, n)) {
                assert!((a - b).abs() < 1e-12);
            }
            let back = idct2(&fast, n).unwrap();
            for (a, b) in back.iter().zip(&m) {
                assert!((a - b).abs() < 1e-9);
            }
            let e_in: f64 = m.iter().map(|v| v * v).sum();
            let e_out: f64 = fast.iter().map(|v| v * v).sum();
            assert!((e_in - e_out).abs() <= 1e-9 * e_in.max(1e-300));
        }
    }

    #[test]
    fn richness_edge_cases() {
        let flat = Image::filled(32, 32, 0.4).unwrap();
        assert_eq!(dct_richness(&flat).unwrap(), 0.0);

        let checker = Image::from_fn(32, 32, |y, x| [((x + y) % 2) as f64; 3]).unwrap();
        let ramp = Image::from_fn(32, 32, |_, x| [x as f64 / 31.0; 3]).unwrap();
        assert!(dct_richness(&checker).unwrap() >= dct_richness(&ramp).unwrap());

        let base = Image::from_fn(32, 32, |y, x| {
            let v = 0.3 + 0.2 * ((x * 7 + y * 3) % 11) as f64 / 10.0;
            [v, v * 0.5, 0.2]
        })
        .unwrap();
        let shifted = Image::new(32, 32, base.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let (a, b) = (dct_richness(&base).unwrap(), dct_richness(&shifted).unwrap());
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn richest_patch_ties_and_unique_max() {
        let flat = Image::filled(64, 64, 0.5).unwrap();
        let grid = partition_patches(&flat, 32).unwrap();
        assert_eq!(select_richest_patch(&grid).unwrap().0, 0);

        let tex = Image::from_fn(64, 64, |y, x| {
            if y >= 32 && x < 32 {
                [((x + y) % 2) as f64; 3]
            } else {
                [0.5; 3]
            }
        })
        .unwrap();
        let grid = partition_patches(&tex, 32).unwrap();
        let (idx, _, pos) = select_richest_patch(&grid).unwrap();
        assert_eq!((idx, pos), (2, (1, 0)));
    }
}
