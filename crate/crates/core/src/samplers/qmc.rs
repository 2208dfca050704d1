//! Sobol points in Gray-code order with an optional random digital shift.

use rand::Rng;

use crate::rng;
use crate::searchspace::{ParamAssignment, SearchSpace};

const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4294967296.0;

/// Primitive-polynomial degree `s`, coefficients `a` and initial direction
/// numbers `m` for dimensions 1..64 (Joe and Kuo, new-joe-kuo-6.21201).
/// Dimension 0 is the van der Corput sequence.
#[rustfmt::skip]
const DIRECTION_NUMBERS: [(u32, u32, &[u32]); 63] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
    (7, 7, &[1, 1, 3, 13, 7, 35, 63]),
    (7, 8, &[1, 3, 5, 9, 1, 25, 53]),
    (7, 14, &[1, 3, 1, 13, 9, 35, 107]),
    (7, 19, &[1, 3, 1, 5, 27, 61, 31]),
    (7, 21, &[1, 1, 5, 11, 19, 41, 61]),
    (7, 28, &[1, 3, 5, 3, 3, 13, 69]),
    (7, 31, &[1, 1, 7, 13, 1, 19, 1]),
    (7, 32, &[1, 3, 7, 5, 13, 19, 59]),
    (7, 37, &[1, 1, 3, 9, 25, 29, 41]),
    (7, 41, &[1, 3, 5, 13, 23, 1, 55]),
    (7, 42, &[1, 3, 7, 3, 13, 59, 17]),
    (7, 50, &[1, 3, 1, 3, 5, 53, 69]),
    (7, 55, &[1, 1, 5, 5, 23, 33, 13]),
    (7, 56, &[1, 1, 7, 7, 1, 61, 123]),
    (7, 59, &[1, 1, 7, 9, 13, 61, 49]),
    (7, 62, &[1, 3, 3, 5, 3, 55, 33]),
    (8, 14, &[1, 3, 1, 15, 31, 13, 49, 245]),
    (8, 21, &[1, 3, 5, 15, 31, 59, 63, 97]),
    (8, 22, &[1, 3, 1, 11, 11, 11, 77, 249]),
    (8, 38, &[1, 3, 1, 11, 27, 43, 71, 9]),
    (8, 47, &[1, 1, 7, 15, 21, 11, 81, 45]),
    (8, 49, &[1, 3, 7, 3, 25, 31, 65, 79]),
    (8, 50, &[1, 3, 1, 1, 19, 11, 3, 205]),
    (8, 52, &[1, 1, 5, 9, 19, 21, 29, 157]),
    (8, 56, &[1, 3, 7, 11, 1, 33, 89, 185]),
    (8, 67, &[1, 3, 3, 3, 15, 9, 79, 71]),
    (8, 70, &[1, 3, 7, 11, 15, 39, 119, 27]),
    (8, 84, &[1, 1, 3, 1, 11, 31, 97, 225]),
    (8, 97, &[1, 1, 1, 3, 23, 43, 57, 177]),
    (8, 103, &[1, 3, 7, 7, 17, 17, 37, 71]),
    (8, 115, &[1, 3, 1, 5, 27, 63, 123, 213]),
    (8, 122, &[1, 1, 3, 5, 11, 43, 53, 133]),
    (9, 8, &[1, 3, 5, 5, 29, 17, 47, 173, 479]),
    (9, 13, &[1, 3, 3, 11, 3, 1, 109, 9, 69]),
    (9, 16, &[1, 1, 1, 5, 17, 39, 23, 5, 343]),
    (9, 22, &[1, 3, 1, 5, 25, 15, 31, 103, 499]),
    (9, 25, &[1, 1, 1, 11, 11, 17, 63, 105, 183]),
    (9, 44, &[1, 1, 5, 11, 9, 29, 97, 231, 363]),
    (9, 47, &[1, 1, 5, 15, 19, 45, 41, 7, 383]),
    (9, 52, &[1, 3, 7, 7, 31, 19, 83, 137, 221]),
    (9, 55, &[1, 1, 1, 3, 23, 15, 111, 223, 83]),
    (9, 59, &[1, 1, 5, 13, 31, 15, 55, 25, 161]),
    (9, 62, &[1, 1, 3, 13, 25, 47, 39, 87, 257]),
];

/// Number of dimensions with their own direction numbers.
pub const MAX_DIM: usize = DIRECTION_NUMBERS.len() + 1;

fn direction_vectors(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, x) in v.iter_mut().enumerate() {
            *x = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = DIRECTION_NUMBERS[dim - 1];
    let s = s as usize;
    for k in 0..s.min(BITS) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for j in 1..s {
            if (a >> (s - 1 - j)) & 1 == 1 {
                x ^= v[k - j];
            }
        }
        v[k] = x;
    }
    v
}

/// Point `index` of the `dims`-dimensional Sobol sequence. With a scramble
/// seed, every coordinate is XOR-shifted by a seeded random 32-bit digit
/// string, which keeps the dyadic-box structure. Dimensions past
/// [`MAX_DIM`] reuse earlier direction numbers and rely on the shift to
/// decorrelate, so they need a scramble seed to be useful.
pub fn sobol_point(index: u64, dims: usize, scramble_seed: Option<u64>) -> Vec<f64> {
    let gray = index ^ (index >> 1);
    let mut shifts = scramble_seed.map(|s| rng::stream(&[s, 0x50b0]));
    (0..dims)
        .map(|d| {
            let v = direction_vectors(d % MAX_DIM);
            let mut x = 0u32;
            for (k, vk) in v.iter().enumerate() {
                if (gray >> k) & 1 == 1 {
                    x ^= vk;
                }
            }
            if let Some(r) = shifts.as_mut() {
                x ^= r.random::<u32>();
            }
            x as f64 * SCALE
        })
        .collect()
}

/// The `counter`-th Sobol point mapped into the space.
pub fn qmc_suggest(
    counter: u64,
    space: &SearchSpace,
    scramble_seed: Option<u64>,
) -> ParamAssignment {
    let u = sobol_point(counter, space.len(), scramble_seed);
    space.from_unit(&u).expect("sobol points lie in [0, 1)")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_points_match_reference_sequence() {
        // unscrambled values from scipy.stats.qmc.Sobol(d=4, scramble=False)
        let expected = [
            [0.0, 0.0, 0.0, 0.0],
            [0.5, 0.5, 0.5, 0.5],
            [0.75, 0.25, 0.25, 0.25],
            [0.25, 0.75, 0.75, 0.75],
            [0.375, 0.375, 0.625, 0.875],
        ];
        for (i, row) in expected.iter().enumerate() {
            assert_eq!(sobol_point(i as u64, 4, None), row.to_vec());
        }
    }

    #[test]
    fn high_dimensions_match_reference_sequence() {
        let p = sobol_point(1023, 64, None);
        assert_eq!(
            &p[60..64],
            &[0.1025390625, 0.1962890625, 0.7900390625, 0.0400390625]
        );
        let p = sobol_point(777, 34, None);
        assert_eq!(
            &p[30..34],
            &[0.5419921875, 0.8994140625, 0.1123046875, 0.0029296875]
        );
    }

    #[test]
    fn every_dyadic_box_holds_one_point() {
        for seed in [None, Some(7)] {
            let mut counts = [[0u32; 16]; 16];
            for i in 0..256 {
                let p = sobol_point(i, 2, seed);
                counts[(p[0] * 16.0) as usize][(p[1] * 16.0) as usize] += 1;
            }
            assert!(counts.iter().flatten().all(|&c| c == 1));
        }
    }

    /// Warnock's closed form for the L2-star discrepancy.
    fn l2_star_discrepancy(points: &[Vec<f64>]) -> f64 {
        let n = points.len() as f64;
        let d = points[0].len() as i32;
        let mut single = 0.0;
        for p in points {
            single += p.iter().map(|x| 1.0 - x * x).product::<f64>();
        }
        let mut pair = 0.0;
        for p in points {
            for q in points {
                pair += p
                    .iter()
                    .zip(q)
                    .map(|(a, b)| 1.0 - a.max(*b))
                    .product::<f64>();
            }
        }
        (3f64.powi(-d) - 2f64.powi(1 - d) / n * single + pair / (n * n)).sqrt()
    }

    #[test]
    fn discrepancy_beats_random_sampling() {
        let n = 1024;
        for d in 1..=4 {
            let sobol: Vec<Vec<f64>> = (0..n).map(|i| sobol_point(i, d, Some(3))).collect();
            let qmc = l2_star_discrepancy(&sobol);
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
            let mut mc = 0.0;
            for _ in 0..5 {
                let pts: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
                    .collect();
                mc += l2_star_discrepancy(&pts) / 5.0;
            }
            assert!(qmc < 0.5 * mc, "d={d}: {qmc} vs {mc}");
        }
    }

    #[test]
    fn scrambled_points_are_deterministic() {
        assert_eq!(sobol_point(12, 12, Some(9)), sobol_point(12, 12, Some(9)));
        assert_ne!(sobol_point(12, 12, Some(9)), sobol_point(12, 12, Some(10)));
        let p = sobol_point(5, 100, Some(1));
        assert!(p.iter().all(|x| (0.0..1.0).contains(x)));
    }
}
