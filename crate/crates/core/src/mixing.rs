//! Dual-level mixing: feature-level convex combinations and input-level
//! point splicing, plus the lambda draws, masks, and batch pairing that
//! drive them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::linalg;

/// Binary point-ownership mask: `s[k] = true` takes point k from the first
/// source, `false` from the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    pub s: Vec<bool>,
    pub n_from_first: usize,
}

impl MixMask {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// The mask-defined mixing proportion, exactly n_from_first / N.
    pub fn realized_lambda(&self) -> f64 {
        self.n_from_first as f64 / self.s.len() as f64
    }
}

/// One mixing decision: batch indices of both sources, the coefficient,
/// and (for input-level mixing) the point mask.
#[derive(Debug, Clone)]
pub struct MixedPair {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    pub mask: Option<MixMask>,
}

/// One draw from Beta(beta, beta), nudged into the open interval (0, 1).
pub fn sample_lambda(beta: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::domain(format!("beta must be > 0, got {beta}")));
    }
    let dist = Beta::new(beta, beta)
        .map_err(|e| Error::domain(format!("invalid beta parameter: {e}")))?;
    let x: f64 = dist.sample(rng);
    Ok(x.clamp(1e-12, 1.0 - 1e-12))
}

/// A uniformly random derangement of [0, n): every index is paired with a
/// partner other than itself. Rejection-samples seeded Fisher-Yates shuffles.
pub fn make_pairing(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::domain(format!("pairing needs n >= 2, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// A mask with exactly floor(lambda * N) ones placed uniformly at random.
pub fn build_mask(n_points: usize, lambda: f64, rng: &mut ChaCha8Rng) -> Result<MixMask> {
    if n_points == 0 {
        return Err(Error::domain("mask length must be >= 1"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let ones = (lambda * n_points as f64).floor() as usize;
    let ones = ones.min(n_points);
    let mut indices: Vec<usize> = (0..n_points).collect();
    // partial Fisher-Yates: the first `ones` slots become the chosen set
    for k in 0..ones {
        let pick = rng.random_range(k..n_points);
        indices.swap(k, pick);
    }
    let mut s = vec![false; n_points];
    for &k in &indices[..ones] {
        s[k] = true;
    }
    Ok(MixMask { s, n_from_first: ones })
}

/// Point-level splice per the mask: point k comes from `p1` where the mask
/// is set, otherwise from `p2`. Sources must already share the mask length;
/// the result is not re-normalized.
#[derive(Debug, Clone)]
pub struct MixedCloud {
    pub points: Vec<[f64; 3]>,
    pub source_ids: (u64, u64),
    pub source_classes: (u16, u16),
}

pub fn input_mix(p1: &PointCloud, p2: &PointCloud, mask: &MixMask) -> Result<MixedCloud> {
    let n = mask.len();
    if p1.len() != n || p2.len() != n {
        return Err(Error::shape(
            format!("two clouds of {n} points"),
            format!("{} and {}", p1.len(), p2.len()),
        ));
    }
    let points = (0..n)
        .map(|k| if mask.s[k] { p1.points[k] } else { p2.points[k] })
        .collect();
    Ok(MixedCloud {
        points,
        source_ids: (p1.id, p2.id),
        source_classes: (p1.class_id, p2.class_id),
    })
}

/// Convex combination of two feature vectors; optionally rescaled to unit
/// L2 norm. A renormalized mix that lands exactly on the zero vector is an
/// error.
pub fn feature_mix(
    f_i: &[f64],
    f_j: &[f64],
    lambda: f64,
    renormalize: bool,
) -> Result<Vec<f64>> {
    if f_i.len() != f_j.len() {
        return Err(Error::shape(
            format!("{} dims", f_i.len()),
            format!("{} dims", f_j.len()),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let mixed: Vec<f64> = f_i
        .iter()
        .zip(f_j)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    if !mixed.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "feature mix".to_string(),
        });
    }
    if renormalize {
        linalg::normalize(&mixed)
    } else {
        Ok(mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn rng_for(seed: u64) -> ChaCha8Rng {
        rng::stream(seed, "mixing-test", &[])
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = rng_for(1);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_lambda(1.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
        assert!((0.080..=0.087).contains(&var), "var {var}");
    }

    #[test]
    fn small_beta_pushes_mass_to_edges() {
        let mut rng = rng_for(2);
        let n = 100_000;
        let central = |beta: f64, rng: &mut ChaCha8Rng| {
            (0..n)
                .filter(|_| {
                    let x = sample_lambda(beta, rng).unwrap();
                    (0.4..0.6).contains(&x)
                })
                .count() as f64
                / n as f64
        };
        let narrow = central(0.2, &mut rng);
        let wide = central(5.0, &mut rng);
        assert!(narrow < wide, "beta=0.2 central mass {narrow} vs beta=5 {wide}");
    }

    #[test]
    fn lambda_rejects_nonpositive_beta() {
        let mut rng = rng_for(3);
        assert!(sample_lambda(0.0, &mut rng).is_err());
        assert!(sample_lambda(-1.0, &mut rng).is_err());
    }

    #[test]
    fn pairing_n2_is_the_swap() {
        let mut rng = rng_for(4);
        for _ in 0..20 {
            assert_eq!(make_pairing(2, &mut rng).unwrap(), vec![1, 0]);
        }
    }

    #[test]
    fn pairing_rejects_small_n() {
        let mut rng = rng_for(5);
        assert!(make_pairing(1, &mut rng).is_err());
    }

    #[test]
    fn all_nine_derangements_of_s4_occur() {
        // enumeration oracle: the 9 fixed-point-free permutations of [0,4)
        let mut all = Vec::new();
        let mut perm = [0usize, 1, 2, 3];
        fn heap(k: usize, arr: &mut [usize; 4], acc: &mut Vec<[usize; 4]>) {
            if k == 1 {
                acc.push(*arr);
                return;
            }
            for i in 0..k {
                heap(k - 1, arr, acc);
                if k % 2 == 0 {
                    arr.swap(i, k - 1);
                } else {
                    arr.swap(0, k - 1);
                }
            }
        }
        heap(4, &mut perm, &mut all);
        let oracle: std::collections::HashSet<[usize; 4]> = all
            .into_iter()
            .filter(|p| p.iter().enumerate().all(|(i, &v)| i != v))
            .collect();
        assert_eq!(oracle.len(), 9);

        let mut seen = std::collections::HashSet::new();
        let mut rng = rng_for(6);
        for _ in 0..10_000 {
            let p = make_pairing(4, &mut rng).unwrap();
            seen.insert([p[0], p[1], p[2], p[3]]);
        }
        assert_eq!(seen, oracle);
    }

    #[test]
    fn mask_count_follows_floor_rule() {
        let mut rng = rng_for(7);
        let m = build_mask(1024, 0.3, &mut rng).unwrap();
        assert_eq!(m.n_from_first, 307);
        assert_eq!(m.s.iter().filter(|&&b| b).count(), 307);

        let all = build_mask(10, 1.0, &mut rng).unwrap();
        assert_eq!(all.n_from_first, 10);
        assert_eq!(all.realized_lambda(), 1.0);

        let none = build_mask(10, 0.05, &mut rng).unwrap();
        assert_eq!(none.n_from_first, 0);
        assert_eq!(none.realized_lambda(), 0.0);
    }

    #[test]
    fn mask_rejects_out_of_range_lambda() {
        let mut rng = rng_for(8);
        assert!(build_mask(10, -0.1, &mut rng).is_err());
        assert!(build_mask(10, 1.1, &mut rng).is_err());
    }

    fn cloud_of(id: u64, class: u16, pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(id, class, pts.to_vec()).unwrap()
    }

    #[test]
    fn input_mix_endpoints_and_metadata() {
        let p1 = cloud_of(1, 2, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
        let p2 = cloud_of(2, 5, &[[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, -1.0, 0.0]]);

        let ones = MixMask { s: vec![true; 4], n_from_first: 4 };
        let m = input_mix(&p1, &p2, &ones).unwrap();
        assert_eq!(m.points, p1.points);

        let zeros = MixMask { s: vec![false; 4], n_from_first: 0 };
        let m = input_mix(&p1, &p2, &zeros).unwrap();
        assert_eq!(m.points, p2.points);

        let mask = MixMask { s: vec![true, true, true, false], n_from_first: 3 };
        assert_eq!(mask.realized_lambda(), 0.75);
        let m = input_mix(&p1, &p2, &mask).unwrap();
        assert_eq!(&m.points[..3], &p1.points[..3]);
        assert_eq!(m.points[3], p2.points[3]);
        assert_eq!(m.source_classes, (2, 5));
        assert_eq!(m.source_ids, (1, 2));
    }

    #[test]
    fn input_mix_rejects_size_mismatch() {
        let p1 = cloud_of(1, 0, &[[0.0; 3], [1.0, 0.0, 0.0]]);
        let p2 = cloud_of(2, 0, &[[0.0; 3]]);
        let mask = MixMask { s: vec![true, false], n_from_first: 1 };
        assert!(input_mix(&p1, &p2, &mask).is_err());
    }

    #[test]
    fn feature_mix_examples() {
        let f = vec![0.6, 0.8];
        let g = vec![0.0, 1.0];
        assert_eq!(feature_mix(&f, &g, 1.0, false).unwrap(), f);
        assert_eq!(
            feature_mix(&[1.0, 0.0], &[0.0, 1.0], 0.5, false).unwrap(),
            vec![0.5, 0.5]
        );
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let mixed = feature_mix(&[1.0, 0.0], &[0.0, 1.0], 0.5, true).unwrap();
        assert!((mixed[0] - half).abs() < 1e-15);
        assert!((mixed[1] - half).abs() < 1e-15);
    }

    #[test]
    fn feature_mix_degenerate_zero_norm() {
        // lambda 0.5: mix of f and -f is exactly zero
        let f = vec![0.3, -0.4];
        let g = vec![-0.3, 0.4];
        assert!(matches!(
            feature_mix(&f, &g, 0.5, true),
            Err(Error::DegenerateMix)
        ));
        assert!(feature_mix(&[1.0], &[1.0, 2.0], 0.5, false).is_err());
    }

    proptest! {
        #[test]
        fn feature_mix_fixed_point(lambda in 0.0f64..=1.0) {
            let f = vec![0.1, -0.7, 0.3];
            let mixed = feature_mix(&f, &f, lambda, false).unwrap();
            for (a, b) in mixed.iter().zip(&f) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn mask_popcount_is_exact_floor(n in 1usize..=512, lambda in 0.0f64..=1.0, seed in 0u64..100) {
            let mut rng = rng_for(seed);
            let mask = build_mask(n, lambda, &mut rng).unwrap();
            let expect = (lambda * n as f64).floor() as usize;
            prop_assert_eq!(mask.n_from_first, expect.min(n));
            prop_assert_eq!(mask.s.iter().filter(|&&b| b).count(), mask.n_from_first);
            // realized lambda is the exact integer ratio
            prop_assert_eq!(mask.realized_lambda(), mask.n_from_first as f64 / n as f64);
        }

        #[test]
        fn pairing_is_derangement_permutation(n in 2usize..=40, seed in 0u64..100) {
            let mut rng = rng_for(seed);
            let p = make_pairing(n, &mut rng).unwrap();
            prop_assert!(p.iter().enumerate().all(|(i, &v)| i != v));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn mixed_points_bitwise_from_sources(seed in 0u64..200) {
            let mut rng = rng_for(seed);
            let n = rng.random_range(1..=64usize);
            let p1 = PointCloud::new(1, 0, (0..n).map(|_| [
                rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()
            ]).collect()).unwrap();
            let p2 = PointCloud::new(2, 1, (0..n).map(|_| [
                rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()
            ]).collect()).unwrap();
            let lambda = rng.random::<f64>();
            let mask = build_mask(n, lambda, &mut rng).unwrap();
            let mixed = input_mix(&p1, &p2, &mask).unwrap();
            let mut from_first = 0usize;
            for k in 0..n {
                if mask.s[k] {
                    prop_assert_eq!(mixed.points[k], p1.points[k]);
                    from_first += 1;
                } else {
                    prop_assert_eq!(mixed.points[k], p2.points[k]);
                }
            }
            prop_assert_eq!(from_first, mask.n_from_first);
        }
    }
}
