//! Euclidean transforms, transform-invariant velocity descriptors and DCT
//! matrices.
//!
//! Coordinates are row vectors: a transform maps `v` to `v R + t`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Velocities with a norm below this have no defined direction.
pub const MIN_VELOCITY_NORM: f64 = 1e-12;

/// Orthogonal map plus translation, acting on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EuclideanTransform {
    rotation: Tensor,
    translation: Vec<f64>,
    is_reflection: bool,
}

impl EuclideanTransform {
    pub fn identity(n: usize) -> Self {
        EuclideanTransform {
            rotation: Tensor::eye(n),
            translation: vec![0.0; n],
            is_reflection: false,
        }
    }

    /// Build from an explicit orthogonal matrix; the reflection flag is read
    /// off the determinant.
    pub fn new(rotation: Tensor, translation: Vec<f64>) -> Result<Self> {
        let (r, c) = rotation.as_matrix()?;
        if r != c || translation.len() != r {
            return Err(Error::dim(format!(
                "transform needs an n x n rotation and n-vector, got {:?} and {}",
                rotation.shape(),
                translation.len()
            )));
        }
        let rrt = rotation.matmul(&rotation.transpose()?)?;
        if rrt.max_abs_diff(&Tensor::eye(r)) > 1e-9 {
            return Err(Error::param("rotation matrix is not orthogonal"));
        }
        let is_reflection = determinant(&rotation) < 0.0;
        Ok(EuclideanTransform {
            rotation,
            translation,
            is_reflection,
        })
    }

    /// Random rotation from an orthonormalised Gaussian matrix, translation
    /// uniform in `[-5, 5]^n`. With `include_reflection`, the result is a
    /// reflection with probability 1/2.
    pub fn random(n: usize, include_reflection: bool, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("transform dimension must be >= 1"));
        }
        let mut rows = loop {
            let mut rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            if orthonormalize(&mut rows) {
                break rows;
            }
        };
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let det = determinant(&Tensor::new(vec![n, n], data)?);
        let reflect = include_reflection && rng.random_bool(0.5);
        if (det < 0.0) != reflect {
            for v in &mut rows[0] {
                *v = -*v;
            }
        }
        let translation = (0..n).map(|_| rng.random_range(-5.0..=5.0)).collect();
        Ok(EuclideanTransform {
            rotation: Tensor::new(vec![n, n], rows.concat())?,
            translation,
            is_reflection: reflect,
        })
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn rotation(&self) -> &Tensor {
        &self.rotation
    }

    pub fn translation(&self) -> &[f64] {
        &self.translation
    }

    pub fn is_reflection(&self) -> bool {
        self.is_reflection
    }

    /// Map every trailing `n`-vector of `x` to `v R + t`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.apply_linear(x)?;
        let n = self.dim();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, t) in row.iter_mut().zip(&self.translation) {
                *o += t;
            }
        }
        Ok(out)
    }

    /// `v R` without the translation (for displacements and velocities).
    pub fn apply_linear(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        if x.trailing() != n || x.rank() == 0 {
            return Err(Error::dim(format!(
                "transform of dimension {n} applied to shape {:?}",
                x.shape()
            )));
        }
        let r = self.rotation.data();
        let mut out = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks_exact(n).zip(out.data_mut().chunks_exact_mut(n)) {
            for (k, &v) in src.iter().enumerate() {
                for (d, &rkj) in dst.iter_mut().zip(&r[k * n..(k + 1) * n]) {
                    *d += v * rkj;
                }
            }
        }
        Ok(out)
    }

    /// The transform that applies `self` first and `next` second.
    pub fn then(&self, next: &EuclideanTransform) -> Result<EuclideanTransform> {
        let rotation = self.rotation.matmul(&next.rotation)?;
        let t = Tensor::new(vec![1, self.dim()], self.translation.clone())?;
        let translation = next.apply(&t)?.into_data();
        Ok(EuclideanTransform {
            rotation,
            translation,
            is_reflection: self.is_reflection != next.is_reflection,
        })
    }
}

/// Modified Gram-Schmidt on rows; false if the rows are (near) dependent.
fn orthonormalize(rows: &mut [Vec<f64>]) -> bool {
    for i in 0..rows.len() {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= dot * b;
            }
        }
        let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return false;
        }
        rows[i].iter_mut().for_each(|a| *a /= norm);
    }
    true
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    let mut a = m.data().to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .unwrap_or(col);
        if a[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    det
}

/// Per-step velocity descriptors of one trajectory that do not change under
/// Euclidean transforms of the trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityProfile {
    /// `[T, n]`; row 0 is zero, row `t` is `x[t] - x[t-1]`.
    pub velocities: Tensor,
    pub magnitudes: Vec<f64>,
    /// Cosine between consecutive velocities; 0 where either is ~zero and at `t = 0`.
    pub turn_cosines: Vec<f64>,
}

/// Velocity magnitudes and turn cosines of a `[T, n]` trajectory.
pub fn velocity_profile(x: &Tensor) -> Result<VelocityProfile> {
    let (t_len, n) = x.as_matrix()?;
    if t_len < 2 {
        return Err(Error::param(format!(
            "velocity profile needs at least 2 timestamps, got {t_len}"
        )));
    }
    let d = x.data();
    let mut vel = vec![0.0; t_len * n];
    for t in 1..t_len {
        for k in 0..n {
            vel[t * n + k] = d[t * n + k] - d[(t - 1) * n + k];
        }
    }
    let magnitudes: Vec<f64> = vel
        .chunks_exact(n)
        .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt())
        .collect();
    let mut turn_cosines = vec![0.0; t_len];
    for t in 1..t_len {
        let (a, b) = (magnitudes[t], magnitudes[t - 1]);
        if a < MIN_VELOCITY_NORM || b < MIN_VELOCITY_NORM {
            continue;
        }
        let dot: f64 = vel[t * n..(t + 1) * n]
            .iter()
            .zip(&vel[(t - 1) * n..t * n])
            .map(|(p, q)| p * q)
            .sum();
        turn_cosines[t] = (dot / (a * b)).clamp(-1.0, 1.0);
    }
    Ok(VelocityProfile {
        velocities: Tensor::new(vec![t_len, n], vel)?,
        magnitudes,
        turn_cosines,
    })
}

/// Orthonormal DCT-II matrix and its inverse (the transpose).
#[derive(Clone, Debug, PartialEq)]
pub struct DctPair {
    pub forward: Tensor,
    pub inverse: Tensor,
}

pub fn dct_pair(t_len: usize) -> Result<DctPair> {
    if t_len == 0 {
        return Err(Error::param("DCT size must be >= 1"));
    }
    let tf = t_len as f64;
    let forward = Tensor::from_fn(&[t_len, t_len], |idx| {
        let (k, t) = ((idx / t_len) as f64, (idx % t_len) as f64);
        let alpha = if k == 0.0 { (1.0 / tf).sqrt() } else { (2.0 / tf).sqrt() };
        alpha * (std::f64::consts::PI * (2.0 * t + 1.0) * k / (2.0 * tf)).cos()
    });
    let inverse = forward.transpose()?;
    Ok(DctPair { forward, inverse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn random_transform_is_orthogonal_with_matching_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=4 {
            for _ in 0..50 {
                let tr = EuclideanTransform::random(n, true, &mut rng).unwrap();
                let r = tr.rotation();
                let rrt = r.matmul(&r.transpose().unwrap()).unwrap();
                assert!(rrt.max_abs_diff(&Tensor::eye(n)) <= 1e-12);
                let det = determinant(r);
                assert!((det.abs() - 1.0).abs() <= 1e-12);
                assert_eq!(det < 0.0, tr.is_reflection());
                assert!(tr.translation().iter().all(|t| (-5.0..=5.0).contains(t)));
            }
        }
    }

    #[test]
    fn no_reflections_unless_requested() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let tr = EuclideanTransform::random(3, false, &mut rng).unwrap();
            assert!(!tr.is_reflection());
            assert!(determinant(tr.rotation()) > 0.0);
        }
    }

    #[test]
    fn random_transform_is_deterministic_and_rejects_zero_dim() {
        let a = EuclideanTransform::random(3, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = EuclideanTransform::random(3, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(EuclideanTransform::random(0, true, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn translation_mean_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 10_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            sum += EuclideanTransform::random(2, true, &mut rng).unwrap().translation()[0];
        }
        assert!((sum / draws as f64).abs() < 0.1);
    }

    #[test]
    fn apply_examples() {
        let x = Tensor::from_fn(&[2, 3, 2], |k| k as f64 * 0.5 - 1.0);
        assert_eq!(EuclideanTransform::identity(2).apply(&x).unwrap(), x);

        let shift = EuclideanTransform::new(Tensor::eye(2), vec![1.0, 1.0]).unwrap();
        let p = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(shift.apply(&p).unwrap().data(), &[1.0, 1.0]);

        let rot = EuclideanTransform::new(Tensor::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]), vec![0.0, 0.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(rot.apply(&v).unwrap().data(), &[0.0, 1.0]);

        assert!(rot.apply(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn velocity_profile_examples() {
        let still = Tensor::full(&[5, 3], 2.0);
        let p = velocity_profile(&still).unwrap();
        assert!(p.magnitudes.iter().all(|&m| m == 0.0));
        assert!(p.turn_cosines.iter().all(|&c| c == 0.0));

        let s = 0.75;
        let line = Tensor::from_fn(&[6, 2], |k| if k % 2 == 0 { s * (k / 2) as f64 } else { 1.0 });
        let p = velocity_profile(&line).unwrap();
        assert_eq!(p.magnitudes[0], 0.0);
        assert!(p.magnitudes[1..].iter().all(|&m| (m - s).abs() < 1e-15));
        assert!(p.turn_cosines[2..].iter().all(|&c| (c - 1.0).abs() < 1e-15));

        // east, east, then north: a right-angle turn at t = 3
        let turn = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0], &[2.0, 1.0]]);
        let p = velocity_profile(&turn).unwrap();
        assert_eq!(p.turn_cosines, vec![0.0, 0.0, 1.0, 0.0]);

        assert!(velocity_profile(&Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn dct_examples() {
        for t in [1, 2, 5, 20] {
            let d = dct_pair(t).unwrap();
            let prod = d.inverse.matmul(&d.forward).unwrap();
            assert!(prod.max_abs_diff(&Tensor::eye(t)) <= 1e-10);
        }
        assert_eq!(dct_pair(1).unwrap().forward.data(), &[1.0]);

        let t = 8;
        let ones = Tensor::full(&[t, 1], 1.0);
        let coeffs = dct_pair(t).unwrap().forward.matmul(&ones).unwrap();
        assert!((coeffs.data()[0] - (t as f64).sqrt()).abs() < 1e-12);
        assert!(coeffs.data()[1..].iter().all(|c| c.abs() < 1e-12));
        assert!(dct_pair(0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn velocity_descriptors_are_invariant(seed in any::<u64>(), n in 2usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&[7, n], &mut rng);
            let tr = EuclideanTransform::random(n, true, &mut rng).unwrap();
            let a = velocity_profile(&x).unwrap();
            let b = velocity_profile(&tr.apply(&x).unwrap()).unwrap();
            for (p, q) in a.magnitudes.iter().zip(&b.magnitudes) {
                prop_assert!((p - q).abs() <= 1e-10);
            }
            for (p, q) in a.turn_cosines.iter().zip(&b.turn_cosines) {
                prop_assert!((p - q).abs() <= 1e-10);
            }
        }

        #[test]
        fn transforms_compose(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&[4, 5, 3], &mut rng);
            let t1 = EuclideanTransform::random(3, true, &mut rng).unwrap();
            let t2 = EuclideanTransform::random(3, true, &mut rng).unwrap();
            let twice = t2.apply(&t1.apply(&x).unwrap()).unwrap();
            let once = t1.then(&t2).unwrap().apply(&x).unwrap();
            prop_assert!(twice.max_abs_diff(&once) <= 1e-10);
        }

        #[test]
        fn dct_commutes_with_rotation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&[10, 3], &mut rng);
            let tr = EuclideanTransform::random(3, true, &mut rng).unwrap();
            let w = dct_pair(10).unwrap().forward;
            let lhs = w.matmul(&tr.apply_linear(&x).unwrap()).unwrap();
            let rhs = tr.apply_linear(&w.matmul(&x).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }

        #[test]
        fn column_distance_is_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&[6, 3], &mut rng);
            let b = random_tensor(&[6, 3], &mut rng);
            let tr = EuclideanTransform::random(3, true, &mut rng).unwrap();
            let d0 = crate::numerics::column_l2_distance(&a, &b).unwrap();
            let d1 = crate::numerics::column_l2_distance(&tr.apply(&a).unwrap(), &tr.apply(&b).unwrap()).unwrap();
            prop_assert!(d0.max_abs_diff(&d1) <= 1e-12);
        }
    }
}
