use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Per-feature running mean and variance, merged batch-wise with the pooled
/// moments formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub mean: DVector<f64>,
    /// Population variance.
    pub var: DVector<f64>,
    pub count: f64,
    pub floor: f64,
    /// Normalized values are clipped to `[-clip, clip]` when set.
    pub clip: Option<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            var: DVector::from_element(dim, 1.0),
            count: 0.0,
            floor: 1e-8,
            clip: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merges a batch (features × samples).
    pub fn update(&mut self, batch: &DMatrix<f64>) {
        let n = batch.ncols() as f64;
        if n == 0.0 {
            return;
        }
        assert_eq!(batch.nrows(), self.dim(), "normalizer width");
        let bmean = batch.column_mean();
        let mut bvar = DVector::zeros(self.dim());
        for c in batch.column_iter() {
            let d = c - &bmean;
            bvar += d.component_mul(&d);
        }
        bvar /= n;
        if self.count == 0.0 {
            self.mean = bmean;
            self.var = bvar;
            self.count = n;
            return;
        }
        let total = self.count + n;
        let delta = &bmean - &self.mean;
        let m2 = &self.var * self.count + bvar * n + delta.component_mul(&delta) * (self.count * n / total);
        self.mean += delta * (n / total);
        self.var = m2 / total;
        self.count = total;
    }

    pub fn std(&self) -> DVector<f64> {
        self.var.map(|v| v.max(self.floor).sqrt())
    }

    pub fn normalize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.std();
        let mut out = x.clone();
        for mut c in out.column_iter_mut() {
            for i in 0..c.len() {
                let mut v = (c[i] - self.mean[i]) / s[i];
                if let Some(k) = self.clip {
                    v = v.clamp(-k, k);
                }
                c[i] = v;
            }
        }
        out
    }

    pub fn denormalize(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.std();
        let mut out = z.clone();
        for mut c in out.column_iter_mut() {
            for i in 0..c.len() {
                c[i] = c[i] * s[i] + self.mean[i];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn batch(rng: &mut impl Rng, n: usize, shift: f64) -> DMatrix<f64> {
        DMatrix::from_fn(3, n, |i, _| shift + i as f64 + rng.random_range(-2.0..2.0))
    }

    #[test]
    fn two_batches_equal_concatenation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = batch(&mut rng, 40, 0.0);
        let b = batch(&mut rng, 25, 5.0);
        let mut s = RunningNorm::new(3);
        s.update(&a);
        s.update(&b);
        let mut joined = DMatrix::zeros(3, 65);
        joined.columns_mut(0, 40).copy_from(&a);
        joined.columns_mut(40, 25).copy_from(&b);
        let mut t = RunningNorm::new(3);
        t.update(&joined);
        assert!((s.mean - t.mean).amax() < 1e-12);
        assert!((s.var - t.var).amax() < 1e-12);
        assert_eq!(s.count, 65.0);
    }

    #[test]
    fn constant_stream_hits_floor() {
        let mut s = RunningNorm::new(2);
        for _ in 0..10 {
            s.update(&DMatrix::from_element(2, 8, 3.0));
        }
        assert!(s.var.iter().all(|v| *v < 1e-20));
        assert!(s.std().iter().all(|v| (*v - 1e-4).abs() < 1e-18));
        let z = s.normalize(&DMatrix::from_element(2, 1, 3.0));
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalize_inverts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut s = RunningNorm::new(3);
        s.update(&batch(&mut rng, 50, 1.0));
        let x = batch(&mut rng, 7, -3.0);
        let back = s.denormalize(&s.normalize(&x));
        assert!((back - x).amax() < 1e-10);
    }
}
