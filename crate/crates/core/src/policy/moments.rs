use serde::{Deserialize, Serialize};

use super::PolicyError;

/// Floor applied to the standard deviation when normalizing.
pub const STD_FLOOR: f64 = 1e-8;

/// Streaming per-dimension mean and variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &[f64]) -> Result<(), PolicyError> {
        if x.len() != self.dim() {
            return Err(PolicyError::ShapeError(format!(
                "observation has {} dims, moments track {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn update(&mut self, x: &[f64]) -> Result<(), PolicyError> {
        self.check(x)?;
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *m2 += delta * (v - *m);
        }
        Ok(())
    }

    /// Population variance; zero before any update.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.dim()];
        }
        self.m2.iter().map(|m2| (m2 / self.count as f64).max(0.0)).collect()
    }

    /// `(x - mean) / max(std, STD_FLOOR)`, folding `x` in first when `update`.
    /// With no history at all the output is the zero vector.
    pub fn normalize(&mut self, x: &[f64], update: bool) -> Result<Vec<f64>, PolicyError> {
        if update {
            self.update(x)?;
        }
        self.normalized(x)
    }

    /// Normalizes against the current statistics without changing them.
    pub fn normalized(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.check(x)?;
        if self.count == 0 {
            return Ok(vec![0.0; x.len()]);
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(self.variance())
            .map(|((&v, &m), var)| (v - m) / var.sqrt().max(STD_FLOOR))
            .collect())
    }
}
