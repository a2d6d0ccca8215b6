use super::{least_squares, BasisSet, Coefficients};
use crate::error::Result;

/// Per-episode coefficient inference.
///
/// Transitions are buffered with their basis values; every `refresh_period`
/// steps the coefficients are re-solved from scratch over the buffer (or its
/// most recent `cap` entries). Until the first refresh the coefficients are
/// the zero vector.
#[derive(Debug, Clone)]
pub struct OnlineCoefficients {
    refresh_period: usize,
    ridge: f64,
    cap: Option<usize>,
    g: Vec<Vec<Vec<f64>>>,
    f: Vec<Vec<f64>>,
    current: Coefficients,
}

impl OnlineCoefficients {
    pub fn new(k: usize, refresh_period: usize, ridge: f64, cap: Option<usize>) -> Self {
        Self {
            refresh_period: refresh_period.max(1),
            ridge,
            cap,
            g: Vec::new(),
            f: Vec::new(),
            current: Coefficients::zeros(k),
        }
    }

    pub fn reset(&mut self) {
        self.g.clear();
        self.f.clear();
        self.current = Coefficients::zeros(self.current.b.len());
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.current
    }

    pub fn buffered(&self) -> usize {
        self.f.len()
    }

    pub fn update(&mut self, basis: &BasisSet, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<&Coefficients> {
        let g = basis.evaluate(s, a)?;
        let delta: Vec<f64> = s_next.iter().zip(s).map(|(n, c)| n - c).collect();
        self.update_with_values(basis, g, &delta)
    }

    /// Same as [`Self::update`] with basis values `g = basis.evaluate(s, a)`
    /// already at hand and the raw delta `s' - s`.
    pub fn update_with_values(&mut self, basis: &BasisSet, g: Vec<Vec<f64>>, delta: &[f64]) -> Result<&Coefficients> {
        self.g.push(g);
        self.f.push(basis.normalizer().target(delta));
        if self.f.len().is_multiple_of(self.refresh_period) {
            self.refresh()?;
        }
        Ok(&self.current)
    }

    /// Whether at least one refresh has produced fitted coefficients.
    pub fn is_fitted(&self) -> bool {
        self.f.len() >= self.refresh_period
    }

    pub fn refresh(&mut self) -> Result<()> {
        if self.f.is_empty() {
            return Ok(());
        }
        let start = self.cap.map_or(0, |c| self.f.len().saturating_sub(c));
        self.current = least_squares(&self.g[start..], &self.f[start..], self.ridge)?;
        Ok(())
    }
}
