use crate::error::{Error, Result};

/// Per-slot categorical posterior over the active count `0..=N`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorT {
    sensors: usize,
    q: Vec<f64>,
}

impl PosteriorT {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(1, Vec::len);
        if width == 0 {
            return Err(Error::Config("posterior rows must be non-empty".into()));
        }
        let mut q = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::DimensionMismatch {
                    what: "posterior row",
                    expected: width,
                    got: row.len(),
                });
            }
            q.extend(row);
        }
        Ok(Self { sensors: width - 1, q })
    }

    pub(crate) fn zeros(slots: usize, sensors: usize) -> Self {
        Self {
            sensors,
            q: vec![0.0; slots * (sensors + 1)],
        }
    }

    pub fn slots(&self) -> usize {
        self.q.len() / (self.sensors + 1)
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        let w = self.sensors + 1;
        &self.q[slot * w..(slot + 1) * w]
    }

    pub(crate) fn row_mut(&mut self, slot: usize) -> &mut [f64] {
        let w = self.sensors + 1;
        &mut self.q[slot * w..(slot + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.q.chunks(self.sensors + 1)
    }

    /// Effective number of slots attributed to each active count, `sum_i q[i][m]`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.sensors + 1];
        for row in self.rows() {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// `sum_i sum_m q[i][m] * m`
    pub fn expected_active_total(&self) -> f64 {
        self.rows()
            .map(|row| row.iter().enumerate().map(|(m, &v)| m as f64 * v).sum::<f64>())
            .sum()
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_defect(&self) -> f64 {
        self.rows()
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Normalises `log_weights` in place into probabilities; returns the log of
/// the normaliser, or `None` if every entry is `-inf` or any is NaN.
pub(crate) fn normalise_log_row(log_weights: &mut [f64]) -> Option<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || log_weights.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut total = 0.0;
    for v in log_weights.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in log_weights.iter_mut() {
        *v /= total;
    }
    Some(max + total.ln())
}
