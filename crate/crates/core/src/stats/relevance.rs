use crate::error::{Result, TaqError};

/// Convex weights on z-scored information and stability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RelevanceWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl RelevanceWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { alpha, beta } = *self;
        if !(alpha >= 0.0 && beta >= 0.0 && (alpha + beta - 1.0).abs() <= 1e-9) {
            return Err(TaqError::InvalidConfig(format!(
                "relevance weights alpha={alpha} beta={beta} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZScores {
    pub values: Vec<f64>,
    /// Population std was below 1e-12; all values are zero.
    pub degenerate: bool,
}

/// Standardizes with the population standard deviation.
pub fn zscore(values: &[f64]) -> ZScores {
    let n = values.len() as f64;
    if values.is_empty() {
        return ZScores {
            values: Vec::new(),
            degenerate: true,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return ZScores {
            values: vec![0.0; values.len()],
            degenerate: true,
        };
    }
    ZScores {
        values: values.iter().map(|v| (v - mean) / std).collect(),
        degenerate: false,
    }
}

/// `R = α·Ĥ + β·Ŝ`
pub fn relevance(z_entropy: &[f64], z_stability: &[f64], w: RelevanceWeights) -> Result<Vec<f64>> {
    w.validate()?;
    if z_entropy.len() != z_stability.len() {
        return Err(TaqError::InvalidShape(format!(
            "{} entropy scores vs {} stability scores",
            z_entropy.len(),
            z_stability.len()
        )));
    }
    Ok(z_entropy
        .iter()
        .zip(z_stability)
        .map(|(h, s)| w.alpha * h + w.beta * s)
        .collect())
}
