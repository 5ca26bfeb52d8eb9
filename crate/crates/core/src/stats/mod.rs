//! Per-layer activation statistics: reservoir sampling, streaming moments, spectral entropy,
//! stability, z-scored relevance, and task-direction diagnostics.

mod direction;
mod entropy;
mod moments;
mod relevance;
mod reservoir;

pub use direction::{cosine_alignment, mean_pool, task_direction, Alignment, TaskDirection};
pub use entropy::{spectral_entropy, spectral_entropy_of, Entropy, EIGEN_FLOOR};
pub use moments::{variance_and_stability, StreamingMoments};
pub use relevance::{relevance, zscore, RelevanceWeights, ZScores};
pub use reservoir::Reservoir;

use crate::error::{Result, TaqError};
use crate::linalg::{Matrix, SeededRng};
use crate::scalar::Scalar;

pub const DEFAULT_RESERVOIR: usize = 256;

/// Scored statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    /// Spectral entropy in nats.
    pub entropy: f64,
    pub variance: f64,
    /// Always `-variance`.
    pub stability: f64,
    pub z_entropy: f64,
    pub z_stability: f64,
    pub relevance: f64,
    /// Entropy had no eigenvalue above the floor (all reservoir rows identical).
    pub entropy_degenerate: bool,
}

/// Relevance profile over all layers for one calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub layers: Vec<LayerStats>,
    pub weights: RelevanceWeights,
    /// Entropies had zero spread across layers.
    pub z_entropy_degenerate: bool,
    pub z_stability_degenerate: bool,
}

impl Profile {
    /// Combines raw per-layer entropies and variances into a z-scored relevance profile.
    pub fn from_raw(
        entropies: &[Entropy],
        variances: &[f64],
        weights: RelevanceWeights,
    ) -> Result<Self> {
        if entropies.len() != variances.len() || entropies.is_empty() {
            return Err(TaqError::InvalidInput(format!(
                "{} entropies vs {} variances",
                entropies.len(),
                variances.len()
            )));
        }
        let h: Vec<f64> = entropies.iter().map(|e| e.nats).collect();
        let s: Vec<f64> = variances.iter().map(|v| -v).collect();
        let zh = zscore(&h);
        let zs = zscore(&s);
        let r = relevance(&zh.values, &zs.values, weights)?;
        let layers = (0..h.len())
            .map(|l| LayerStats {
                layer: l,
                entropy: h[l],
                variance: variances[l],
                stability: s[l],
                z_entropy: zh.values[l],
                z_stability: zs.values[l],
                relevance: r[l],
                entropy_degenerate: entropies[l].degenerate,
            })
            .collect();
        Ok(Self {
            layers,
            weights,
            z_entropy_degenerate: zh.degenerate,
            z_stability_degenerate: zs.degenerate,
        })
    }

    pub fn relevance(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.relevance).collect()
    }

    /// Layer indices ordered by relevance, highest first; ties by lower index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_desc(&self.relevance())
    }

    /// Checks the per-layer invariants (used when re-loading a stored profile).
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer != i {
                return Err(TaqError::InvalidInput(format!(
                    "layer index {} at position {i}",
                    l.layer
                )));
            }
            if l.stability != -l.variance || l.variance < 0.0 || l.entropy < 0.0 {
                return Err(TaqError::InvalidInput(format!(
                    "layer {i}: inconsistent statistics"
                )));
            }
            let r = self.weights.alpha * l.z_entropy + self.weights.beta * l.z_stability;
            if (r - l.relevance).abs() > 1e-9 * (1.0 + r.abs()) {
                return Err(TaqError::InvalidInput(format!(
                    "layer {i}: relevance does not match z-scores"
                )));
            }
        }
        Ok(())
    }
}

/// Indices sorted by value descending, ties broken by lower index.
pub fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Accumulates activations for every layer and produces a [`Profile`].
///
/// Each row of a layer's block output is one token vector; it is offered to that layer's
/// reservoir and folded into its scalar moments.
#[derive(Debug, Clone)]
pub struct StatsCollector<T: Scalar = f64> {
    reservoirs: Vec<Reservoir<T>>,
    moments: Vec<StreamingMoments>,
}

impl<T: Scalar> StatsCollector<T> {
    pub fn new(n_layers: usize, width: usize, capacity: usize, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let reservoirs = (0..n_layers)
            .map(|_| Reservoir::new(capacity, width, rng.fork()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            reservoirs,
            moments: vec![StreamingMoments::default(); n_layers],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.reservoirs.len()
    }

    pub fn observe(&mut self, layer: usize, block_output: &Matrix<T>) -> Result<()> {
        let res = self
            .reservoirs
            .get_mut(layer)
            .ok_or_else(|| TaqError::InvalidInput(format!("layer {layer} out of range")))?;
        for r in 0..block_output.rows() {
            res.offer(block_output.row(r))?;
        }
        self.moments[layer].update(block_output.as_slice());
        Ok(())
    }

    pub fn reservoir(&self, layer: usize) -> &Reservoir<T> {
        &self.reservoirs[layer]
    }

    pub fn moments(&self, layer: usize) -> &StreamingMoments {
        &self.moments[layer]
    }

    pub fn finalize(&self, weights: RelevanceWeights) -> Result<Profile> {
        let mut entropies = Vec::with_capacity(self.n_layers());
        let mut variances = Vec::with_capacity(self.n_layers());
        for (res, m) in self.reservoirs.iter().zip(&self.moments) {
            entropies.push(spectral_entropy(res)?);
            variances.push(variance_and_stability(m)?.0);
        }
        Profile::from_raw(&entropies, &variances, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_ties_by_index() {
        assert_eq!(rank_desc(&[0.1, 0.5, 0.5, -1.0]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn shift_invariant_ranking() {
        let e: Vec<Entropy> = [1.0, 2.5, 0.3, 1.7]
            .iter()
            .map(|&n| Entropy {
                nats: n,
                kept: 4,
                degenerate: false,
            })
            .collect();
        let v = [0.2, 0.1, 0.9, 0.4];
        let w = RelevanceWeights::default();
        let base = Profile::from_raw(&e, &v, w).unwrap();
        let shifted: Vec<Entropy> = e
            .iter()
            .map(|x| Entropy {
                nats: x.nats + 3.0,
                ..*x
            })
            .collect();
        let v2: Vec<f64> = v.iter().map(|x| x + 5.0).collect();
        let other = Profile::from_raw(&shifted, &v2, w).unwrap();
        assert_eq!(base.ranking(), other.ranking());
        base.validate().unwrap();
    }

    #[test]
    fn collector_end_to_end() {
        let mut c = StatsCollector::<f64>::new(2, 3, 8, 1).unwrap();
        let a = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        c.observe(0, &a).unwrap();
        c.observe(1, &b).unwrap();
        let p = c.finalize(RelevanceWeights::default()).unwrap();
        assert!(p.layers[1].entropy_degenerate);
        assert_eq!(p.layers[1].variance, 0.0);
        assert!((p.layers[0].entropy - 2f64.ln()).abs() < 1e-12);
        assert!(c.observe(2, &a).is_err());
    }
}
