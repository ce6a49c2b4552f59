//! Layer importance from a first-order Taylor term on the activations,
//! and importance-driven layer selection.

use crate::error::{CoreError, Result};
use crate::loss::shannon_entropy_with_grad;
use crate::net::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Source,
    Target,
}

/// Per-layer activation importance, L2-normalized across layers (an
/// all-zero vector stays all-zero).
#[derive(Debug, Clone)]
pub struct ImportanceVector {
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

impl ImportanceVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f32 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn cosine_similarity(&self, other: &ImportanceVector) -> f32 {
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let na = self.l2_norm() as f64;
        let nb = other.l2_norm() as f64;
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (dot / (na * nb)) as f32
    }
}

/// Accumulates the signed per-filter Taylor terms sum(dL/dz * z) across
/// batches, then reduces to per-layer scores.
#[derive(Debug)]
pub struct ImportanceAccumulator {
    /// Per layer, per filter: signed sums over data points and spatial dims.
    filter_sums: Vec<Vec<f64>>,
    samples: usize,
}

impl ImportanceAccumulator {
    pub fn new(num_layers: usize) -> Self {
        Self {
            filter_sums: vec![Vec::new(); num_layers],
            samples: 0,
        }
    }

    /// Accumulate one batch: entropy loss on the current forward pass of
    /// `net`, with activation gradients from backward.
    pub fn accumulate(&mut self, net: &mut Network, x: &Tensor, batch_stats: bool) -> Result<f64> {
        let pred = net.forward(x, batch_stats)?;
        let (loss, pgrad) = shannon_entropy_with_grad(&pred)?;
        let grads = net.backward(&pgrad)?;
        let acts = net
            .activation_cache()
            .expect("cache populated by forward");
        let batch = x.dims5()[0];
        for (li, (z, g)) in acts.iter().zip(&grads.activations).enumerate() {
            let [b, c, d, h, w] = z.dims5();
            let vol = d * h * w;
            if self.filter_sums[li].is_empty() {
                self.filter_sums[li] = vec![0.0f64; c];
            }
            let zd = z.data();
            let gd = g.data();
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * vol;
                    let mut s = 0.0f64;
                    for k in 0..vol {
                        s += gd[base + k] as f64 * zd[base + k] as f64;
                    }
                    self.filter_sums[li][ch] += s;
                }
            }
        }
        self.samples += batch;
        Ok(loss.total)
    }

    /// Per-layer scores: |per-filter mean| summed within the layer, then
    /// L2-normalized across layers.
    pub fn finish(self, provenance: Provenance) -> Result<ImportanceVector> {
        if self.samples == 0 {
            return Err(CoreError::InvalidConfig(
                "importance requires at least one data point".into(),
            ));
        }
        let n = self.samples as f64;
        let mut values: Vec<f32> = self
            .filter_sums
            .iter()
            .map(|filters| {
                filters
                    .iter()
                    .map(|&s| (s / n).abs())
                    .sum::<f64>() as f32
            })
            .collect();
        let norm = values
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Ok(ImportanceVector { values, provenance })
    }
}

/// Activation importance of every layer for the entropy objective on one
/// batch.
pub fn taylor_importance(
    net: &mut Network,
    x: &Tensor,
    batch_stats: bool,
    provenance: Provenance,
) -> Result<ImportanceVector> {
    let mut acc = ImportanceAccumulator::new(net.num_layers());
    acc.accumulate(net, x, batch_stats)?;
    acc.finish(provenance)
}

/// Indices of the `m` layers with the largest |source - target|
/// importance difference, ordered by descending difference; ties take the
/// lower layer index.
pub fn select_layers(
    theta_source: &ImportanceVector,
    theta_target: &ImportanceVector,
    m: usize,
) -> Result<Vec<usize>> {
    if theta_source.len() != theta_target.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "importance vectors have {} vs {} layers",
            theta_source.len(),
            theta_target.len()
        )));
    }
    let n = theta_source.len();
    if m == 0 || m > n {
        return Err(CoreError::InvalidConfig(format!(
            "m must be in 1..={n}, got {m}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diff: Vec<f32> = theta_source
        .values
        .iter()
        .zip(&theta_target.values)
        .map(|(&s, &t)| (s - t).abs())
        .collect();
    order.sort_by(|&a, &b| {
        diff[b]
            .partial_cmp(&diff[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(m);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(values: Vec<f32>) -> ImportanceVector {
        ImportanceVector {
            values,
            provenance: Provenance::Source,
        }
    }

    #[test]
    fn select_prefers_largest_difference() {
        let s = iv(vec![1.0, 0.0, 0.0]);
        let t = iv(vec![0.0, 0.4, 0.0]);
        assert_eq!(select_layers(&s, &t, 1).unwrap(), vec![0]);
        assert_eq!(select_layers(&s, &t, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn select_breaks_ties_by_lower_index() {
        // |diff| = [1, 1, 0] -> index 0 wins the tie
        let s = iv(vec![1.0, 0.0, 0.0]);
        let t = iv(vec![0.0, 1.0, 0.0]);
        assert_eq!(select_layers(&s, &t, 1).unwrap(), vec![0]);
    }

    #[test]
    fn identical_importance_returns_first_m() {
        let s = iv(vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(select_layers(&s, &s, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn m_equal_l_returns_all_layers() {
        let s = iv(vec![0.3, 0.2, 0.1]);
        let t = iv(vec![0.1, 0.2, 0.3]);
        let mut sel = select_layers(&s, &t, 3).unwrap();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1, 2]);
    }

    #[test]
    fn m_out_of_range_is_error() {
        let s = iv(vec![0.3, 0.2]);
        assert!(select_layers(&s, &s, 3).is_err());
        assert!(select_layers(&s, &s, 0).is_err());
    }
}
