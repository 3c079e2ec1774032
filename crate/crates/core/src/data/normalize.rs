use serde::{Deserialize, Serialize};

use super::{DataError, FeatureRow, MarketTable, FEATURES_PER_ASSET, FEATURE_NAMES};

/// Per-feature z-score statistics, fitted on the training span only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; FEATURES_PER_ASSET],
    /// Population standard deviation.
    pub std: [f64; FEATURES_PER_ASSET],
}

/// Fits mean and population std over every asset and date in `train`.
pub fn fit_normalizer(train: &MarketTable) -> Result<NormStats, DataError> {
    let count = train.rows.iter().map(Vec::len).sum::<usize>();
    if count == 0 {
        return Err(DataError::Empty);
    }
    let n = count as f64;
    let mut mean = [0.0; FEATURES_PER_ASSET];
    for r in train.rows.iter().flatten() {
        for (m, v) in mean.iter_mut().zip(r.to_array()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; FEATURES_PER_ASSET];
    for r in train.rows.iter().flatten() {
        for (k, v) in r.to_array().into_iter().enumerate() {
            var[k] += (v - mean[k]) * (v - mean[k]);
        }
    }
    let mut std = [0.0; FEATURES_PER_ASSET];
    for k in 0..FEATURES_PER_ASSET {
        std[k] = (var[k] / n).sqrt();
        if !(std[k] > 0.0) || !std[k].is_finite() {
            return Err(DataError::DegenerateFeature(FEATURE_NAMES[k].to_string()));
        }
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn apply(&self, row: &FeatureRow) -> [f64; FEATURES_PER_ASSET] {
        let mut out = row.to_array();
        for k in 0..FEATURES_PER_ASSET {
            out[k] = (out[k] - self.mean[k]) / self.std[k];
        }
        out
    }

    /// Normalized feature block per date, flattened row-major by asset
    /// (`D * K` entries per date).
    pub fn transform(&self, table: &MarketTable) -> Vec<Vec<f64>> {
        table.rows.iter().map(|row| row.iter().flat_map(|r| self.apply(r)).collect()).collect()
    }
}
