//! BIC-based model selection over a grid of (G, D) configurations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::{fit, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::eval::adjusted_rand_index;
use crate::model::BinaryDataset;
use crate::seeding::derive_seed;

/// Free-parameter count: (G - 1) mixing weights plus, per component, M
/// intercepts, M*D slopes, tau, and eta. No rotational-indeterminacy
/// deduction is applied here; see [`rotation_adjustment`].
pub fn count_parameters(g: usize, d: usize, m: usize) -> usize {
    (g - 1) + g * (m + m * d + 2)
}

/// The G * D(D-1)/2 rotational indeterminacy of the slope matrices, for
/// callers that prefer the adjusted counting convention.
pub fn rotation_adjustment(g: usize, d: usize) -> usize {
    g * d * d.saturating_sub(1) / 2
}

/// BIC = -2 l + k log n (natural log); lower is better.
pub fn bic(l: f64, k: usize, n: usize) -> f64 {
    -2.0 * l + k as f64 * (n as f64).ln()
}

/// One grid cell: either a completed fit or the error that stopped it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub g: usize,
    pub d: usize,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
    /// Adjusted Rand index of the MAP clustering against the dataset's true
    /// labels, when the dataset carries labels.
    pub ari: Option<f64>,
}

impl GridCell {
    pub fn bic(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.bic).filter(|b| b.is_finite())
    }
}

/// Fit results over a (G, D) grid with the minimum-BIC cell marked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub cells: Vec<GridCell>,
    /// (G, D) of the minimum-BIC successful cell.
    pub best: Option<(usize, usize)>,
}

impl SelectionGrid {
    pub fn cell(&self, g: usize, d: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.g == g && c.d == d)
    }

    pub fn best_cell(&self) -> Option<&GridCell> {
        self.best.and_then(|(g, d)| self.cell(g, d))
    }
}

/// Fits every (G, D) combination, recording per-cell failures without
/// aborting the rest of the grid. Every cell derives its own seed from the
/// base config's seed, so the grid is reproducible as a whole.
pub fn grid_select(
    data: &BinaryDataset,
    g_values: &[usize],
    d_values: &[usize],
    base: &FitConfig,
) -> Result<SelectionGrid> {
    if g_values.is_empty() || d_values.is_empty() {
        return Err(Error::ParameterDomain(
            "model-selection ranges must be non-empty".into(),
        ));
    }
    let pairs: Vec<(usize, usize)> = g_values
        .iter()
        .flat_map(|&g| d_values.iter().map(move |&d| (g, d)))
        .collect();

    let cells: Vec<GridCell> = pairs
        .par_iter()
        .map(|&(g, d)| {
            let mut config = base.clone();
            config.g = g;
            config.d = d;
            config.seed = derive_seed(base.seed, ((g as u64) << 32) | d as u64);
            match fit(data, &config) {
                Ok(result) => {
                    let ari = data
                        .labels
                        .as_ref()
                        .map(|labels| adjusted_rand_index(labels, &result.map_labels));
                    GridCell {
                        g,
                        d,
                        fit: Some(result),
                        error: None,
                        ari,
                    }
                }
                Err(e) => GridCell {
                    g,
                    d,
                    fit: None,
                    error: Some(e.to_string()),
                    ari: None,
                },
            }
        })
        .collect();

    let best = cells
        .iter()
        .filter_map(|c| c.bic().map(|b| ((c.g, c.d), b)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(gd, _)| gd);
    if best.is_none() {
        return Err(Error::SelectionFailed);
    }
    Ok(SelectionGrid { cells, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MltcnParams;
    use approx::assert_abs_diff_eq;

    #[test]
    fn parameter_count_examples() {
        assert_eq!(count_parameters(1, 1, 1), 4);
        assert_eq!(count_parameters(2, 2, 16), 101);
        assert_eq!(count_parameters(2, 2, 25), 155);
        assert_eq!(rotation_adjustment(2, 2), 2);
        assert_eq!(rotation_adjustment(1, 1), 0);
    }

    #[test]
    fn bic_examples() {
        assert_eq!(bic(0.0, 0, 5), 0.0);
        assert_abs_diff_eq!(bic(-100.0, 5, 100), 223.02585092994046, epsilon = 1e-10);
    }

    #[test]
    fn bic_monotonicity() {
        assert!(bic(-10.0, 5, 50) < bic(-10.0, 6, 50));
        assert!(bic(-9.0, 5, 50) < bic(-10.0, 5, 50));
    }

    #[test]
    fn single_cell_grid_selects_itself() {
        let params = MltcnParams::synthetic_design(
            2,
            1,
            4,
            vec![0.5, 0.5],
            vec![0.8, 0.8],
            vec![2.5, 2.5],
        )
        .unwrap();
        let (data, _) = crate::model::sample_mltcn(&params, 60, 11).unwrap();
        let config = FitConfig {
            restarts: 2,
            max_iter: 60,
            ..FitConfig::new(2, 1)
        };
        let grid = grid_select(&data, &[2], &[1], &config).unwrap();
        assert_eq!(grid.best, Some((2, 1)));
        assert_eq!(grid.cells.len(), 1);
        assert!(grid.best_cell().unwrap().ari.is_some());
    }

    #[test]
    fn failing_cells_are_recorded_not_fatal() {
        let params = MltcnParams::synthetic_design(
            1,
            1,
            3,
            vec![1.0],
            vec![0.8],
            vec![2.5],
        )
        .unwrap();
        let (data, _) = crate::model::sample_mltcn(&params, 8, 3).unwrap();
        let config = FitConfig {
            restarts: 2,
            max_iter: 40,
            ..FitConfig::new(1, 1)
        };
        // G = 8 can never exceed n = 8, so that cell fails while G = 1 fits.
        let grid = grid_select(&data, &[1, 8], &[1], &config).unwrap();
        assert_eq!(grid.best, Some((1, 1)));
        let failed = grid.cell(8, 1).unwrap();
        assert!(failed.fit.is_none());
        assert!(failed.error.is_some());
    }

    #[test]
    fn all_cells_failing_is_an_error() {
        let params = MltcnParams::synthetic_design(
            1,
            1,
            2,
            vec![1.0],
            vec![0.8],
            vec![2.5],
        )
        .unwrap();
        let (data, _) = crate::model::sample_mltcn(&params, 5, 3).unwrap();
        let config = FitConfig {
            restarts: 1,
            max_iter: 40,
            ..FitConfig::new(1, 1)
        };
        assert!(matches!(
            grid_select(&data, &[6, 7], &[1], &config),
            Err(Error::SelectionFailed)
        ));
    }
}
