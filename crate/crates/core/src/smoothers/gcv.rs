use serde::{Deserialize, Serialize};

use crate::error::{ProfitError, Result};

/// Ingredients of a generalized cross-validation score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcvPoint {
    pub rss: f64,
    /// Trace of the hat matrix (effective degrees of freedom).
    pub trace: f64,
    pub n: f64,
}

impl GcvPoint {
    /// `n·RSS / (n − tr H)²`, or `None` when `tr H ≥ n`.
    pub fn score(&self) -> Option<f64> {
        let resid_df = self.n - self.trace;
        if !(resid_df > 0.0) || !self.rss.is_finite() {
            return None;
        }
        Some(self.n * self.rss.max(0.0) / (resid_df * resid_df))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcvSelection {
    pub chosen: f64,
    pub index: usize,
    /// `(candidate, score)`; `None` for candidates that could not be fitted
    /// or were entirely undersmoothed.
    pub trace: Vec<(f64, Option<f64>)>,
}

/// Pick the candidate minimizing GCV.
///
/// `candidates` must be ordered from least to most smoothing; ties go to the
/// smoother candidate. `eval` returns `None` for infeasible candidates.
pub fn gcv_select(
    candidates: &[f64],
    mut eval: impl FnMut(f64) -> Option<GcvPoint>,
) -> Result<GcvSelection> {
    if candidates.is_empty() {
        return Err(ProfitError::Config("empty GCV grid".into()));
    }
    let trace: Vec<(f64, Option<f64>)> = candidates
        .iter()
        .map(|&c| (c, eval(c).and_then(|p| p.score())))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, s)) in trace.iter().enumerate() {
        if let Some(s) = *s {
            match best {
                Some((_, b)) if s > b * (1.0 + 1e-12) => {}
                _ => best = Some((i, s)),
            }
        }
    }
    match best {
        Some((index, _)) => Ok(GcvSelection {
            chosen: candidates[index],
            index,
            trace,
        }),
        None => Err(ProfitError::Smoother(
            "grid entirely undersmoothed (tr(H) >= n for every candidate)".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_with_score(s: f64) -> GcvPoint {
        // n = 1, trace = 0 gives score = rss.
        GcvPoint {
            rss: s,
            trace: 0.0,
            n: 1.0,
        }
    }

    #[test]
    fn single_candidate() {
        let sel = gcv_select(&[0.3], |_| Some(point_with_score(1.0))).unwrap();
        assert_eq!(sel.chosen, 0.3);
    }

    #[test]
    fn ties_go_to_smoother() {
        let scores = [5.0, 3.0, 3.0];
        let grid = [0.1, 0.2, 0.3];
        let sel = gcv_select(&grid, |h| {
            let i = grid.iter().position(|&g| g == h).unwrap();
            Some(point_with_score(scores[i]))
        })
        .unwrap();
        assert_eq!(sel.chosen, 0.3);
    }

    #[test]
    fn undersmoothed_grid_errors() {
        let err = gcv_select(&[1.0, 2.0], |_| {
            Some(GcvPoint {
                rss: 1.0,
                trace: 10.0,
                n: 10.0,
            })
        })
        .unwrap_err();
        assert!(err.to_string().contains("undersmoothed"));
    }
}
