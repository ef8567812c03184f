//! Piecewise-linear curves on a knot grid.

use crate::error::{Error, Result};

/// A piecewise-linear function given by sorted knots. Evaluation outside the
/// knot span is a domain error; there is no extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    knots: Vec<(f64, f64)>,
}

impl Curve {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Curve> {
        if knots.is_empty() {
            return Err(Error::Domain("a curve needs at least one knot".into()));
        }
        for window in knots.windows(2) {
            if !(window[0].0 < window[1].0) {
                return Err(Error::Domain(format!(
                    "curve knots must be strictly increasing in x: {} then {}",
                    window[0].0, window[1].0
                )));
            }
        }
        for (x, y) in &knots {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Domain("curve knots must be finite".into()));
            }
        }
        Ok(Curve { knots })
    }

    /// Build from parallel grids.
    pub fn from_grid(xs: &[f64], ys: &[f64]) -> Result<Curve> {
        if xs.len() != ys.len() {
            return Err(Error::Domain("grid lengths differ".into()));
        }
        Curve::new(xs.iter().copied().zip(ys.iter().copied()).collect())
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0].0, self.knots[self.knots.len() - 1].0)
    }

    pub fn contains(&self, x: f64) -> bool {
        let (lo, hi) = self.domain();
        x >= lo && x <= hi
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !self.contains(x) {
            let (lo, hi) = self.domain();
            return Err(Error::Domain(format!(
                "evaluation point {x} outside curve domain [{lo}, {hi}]"
            )));
        }
        match self.knots.binary_search_by(|(kx, _)| kx.partial_cmp(&x).unwrap()) {
            Ok(i) => Ok(self.knots[i].1),
            Err(i) => {
                // i > 0 and i < len because x is inside the domain.
                let (x0, y0) = self.knots[i - 1];
                let (x1, y1) = self.knots[i];
                Ok(y0 + (y1 - y0) / (x1 - x0) * (x - x0))
            }
        }
    }

    /// Apply `f` to every knot value.
    pub fn map_values(&self, mut f: impl FnMut(f64, f64) -> f64) -> Curve {
        Curve {
            knots: self.knots.iter().map(|&(x, y)| (x, f(x, y))).collect(),
        }
    }

    /// Running-maximum envelope of the knot values (non-decreasing output).
    pub fn running_max(&self) -> Curve {
        let mut best = f64::NEG_INFINITY;
        self.map_values(|_, y| {
            best = best.max(y);
            best
        })
    }

    /// Running-minimum envelope of the knot values (non-increasing output).
    pub fn running_min(&self) -> Curve {
        let mut best = f64::INFINITY;
        self.map_values(|_, y| {
            best = best.min(y);
            best
        })
    }

    /// True when knot values never decrease, up to `slack`.
    pub fn is_non_decreasing(&self, slack: f64) -> bool {
        self.knots.windows(2).all(|w| w[1].1 >= w[0].1 - slack)
    }

    /// True when knot values never increase, up to `slack`.
    pub fn is_non_increasing(&self, slack: f64) -> bool {
        self.knots.windows(2).all(|w| w[1].1 <= w[0].1 + slack)
    }
}

/// Evenly spaced grid over `[lo, hi]` with `points` entries.
pub fn linspace(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::Domain("a grid needs at least two points".into()));
    }
    if !(lo < hi) {
        return Err(Error::Domain(format!("grid bounds must satisfy lo < hi: ({lo}, {hi})")));
    }
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| if i == points - 1 { hi } else { lo + step * i as f64 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_between_knots() {
        let curve = Curve::new(vec![(0.0, 0.0), (2.0, 4.0)]).unwrap();
        assert_eq!(curve.eval(0.0).unwrap(), 0.0);
        assert_eq!(curve.eval(1.0).unwrap(), 2.0);
        assert_eq!(curve.eval(2.0).unwrap(), 4.0);
        assert!(curve.eval(2.1).is_err());
        assert!(curve.eval(-0.1).is_err());
    }

    #[test]
    fn rejects_unsorted_knots() {
        assert!(Curve::new(vec![(1.0, 0.0), (1.0, 1.0)]).is_err());
        assert!(Curve::new(vec![(2.0, 0.0), (1.0, 1.0)]).is_err());
    }

    #[test]
    fn envelopes() {
        let curve = Curve::new(vec![(0.0, 4.0), (1.0, 2.0), (2.0, 5.0)]).unwrap();
        let up = curve.running_max();
        assert_eq!(up.knots().iter().map(|k| k.1).collect::<Vec<_>>(), vec![4.0, 4.0, 5.0]);
        let down = curve.running_min();
        assert_eq!(down.knots().iter().map(|k| k.1).collect::<Vec<_>>(), vec![4.0, 2.0, 2.0]);
        assert!(up.is_non_decreasing(0.0));
        assert!(down.is_non_increasing(0.0));
    }

    #[test]
    fn linspace_hits_endpoints() {
        let grid = linspace(1.0, 5.0, 5).unwrap();
        assert_eq!(grid, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(linspace(1.0, 1.0, 5).is_err());
    }
}
