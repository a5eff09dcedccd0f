//! B-spline bases on the simulation time grid.
//!
//! `order` follows the convention where order 1 is piecewise constant
//! (degree 0) and order 3 gives quadratic pieces. Boundary knots are clamped
//! (repeated `order` times), which preserves the partition of unity at the
//! domain edges, and evaluation is right-closed at `t_end` so the final basis
//! function equals one there.
//!
//! An optional `zero_before` year masks the basis for the pre-scale-up era:
//! rows with `t < zero_before` are zeroed, and basis functions whose support
//! ends at or before `zero_before` are dropped from the matrix entirely. The
//! reported coefficient count is always the constructed matrix width.

use crate::error::{Error, Result};

/// Specification of a basis: order, knot cadence, domain and the optional
/// masking year.
#[derive(Debug, Clone)]
pub struct BasisSpec {
    pub order: usize,
    /// Knot spacing in years. The final interval is shortened when the span
    /// is not an integer multiple of the interval.
    pub knot_interval: f64,
    pub t0: f64,
    pub t_end: f64,
    /// All basis values are forced to zero for `t < zero_before`.
    pub zero_before: Option<f64>,
}

/// Dense matrix of basis values over (grid point, basis function).
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    values: Vec<Vec<f64>>,
    grid: Vec<f64>,
    active: Vec<bool>,
    order: usize,
    n_basis: usize,
}

impl BasisMatrix {
    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Basis values at grid point `t_idx`.
    pub fn row(&self, t_idx: usize) -> &[f64] {
        &self.values[t_idx]
    }

    /// False where the grid point is masked by `zero_before`.
    pub fn is_active(&self, t_idx: usize) -> bool {
        self.active[t_idx]
    }
}

/// Breakpoints covering `[t0, t_end]` at the requested cadence; interior
/// points land on exact multiples of the interval and the last interval
/// absorbs any remainder.
fn breakpoints(t0: f64, t_end: f64, interval: f64) -> Vec<f64> {
    let span = t_end - t0;
    let n_full = ((span / interval) - 1e-9).floor().max(0.0) as usize;
    let mut pts = Vec::with_capacity(n_full + 2);
    pts.push(t0);
    for k in 1..=n_full {
        pts.push(t0 + interval * k as f64);
    }
    pts.push(t_end);
    pts
}

/// Index of the knot span containing `t`, clamped so that evaluation at
/// `t_end` uses the last nonempty span.
fn find_span(knots: &[f64], degree: usize, n_basis: usize, t: f64) -> usize {
    if t >= knots[n_basis] {
        return n_basis - 1;
    }
    if t <= knots[degree] {
        return degree;
    }
    // Binary search for span s with knots[s] <= t < knots[s+1].
    let (mut lo, mut hi) = (degree, n_basis);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if t < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// The `degree + 1` nonzero basis values at `t` in span `span` (Cox–de Boor
/// triangular scheme).
fn basis_values(knots: &[f64], span: usize, degree: usize, t: f64) -> Vec<f64> {
    let mut vals = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    vals[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let term = if denom != 0.0 { vals[r] / denom } else { 0.0 };
            vals[r] = saved + right[r + 1] * term;
            saved = left[j - r] * term;
        }
        vals[j] = saved;
    }
    vals
}

/// Evaluate the basis defined by `spec` at each point of `grid`.
pub fn make_basis(spec: &BasisSpec, grid: &[f64]) -> Result<BasisMatrix> {
    if spec.order < 1 {
        return Err(Error::InvalidOrder(spec.order));
    }
    let span = spec.t_end - spec.t0;
    if !(span > 0.0) {
        return Err(Error::EmptyDomain {
            t0: spec.t0,
            t_end: spec.t_end,
        });
    }
    if !(spec.knot_interval > 0.0) || spec.knot_interval > span + 1e-9 {
        return Err(Error::InvalidKnotInterval {
            interval: spec.knot_interval,
            span,
        });
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid);
    }
    for &t in grid {
        if t < spec.t0 - 1e-9 || t > spec.t_end + 1e-9 {
            return Err(Error::GridOutsideDomain {
                t,
                t0: spec.t0,
                t_end: spec.t_end,
            });
        }
    }

    let degree = spec.order - 1;
    let breaks = breakpoints(spec.t0, spec.t_end, spec.knot_interval);
    // Clamped knot vector: boundary knots repeated `order` times.
    let mut knots = Vec::with_capacity(breaks.len() + 2 * degree);
    knots.extend(std::iter::repeat(spec.t0).take(degree));
    knots.extend_from_slice(&breaks);
    knots.extend(std::iter::repeat(spec.t_end).take(degree));
    let n_full = knots.len() - spec.order;

    // Functions with support entirely before the masking year are dropped:
    // the support of basis i is [knots[i], knots[i + order]).
    let kept: Vec<usize> = match spec.zero_before {
        Some(zb) => (0..n_full)
            .filter(|&i| knots[i + spec.order] > zb + 1e-12)
            .collect(),
        None => (0..n_full).collect(),
    };
    let col_of: Vec<Option<usize>> = {
        let mut map = vec![None; n_full];
        for (col, &i) in kept.iter().enumerate() {
            map[i] = Some(col);
        }
        map
    };

    let mut values = Vec::with_capacity(grid.len());
    let mut active = Vec::with_capacity(grid.len());
    for &t in grid {
        let mut row = vec![0.0; kept.len()];
        let on = spec.zero_before.map_or(true, |zb| t >= zb - 1e-12);
        if on {
            let t_eval = t.clamp(spec.t0, spec.t_end);
            let s = find_span(&knots, degree, n_full, t_eval);
            let vals = basis_values(&knots, s, degree, t_eval);
            for (k, &v) in vals.iter().enumerate() {
                let i = s - degree + k;
                if let Some(col) = col_of[i] {
                    row[col] = v;
                }
            }
        }
        values.push(row);
        active.push(on);
    }

    Ok(BasisMatrix {
        n_basis: kept.len(),
        values,
        grid: grid.to_vec(),
        active,
        order: spec.order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(order: usize, interval: f64, t0: f64, t_end: f64) -> BasisSpec {
        BasisSpec {
            order,
            knot_interval: interval,
            t0,
            t_end,
            zero_before: None,
        }
    }

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Independent scalar Cox–de Boor recursion, straight from the defining
    /// recurrence, used as the oracle for the fast triangular scheme.
    fn naive_basis(knots: &[f64], i: usize, degree: usize, t: f64, t_end: f64) -> f64 {
        if degree == 0 {
            let hit = if knots[i + 1] >= t_end {
                knots[i] <= t && t <= knots[i + 1]
            } else {
                knots[i] <= t && t < knots[i + 1]
            };
            return if hit && knots[i] < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + degree] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * naive_basis(knots, i, degree - 1, t, t_end);
        }
        let d2 = knots[i + degree + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + degree + 1] - t) / d2 * naive_basis(knots, i + 1, degree - 1, t, t_end);
        }
        v
    }

    #[test]
    fn order_one_is_interval_indicator() {
        let b = make_basis(&spec(1, 1.0, 0.0, 2.0), &[0.5, 1.5, 2.0]).unwrap();
        assert_eq!(b.n_basis(), 2);
        assert_eq!(b.row(0), &[1.0, 0.0]);
        assert_eq!(b.row(1), &[0.0, 1.0]);
        // Right-closed at the domain end.
        assert_eq!(b.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn partition_of_unity() {
        for order in [1usize, 2, 3, 4] {
            for interval in [1.0, 2.5, 5.0] {
                let grid = linspace(2000.0, 2019.0, 191);
                let b = make_basis(&spec(order, interval, 2000.0, 2019.0), &grid).unwrap();
                for ti in 0..b.n_points() {
                    let sum: f64 = b.row(ti).iter().sum();
                    assert!(
                        (sum - 1.0).abs() < 1e-12,
                        "order {order} interval {interval} t {} sum {sum}",
                        grid[ti]
                    );
                    // Local support: at most `order` nonzero values.
                    let nz = b.row(ti).iter().filter(|v| **v != 0.0).count();
                    assert!(nz <= order);
                }
            }
        }
    }

    #[test]
    fn quadratic_midpoint_values() {
        // Uniform interior spacing 1; at an interior interval midpoint the
        // order-3 basis takes (0.125, 0.75, 0.125) on its active functions.
        let grid = vec![4.5];
        let b = make_basis(&spec(3, 1.0, 0.0, 10.0), &grid).unwrap();
        let row = b.row(0);
        let nz: Vec<f64> = row.iter().copied().filter(|v| *v > 0.0).collect();
        assert_eq!(nz.len(), 3);
        assert!((nz[0] - 0.125).abs() < 1e-12);
        assert!((nz[1] - 0.75).abs() < 1e-12);
        assert!((nz[2] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_recursion() {
        let grid = linspace(0.0, 10.0, 101);
        for order in [1usize, 2, 3] {
            let b = make_basis(&spec(order, 2.0, 0.0, 10.0), &grid).unwrap();
            let degree = order - 1;
            let breaks = breakpoints(0.0, 10.0, 2.0);
            let mut knots = Vec::new();
            knots.extend(std::iter::repeat(0.0).take(degree));
            knots.extend_from_slice(&breaks);
            knots.extend(std::iter::repeat(10.0).take(degree));
            for (ti, &t) in grid.iter().enumerate() {
                for i in 0..b.n_basis() {
                    let want = naive_basis(&knots, i, degree, t, 10.0);
                    let got = b.row(ti)[i];
                    assert!(
                        (want - got).abs() < 1e-12,
                        "order {order} t {t} basis {i}: {want} vs {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn coefficient_count_matches_intervals() {
        // n_basis = interior intervals + order - 1.
        let grid = linspace(2000.0, 2019.0, 20);
        let b = make_basis(&spec(3, 5.0, 2000.0, 2019.0), &grid).unwrap();
        assert_eq!(b.n_basis(), 4 + 3 - 1);
        let b = make_basis(&spec(1, 1.0, 2000.0, 2019.0), &grid).unwrap();
        assert_eq!(b.n_basis(), 19);
    }

    #[test]
    fn zero_before_masks_and_drops() {
        let grid = linspace(2000.0, 2019.0, 191);
        let mut s = spec(1, 1.0, 2000.0, 2019.0);
        s.zero_before = Some(2004.0);
        let b = make_basis(&s, &grid).unwrap();
        // Yearly indicators on [2000,2001) .. [2003,2004) are dropped.
        assert_eq!(b.n_basis(), 15);
        for ti in 0..b.n_points() {
            let sum: f64 = b.row(ti).iter().sum();
            if grid[ti] < 2004.0 - 1e-9 {
                assert!(!b.is_active(ti));
                assert_eq!(sum, 0.0);
            } else {
                assert!(b.is_active(ti));
                assert!((sum - 1.0).abs() < 1e-12, "t {} sum {sum}", grid[ti]);
            }
        }
    }

    #[test]
    fn order_one_yearly_basis_is_a_step_function() {
        // Constant value between integer knots, changing only at knots.
        let grid = linspace(2000.0, 2010.0, 501);
        let b = make_basis(&spec(1, 1.0, 2000.0, 2010.0), &grid).unwrap();
        let coeffs: Vec<f64> = (0..b.n_basis()).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let mut prev_val: Option<f64> = None;
        let mut prev_year = -1i64;
        for (ti, &t) in grid.iter().enumerate() {
            let v: f64 = b.row(ti).iter().zip(&coeffs).map(|(p, c)| p * c).sum();
            let year = (t + 1e-9).floor() as i64;
            if year == prev_year {
                assert!((v - prev_val.unwrap()).abs() < 1e-12);
            }
            prev_val = Some(v);
            prev_year = year;
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let grid = vec![0.0, 1.0];
        assert!(matches!(
            make_basis(&spec(0, 1.0, 0.0, 1.0), &grid),
            Err(Error::InvalidOrder(0))
        ));
        assert!(matches!(
            make_basis(&spec(1, 5.0, 0.0, 1.0), &grid),
            Err(Error::InvalidKnotInterval { .. })
        ));
        assert!(matches!(
            make_basis(&spec(1, 0.5, 0.0, 1.0), &[0.0, 2.0]),
            Err(Error::GridOutsideDomain { .. })
        ));
        assert!(matches!(
            make_basis(&spec(1, 0.5, 0.0, 1.0), &[0.5, 0.5]),
            Err(Error::InvalidGrid)
        ));
    }
}
