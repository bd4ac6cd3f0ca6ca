//! Mass-action fluid limit: right-hand side, adaptive Dormand-Prince
//! integration and vector-field sampling.

use std::io::Write;

use rayon::prelude::*;

use crate::crn::{Concentration, Network};
use crate::error::{Error, Result};

/// `sum_r lambda_r(x) c^r`.
pub fn ode_rhs(net: &Network, x: &Concentration) -> Vec<f64> {
    let mut f = vec![0.0; net.dim()];
    for r in 0..net.len() {
        let rate = net.mass_action_rate(r, x);
        for (fi, &c) in f.iter_mut().zip(net.reaction_vector(r)) {
            *fi += rate * c as f64;
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdePath {
    pub samples: Vec<(f64, Concentration)>,
}

impl OdePath {
    /// Linear interpolation between accepted steps.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let s = &self.samples;
        let k = s.partition_point(|(ti, _)| *ti <= t);
        if k == 0 {
            return s[0].1 .0.clone();
        }
        if k == s.len() {
            return s[k - 1].1 .0.clone();
        }
        let (t0, x0) = (&s[k - 1].0, &s[k - 1].1 .0);
        let (t1, x1) = (&s[k].0, &s[k].1 .0);
        let w = (t - t0) / (t1 - t0);
        x0.iter().zip(x1).map(|(a, b)| a + w * (b - a)).collect()
    }

    pub fn last(&self) -> &(f64, Concentration) {
        self.samples.last().expect("path holds its initial sample")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.samples.first().map_or(0, |s| s.1 .0.len());
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        out.write_record(&header)?;
        for (t, x) in &self.samples {
            let mut row = vec![format!("{t}")];
            row.extend(x.0.iter().map(|v| format!("{v}")));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand-Prince integration from `x0` to `t_end`.
///
/// The weighted local error of every accepted step is at most `tol`. Accepted
/// components in `(-tol, 0)` are clipped to 0; anything lower is an error.
pub fn integrate(net: &Network, x0: &Concentration, t_end: f64, tol: f64) -> Result<OdePath> {
    if !(t_end > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidArgument("need t_end > 0 and tol > 0".into()));
    }
    let d = net.dim();
    let mut t = 0.0;
    let mut y = x0.0.clone();
    let mut samples = vec![(0.0, x0.clone())];
    let f = |y: &[f64]| ode_rhs(net, &Concentration(y.to_vec()));
    let f0 = f(&y);
    let scale0 = f0.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut h = if scale0 > 0.0 { (0.01 * tol.powf(0.2) / scale0).min(t_end) } else { t_end };
    h = h.max(1e-12 * t_end);
    let mut err_prev: f64 = 1.0;
    let mut k = vec![vec![0.0; d]; 7];
    k[0] = f0;
    while t < t_end {
        if h < 1e-14 * t_end.max(t.abs()) {
            return Err(Error::StepUnderflow { t });
        }
        let h_step = h.min(t_end - t);
        for s in 1..7 {
            let ys: Vec<f64> = (0..d)
                .map(|i| y[i] + h_step * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>())
                .collect();
            k[s] = f(&ys);
        }
        let y5: Vec<f64> = (0..d).map(|i| y[i] + h_step * (0..7).map(|j| B5[j] * k[j][i]).sum::<f64>()).collect();
        let err = ((0..d)
            .map(|i| {
                let e = h_step * (0..7).map(|j| (B5[j] - B4[j]) * k[j][i]).sum::<f64>();
                let sc = tol * (1.0 + y[i].abs().max(y5[i].abs()));
                (e / sc).powi(2)
            })
            .sum::<f64>()
            / d as f64)
            .sqrt();
        if err <= 1.0 && y5.iter().all(|v| v.is_finite()) {
            let mut y_new = y5;
            for (i, v) in y_new.iter_mut().enumerate() {
                if *v < 0.0 {
                    if *v > -tol {
                        *v = 0.0;
                    } else {
                        return Err(Error::NegativeState { t, component: i, value: *v });
                    }
                }
            }
            t += h_step;
            if t_end - t < 1e-12 * t_end {
                t = t_end;
            }
            y = y_new;
            samples.push((t, Concentration(y.clone())));
            // Recomputed rather than reused: clipping may have moved the point.
            k[0] = f(&y);
            let e = err.max(1e-10);
            let fac = 0.9 * e.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
            h = h_step * fac.clamp(0.2, 5.0);
            err_prev = e;
        } else {
            let e = if err.is_finite() { err } else { 1e6 };
            h = h_step * (0.9 * e.powf(-0.2)).clamp(0.1, 0.5);
        }
    }
    Ok(OdePath { samples })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1: (f64, f64),
    pub x2: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub x1: f64,
    pub x2: f64,
    pub f1: f64,
    pub f2: f64,
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Uniform `n x n` sampling of the field, rows ordered by `x2` then `x1`.
/// A degenerate side collapses to a single coordinate.
pub fn vector_field_grid(net: &Network, bounds: Rect, n: usize) -> Result<Vec<GridPoint>> {
    if n < 2 || net.dim() != 2 {
        return Err(Error::InvalidArgument("need n >= 2 and a two-species network".into()));
    }
    let xs = axis(bounds.x1.0, bounds.x1.1, n);
    let ys = axis(bounds.x2.0, bounds.x2.1, n);
    Ok(ys
        .par_iter()
        .flat_map_iter(|&x2| {
            xs.iter().map(move |&x1| {
                let f = ode_rhs(net, &Concentration(vec![x1, x2]));
                GridPoint { x1, x2, f1: f[0], f2: f[1] }
            })
        })
        .collect())
}

pub fn write_grid_csv<W: Write>(grid: &[GridPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x1", "x2", "f1", "f2"])?;
    for p in grid {
        out.write_record([p.x1, p.x2, p.f1, p.f2].map(|v| format!("{v}")))?;
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crn::builtin_network;

    fn c(x1: f64, x2: f64) -> Concentration {
        Concentration(vec![x1, x2])
    }

    // Closed-form field of the builtins: r4 = 3B -> 2A contributes x2^3 (2,-3).
    fn oracle(k: i32, x1: f64, x2: f64) -> [f64; 2] {
        let r3 = x1.powi(5) * x2 * x2;
        let r4 = x2.powi(3);
        let r2 = x1.powi(k) * x2;
        [1.0 - 5.0 * r3 + 2.0 * r4, 1.0 - r2 + r3 - 3.0 * r4]
    }

    #[test]
    fn rhs_examples() {
        let n0 = builtin_network("crn0").unwrap();
        let n2 = builtin_network("crn2").unwrap();
        assert_eq!(ode_rhs(&n0, &c(1.0, 1.0)), vec![-2.0, -2.0]);
        assert_eq!(ode_rhs(&n2, &c(1.0, 1.0)), vec![-2.0, -2.0]);
        for name in ["crn0", "crn1", "crn2"] {
            assert_eq!(ode_rhs(&builtin_network(name).unwrap(), &c(0.0, 0.0)), vec![1.0, 1.0]);
        }
        for (k, name) in [(0, "crn0"), (1, "crn1"), (2, "crn2")] {
            let n = builtin_network(name).unwrap();
            for &(a, b) in &[(0.3, 2.0), (1.7, 0.4), (2.5, 3.5)] {
                let got = ode_rhs(&n, &c(a, b));
                let want = oracle(k, a, b);
                assert!((got[0] - want[0]).abs() < 1e-9 * want[0].abs().max(1.0));
                assert!((got[1] - want[1]).abs() < 1e-9 * want[1].abs().max(1.0));
            }
        }
    }

    #[test]
    fn euler_consistency() {
        let n0 = builtin_network("crn0").unwrap();
        let h = 1e-4;
        let path = integrate(&n0, &c(1.0, 1.0), h, 1e-12).unwrap();
        let x = &path.last().1 .0;
        assert!((x[0] - (1.0 - 2.0 * h)).abs() < 100.0 * h * h);
        assert!((x[1] - (1.0 - 2.0 * h)).abs() < 100.0 * h * h);
    }

    fn bisect_equilibrium(n: &Network) -> [f64; 2] {
        // Along the nullcline of x1 solve for x2 such that f2 = 0.
        let x1_of = |x2: f64| {
            let (mut lo, mut hi) = (0.0, 10.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if ode_rhs(n, &c(mid, x2))[0] > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (mut lo, mut hi) = (0.01, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ode_rhs(n, &c(x1_of(mid), mid))[1] > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x2 = 0.5 * (lo + hi);
        [x1_of(x2), x2]
    }

    #[test]
    fn equilibrium_is_fixed() {
        let n0 = builtin_network("crn0").unwrap();
        let e = bisect_equilibrium(&n0);
        let f = ode_rhs(&n0, &c(e[0], e[1]));
        assert!(f[0].abs() < 1e-8 && f[1].abs() < 1e-8, "{f:?}");
        let tol = 1e-8;
        let path = integrate(&n0, &c(e[0], e[1]), 5.0, tol).unwrap();
        for (_, x) in &path.samples {
            assert!((x.0[0] - e[0]).abs() < 10.0 * tol && (x.0[1] - e[1]).abs() < 10.0 * tol);
        }
    }

    #[test]
    fn tolerance_convergence() {
        let n0 = builtin_network("crn0").unwrap();
        let t = 1.0;
        let reference = integrate(&n0, &c(1.0, 1.0), t, 1e-12).unwrap().last().1 .0.clone();
        let dev = |tol: f64| {
            let x = integrate(&n0, &c(1.0, 1.0), t, tol).unwrap().last().1 .0.clone();
            (x[0] - reference[0]).abs().max((x[1] - reference[1]).abs())
        };
        let (d1, d2) = (dev(1e-6), dev(1e-8));
        assert!(d2 <= d1, "{d1} {d2}");
        assert!(d1 < 1e-4);
    }

    #[test]
    fn path_stays_nonnegative() {
        for name in ["crn0", "crn1", "crn2"] {
            let n = builtin_network(name).unwrap();
            for x0 in [c(0.0, 0.0), c(3.0, 0.0), c(0.0, 3.0), c(2.0, 2.0)] {
                let path = integrate(&n, &x0, 5.0, 1e-8).unwrap();
                let ts: Vec<f64> = path.samples.iter().map(|s| s.0).collect();
                assert!(ts.windows(2).all(|w| w[1] > w[0]));
                assert!(path.samples.iter().all(|(_, x)| x.0.iter().all(|&v| v >= 0.0)));
            }
        }
    }

    #[test]
    fn grid_examples() {
        let n0 = builtin_network("crn0").unwrap();
        let n1 = builtin_network("crn1").unwrap();
        let unit = Rect { x1: (0.0, 1.0), x2: (0.0, 1.0) };
        let g = vector_field_grid(&n0, unit, 2).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], GridPoint { x1: 0.0, x2: 0.0, f1: 1.0, f2: 1.0 });
        let r = Rect { x1: (0.5, 2.0), x2: (0.5, 2.0) };
        let g0 = vector_field_grid(&n0, r, 5).unwrap();
        let g1 = vector_field_grid(&n1, r, 5).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert_eq!(a.f1, b.f1);
            let expected = (1.0 - a.x1) * a.x2;
            assert!((b.f2 - a.f2 - expected).abs() < 1e-9);
        }
        let point = Rect { x1: (1.0, 1.0), x2: (1.0, 1.0) };
        let g = vector_field_grid(&n0, point, 2).unwrap();
        assert_eq!(g, vec![GridPoint { x1: 1.0, x2: 1.0, f1: -2.0, f2: -2.0 }]);
    }
}
