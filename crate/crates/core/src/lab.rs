//! Drift verification, interface curvature and flux, occupation measures,
//! return-time statistics, convergence rates and stability classification.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crn::{Network, State};
use crate::error::{Error, Result};
use crate::lyapunov::{LyapunovParams, Piece, PiecewiseLyapunov};
use crate::scaling::{classify_region, Point, RegionId};
use crate::ssa::{stream, Kernel};
use crate::stats::{bootstrap_ci, ols};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub lv: f64,
    pub phi_v: f64,
    pub margin: f64,
}

/// `LV(x)` with the exact generator on the assembled function.
pub fn drift_at(net: &Network, v: &PiecewiseLyapunov, x: &State) -> Drift {
    let vx = v.value(x);
    let lv = net.apply_generator(|y| v.value(y), x);
    let phi_v = v.phi(vx);
    Drift { lv, phi_v, margin: -lv - phi_v }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annulus {
    pub r_min: f64,
    pub r_max: f64,
    /// Stride away from interfaces; within `c*` of one every point is swept.
    pub stride: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub x: State,
    pub region: RegionId,
    pub lv: f64,
    pub phi_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub annulus: Annulus,
    pub points: usize,
    pub worst_margin: f64,
    pub worst_at: Option<State>,
    pub violations: Vec<Violation>,
}

impl DriftReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x1", "x2", "region", "LV", "phiV", "margin"])?;
        for v in &self.violations {
            let (a, b) = v.x.pair();
            out.write_record([
                a.to_string(),
                b.to_string(),
                v.region.to_string(),
                format!("{}", v.lv),
                format!("{}", v.phi_v),
                format!("{}", -v.lv - v.phi_v),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Whether `x` lies within distance `c` of an interface or a sector edge.
pub fn near_interface(v: &PiecewiseLyapunov, x: &State, c: f64) -> bool {
    let r = &v.params().region;
    let (a, b) = x.pair();
    let (x1, x2) = (a as f64, b as f64);
    let ray = |slope: f64| (x2 - slope * x1).abs() / (1.0 + slope * slope).sqrt() <= c;
    (x2 - 2.0).abs() <= c
        || (x2 - r.b0).abs() <= c
        || x1 <= c
        || ((x1 - r.b2).abs() <= c && x2 > r.b0)
        || v.sectors().edges.iter().any(|&e| ray(e))
}

pub fn sweep_points(v: &PiecewiseLyapunov, annulus: &Annulus, c_star: u32) -> Vec<State> {
    let hi = annulus.r_max.floor() as u64;
    let stride = annulus.stride.max(1);
    (0..=hi)
        .into_par_iter()
        .flat_map_iter(|a| {
            (0..=hi).filter_map(move |b| {
                let n = (a as f64).hypot(b as f64);
                if n < annulus.r_min || n > annulus.r_max {
                    return None;
                }
                let x = State::xy(a, b);
                let keep = (a % stride == 0 && b % stride == 0) || near_interface(v, &x, c_star as f64);
                keep.then_some(x)
            })
        })
        .collect()
}

/// Sweeps the annulus; points inside the compact ball are never violations.
pub fn verify_drift(net: &Network, v: &PiecewiseLyapunov, annulus: Annulus) -> Result<DriftReport> {
    let rho = v.params().region.rho;
    if annulus.r_min < rho || annulus.r_max < annulus.r_min {
        return Err(Error::InvalidArgument(format!(
            "annulus [{}, {}] must lie outside the ball of radius {rho}",
            annulus.r_min, annulus.r_max
        )));
    }
    let c_star = net.c_star();
    let points = sweep_points(v, &annulus, c_star);
    let results: Vec<(State, Drift)> = points.par_iter().map(|x| (x.clone(), drift_at(net, v, x))).collect();
    let mut worst_margin = f64::INFINITY;
    let mut worst_at = None;
    let mut violations = Vec::new();
    for (x, d) in &results {
        if d.margin < worst_margin {
            worst_margin = d.margin;
            worst_at = Some(x.clone());
        }
        if !(d.margin >= 0.0) {
            violations.push(Violation {
                x: x.clone(),
                region: classify_region(&v.params().region, x),
                lv: d.lv,
                phi_v: d.phi_v,
            });
        }
    }
    violations.sort_by(|a, b| a.x.0.cmp(&b.x.0));
    Ok(DriftReport { annulus, points: results.len(), worst_margin, worst_at, violations })
}


/// `<n, grad_out - grad_in>` with `n` pointing into the outer piece;
/// negative means the minimum of the two pieces governs near the interface.
pub fn scalar_curvature(normal: [f64; 2], grad_out: [f64; 2], grad_in: [f64; 2]) -> f64 {
    normal[0] * (grad_out[0] - grad_in[0]) + normal[1] * (grad_out[1] - grad_in[1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureSample {
    /// Lattice offset along the normal; 0 for the continuous curvature.
    pub alpha: i64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureReport {
    pub tag: RegionId,
    pub x: State,
    /// Unit orientation `c_perp`, pointing away from the lower piece.
    pub normal: [f64; 2],
    pub samples: Vec<CurvatureSample>,
}

impl CurvatureReport {
    pub fn worst(&self) -> f64 {
        self.samples.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv<W: Write>(reports: &[CurvatureReport], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["tag", "x1", "x2", "n1", "n2", "alpha", "value"])?;
        for r in reports {
            let (a, b) = r.x.pair();
            for s in &r.samples {
                out.write_record([
                    r.tag.to_string(),
                    a.to_string(),
                    b.to_string(),
                    format!("{}", r.normal[0]),
                    format!("{}", r.normal[1]),
                    s.alpha.to_string(),
                    format!("{}", s.value),
                ])?;
            }
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

fn gradient(v: &PiecewiseLyapunov, piece: Piece, p: Point) -> [f64; 2] {
    v.piece_gradient(piece, p).unwrap_or_else(|| {
        let h = 1e-6 * p[0].abs().max(p[1].abs()).max(1.0);
        let f = |q: Point| v.piece_value(piece, q);
        [
            (f([p[0] + h, p[1]]) - f([p[0] - h, p[1]])) / (2.0 * h),
            (f([p[0], p[1] + h]) - f([p[0], p[1] - h])) / (2.0 * h),
        ]
    })
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

/// Curvature of `v` at the interface `tag` through the lattice point `x`.
///
/// Rays (`T12`, `T23`) use closed-form gradients at the projection of `x`
/// onto the ray. Lines (`T00`, `T01`, `T34`) use the discrete curvature
/// `V_gov(y) - V_nbr(y)` at `y = x + a c_perp` for `0 < |a| <= c*`, where
/// `V_nbr` is the piece from the other side continued across.
pub fn interface_curvature(v: &PiecewiseLyapunov, tag: RegionId, x: &State, c_star: u32) -> Result<CurvatureReport> {
    let r = &v.params().region;
    let (a, b) = x.pair();
    let (x1, x2) = (a as f64, b as f64);
    let ray = |p: Point, normal: [f64; 2], inner: Piece, outer: Piece| {
        let n = unit(normal);
        let k = scalar_curvature(n, gradient(v, outer, p), gradient(v, inner, p));
        CurvatureReport { tag, x: x.clone(), normal: n, samples: vec![CurvatureSample { alpha: 0, value: k }] }
    };
    let line = |base: Point, normal: [f64; 2]| {
        let below = v.piece_at_point([base[0] - normal[0], base[1] - normal[1]]);
        let above = v.piece_at_point([base[0] + normal[0], base[1] + normal[1]]);
        let samples = (1..=c_star as i64)
            .flat_map(|k| [-k, k])
            .filter_map(|alpha| {
                let y = [base[0] + alpha as f64 * normal[0], base[1] + alpha as f64 * normal[1]];
                if y[0] < 0.0 || y[1] < 0.0 {
                    return None;
                }
                let gov = v.piece_at_point(y);
                let nbr = if alpha > 0 { below } else { above };
                Some(CurvatureSample { alpha, value: v.piece_value(gov, y) - v.piece_value(nbr, y) })
            })
            .collect();
        CurvatureReport { tag, x: x.clone(), normal, samples }
    };
    match tag {
        RegionId::T12 => {
            let n2 = v.sectors().count() - 1;
            Ok(ray([x1, x1 / r.b1], [-1.0, r.b1], Piece::T1, Piece::T2(n2)))
        }
        RegionId::T23 => {
            let outer = if x1 >= r.b2 { Piece::T3 } else { Piece::T4 };
            Ok(ray([x1, r.b1 * x1], [-r.b1, 1.0], Piece::T2(0), outer))
        }
        RegionId::T00 => Ok(line([x1, 2.0], [0.0, 1.0])),
        RegionId::T01 => Ok(line([x1, r.b0.round()], [0.0, 1.0])),
        RegionId::T34 => Ok(line([r.b2.round(), x2], [1.0, 0.0])),
        other => Err(Error::NotInterface(other.to_string())),
    }
}

/// `(F, J)` for a jump `p -> p + c` that leaves piece `vi` for piece `vj` at
/// fraction `beta`: `F = [Vj(p+c) - Vj(z)] - [Vi(p+c) - Vi(z)]` and the trace
/// mismatch `J = Vj(z) - Vi(z)` with `z = p + beta c`.
pub fn flux_value<A, B>(vi: A, vj: B, p: Point, c: [f64; 2], beta: f64) -> (f64, f64)
where
    A: Fn(Point) -> f64,
    B: Fn(Point) -> f64,
{
    let y = [p[0] + c[0], p[1] + c[1]];
    let z = [p[0] + beta * c[0], p[1] + beta * c[1]];
    ((vj(y) - vj(z)) - (vi(y) - vi(z)), vj(z) - vi(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluxVerdict {
    Negative,
    /// Positive but at most half of `h(x) / Lambda_r(x)`.
    Dominated,
    Positive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluxTerm {
    pub reaction: usize,
    pub from: Piece,
    pub to: Piece,
    pub beta: f64,
    pub rate: f64,
    /// `V(x + c) - V_i(x + c)`, the full correction to the in-piece drift.
    pub flux: f64,
    /// Part of `flux` from the gradient mismatch.
    pub gradient_part: f64,
    /// Part of `flux` from the value mismatch at the crossing point.
    pub trace_jump: f64,
    pub verdict: FluxVerdict,
}

/// Flux terms of every reaction whose jump from `x` changes piece; empty if
/// all jumps stay inside the piece of `x`.
pub fn flux_terms(net: &Network, v: &PiecewiseLyapunov, x: &State) -> Vec<FluxTerm> {
    let (a, b) = x.pair();
    let p = [a as f64, b as f64];
    let from = v.piece_at_point(p);
    let h = v.piece_rate(from, p);
    (0..net.len())
        .filter_map(|r| {
            let rate = net.propensity(r, x);
            let cv = net.reaction_vector(r);
            let c = [cv[0] as f64, cv[1] as f64];
            let to = v.piece_at_point([p[0] + c[0], p[1] + c[1]]);
            if rate == 0.0 || to == from {
                return None;
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if v.piece_at_point([p[0] + mid * c[0], p[1] + mid * c[1]]) == from {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let (gradient_part, trace_jump) = flux_value(|q| v.piece_value(from, q), |q| v.piece_value(to, q), p, c, hi);
            let flux = gradient_part + trace_jump;
            let verdict = if flux <= 0.0 {
                FluxVerdict::Negative
            } else if flux <= 0.5 * h / rate {
                FluxVerdict::Dominated
            } else {
                FluxVerdict::Positive
            };
            Some(FluxTerm { reaction: r, from, to, beta: hi, rate, flux, gradient_part, trace_jump, verdict })
        })
        .collect()
}

/// Generator applied to the piece of `x` continued across every interface.
pub fn in_piece_drift(net: &Network, v: &PiecewiseLyapunov, x: &State) -> f64 {
    let (a, b) = x.pair();
    let p = [a as f64, b as f64];
    let piece = v.piece_at_point(p);
    net.apply_generator(|y| {
        let (c, d) = y.pair();
        v.piece_value(piece, [c as f64, d as f64])
    }, x)
}

/// Holding-time weighted visits of one trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OccupationMeasure {
    pub weights: HashMap<State, f64>,
    pub total_time: f64,
}

impl OccupationMeasure {
    pub fn mass(&self, x: &State) -> f64 {
        self.weights.get(x).copied().unwrap_or(0.0) / self.total_time
    }

    /// Normalized mass of `{|x| <= r}`.
    pub fn mass_within(&self, r: f64) -> f64 {
        self.sorted().filter(|(x, _)| x.norm() <= r).map(|(_, w)| w).sum::<f64>() / self.total_time
    }

    /// `<mu, f>` for the normalized measure.
    pub fn expectation<F: Fn(&State) -> f64>(&self, f: F) -> f64 {
        self.sorted().map(|(x, w)| w * f(x)).sum::<f64>() / self.total_time
    }

    pub fn tv_distance(&self, other: &OccupationMeasure) -> f64 {
        let mut acc: f64 = self.sorted().map(|(x, _)| (self.mass(x) - other.mass(x)).abs()).sum();
        acc += other.sorted().filter(|(x, _)| !self.weights.contains_key(*x)).map(|(x, _)| other.mass(x)).sum::<f64>();
        0.5 * acc
    }

    /// Weights in state order, so that sums do not depend on hash order.
    fn sorted(&self) -> impl Iterator<Item = (&State, f64)> {
        let mut rows: Vec<_> = self.weights.iter().map(|(x, w)| (x, *w)).collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        rows.into_iter()
    }

    /// Rows `x1,..,time` sorted by state.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows: Vec<_> = self.sorted().collect();
        let dim = rows.first().map_or(2, |(x, _)| x.0.len());
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
        header.push("time".into());
        out.write_record(&header)?;
        for (x, t) in rows {
            let mut rec: Vec<String> = x.0.iter().map(u64::to_string).collect();
            rec.push(format!("{t}"));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

pub fn occupation_measure<R: Rng + ?Sized>(net: &Network, x0: &State, n_jumps: u64, rng: &mut R) -> Result<OccupationMeasure> {
    if n_jumps == 0 {
        return Err(Error::InvalidArgument("n_jumps must be at least 1".into()));
    }
    let mut mu = OccupationMeasure::default();
    let mut x = x0.clone();
    let mut kernel = Kernel::new(net);
    for _ in 0..n_jumps {
        let here = x.clone();
        let Some((dt, _)) = kernel.advance(&mut x, rng) else {
            return Err(Error::InvalidArgument(format!("state {here} is absorbing")));
        };
        *mu.weights.entry(here).or_insert(0.0) += dt;
        mu.total_time += dt;
    }
    Ok(mu)
}

/// `|<mu, Lf>|`, which vanishes for an invariant measure.
pub fn stationarity_defect<F: Fn(&State) -> f64>(net: &Network, mu: &OccupationMeasure, f: F) -> f64 {
    mu.expectation(|x| net.apply_generator(&f, x)).abs()
}

/// Cumulative `sum phi(V(x)) mu(x)` over states ordered by `V`, at the ten
/// deciles of the support; `mu` is the unnormalized holding time.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiMoment {
    pub cumulative: Vec<f64>,
}

impl PhiMoment {
    /// Share of the total contributed by the top decile of states.
    pub fn last_decile_increment(&self) -> f64 {
        let n = self.cumulative.len();
        let total = self.cumulative[n - 1];
        (total - self.cumulative[n - 2]) / total
    }
}

pub fn phi_moment<V, P>(mu: &OccupationMeasure, v: V, phi: P) -> PhiMoment
where
    V: Fn(&State) -> f64,
    P: Fn(f64) -> f64,
{
    // Ties in V are broken by state so the deciles are reproducible.
    let mut terms: Vec<(f64, f64)> = mu
        .sorted()
        .map(|(x, w)| {
            let vx = v(x);
            (vx, phi(vx) * w)
        })
        .collect();
    terms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = terms.len();
    let mut cum = Vec::with_capacity(10);
    let mut acc = 0.0;
    let mut taken = 0;
    for i in 1..=10 {
        let upto = (i * n).div_ceil(10);
        while taken < upto {
            acc += terms[taken].1;
            taken += 1;
        }
        cum.push(acc);
    }
    PhiMoment { cumulative: cum }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSample {
    /// Return time, `None` if censored at the jump budget.
    pub tau: Option<f64>,
    pub jumps: u64,
    /// Norm at each checkpoint of the budget ladder, NaN once returned.
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    pub slope: f64,
    pub ci: (f64, f64),
    pub window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnTimes {
    pub radius: f64,
    pub budgets: Vec<u64>,
    pub samples: Vec<ReturnSample>,
}

/// Log-log slope of the empirical survival of `tau` between the level 0.1 and
/// the larger of `10/n` and twice the censored share.
fn tail_slope(samples: &[ReturnSample]) -> Option<(f64, (f64, f64))> {
    let n = samples.len() as f64;
    let mut taus: Vec<f64> = samples.iter().filter_map(|s| s.tau).collect();
    taus.sort_by(f64::total_cmp);
    let censored = n - taus.len() as f64;
    let floor = (10.0 / n).max(2.0 * censored / n);
    if floor >= 0.1 {
        return None;
    }
    let survival = |t: f64| (n - taus.partition_point(|&x| x <= t) as f64) / n;
    let t_at = |s: f64| {
        let k = ((1.0 - s) * n).ceil() as usize;
        taus.get(k.min(taus.len().saturating_sub(1))).copied()
    };
    let (lo, hi) = (t_at(0.1)?, t_at(floor)?);
    if !(hi > 2.0 * lo && lo > 0.0) {
        return None;
    }
    let m = 12;
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..m)
        .map(|i| lo * (hi / lo).powf(i as f64 / (m - 1) as f64))
        .filter_map(|t| {
            let s = survival(t);
            (s > 0.0).then(|| (t.ln(), s.ln()))
        })
        .unzip();
    ols(&xs, &ys).map(|(slope, _)| (slope, (lo, hi)))
}

impl ReturnTimes {
    pub fn budget(&self) -> u64 {
        *self.budgets.last().expect("nonempty ladder")
    }

    pub fn censored_fraction(&self) -> f64 {
        self.samples.iter().filter(|s| s.tau.is_none()).count() as f64 / self.samples.len() as f64
    }

    pub fn mean_uncensored(&self) -> f64 {
        let t: Vec<f64> = self.samples.iter().filter_map(|s| s.tau).collect();
        t.iter().sum::<f64>() / t.len() as f64
    }

    /// `E[min(jumps, b)]`.
    pub fn truncated_mean_jumps(&self, b: u64) -> f64 {
        self.samples.iter().map(|s| s.jumps.min(b) as f64).sum::<f64>() / self.samples.len() as f64
    }

    pub fn tail_fit(&self, reps: usize, seed: u64) -> Option<TailFit> {
        let (slope, window) = tail_slope(&self.samples)?;
        let mut rng = stream(seed, u64::MAX);
        let ci = bootstrap_ci(&self.samples, reps, 0.95, &mut rng, |s| tail_slope(s).map(|t| t.0))?;
        Some(TailFit { slope, ci, window })
    }

    /// Rows `index,tau,censored,jumps`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "tau", "censored", "jumps"])?;
        for (i, s) in self.samples.iter().enumerate() {
            let tau = s.tau.map_or(String::new(), |t| format!("{t}"));
            out.write_record([i.to_string(), tau, (s.tau.is_none() as u8).to_string(), s.jumps.to_string()])?;
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

fn return_run(net: &Network, radius: f64, x0: &State, ladder: &[u64], seed: u64, index: u64) -> ReturnSample {
    let mut rng = stream(seed, index);
    let mut kernel = Kernel::new(net);
    let mut x = x0.clone();
    let (mut t, mut jumps) = (0.0, 0u64);
    let mut norms = vec![f64::NAN; ladder.len()];
    let budget = *ladder.last().expect("nonempty ladder");
    let mut next = 0;
    while jumps < budget {
        let Some((dt, _)) = kernel.advance(&mut x, &mut rng) else { break };
        t += dt;
        jumps += 1;
        if x.norm() <= radius {
            return ReturnSample { tau: Some(t), jumps, norms };
        }
        while next < ladder.len() && jumps == ladder[next] {
            norms[next] = x.norm();
            next += 1;
        }
    }
    ReturnSample { tau: None, jumps, norms }
}

/// Return times to `{|x| <= radius}` from `x0`, censored after the last
/// budget of the increasing jump ladder.
pub fn return_times(net: &Network, radius: f64, x0: &State, n: usize, ladder: &[u64], seed: u64) -> Result<ReturnTimes> {
    if x0.norm() <= radius {
        return Err(Error::InvalidArgument(format!("{x0} lies inside the target ball of radius {radius}")));
    }
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("budget ladder must be nonempty and increasing".into()));
    }
    let samples = (0..n as u64).into_par_iter().map(|i| return_run(net, radius, x0, ladder, seed, i)).collect();
    Ok(ReturnTimes { radius, budgets: ladder.to_vec(), samples })
}

pub fn return_time_stats(net: &Network, radius: f64, x0: &State, n: usize, budget: u64, seed: u64) -> Result<ReturnTimes> {
    return_times(net, radius, x0, n, &[budget], seed)
}

/// `phi(s) = c s^gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerPhi {
    pub c: f64,
    pub gamma: f64,
}

impl PowerPhi {
    pub fn new(c: f64, gamma: f64) -> Result<Self> {
        if !(c > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("phi needs c > 0, got c = {c}, gamma = {gamma}")));
        }
        Ok(PowerPhi { c, gamma })
    }

    pub fn from_params(p: &LyapunovParams) -> Self {
        PowerPhi { c: p.ch, gamma: p.exps.gamma_star() }
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.c * s.powf(self.gamma)
    }

    /// `H(infinity)`, finite only for `gamma > 1`.
    pub fn h_limit(&self) -> f64 {
        if self.gamma > 1.0 {
            1.0 / (self.c * (self.gamma - 1.0))
        } else {
            f64::INFINITY
        }
    }
}

/// `H(u) = int_1^u ds / phi(s)`.
pub fn h_phi(u: f64, phi: PowerPhi) -> Result<f64> {
    if !(u >= 1.0) {
        return Err(Error::InvalidArgument(format!("H_phi needs u >= 1, got {u}")));
    }
    let k = 1.0 - phi.gamma;
    Ok(if k.abs() < 1e-12 { u.ln() / phi.c } else { (u.powf(k) - 1.0) / (phi.c * k) })
}

pub fn h_phi_inverse(t: f64, phi: PowerPhi) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("H_phi inverse needs t >= 0, got {t}")));
    }
    if t >= phi.h_limit() {
        return Err(Error::NonIntegrable(phi.h_limit()));
    }
    let k = 1.0 - phi.gamma;
    Ok(if k.abs() < 1e-12 { (phi.c * t).exp() } else { (1.0 + phi.c * k * t).powf(1.0 / k) })
}

/// First time two independent copies from `x` and `y` occupy the same state,
/// or `None` if that does not happen by `t_max` (or within `max_jumps`).
pub fn coupling_time<R: Rng + ?Sized>(net: &Network, x: &State, y: &State, t_max: f64, max_jumps: u64, rx: &mut R, ry: &mut R) -> Option<f64> {
    if x == y {
        return Some(0.0);
    }
    let (mut a, mut b) = (x.clone(), y.clone());
    let (mut ka, mut kb) = (Kernel::new(net), Kernel::new(net));
    let next = |k: &mut Kernel, s: &State, r: &mut R, now: f64| {
        let total = k.load(s);
        if total > 0.0 {
            now + r.sample::<f64, _>(Exp1) / total
        } else {
            f64::INFINITY
        }
    };
    let mut na = next(&mut ka, &a, rx, 0.0);
    let mut nb = next(&mut kb, &b, ry, 0.0);
    for _ in 0..max_jumps {
        let now = na.min(nb);
        if now > t_max {
            return None;
        }
        if na <= nb {
            ka.jump_loaded(&mut a, rx);
            na = next(&mut ka, &a, rx, now);
        } else {
            kb.jump_loaded(&mut b, ry);
            nb = next(&mut kb, &b, ry, now);
        }
        if a == b {
            return Some(now);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvEstimate {
    pub t: f64,
    pub n: usize,
    pub uncoupled: usize,
    pub estimate: f64,
    /// 95% Wilson interval.
    pub ci: (f64, f64),
}

impl TvEstimate {
    fn from_times(times: &[Option<f64>], t: f64) -> Self {
        let n = times.len();
        let uncoupled = times.iter().filter(|c| !c.is_some_and(|s| s <= t)).count();
        let p = uncoupled as f64 / n as f64;
        let z = 1.96;
        let nf = n as f64;
        let centre = (p + z * z / (2.0 * nf)) / (1.0 + z * z / nf);
        let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / (1.0 + z * z / nf);
        TvEstimate { t, n, uncoupled, estimate: p, ci: ((centre - half).max(0.0), (centre + half).min(1.0)) }
    }
}

/// Coupling times of `n` independent attempts, computed once up to `t_max`.
pub fn coupling_times(net: &Network, x: &State, y: &State, t_max: f64, n: usize, seed: u64) -> Vec<Option<f64>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (mut rx, mut ry) = (stream(seed, 2 * i), stream(seed, 2 * i + 1));
            coupling_time(net, x, y, t_max, 50_000_000, &mut rx, &mut ry)
        })
        .collect()
}

/// Uncoupled fraction at each `t`, an upper estimate of
/// `TV(P_t(x, .), P_t(y, .))`.
pub fn tv_coupling_estimates(net: &Network, x: &State, y: &State, ts: &[f64], n: usize, seed: u64) -> Result<Vec<TvEstimate>> {
    if ts.iter().any(|&t| !(t > 0.0)) || n == 0 {
        return Err(Error::InvalidArgument("coupling needs t > 0 and n >= 1".into()));
    }
    let t_max = ts.iter().copied().fold(0.0, f64::max);
    let times = coupling_times(net, x, y, t_max, n, seed);
    Ok(ts.iter().map(|&t| TvEstimate::from_times(&times, t)).collect())
}

pub fn tv_coupling_estimate(net: &Network, x: &State, y: &State, t: f64, n: usize, seed: u64) -> Result<TvEstimate> {
    Ok(tv_coupling_estimates(net, x, y, &[t], n, seed)?.remove(0))
}

/// Monte-Carlo `E[f(X_dt) - f(x)] / dt` as `(mean, stderr)`.
pub fn generator_mc<F: Fn(&State) -> f64 + Sync>(net: &Network, f: F, x: &State, dt: f64, n: usize, seed: u64) -> (f64, f64) {
    let fx = f(x);
    let vals: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let mut k = Kernel::new(net);
            let mut y = x.clone();
            let mut t = 0.0;
            loop {
                let total = k.load(&y);
                if total <= 0.0 {
                    break;
                }
                t += rng.sample::<f64, _>(Exp1) / total;
                if t > dt {
                    break;
                }
                k.jump_loaded(&mut y, &mut rng);
            }
            (f(&y) - fx) / dt
        })
        .collect();
    crate::stats::mean_stderr(&vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    PositiveRecurrent,
    NullRecurrent,
    Transient,
    Inconclusive,
}

impl Stability {
    pub fn name(self) -> &'static str {
        match self {
            Stability::PositiveRecurrent => "positive_recurrent",
            Stability::NullRecurrent => "null_recurrent",
            Stability::Transient => "transient",
            Stability::Inconclusive => "inconclusive",
        }
    }
}

impl fmt::Display for Stability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Budgets and thresholds for [`classify_stability`]. Budgets are in jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub x0: (u64, u64),
    pub radius: f64,
    pub pilot_samples: usize,
    pub pilot_budgets: Vec<u64>,
    pub samples: usize,
    pub budgets: Vec<u64>,
    pub seed: u64,
    pub censored_threshold: f64,
    pub slope_threshold: f64,
    pub growth_threshold: f64,
    pub bootstrap: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            x0: (100, 0),
            radius: 50.0,
            pilot_samples: 200,
            pilot_budgets: vec![12_500, 25_000, 50_000, 100_000],
            samples: 10_000,
            budgets: (0..11).map(|k| 1000u64 << k).collect(),
            seed: 0,
            censored_threshold: 0.05,
            slope_threshold: -1.5,
            growth_threshold: 0.2,
            bootstrap: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub verdict: Stability,
    pub censored_fraction: f64,
    pub censored_stderr: f64,
    /// Mean norm of still-running pilot paths at each pilot budget.
    pub distances: Vec<f64>,
    pub truncated_means: Vec<f64>,
    /// Late over early increments of the truncated mean per doubling.
    pub growth: f64,
    pub tail: Option<TailFit>,
}

impl Classification {
    pub fn report(&self) -> String {
        let mut s = format!("verdict: {}\n", self.verdict);
        s += &format!("censored_fraction: {:.6} +- {:.6}\n", self.censored_fraction, self.censored_stderr);
        s += &format!("pilot_distances: {:?}\n", self.distances);
        s += &format!("truncated_means: {:?}\n", self.truncated_means);
        s += &format!("growth: {:.4}\n", self.growth);
        match self.tail {
            Some(t) => s += &format!("tail_slope: {:.4} ci [{:.4}, {:.4}] window [{:.1}, {:.1}]\n", t.slope, t.ci.0, t.ci.1, t.window.0, t.window.1),
            None => s += "tail_slope: none\n",
        }
        s
    }
}

/// Ratio of the later to the earlier half of the truncated-mean increments;
/// near 1 for a `1/t` survival tail and near 0 for a finite mean.
fn increment_ratio(means: &[f64]) -> f64 {
    let inc: Vec<f64> = means.windows(2).map(|w| w[1] - w[0]).collect();
    let half = inc.len() / 2;
    let early: f64 = inc[..half].iter().sum::<f64>() / half.max(1) as f64;
    let late: f64 = inc[half..].iter().sum::<f64>() / (inc.len() - half).max(1) as f64;
    if early <= 1e-9 * means[0].abs().max(1.0) {
        0.0
    } else {
        late / early
    }
}

/// Transient if the pilot's censored share exceeds the threshold by 4 sigma
/// while still-running paths move away; null recurrent if the tail-slope CI
/// lies above the slope threshold and the truncated mean keeps growing;
/// positive recurrent if returns are certain and the truncated mean settles.
pub fn classify_stability(net: &Network, cfg: &ClassifyConfig) -> Result<Classification> {
    let x0 = State::xy(cfg.x0.0, cfg.x0.1);
    let pilot = return_times(net, cfg.radius, &x0, cfg.pilot_samples, &cfg.pilot_budgets, cfg.seed)?;
    let p = pilot.censored_fraction();
    let sigma = (p * (1.0 - p) / cfg.pilot_samples as f64).sqrt();
    let running: Vec<&ReturnSample> = pilot.samples.iter().filter(|s| s.tau.is_none()).collect();
    let distances: Vec<f64> = (0..cfg.pilot_budgets.len())
        .map(|k| if running.is_empty() { 0.0 } else { running.iter().map(|s| s.norms[k]).sum::<f64>() / running.len() as f64 })
        .collect();
    let moving_away = !running.is_empty() && distances.windows(2).all(|w| w[1] > w[0]);
    if p - 4.0 * sigma > cfg.censored_threshold && moving_away {
        return Ok(Classification {
            verdict: Stability::Transient,
            censored_fraction: p,
            censored_stderr: sigma,
            distances,
            truncated_means: vec![],
            growth: f64::NAN,
            tail: None,
        });
    }
    let main = return_times(net, cfg.radius, &x0, cfg.samples, &cfg.budgets, cfg.seed.wrapping_add(1))?;
    let pm = main.censored_fraction();
    let sm = (pm * (1.0 - pm) / cfg.samples as f64).sqrt();
    let truncated_means: Vec<f64> = cfg.budgets.iter().map(|&b| main.truncated_mean_jumps(b)).collect();
    let growth = increment_ratio(&truncated_means);
    let tail = main.tail_fit(cfg.bootstrap, cfg.seed);
    let heavy = tail.is_some_and(|t| t.ci.0 > cfg.slope_threshold);
    let verdict = if heavy && growth > cfg.growth_threshold {
        Stability::NullRecurrent
    } else if pm <= cfg.censored_threshold && growth <= cfg.growth_threshold {
        Stability::PositiveRecurrent
    } else {
        Stability::Inconclusive
    };
    Ok(Classification { verdict, censored_fraction: pm, censored_stderr: sm, distances, truncated_means, growth, tail })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crn::builtin_network;
    use crate::lyapunov::{assemble, select_parameters, Tuning, Variant};
    use crate::scaling::RegionParams;

    fn accepted(v: Variant) -> PiecewiseLyapunov {
        let sel = select_parameters(0.5, 0.1, v, RegionParams::default(), &Tuning::default()).unwrap();
        assemble(sel.params).unwrap()
    }

    #[test]
    fn toy_curvatures() {
        // x1^2 and 4 x1 - 4 glued at x1 = 2 share the gradient; 3 x1 - 2 does not.
        let n = [1.0, 0.0];
        assert_eq!(scalar_curvature(n, [4.0, 0.0], [2.0 * 2.0, 0.0]), 0.0);
        assert_eq!(scalar_curvature(n, [3.0, 0.0], [2.0 * 2.0, 0.0]), -1.0);
    }

    #[test]
    fn toy_flux_vanishes_for_c1_glue() {
        let vi = |p: Point| p[0] * p[0];
        let vj = |p: Point| 4.0 * p[0] - 4.0;
        let (f, j) = flux_value(vi, vj, [2.0, 0.0], [0.0, 1.0], 0.0);
        assert_eq!((f, j), (0.0, 0.0));
        // Crossing at x1 = 2 from x1 = 1.5 with a unit jump.
        let (f, j) = flux_value(vi, vj, [1.5, 0.0], [1.0, 0.0], 0.5);
        assert_eq!(j, 0.0);
        assert!((f - ((4.0 * 2.5 - 4.0 - 4.0) - (6.25 - 4.0))).abs() < 1e-12);
    }

    #[test]
    fn level_zero_drift_crn1() {
        let net = builtin_network("crn1").unwrap();
        let v = accepted(Variant::Crn1);
        let p = v.params();
        for x1 in [300u64, 1000] {
            let d = drift_at(&net, &v, &State::xy(x1, 0));
            let oracle = -p.h0 * (x1 as f64).powf(p.exps.delta0p);
            assert!((d.lv - oracle).abs() < 1e-6 * oracle.abs(), "{} vs {oracle}", d.lv);
        }
    }

    #[test]
    fn deep_t3_margin() {
        let net = builtin_network("crn0").unwrap();
        let v = accepted(Variant::Crn0);
        assert!(drift_at(&net, &v, &State::xy(10_000, 200_000)).margin > 0.0);
    }

    #[test]
    fn broken_h2_shows_violations() {
        let net = builtin_network("crn0").unwrap();
        let mut p = accepted(Variant::Crn0).params().clone();
        p.h2 *= 100.0;
        let v = assemble(p).unwrap();
        let rep = verify_drift(&net, &v, Annulus { r_min: 200.0, r_max: 600.0, stride: 7 }).unwrap();
        assert!(!rep.violations.is_empty());
        assert!(rep.worst_margin < 0.0);
    }

    #[test]
    fn annulus_must_avoid_ball() {
        let net = builtin_network("crn0").unwrap();
        let v = accepted(Variant::Crn0);
        assert!(verify_drift(&net, &v, Annulus { r_min: 100.0, r_max: 300.0, stride: 7 }).is_err());
    }

    #[test]
    fn curvature_rejects_non_interfaces() {
        let v = accepted(Variant::Crn0);
        assert!(matches!(interface_curvature(&v, RegionId::T3, &State::xy(100, 5000), 7), Err(Error::NotInterface(_))));
    }

    #[test]
    fn interior_point_has_no_flux() {
        let net = builtin_network("crn0").unwrap();
        let v = accepted(Variant::Crn0);
        assert!(flux_terms(&net, &v, &State::xy(600, 2000)).is_empty());
    }

    #[test]
    fn single_jump_occupation() {
        let net = builtin_network("crn0").unwrap();
        let mu = occupation_measure(&net, &State::xy(0, 0), 1, &mut stream(1, 0)).unwrap();
        assert_eq!(mu.weights.len(), 1);
        assert!((mu.mass(&State::xy(0, 0)) - 1.0).abs() < 1e-15);
        assert!(occupation_measure(&net, &State::xy(0, 0), 0, &mut stream(1, 0)).is_err());
    }

    #[test]
    fn point_mass_moment() {
        let mut mu = OccupationMeasure::default();
        mu.weights.insert(State::xy(3, 4), 2.5);
        mu.total_time = 2.5;
        let m = phi_moment(&mu, |_| 7.0, |v| 0.1 * v);
        assert!(m.cumulative.iter().all(|&c| (c - 0.7 * 2.5).abs() < 1e-12));
    }

    #[test]
    fn h_phi_closed_forms() {
        let lin = PowerPhi::new(1.0, 1.0).unwrap();
        assert!((h_phi(std::f64::consts::E, lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((h_phi_inverse(2.0, lin).unwrap() - 2f64.exp()).abs() < 1e-12);
        let inv = PowerPhi::new(0.3, -1.0).unwrap();
        assert!((h_phi(3.0, inv).unwrap() - 8.0 / 0.6).abs() < 1e-12);
        assert!((h_phi_inverse(5.0, inv).unwrap() - (1.0f64 + 3.0).sqrt()).abs() < 1e-12);
        let root = PowerPhi::new(1.0, 0.5).unwrap();
        assert!((h_phi(9.0, root).unwrap() - 4.0).abs() < 1e-12);
        let steep = PowerPhi::new(1.0, 2.0).unwrap();
        assert!(matches!(h_phi_inverse(1.5, steep), Err(Error::NonIntegrable(_))));
        assert!(h_phi(0.5, lin).is_err());
    }

    #[test]
    fn coupling_from_equal_states() {
        let net = builtin_network("crn0").unwrap();
        let e = tv_coupling_estimate(&net, &State::xy(3, 3), &State::xy(3, 3), 1.0, 50, 0).unwrap();
        assert_eq!(e.estimate, 0.0);
    }

    #[test]
    fn return_times_reject_start_inside() {
        let net = builtin_network("crn0").unwrap();
        assert!(return_time_stats(&net, 50.0, &State::xy(3, 3), 10, 100, 0).is_err());
    }
}
