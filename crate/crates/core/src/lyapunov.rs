//! Piecewise Lyapunov function for crn0 and crn1: exponents, region pieces,
//! the subdivided transport piece, parameter selection and a global evaluator.
//!
//! Pieces are closed forms on real points so that traces, gradients and
//! flux terms can be evaluated off the lattice.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::crn::{builtin_network, Network, State};
use crate::error::{Error, Result};
use crate::scaling::{classify_region, Point, RegionId, RegionParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Crn0,
    Crn1,
}

impl Variant {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "crn0" => Ok(Variant::Crn0),
            "crn1" => Ok(Variant::Crn1),
            other => Err(Error::InvalidArgument(format!("no Lyapunov construction for `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentTable {
    pub variant: Variant,
    pub delta0: f64,
    pub eps: f64,
    pub delta0p: f64,
    pub delta0pp: f64,
    pub delta1p: f64,
    pub delta1pp: f64,
    pub delta2p: f64,
    pub delta3p: f64,
    pub delta3pp: f64,
    pub delta4: f64,
    pub delta4pp: f64,
    pub delta4p: f64,
    pub delta4star: f64,
}

impl ExponentTable {
    /// Common degree of the transport pieces along the diagonal.
    pub fn transport_degree(&self) -> f64 {
        self.delta2p - 6.0
    }

    /// Lower bound that `delta4p` must exceed.
    pub fn delta4p_bound(c_star: u32) -> impl Fn(f64) -> f64 {
        move |delta3p| (c_star as f64 * (delta3p - 4.0) + 4.0).max(5.0)
    }

    /// `(h exponent, V exponent)` of every piece along its canonical ray.
    pub fn ratio_table(&self) -> [(RegionId, f64, f64); 6] {
        [
            (RegionId::T4, self.delta4pp, self.delta4),
            (RegionId::T3, self.delta3p + self.delta3pp, self.delta3p - 4.0 + self.delta3pp - 2.0),
            (RegionId::T2, self.delta2p, self.delta2p - 6.0),
            (RegionId::T1, self.delta1p + self.delta1pp, self.delta1p - 5.0 + self.delta1pp - 1.0),
            (RegionId::T0prime, self.delta0pp, self.delta0pp - 5.0),
            (RegionId::T0, self.delta0p, self.delta0),
        ]
    }

    /// Smallest ratio of rate to value exponents, capped at 1.
    pub fn gamma_star(&self) -> f64 {
        self.ratio_table().iter().map(|(_, h, v)| h / v).fold(1.0, f64::min)
    }
}

pub fn derive_exponents(delta0: f64, eps: f64, variant: Variant, c_star: u32) -> Result<ExponentTable> {
    if !(delta0 > 0.0 && delta0 < 1.0) || !(eps > 0.0 && eps < delta0 / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < delta0 < 1 and 0 < eps < delta0/2, got delta0 = {delta0}, eps = {eps}"
        )));
    }
    let delta3p = 4.0 + eps;
    let delta4 = delta0 - 2.0 * eps;
    Ok(ExponentTable {
        variant,
        delta0,
        eps,
        delta0p: match variant {
            Variant::Crn0 => delta0,
            Variant::Crn1 => delta0 - 1.0,
        },
        delta0pp: 5.0 + delta0,
        delta1p: 5.0 + delta0,
        delta1pp: 1.0 - eps,
        delta2p: 6.0 + delta0 - eps,
        delta3p,
        delta3pp: 2.0 + delta0 - 2.0 * eps,
        delta4,
        delta4pp: delta4 + 2.0,
        delta4p: ExponentTable::delta4p_bound(c_star)(delta3p) + 0.5,
        delta4star: delta4,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovParams {
    pub exps: ExponentTable,
    pub region: RegionParams,
    pub h0: f64,
    pub h0p: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub h4: f64,
    /// `m0(k)` for levels `k = 1..=ceil(b0)`; level 0 reuses `m0(1)`.
    pub m0_levels: Vec<f64>,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub m4star: f64,
    /// First index of the T4 series; below it the series is flat.
    pub g_start: u64,
    /// Lower-order T4 term `m4* kappa4 min(x1, xc4) x2^{d4 - 1}`.
    pub kappa4: f64,
    pub xc4: f64,
    pub eta2star: f64,
    pub n2: usize,
    pub ch: f64,
}

impl LyapunovParams {
    pub fn m0(&self, level: usize) -> f64 {
        self.m0_levels[level.max(1) - 1]
    }

    /// Rescaling of `h2` inherited from the transport integral.
    pub fn f_factor(&self) -> f64 {
        let b1 = self.region.b1;
        (5.0 + 1.0 / b1) / (1.0 - b1.powi(-2))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("parameters serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: LyapunovParams = toml::from_str(text).map_err(|e| Error::Syntax {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("parameter invariant violated: {what}")));
        let positive = [self.h0, self.h0p, self.h1, self.h2, self.h3, self.h4, self.m1, self.m2, self.m3, self.m4, self.m4star];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("h and m constants must be positive");
        }
        if self.m0_levels.is_empty() || self.m0_levels.windows(2).any(|w| !(w[1] < w[0])) || self.m0_levels.iter().any(|m| !(*m > 0.0)) {
            return bad("m0 levels must be positive and strictly decreasing");
        }
        let d4 = self.exps.delta4;
        if !(self.kappa4 > d4 / 5.0 && self.kappa4 < 1.5 * d4) || !(self.xc4 >= 0.0) {
            return bad("kappa4 in (d4/5, 3 d4/2) and xc4 >= 0");
        }
        if !(self.eta2star > 1.0 && self.eta2star < 2.0) || !(self.ch > 0.0 && self.ch < 1.0) {
            return bad("eta2star in (1,2) and ch in (0,1)");
        }
        let e = &self.exps;
        let h3 = (e.delta3p - 4.0) * self.m4 * self.region.b2.powf(-(e.delta3p - 4.0));
        let h1 = self.m2 * (1.0 - e.delta1pp) * self.region.b1.powf(e.delta1pp - 1.0);
        if (h3 - self.h3).abs() > 1e-9 * h3 || (h1 - self.h1).abs() > 1e-9 * h1 {
            return bad("h3 and h1 must follow the homogeneity relations");
        }
        let first = match e.variant {
            Variant::Crn0 => self.m0(2) + self.h0 < self.m0(1),
            Variant::Crn1 => self.m0(2) < self.m0(1) * (1.0 - e.delta0) - self.h0,
        };
        if !first {
            return bad("first-level check on m0(1), m0(2), h0");
        }
        Ok(())
    }
}

/// Regions on which a closed-form piece lives; `T2(j)` is sector `j` of the
/// subdivided transport region, 0 adjacent to the upper ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Piece {
    T0,
    T0prime,
    T1,
    T2(usize),
    T3,
    T4,
}

impl Piece {
    pub fn region(self) -> RegionId {
        match self {
            Piece::T0 => RegionId::T0,
            Piece::T0prime => RegionId::T0prime,
            Piece::T1 => RegionId::T1,
            Piece::T2(_) => RegionId::T2,
            Piece::T3 => RegionId::T3,
            Piece::T4 => RegionId::T4,
        }
    }
}

/// `12 * int (1 + 5v)^5 / v^2 dv`.
pub fn p_poly(v: f64) -> f64 {
    -12.0 / v + 3000.0 * v + 7500.0 * v * v + 12500.0 * v.powi(3) + 9375.0 * v.powi(4) + 300.0 * v.ln()
}

fn p_prime(v: f64) -> f64 {
    12.0 * (1.0 + 5.0 * v).powi(5) / (v * v)
}

/// `binom(k, 5) 5!`.
pub fn b5(k: u64) -> f64 {
    if k < 5 {
        0.0
    } else {
        (0..5).map(|i| (k - i) as f64).product()
    }
}

/// Equal-angle sectors of the transport wedge with their cumulative weighted
/// integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct Sectors {
    /// Sector edges as slopes `x2/x1`, from `b1` down to `1/b1`.
    pub edges: Vec<f64>,
    cum: Vec<f64>,
    eta: f64,
}

impl Sectors {
    pub fn new(b1: f64, n2: usize, eta: f64) -> Self {
        let (hi, lo) = (b1.atan(), (1.0 / b1).atan());
        let width = (hi - lo) / (n2 + 1) as f64;
        let mut edges: Vec<f64> = (0..=n2 + 1).map(|k| (hi - k as f64 * width).tan()).collect();
        edges[0] = b1;
        edges[n2 + 1] = 1.0 / b1;
        let mut cum = vec![0.0];
        for k in 0..=n2 {
            cum.push(cum[k] + eta.powi(k as i32) * (p_poly(edges[k]) - p_poly(edges[k + 1])));
        }
        Sectors { edges, cum, eta }
    }

    pub fn count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn index(&self, u: f64) -> usize {
        let n = self.count();
        (0..n).find(|&j| u >= self.edges[j + 1]).unwrap_or(n - 1)
    }

    /// Weighted integral from `u` up to `b1`, extended linearly in `P` past
    /// both ends.
    pub fn w(&self, u: f64) -> f64 {
        let j = self.index(u);
        self.cum[j] + self.eta.powi(j as i32) * (p_poly(self.edges[j]) - p_poly(u))
    }

    pub fn w_prime(&self, u: f64) -> f64 {
        -self.eta.powi(self.index(u) as i32) * p_prime(u)
    }

    pub fn total(&self) -> f64 {
        self.cum[self.count()]
    }
}

fn g_term(k: u64, e: &ExponentTable, start: u64) -> f64 {
    if k < start {
        0.0
    } else {
        (k as f64).powf(e.delta4p) / (e.delta4 + b5(k))
    }
}

/// Prefix sums `G(k) = sum_{start<=i<=k} i^{d4'} / (d4 + B5(i))`.
fn g_table(e: &ExponentTable, start: u64, n: u64) -> Vec<f64> {
    let mut t = vec![0.0];
    for k in 1..=n {
        t.push(t[(k - 1) as usize] + g_term(k, e, start));
    }
    t
}

/// `S(x2) = sum_{k=x2}^{b0-1} 1/binom(k,2)` in telescoped form, continued to
/// reals; linear below 2.
pub fn s_sum(x2: f64, b0: f64) -> f64 {
    if x2 >= 2.0 {
        2.0 * (1.0 / (x2 - 1.0) - 1.0 / (b0 - 1.0))
    } else {
        2.0 * (1.0 - 1.0 / (b0 - 1.0)) + 2.0 * (2.0 - x2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLyapunov {
    params: LyapunovParams,
    sectors: Sectors,
    g: Vec<f64>,
}

fn pos_pow(x: f64, a: f64) -> f64 {
    if x <= 0.0 {
        if a > 0.0 {
            0.0
        } else if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        x.powf(a)
    }
}

impl PiecewiseLyapunov {
    pub fn params(&self) -> &LyapunovParams {
        &self.params
    }

    pub fn sectors(&self) -> &Sectors {
        &self.sectors
    }

    fn g_at(&self, x1: f64) -> f64 {
        let x1 = x1.max(0.0);
        let k = x1.floor() as u64;
        let gk = |k: u64| -> f64 {
            match self.g.get(k as usize) {
                Some(v) => *v,
                None => {
                    let last = self.g.len() as u64 - 1;
                    let e = &self.params.exps;
                    self.g[last as usize] + ((last + 1)..=k).map(|i| g_term(i, e, self.params.g_start)).sum::<f64>()
                }
            }
        };
        let frac = x1 - k as f64;
        if frac == 0.0 {
            gk(k)
        } else {
            gk(k) + frac * (gk(k + 1) - gk(k))
        }
    }

    /// Series part `G(x1)` of the T4 piece on integers.
    pub fn g_sum(&self, x1: u64) -> f64 {
        self.g_at(x1 as f64)
    }

    /// Piece that governs a real point.
    pub fn piece_at_point(&self, p: Point) -> Piece {
        let r = &self.params.region;
        if p[1] < 2.0 {
            return Piece::T0;
        }
        if p[1] <= r.b0 {
            return Piece::T0prime;
        }
        if p[0] <= 0.0 {
            return Piece::T4;
        }
        let u = p[1] / p[0];
        if u < 1.0 / r.b1 {
            Piece::T1
        } else if u <= r.b1 {
            Piece::T2(self.sectors.index(u))
        } else if p[0] >= r.b2 {
            Piece::T3
        } else {
            Piece::T4
        }
    }

    pub fn piece_at(&self, x: &State) -> Piece {
        let (a, b) = x.pair();
        self.piece_at_point([a as f64, b as f64])
    }

    /// Closed form of `piece`, continued to any point where it is finite.
    pub fn piece_value(&self, piece: Piece, p: Point) -> f64 {
        let q = &self.params;
        let e = &q.exps;
        let [x1, x2] = p;
        match piece {
            Piece::T0 => {
                let m = q.m0(1);
                let level0 = m * (x1 + 1.0).powf(e.delta0) + q.h0 * x1.max(1.0).powf(e.delta0p);
                let level1 = m * x1.max(1.0).powf(e.delta0);
                if x2 <= 1.0 {
                    (1.0 - x2) * level0 + x2 * level1
                } else {
                    level1
                }
            }
            Piece::T0prime => x1.max(1.0).powf(e.delta0) * (q.m1 + q.h0p * s_sum(x2, q.region.b0)),
            Piece::T1 => q.h1 / (1.0 - e.delta1pp) * pos_pow(x1, e.delta1p - 5.0) * pos_pow(x2, e.delta1pp - 1.0),
            Piece::T2(_) => {
                let s = x1 + 5.0 * x2;
                let c2 = q.h2 * q.f_factor() / 12.0;
                pos_pow(s, e.transport_degree()) * (q.m3 + c2 * self.sectors.w(x2 / x1))
            }
            Piece::T3 => {
                q.h3 / (e.delta3p - 4.0) * pos_pow(x1, e.delta3p - 4.0) * pos_pow(x2, e.delta3pp - 2.0)
            }
            Piece::T4 => {
                let low = if x2 > 0.0 { q.kappa4 * x1.clamp(0.0, q.xc4) / x2 } else { 0.0 };
                pos_pow(x2, e.delta4) * (q.m4star * (1.0 + low) + q.h4 * self.g_at(x1))
            }
        }
    }

    /// Gradient of the transport pieces.
    pub fn piece_gradient(&self, piece: Piece, p: Point) -> Option<[f64; 2]> {
        let q = &self.params;
        let e = &q.exps;
        let [x1, x2] = p;
        let monomial = |v: f64, a: f64, b: f64| [v * a / x1, v * b / x2];
        match piece {
            Piece::T1 => Some(monomial(self.piece_value(piece, p), e.delta1p - 5.0, e.delta1pp - 1.0)),
            Piece::T3 => Some(monomial(self.piece_value(piece, p), e.delta3p - 4.0, e.delta3pp - 2.0)),
            Piece::T2(_) => {
                let d = e.transport_degree();
                let s = x1 + 5.0 * x2;
                let u = x2 / x1;
                let c2 = q.h2 * q.f_factor() / 12.0;
                let radial = d * s.powf(d - 1.0) * (q.m3 + c2 * self.sectors.w(u));
                let angular = s.powf(d) * c2 * self.sectors.w_prime(u);
                Some([radial - angular * u / x1, 5.0 * radial + angular / x1])
            }
            _ => None,
        }
    }

    pub fn piece_rate(&self, piece: Piece, p: Point) -> f64 {
        let q = &self.params;
        let e = &q.exps;
        let [x1, x2] = p;
        match piece {
            Piece::T4 => q.h4 * pos_pow(x1, e.delta4p) * pos_pow(x2, e.delta4pp),
            Piece::T3 => q.h3 * pos_pow(x1, e.delta3p) * pos_pow(x2, e.delta3pp),
            Piece::T2(j) => q.h2 * q.eta2star.powi(j as i32) * pos_pow(x1 + 5.0 * x2, e.delta2p),
            Piece::T1 => q.h1 * pos_pow(x1, e.delta1p) * pos_pow(x2, e.delta1pp),
            Piece::T0prime => q.h0p * pos_pow(x1, e.delta0pp),
            Piece::T0 => q.h0 * x1.max(1.0).powf(e.delta0p),
        }
    }

    pub fn value(&self, x: &State) -> f64 {
        let (a, b) = x.pair();
        let p = [a as f64, b as f64];
        self.piece_value(self.piece_at_point(p), p)
    }

    /// `(V(x), region tag, h(x))`.
    pub fn eval(&self, x: &State) -> (f64, RegionId, f64) {
        let (a, b) = x.pair();
        let p = [a as f64, b as f64];
        let piece = self.piece_at_point(p);
        (self.piece_value(piece, p), classify_region(&self.params.region, x), self.piece_rate(piece, p))
    }

    /// `C_h v^{gamma*}`.
    pub fn phi(&self, v: f64) -> f64 {
        phi(v, &self.params)
    }

    /// V-surface export `x1,x2,region,V,h` over a lattice window.
    pub fn write_surface<W: Write>(&self, x1: (u64, u64), x2: (u64, u64), stride: u64, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x1", "x2", "region", "V", "h"])?;
        for b in (x2.0..=x2.1).step_by(stride.max(1) as usize) {
            for a in (x1.0..=x1.1).step_by(stride.max(1) as usize) {
                let (v, tag, h) = self.eval(&State::xy(a, b));
                out.write_record([a.to_string(), b.to_string(), tag.to_string(), format!("{v}"), format!("{h}")])?;
            }
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

pub fn phi(v: f64, p: &LyapunovParams) -> f64 {
    p.ch * v.powf(p.exps.gamma_star())
}

fn adjacent(region: RegionId, tag: RegionId) -> bool {
    use RegionId::*;
    region == tag
        || matches!(
            (region, tag),
            (T0, T00)
                | (T0prime, T00)
                | (T0prime, T01)
                | (T1, T01)
                | (T1, T12)
                | (T2, T01)
                | (T2, T12)
                | (T2, T23)
                | (T3, T23)
                | (T3, T34)
                | (T4, T34)
                | (T4, T4star)
                | (T4, T23)
                | (T4, T01)
        )
}

fn check_region(p: &LyapunovParams, region: RegionId, x: &State) -> Result<()> {
    let tag = classify_region(&p.region, x);
    if adjacent(region, tag) {
        Ok(())
    } else {
        let (x1, x2) = x.pair();
        Err(Error::RegionMismatch { region: region.to_string(), x1, x2 })
    }
}

fn piece_for(lv: &PiecewiseLyapunov, region: RegionId, x: &State) -> Piece {
    let (a, b) = x.pair();
    match region {
        RegionId::T0 => Piece::T0,
        RegionId::T0prime => Piece::T0prime,
        RegionId::T1 => Piece::T1,
        RegionId::T2 => Piece::T2(lv.sectors.index(b as f64 / (a as f64).max(1e-300))),
        RegionId::T3 => Piece::T3,
        RegionId::T4 => Piece::T4,
        _ => lv.piece_at(x),
    }
}

/// Value of the named region's piece at `x`, which must lie in its closure.
pub fn piece_value(region: RegionId, x: &State, lv: &PiecewiseLyapunov) -> Result<f64> {
    check_region(&lv.params, region, x)?;
    let (a, b) = x.pair();
    Ok(lv.piece_value(piece_for(lv, region, x), [a as f64, b as f64]))
}

pub fn rate_h(region: RegionId, x: &State, lv: &PiecewiseLyapunov) -> Result<f64> {
    check_region(&lv.params, region, x)?;
    let (a, b) = x.pair();
    Ok(lv.piece_rate(piece_for(lv, region, x), [a as f64, b as f64]))
}

pub fn assemble(params: LyapunovParams) -> Result<PiecewiseLyapunov> {
    params.validate()?;
    let sectors = Sectors::new(params.region.b1, params.n2, params.eta2star);
    let g = g_table(&params.exps, params.g_start, params.region.b2.ceil() as u64 + 64);
    Ok(PiecewiseLyapunov { params, sectors, g })
}

/// Targets for [`select_parameters`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tuning {
    /// Largest `x2` at which `m4*` is solved. The `+2` shift of `3B -> 2A`
    /// makes the required `m4*` grow linearly with `x2`.
    pub r_max: f64,
    pub eta2star: f64,
    /// Fraction of each admissible upper bound actually used.
    pub safety: f64,
    /// Share of the `x2`-decrease term of `3B -> 2A` kept as drift margin in T4.
    pub margin4: f64,
    pub kappa4: f64,
    /// Ceiling for the search over `delta4p`.
    pub delta4p_max: f64,
    pub n2_max: usize,
}

impl Default for Tuning {
    fn default() -> Self {
        Tuning { r_max: 2000.0, eta2star: 1.9, safety: 0.5, margin4: 0.1, kappa4: 0.3, delta4p_max: 30.0, n2_max: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Margin {
    pub name: &'static str,
    /// Positive means the inequality holds.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub params: LyapunovParams,
    pub margins: Vec<Margin>,
    /// Ratio `M` the subdivision must supply at the lower ray.
    pub m_ratio: f64,
}

fn infeasible(interface: &str, detail: String) -> Error {
    Error::Infeasible { interface: interface.to_string(), detail }
}

/// Trial T4 piece during selection.
struct T4Trial<'a> {
    e: &'a ExponentTable,
    g: &'a [f64],
    m4star: f64,
    kappa: f64,
    xc: f64,
}

impl T4Trial<'_> {
    fn value(&self, x1: usize, y: f64) -> f64 {
        y.powf(self.e.delta4) * (self.m4star * (1.0 + self.kappa * (x1 as f64).min(self.xc) / y) + self.g[x1])
    }

    fn m4(&self, b2: usize) -> f64 {
        self.m4star + self.g[b2]
    }

    fn v3(&self, b2: usize, x1: usize, y: f64) -> f64 {
        self.m4(b2) * (x1 as f64 / b2 as f64).powf(self.e.delta3p - 4.0) * y.powf(self.e.delta4)
    }

    /// Worst `kbar_a` at the priming boundary relative to `m4 y^{d4}`; the
    /// lower-order term is largest at the lowest point `y = b1 b2` of T34.
    fn t34_curvature(&self, b2: usize, y: f64, c_star: u32) -> f64 {
        (1..=c_star as usize)
            .flat_map(|a| [(b2 + a, true), (b2 - a, false)])
            .map(|(x1, above)| {
                let k = if above { self.v3(b2, x1, y) - self.value(x1, y) } else { self.value(x1, y) - self.v3(b2, x1, y) };
                k / (self.m4(b2) * y.powf(self.e.delta4))
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `V4 / V3` along the upper ray below `b2`, outside the ball.
    fn corner_ratio(&self, region: &RegionParams, b2: usize) -> f64 {
        let x_lo = (region.rho / (1.0 + region.b1 * region.b1).sqrt()).floor() as usize;
        (x_lo.max(1)..b2)
            .map(|x1| {
                let y = region.b1 * x1 as f64;
                self.value(x1, y) / self.v3(b2, x1, y)
            })
            .fold(0.0, f64::max)
    }
}

/// Smallest `m4*` with drift below `-margin4` times the `x2`-decrease of
/// `3B -> 2A` at every T4 point outside the ball up to `x2 = r_max`. The drift
/// is affine in `m4*`, `A + m4* B`.
fn m4star_for(net: &Network, e: &ExponentTable, g: &[f64], region: &RegionParams, kappa: f64, xc: f64, tuning: &Tuning) -> Result<f64> {
    let b2 = region.b2 as usize;
    let d = e.delta4;
    let corr = |x1: i64, y: f64| y.powf(d) * (1.0 + kappa * (x1 as f64).min(xc) / y);
    let mut need: f64 = 1.0;
    for a in 0..b2 {
        let y_lo = (region.b0.floor() as u64 + 1)
            .max((region.b1 * a as f64).floor() as u64 + 1)
            .max((region.rho * region.rho - (a * a) as f64).max(0.0).sqrt().floor() as u64);
        for y in y_lo..=(tuning.r_max.ceil() as u64).max(y_lo) {
            let x = State::xy(a as u64, y);
            let (mut lin, mut slope) = (0.0, 0.0);
            for r in 0..net.len() {
                let lam = net.propensity(r, &x);
                if lam == 0.0 {
                    continue;
                }
                let c = net.reaction_vector(r);
                let (dest, yn) = (a as i64 + c[0], y as f64 + c[1] as f64);
                lin += lam * (yn.powf(d) * g[dest as usize] - (y as f64).powf(d) * g[a]);
                slope += lam * (corr(dest, yn) - corr(a as i64, y as f64));
                if c[0] == 2 {
                    slope += tuning.margin4 * lam * ((y as f64).powf(d) - yn.powf(d));
                }
            }
            if slope < 0.0 {
                need = need.max(-lin / slope);
            } else if lin > 0.0 {
                return Err(infeasible("T4", format!("no m4* gives negative drift at ({a}, {y})")));
            }
        }
    }
    Ok(need)
}

/// Constants in the order: `delta4p`, `h4`, `m4*`, `m4`, `h3`,
/// `m3`, `h2`, `n2`, `m2`, `h1`, `m1`, `h0'`, `m0`, `h0`, `C_h`. Each inequality is
/// checked numerically and reported as a margin.
pub fn select_parameters(
    delta0: f64,
    eps: f64,
    variant: Variant,
    region: RegionParams,
    tuning: &Tuning,
) -> Result<Selection> {
    region.validate()?;
    let c_star = 7;
    let mut exps = derive_exponents(delta0, eps, variant, c_star)?;
    let b2 = region.b2.round() as usize;
    let mut region = region;
    region.b2 = b2 as f64;
    let h4 = 1.0;
    let net = builtin_network(match variant {
        Variant::Crn0 => "crn0",
        Variant::Crn1 => "crn1",
    })?;
    // The series is flat up to the farthest point `3B -> 2A` reaches from
    // x1 < c*; the lower-order term covers that stretch.
    let g_start = c_star as u64 + 2;
    let xc = c_star as f64 + 1.0;
    let kappa = tuning.kappa4;
    if (b2 as u64) <= g_start {
        return Err(infeasible("T34", format!("b2 = {b2} leaves no room for the flat stretch of the T4 series below {g_start}")));
    }

    // delta4p: first half-integer step from the derived value that makes the
    // priming boundary a min-kink and keeps V4 under the continued T3 piece.
    let mut chosen = None;
    let mut d4p = exps.delta4p;
    while d4p <= tuning.delta4p_max {
        exps.delta4p = d4p;
        let g = g_table(&exps, g_start, (b2 + c_star as usize + 2) as u64);
        let m4star = m4star_for(&net, &exps, &g, &region, kappa, xc, tuning)?;
        let trial = T4Trial { e: &exps, g: &g, m4star, kappa, xc };
        let k34 = trial.t34_curvature(b2, region.b1 * region.b2, c_star);
        let corner = trial.corner_ratio(&region, b2);
        if k34 < 0.0 && corner < 1.0 - 0.05 {
            chosen = Some((m4star, g, -k34, 1.0 - corner));
            break;
        }
        d4p += 0.5;
    }
    let (m4star, g, t34, corner) = chosen.ok_or_else(|| {
        infeasible("T34", format!("no delta4' up to {} gives a min-kink at the priming boundary", tuning.delta4p_max))
    })?;
    let m4 = m4star + h4 * g[b2];
    let b2f = b2 as f64;
    let d3 = exps.delta3p - 4.0;
    let h3 = d3 * m4 * b2f.powf(-d3);
    let b1 = region.b1;
    let d = exps.transport_degree();
    let m3 = h3 / d3 * b1.powf(exps.delta3pp - 2.0) * (1.0 + 5.0 * b1).powf(-d);

    let f = (5.0 + 1.0 / b1) / (1.0 - b1.powi(-2));
    // Upper ray, unit point x = (1, b1): normal (-b1, 1) points into T3.
    let normal23 = [-b1, 1.0];
    let k3 = h3 / d3;
    let grad3 = [k3 * d3 * b1.powf(exps.delta3pp - 2.0), k3 * (exps.delta3pp - 2.0) * b1.powf(exps.delta3pp - 3.0)];
    let s23: f64 = 1.0 + 5.0 * b1;
    let radial23 = d * s23.powf(d - 1.0) * m3;
    let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    // kappa(h2) = <n, grad3 - grad2> = a23 + h2 * slope23 with the angular part
    // of grad2 linear in h2.
    let a23 = dot(normal23, grad3) - dot(normal23, [radial23, 5.0 * radial23]);
    let ang = s23.powf(d) * (f / 12.0) * (-p_prime(b1));
    let slope23 = -dot(normal23, [-ang * b1, ang]);
    if !(a23 < 0.0) || !(slope23 > 0.0) {
        return Err(infeasible(
            "T23",
            format!("curvature {a23:.3e} is nonnegative already at h2 = 0 for b1 = {b1}"),
        ));
    }
    let h2 = tuning.safety * (-a23 / slope23);
    let t23 = -(a23 + h2 * slope23) / a23.abs();

    // Lower ray: raise n2 until the subdivided piece is steeper than V1.
    let eta = tuning.eta2star;
    let c2 = h2 * f / 12.0;
    let lower = |n2: usize| {
        let sec = Sectors::new(b1, n2, eta);
        let u = 1.0 / b1;
        let m2 = (m3 + c2 * sec.total()) * (1.0 + 5.0 * u).powf(d);
        // Unit point (b1, 1), normal (-1, b1) points into T2.
        let x = [b1, 1.0];
        let s = x[0] + 5.0 * x[1];
        let radial = d * s.powf(d - 1.0) * (m3 + c2 * sec.total());
        let angular = s.powf(d) * c2 * sec.w_prime(u * (1.0 + 1e-12));
        let grad2 = [radial - angular * u / x[0], 5.0 * radial + angular / x[0]];
        let h1 = m2 * (1.0 - exps.delta1pp) * b1.powf(exps.delta1pp - 1.0);
        let v1 = h1 / (1.0 - exps.delta1pp) * x[0].powf(exps.delta1p - 5.0) * x[1].powf(exps.delta1pp - 1.0);
        let grad1 = [v1 * (exps.delta1p - 5.0) / x[0], v1 * (exps.delta1pp - 1.0) / x[1]];
        let n = [-1.0, b1];
        (dot(n, grad2) - dot(n, grad1), dot(n, grad1).abs(), m2, h1)
    };
    let mut n2 = 0;
    loop {
        let (kappa, scale, _, _) = lower(n2);
        if kappa < -0.1 * scale {
            break;
        }
        n2 += 1;
        if n2 > tuning.n2_max {
            return Err(infeasible("T12", format!("no subdivision with at most {} sectors", tuning.n2_max)));
        }
    }
    let (k12, scale12, m2, h1) = lower(n2);
    let t12 = -k12 / scale12;
    let m_ratio = eta.powi(n2 as i32);

    let k1 = h1 / (1.0 - exps.delta1pp);
    let b0 = region.b0;
    let m1 = k1 * b0.powf(exps.delta1pp - 1.0);
    // Discrete curvature at x2 = b0 is linear in h0'; take the tightest bound.
    let v1 = |x2: f64| k1 * x2.powf(exps.delta1pp - 1.0);
    let mut h0p_max = f64::INFINITY;
    for a in 1..=c_star as i64 {
        for a in [a, -a] {
            let x2 = b0 + a as f64;
            if x2 < 2.0 {
                continue;
            }
            let s = s_sum(x2, b0);
            // Above: V1 < m1 + h0' S (S < 0). Below: m1 + h0' S < V1 (S > 0).
            let bound = if a > 0 { (m1 - v1(x2)) / -s } else { (v1(x2) - m1) / s };
            h0p_max = h0p_max.min(bound);
        }
    }
    if !(h0p_max > 0.0) {
        return Err(infeasible("T01", format!("discrete curvature needs h0' < {h0p_max:.3e}")));
    }
    let h0p = tuning.safety * h0p_max;
    let t01 = 1.0 - h0p / h0p_max;

    let m0_2 = m1 + h0p * s_sum(2.0, b0);
    let h0 = 0.25 * m0_2;
    // m0(2) at the midpoint of (0, m0(1) (1 - delta0) - h0) for crn1 and of
    // (0, m0(1) - h0) for crn0.
    let factor = match variant {
        Variant::Crn0 => 1.0,
        Variant::Crn1 => 1.0 - delta0,
    };
    let m0_1 = (2.0 * m0_2 + h0) / factor;
    let levels = b0.ceil() as usize;
    let mut m0_levels = vec![m0_1];
    m0_levels.extend((2..=levels).map(|k| m1 + h0p * s_sum(k as f64, b0)));
    let first_level = m0_1 * factor - h0 - m0_2;
    let ch = tuning.safety * h0 / (m0_1 * 2f64.powf(delta0) + h0);

    let params = LyapunovParams {
        exps,
        region,
        h0,
        h0p,
        h1,
        h2,
        h3,
        h4,
        m0_levels,
        m1,
        m2,
        m3,
        m4,
        m4star,
        g_start,
        kappa4: kappa,
        xc4: xc,
        eta2star: eta,
        n2,
        ch: ch.min(0.5),
    };
    params.validate()?;
    Ok(Selection {
        params,
        margins: vec![
            Margin { name: "T34 curvature", value: t34 },
            Margin { name: "T24 corner", value: corner },
            Margin { name: "T23 curvature", value: t23 },
            Margin { name: "T12 curvature", value: t12 },
            Margin { name: "T01 curvature", value: t01 },
            Margin { name: "first level", value: first_level / m0_1 },
        ],
        m_ratio,
    })
}

/// Selection at `delta0 = 0.5`, `eps = 0.1` with default regions and tuning,
/// assembled.
pub fn default_lyapunov(variant: Variant) -> Result<PiecewiseLyapunov> {
    let sel = select_parameters(0.5, 0.1, variant, RegionParams::default(), &Tuning::default())?;
    assemble(sel.params)
}

/// Alternative homogeneous pieces on the lifted scaling, degree `d4 + 1` in
/// `(x1, x2, chi)`.
pub fn alt_piece_value(region: RegionId, x: &State, chi: f64, lv: &PiecewiseLyapunov) -> Result<f64> {
    if !(chi > 0.0) {
        return Err(Error::InvalidArgument("chi must be positive".into()));
    }
    check_region(&lv.params, region, x)?;
    let (a, b) = x.pair();
    alt_value_at(region, [a as f64, b as f64], chi, &lv.params)
}

/// Real-point form of [`alt_piece_value`] without the region check.
pub fn alt_value_at(region: RegionId, p: Point, chi: f64, q: &LyapunovParams) -> Result<f64> {
    let [x1, x2] = p;
    let d4 = q.exps.delta4;
    let b1 = q.region.b1;
    match region {
        RegionId::T3 => Ok(x2.powf(d4) * (chi * q.m4 + q.h3 * (x1 - chi * q.region.b2))),
        RegionId::T2 => {
            let s = x1 + 5.0 * x2;
            let l = x1 * (1.0 + b1.powi(-2)).sqrt() * ((1.0 / b1).atan() - 0.2f64.atan()).sin()
                / ((x2 / x1).atan() + (1.0 / b1).atan()).sin();
            Ok(s.powf(d4) * (chi * q.m4 + q.h3 * (s / (1.0 + 5.0 * b1) - chi * q.region.b2)) + q.h2 * s.powf(d4) * l)
        }
        RegionId::T1 => Ok(x1.powf(d4) * (q.m2 * x1 - q.h1 * (x2 - x1 / b1))),
        other => Err(Error::InvalidArgument(format!("no alternative piece on {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaling::{homogeneity_check, ScalingVector};

    fn exps(v: Variant) -> ExponentTable {
        derive_exponents(0.5, 0.1, v, 7).unwrap()
    }

    fn lv(v: Variant) -> PiecewiseLyapunov {
        let sel = select_parameters(0.5, 0.1, v, RegionParams::default(), &Tuning::default()).unwrap();
        assemble(sel.params).unwrap()
    }

    #[test]
    fn narrow_t4_stretch_is_infeasible() {
        let region = RegionParams { b2: 7.0, rho: 100.0, ..RegionParams::default() };
        let err = select_parameters(0.5, 0.1, Variant::Crn0, region, &Tuning::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible { ref interface, .. } if interface == "T34"), "{err}");
    }

    #[test]
    fn exponent_examples() {
        let e = exps(Variant::Crn0);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(e.delta0p, 0.5) && close(e.delta1p, 5.5) && close(e.delta0pp, 5.5));
        assert!(close(e.delta1pp, 0.9) && close(e.delta2p, 6.4) && close(e.delta3p, 4.1));
        assert!(close(e.delta3pp, 2.3) && close(e.delta4, 0.3) && close(e.delta4pp, 2.3));
        assert!(close(e.delta4p, 5.5));
        let e1 = exps(Variant::Crn1);
        assert!(close(e1.delta0p, -0.5));
        assert_eq!(ExponentTable { variant: Variant::Crn0, delta0p: 0.5, ..e1 }, e);
        assert!(derive_exponents(0.5, 0.3, Variant::Crn0, 7).is_err());
        assert!(derive_exponents(1.0, 0.1, Variant::Crn0, 7).is_err());
    }

    #[test]
    fn exponent_relations() {
        for v in [Variant::Crn0, Variant::Crn1] {
            for &(d0, eps) in &[(0.5, 0.1), (0.3, 0.05), (0.9, 0.4)] {
                let e = derive_exponents(d0, eps, v, 7).unwrap();
                assert_eq!(e.delta1p, e.delta0pp);
                assert!((e.delta4pp - 2.0 - e.delta4).abs() < 1e-15);
                assert!((e.delta2p - 6.0 - (e.delta3p - 4.0 + e.delta3pp - 2.0)).abs() < 1e-12);
                assert!((e.delta2p - 6.0 - (e.delta1p - 5.0 + e.delta1pp - 1.0)).abs() < 1e-12);
                assert!(e.delta4p > ExponentTable::delta4p_bound(7)(e.delta3p));
            }
        }
    }

    #[test]
    fn gamma_star_per_variant() {
        assert_eq!(exps(Variant::Crn0).gamma_star(), 1.0);
        assert!((exps(Variant::Crn1).gamma_star() + 1.0).abs() < 1e-12);
        let l = lv(Variant::Crn1);
        assert!((l.phi(1.0) - l.params().ch).abs() < 1e-15);
        assert!((l.phi(4.0) - l.params().ch / 4.0).abs() < 1e-15);
    }

    #[test]
    fn p_is_the_antiderivative() {
        for &v in &[0.1, 0.5, 1.0, 3.0, 10.0] {
            let h = 1e-6 * v;
            let num = (p_poly(v + h) - p_poly(v - h)) / (2.0 * h);
            assert!((num - p_prime(v)).abs() < 1e-6 * p_prime(v));
        }
    }

    #[test]
    fn t3_closed_form() {
        let mut p = lv(Variant::Crn0).params().clone();
        p.m4 = 1.0;
        p.h3 = 0.1 * 50f64.powf(-0.1);
        let l = PiecewiseLyapunov { sectors: Sectors::new(10.0, 0, 1.5), g: vec![0.0], params: p };
        let v = l.piece_value(Piece::T3, [100.0, 800.0]);
        let oracle = 50f64.powf(-0.1) * 100f64.powf(0.1) * 800f64.powf(0.3);
        assert!((v - oracle).abs() < 1e-12 && (v - 7.97).abs() < 0.01, "{v}");
    }

    #[test]
    fn t1_trace_on_lower_ray() {
        let l = lv(Variant::Crn0);
        let p = l.params();
        let d = p.exps.transport_degree();
        for x1 in [200.0, 1e3, 1e5] {
            let v = l.piece_value(Piece::T1, [x1, x1 / p.region.b1]);
            assert!((v - p.m2 * x1.powf(d)).abs() < 1e-12 * v);
            let v2 = l.piece_value(Piece::T2(p.n2), [x1, x1 / p.region.b1]);
            assert!((v - v2).abs() < 1e-9 * v);
        }
    }

    #[test]
    fn t0_level_formula() {
        let l = lv(Variant::Crn0);
        let p = l.params();
        let v = piece_value(RegionId::T0, &State::xy(300, 0), &l).unwrap();
        let oracle = p.m0(1) * 301f64.powf(0.5) + p.h0 * 300f64.powf(0.5);
        assert!((v - oracle).abs() < 1e-12 * v);
    }

    #[test]
    fn rate_examples() {
        let l = lv(Variant::Crn0);
        let p = l.params();
        let r0 = l.piece_rate(Piece::T2(0), [10.0, 10.0]);
        assert!((r0 - p.h2 * 60f64.powf(6.4)).abs() < 1e-9 * r0);
        // (10,10) sits below b0, so the lattice check applies further out.
        let h = rate_h(RegionId::T2, &State::xy(300, 300), &l).unwrap();
        let j = l.sectors().index(1.0);
        assert!((h - p.h2 * p.eta2star.powi(j as i32) * 1800f64.powf(6.4)).abs() < 1e-9 * h);
        let r1 = l.piece_rate(Piece::T2(1), [10.0, 10.0]);
        assert!((r1 - p.eta2star * r0).abs() < 1e-12 * r1);
        let l1 = lv(Variant::Crn1);
        let h = rate_h(RegionId::T0, &State::xy(100, 1), &l1).unwrap();
        assert!((h - l1.params().h0 * 0.1).abs() < 1e-15);
        assert!(matches!(rate_h(RegionId::T3, &State::xy(1000, 5), &l), Err(Error::RegionMismatch { .. })));
    }

    #[test]
    fn selection_examples() {
        for v in [Variant::Crn0, Variant::Crn1] {
            let sel = select_parameters(0.5, 0.1, v, RegionParams::default(), &Tuning::default()).unwrap();
            assert!(sel.margins.iter().all(|m| m.value > 0.0), "{:?}", sel.margins);
            let p = &sel.params;
            if v == Variant::Crn1 {
                assert_eq!(p.exps.delta0p, -0.5);
                assert!(p.m0(2) < p.m0(1) * 0.5 - p.h0);
            }
            let round = LyapunovParams::from_toml(&p.to_toml()).unwrap();
            assert_eq!(&round, p);
        }
    }

    #[test]
    fn sublevel_sets_are_precompact() {
        for v in [Variant::Crn0, Variant::Crn1] {
            let l = lv(v);
            let b1 = l.params().region.b1;
            type Ray = fn(f64, f64) -> (f64, f64);
            let rays: [Ray; 5] = [
                |t, _| (t, 0.0),
                |t, _| (0.0, t),
                |t, _| (t, t),
                |t, b| (t, t / (2.0 * b)),
                |t, b| (2.0 * b * t, t),
            ];
            for ray in rays {
                let vals: Vec<f64> = [1e2, 1e3, 1e4, 1e5, 1e6]
                    .iter()
                    .map(|&t| {
                        let (a, b) = ray(t, b1);
                        l.value(&State::xy(a.round() as u64, b.round() as u64))
                    })
                    .collect();
                assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
            }
        }
    }

    #[test]
    fn pieces_are_homogeneous() {
        let l = lv(Variant::Crn0);
        let e = l.params().exps;
        let ls = [10.0, 100.0];
        let diag = ScalingVector::diagonal();
        let up = ScalingVector::new(0.0, 1.0).unwrap();
        let right = ScalingVector::new(1.0, 0.0).unwrap();
        let d4 = homogeneity_check(|p| l.piece_value(Piece::T4, p), up, e.delta4, &[[3.0, 500.0], [20.0, 300.0]], &ls).unwrap();
        assert!(d4 <= 0.05);
        let w3 = ScalingVector::from_angle(0.3).unwrap().components();
        let d3 = homogeneity_check(
            |p| l.piece_value(Piece::T3, p),
            ScalingVector::new(w3[0], w3[1]).unwrap(),
            (e.delta3p - 4.0) * w3[0] + (e.delta3pp - 2.0) * w3[1],
            &[[60.0, 700.0], [100.0, 5000.0]],
            &ls,
        )
        .unwrap();
        assert!(d3 <= 1e-10);
        let d2 = homogeneity_check(
            |p| l.piece_value(Piece::T2(0), p),
            diag,
            e.transport_degree() / std::f64::consts::SQRT_2,
            &[[100.0, 100.0], [300.0, 200.0]],
            &ls,
        )
        .unwrap();
        assert!(d2 <= 0.05);
        let d1 = homogeneity_check(
            |p| l.piece_value(Piece::T1, p),
            diag,
            e.transport_degree() / std::f64::consts::SQRT_2,
            &[[1000.0, 30.0]],
            &ls,
        )
        .unwrap();
        assert!(d1 <= 1e-10);
        let d0 = homogeneity_check(|p| l.piece_value(Piece::T0prime, p), right, e.delta0pp - 5.0, &[[300.0, 5.0]], &ls).unwrap();
        assert!(d0 <= 1e-10);
    }

    #[test]
    fn t34_trace_matches() {
        let l = lv(Variant::Crn0);
        let b2 = l.params().region.b2;
        for x2 in [20.0, 100.0, 1000.0] {
            let v3 = l.piece_value(Piece::T3, [b2, x2]);
            let v4 = l.piece_value(Piece::T4, [b2, x2]);
            assert!((v3 - v4).abs() <= 0.05 * v4);
        }
    }

    #[test]
    fn alt_pieces() {
        let l = lv(Variant::Crn0);
        let p = l.params();
        let x = State::xy(100, 3000);
        let v = alt_piece_value(RegionId::T3, &x, 1.0, &l).unwrap();
        let direct = 3000f64.powf(0.3) * (p.m4 + p.h3 * (100.0 - p.region.b2));
        assert!((v - direct).abs() < 1e-12 * v.abs());
        let on34 = alt_value_at(RegionId::T3, [p.region.b2, 700.0], 1.0, p).unwrap();
        assert!((on34 - p.m4 * 700f64.powf(0.3)).abs() < 1e-9 * on34);
        for (region, pt) in [(RegionId::T3, [100.0, 3000.0]), (RegionId::T2, [300.0, 400.0]), (RegionId::T1, [3000.0, 30.0])] {
            for l_ in [2.0, 10.0] {
                let a = alt_value_at(region, [l_ * pt[0], l_ * pt[1]], l_, p).unwrap();
                let b = alt_value_at(region, pt, 1.0, p).unwrap();
                assert!((a - l_.powf(p.exps.delta4 + 1.0) * b).abs() < 1e-9 * a.abs());
            }
        }
    }
}
