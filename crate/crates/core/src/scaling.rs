//! Scaling maps, toric coordinates and the dominance-region partition of the
//! quadrant.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::crn::{Network, State};
use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Unit direction in the closed positive quadrant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingVector([f64; 2]);

impl ScalingVector {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        let n = w1.hypot(w2);
        if !(w1 >= 0.0 && w2 >= 0.0) || !((n - 1.0).abs() <= 1e-12) {
            return Err(Error::InvalidArgument(format!("({w1}, {w2}) is not a unit vector in the quadrant")));
        }
        Ok(ScalingVector([w1, w2]))
    }

    /// Normalizes any nonzero nonnegative direction.
    pub fn direction(w1: f64, w2: f64) -> Result<Self> {
        let n = w1.hypot(w2);
        if !(w1 >= 0.0 && w2 >= 0.0 && n > 0.0) {
            return Err(Error::InvalidArgument(format!("({w1}, {w2}) is not a quadrant direction")));
        }
        Ok(ScalingVector([w1 / n, w2 / n]))
    }

    /// Angle from the `x1` axis, in `[0, pi/2]`.
    pub fn from_angle(a: f64) -> Result<Self> {
        Self::direction(a.cos().max(0.0), a.sin().max(0.0))
    }

    pub fn diagonal() -> Self {
        ScalingVector([std::f64::consts::FRAC_1_SQRT_2; 2])
    }

    pub fn components(&self) -> [f64; 2] {
        self.0
    }

    pub fn dot(&self, v: &[i64]) -> f64 {
        self.0[0] * v[0] as f64 + self.0[1] * v[1] as f64
    }
}

/// `S_l^w x = (l^{w1} x1, l^{w2} x2)`.
pub fn scale(w: ScalingVector, l: f64, x: Point) -> Result<Point> {
    if !(l >= 1.0) {
        return Err(Error::InvalidArgument(format!("scale factor {l} is below 1")));
    }
    Ok([l.powf(w.0[0]) * x[0], l.powf(w.0[1]) * x[1]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToricCoordinates {
    pub theta: f64,
    pub w: ScalingVector,
    pub c_star: u64,
}

impl ToricCoordinates {
    pub fn reconstruct(&self) -> Point {
        let base = 2.0 * self.c_star as f64;
        let w = self.w.components();
        [base * self.theta.powf(w[0]), base * self.theta.powf(w[1])]
    }
}

/// `z_i = 2c* theta^{w_i}`. Only points with `z >= 2c*` componentwise have a
/// direction in the quadrant.
pub fn toric_coordinates(z: Point, c_star: u64) -> Result<ToricCoordinates> {
    if !(z[0] > 0.0 && z[1] > 0.0) {
        return Err(Error::InvalidArgument("toric coordinates need z > 0".into()));
    }
    let base = 2.0 * c_star as f64;
    let v = [(z[0] / base).ln(), (z[1] / base).ln()];
    let log_theta = v[0].hypot(v[1]);
    if log_theta == 0.0 {
        return Err(Error::DegenerateToric);
    }
    let w = ScalingVector::new(v[0] / log_theta, v[1] / log_theta)?;
    Ok(ToricCoordinates { theta: log_theta.exp(), w, c_star })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub rho: f64,
}

impl Default for RegionParams {
    fn default() -> Self {
        RegionParams { b0: 20.0, b1: 10.0, b2: 50.0, rho: 200.0 }
    }
}

impl RegionParams {
    pub fn new(b0: f64, b1: f64, b2: f64, rho: f64) -> Result<Self> {
        let p = RegionParams { b0, b1, b2, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.b0 > 2.0 && self.b1 > 1.0 && self.b2 > 5.0 && self.rho > self.b0.max(self.b2);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "need b0 > 2, b1 > 1, b2 > 5, rho > max(b0, b2); got {self:?}"
            )))
        }
    }

    /// Membership in the compact set `{|x| <= rho}`.
    pub fn in_compact(&self, x: &State) -> bool {
        let (a, b) = x.pair();
        (a as f64).hypot(b as f64) <= self.rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionId {
    T0,
    T00,
    T0prime,
    T01,
    T1,
    T12,
    T2,
    T23,
    T3,
    T34,
    T4,
    T4star,
}

impl RegionId {
    pub const ALL: [RegionId; 12] = [
        RegionId::T0,
        RegionId::T00,
        RegionId::T0prime,
        RegionId::T01,
        RegionId::T1,
        RegionId::T12,
        RegionId::T2,
        RegionId::T23,
        RegionId::T3,
        RegionId::T34,
        RegionId::T4,
        RegionId::T4star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegionId::T0 => "T0",
            RegionId::T00 => "T00",
            RegionId::T0prime => "T0prime",
            RegionId::T01 => "T01",
            RegionId::T1 => "T1",
            RegionId::T12 => "T12",
            RegionId::T2 => "T2",
            RegionId::T23 => "T23",
            RegionId::T3 => "T3",
            RegionId::T34 => "T34",
            RegionId::T4 => "T4",
            RegionId::T4star => "T4star",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        RegionId::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown region `{s}`")))
    }

    pub fn is_interface(self) -> bool {
        matches!(
            self,
            RegionId::T00 | RegionId::T01 | RegionId::T12 | RegionId::T23 | RegionId::T34 | RegionId::T4star
        )
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Region tag of a lattice point. Interfaces are thickened to lattice width:
/// `T12` is `|x2 - x1/b1| < 1`, `T23` is `|x1 - x2/b1| < 1`, `T01` is
/// `b0 - 1 < x2 <= b0`, `T34` is `x1 = b2` rounded.
pub fn classify_region(p: &RegionParams, x: &State) -> RegionId {
    let (a, b) = x.pair();
    let (x1, x2) = (a as f64, b as f64);
    if b <= 1 {
        return RegionId::T0;
    }
    if b == 2 {
        return RegionId::T00;
    }
    if x2 <= p.b0 - 1.0 {
        return RegionId::T0prime;
    }
    if x2 <= p.b0 {
        return RegionId::T01;
    }
    if (x2 * p.b1 - x1).abs() < p.b1 {
        return RegionId::T12;
    }
    if x2 * p.b1 < x1 {
        return RegionId::T1;
    }
    if (x2 - p.b1 * x1).abs() < p.b1 {
        return RegionId::T23;
    }
    if x2 < p.b1 * x1 {
        return RegionId::T2;
    }
    if (x1 - p.b2).abs() < 0.5 {
        RegionId::T34
    } else if x1 > p.b2 {
        RegionId::T3
    } else if a == 0 {
        RegionId::T4star
    } else {
        RegionId::T4
    }
}

pub fn write_region_map<W: Write>(p: &RegionParams, x1: (u64, u64), x2: (u64, u64), w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x1", "x2", "region"])?;
    for b in x2.0..=x2.1 {
        for a in x1.0..=x1.1 {
            let r = classify_region(p, &State::xy(a, b));
            out.write_record([a.to_string(), b.to_string(), r.name().to_string()])?;
        }
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exposed {
    /// Reactions attaining the lifted maximum of `<w, c_in - e_i>` over pairs
    /// with `c_i != 0`.
    pub lifted: Vec<usize>,
    /// Reactions attaining the plain maximum of `<w, c_in>`.
    pub plain: Vec<usize>,
}

fn argmax(scores: impl Iterator<Item = (usize, f64)>) -> Vec<usize> {
    let scores: Vec<(usize, f64)> = scores.collect();
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<usize> = scores.iter().filter(|s| s.1 >= best - 1e-12).map(|s| s.0).collect();
    out.dedup();
    out
}

pub fn exposed_reactions(net: &Network, w: ScalingVector) -> Result<Exposed> {
    if net.dim() != 2 {
        return Err(Error::InvalidArgument("exposed reactions are defined for two species".into()));
    }
    let c_in = |r: usize| -> Vec<i64> { net.reactions()[r].c_in.iter().map(|&c| c as i64).collect() };
    let plain = argmax((0..net.len()).map(|r| (r, w.dot(&c_in(r)))));
    let lifted = argmax((0..net.len()).flat_map(|r| {
        let cin = c_in(r);
        net.reaction_vector(r)
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(move |(i, _)| {
                let mut v = cin.clone();
                v[i] -= 1;
                (r, w.dot(&v))
            })
            .collect::<Vec<_>>()
    }));
    Ok(Exposed { lifted, plain })
}

/// Max over samples and scales of `|f(S_l^w x) - l^delta f(x)| / (l^delta |f(x)|)`.
pub fn homogeneity_check<F: Fn(Point) -> f64>(
    f: F,
    w: ScalingVector,
    delta: f64,
    samples: &[Point],
    l_values: &[f64],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &x in samples {
        if !(x[0] > 0.0 && x[1] > 0.0) {
            return Err(Error::InvalidArgument("samples must be strictly positive".into()));
        }
        let fx = f(x);
        if fx == 0.0 {
            return Err(Error::ZeroSample(x[0], x[1]));
        }
        for &l in l_values {
            let y = scale(w, l, x)?;
            let target = l.powf(delta) * fx;
            worst = worst.max((f(y) - target).abs() / target.abs());
        }
    }
    Ok(worst)
}
