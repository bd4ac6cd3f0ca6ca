//! Closed-form exit laws of the boundary tube `{x2 < 2}` and their
//! Monte-Carlo counterparts.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ssa::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TubeVariant {
    Crn0,
    Crn1,
    Crn2,
}

impl TubeVariant {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "crn0" => Ok(TubeVariant::Crn0),
            "crn1" => Ok(TubeVariant::Crn1),
            "crn2" => Ok(TubeVariant::Crn2),
            other => Err(Error::UnknownNetwork(other.to_string())),
        }
    }
}

/// `(p_up, p_down)` from `(x1, 1)`.
pub fn tube_jump_probs(v: TubeVariant, x1: u64) -> Result<(f64, f64)> {
    if x1 < 1 {
        return Err(Error::InvalidArgument("x1 must be at least 1".into()));
    }
    let x = x1 as f64;
    let weight = match v {
        TubeVariant::Crn0 => 1.0,
        TubeVariant::Crn1 => x,
        TubeVariant::Crn2 => x * x,
    };
    Ok((1.0 / (1.0 + weight), weight / (1.0 + weight)))
}

/// Probability that the chain started at `(k0, 1)` leaves the tube at
/// `(b + 1, 2)`.
pub fn exit_distribution(v: TubeVariant, k0: u64, b: u64) -> Result<f64> {
    if k0 < 1 || b < k0 {
        return Err(Error::InvalidArgument(format!("need b >= k0 >= 1, got k0 = {k0}, b = {b}")));
    }
    match v {
        TubeVariant::Crn0 => Ok(0.5 * 0.5f64.powi((b - k0) as i32)),
        TubeVariant::Crn1 => Ok(k0 as f64 / (b as f64 * (b as f64 + 1.0))),
        TubeVariant::Crn2 => Err(Error::NoExitLaw),
    }
}

/// Lower bound `1 - sum_{k > k0} 1/(k^2 + 1)` on never leaving the crn2 tube,
/// with the series tail closed by integral comparison (error below 1e-10).
pub fn transience_lower_bound(k0: u64) -> f64 {
    let n = k0 + 100_000;
    // Sum small terms first for accuracy.
    let head: f64 = ((k0 + 1)..=n).rev().map(|k| 1.0 / ((k as f64).powi(2) + 1.0)).sum();
    let nf = n as f64;
    let upper = std::f64::consts::FRAC_PI_2 - nf.atan();
    let lower = std::f64::consts::FRAC_PI_2 - (nf + 1.0).atan();
    1.0 - head - 0.5 * (upper + lower)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReturnMean {
    /// Partial sums of the expected exit offset converge; `limit` bounds them.
    Finite { limit: f64, partial: Vec<(u64, f64)> },
    /// Partial sums grow like `slope * ln B`.
    Infinite { slope: f64, partial: Vec<(u64, f64)> },
}

/// Decides whether the expected return time is finite, via the truncated
/// expectation `sum_{b <= B} (b - k0) P(exit at b)` of the exit offset, which
/// bounds the travel time from below up to a constant.
pub fn mean_return_time_diverges(v: TubeVariant, k0: u64) -> Result<ReturnMean> {
    if k0 < 1 {
        return Err(Error::InvalidArgument("k0 must be at least 1".into()));
    }
    if v == TubeVariant::Crn2 {
        return Err(Error::NoExitLaw);
    }
    let budgets: Vec<u64> = (2..=6).map(|e| k0 * 10u64.pow(e)).collect();
    let mut partial = Vec::with_capacity(budgets.len());
    let mut acc = 0.0;
    let mut b = k0;
    for &cap in &budgets {
        while b <= cap {
            acc += (b - k0) as f64 * exit_distribution(v, k0, b)?;
            b += 1;
        }
        partial.push((cap, acc));
    }
    let (b1, s1) = partial[partial.len() - 2];
    let (b2, s2) = partial[partial.len() - 1];
    let slope = (s2 - s1) / (b2 as f64 / b1 as f64).ln();
    match v {
        // Geometric law: mean offset is exactly 1.
        TubeVariant::Crn0 => Ok(ReturnMean::Finite { limit: 1.0, partial }),
        _ => Ok(ReturnMean::Infinite { slope, partial }),
    }
}

/// Empirical exit law from `(k0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitLaw {
    pub variant: TubeVariant,
    pub k0: u64,
    pub n: u64,
    pub counts: BTreeMap<u64, u64>,
    /// Runs still inside the tube when the step budget ran out.
    pub censored: u64,
}

impl ExitLaw {
    pub fn mass(&self, b: u64) -> f64 {
        *self.counts.get(&b).unwrap_or(&0) as f64 / self.n as f64
    }

    pub fn escaped_fraction(&self) -> f64 {
        1.0 - self.censored as f64 / self.n as f64
    }

    /// Binomial standard error of `mass(b)` under probability `p`.
    pub fn stderr(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.n as f64).sqrt()
    }

    pub fn write_csv<W: Write>(&self, w: W, b_max: u64) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["b", "analytic", "empirical", "stderr"])?;
        for b in self.k0..=b_max {
            let (analytic, se) = match exit_distribution(self.variant, self.k0, b) {
                Ok(p) => (format!("{p}"), format!("{}", self.stderr(p))),
                Err(_) => ("".into(), format!("{}", self.stderr(self.mass(b)))),
            };
            out.write_record([b.to_string(), analytic, format!("{}", self.mass(b)), se])?;
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Runs `n` embedded tube chains from `(k0, 1)`, each on its own stream, with
/// at most `max_steps` steps per run.
pub fn exit_distribution_mc(v: TubeVariant, k0: u64, n: u64, max_steps: u64, seed: u64) -> Result<ExitLaw> {
    if n < 1 || k0 < 1 {
        return Err(Error::InvalidArgument("need n >= 1 and k0 >= 1".into()));
    }
    let exits: Vec<Option<u64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let (mut x1, mut x2) = (k0, 1u64);
            for _ in 0..max_steps {
                if x2 == 0 {
                    x1 += 1;
                    x2 = 1;
                    continue;
                }
                let (up, _) = tube_jump_probs(v, x1).expect("x1 >= 1 inside the tube");
                if rng.random::<f64>() < up {
                    return Some(x1);
                }
                x2 = 0;
            }
            None
        })
        .collect();
    let mut counts = BTreeMap::new();
    let mut censored = 0;
    for e in exits {
        match e {
            Some(b) => *counts.entry(b).or_insert(0) += 1,
            None => censored += 1,
        }
    }
    Ok(ExitLaw { variant: v, k0, n, counts, censored })
}
