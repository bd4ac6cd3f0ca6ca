//! Exact (Gillespie direct-method) simulation of the jump process and the
//! embedded chain of the boundary tube `{x2 < 2}`.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::boundary::{tube_jump_probs, TubeVariant};
use crate::crn::{Network, State};
use crate::error::Result;

pub type Rng64 = ChaCha8Rng;

/// Independent stream for trajectory `index` of a run seeded with `seed`.
pub fn stream(seed: u64, index: u64) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub type Predicate = Arc<dyn Fn(&State) -> bool + Send + Sync>;

/// Termination rule. Constructors guarantee at least one bound.
#[derive(Clone)]
pub struct StopCondition {
    pub max_time: Option<f64>,
    pub max_jumps: Option<u64>,
    pub absorb: Option<Predicate>,
}

impl StopCondition {
    pub fn jumps(n: u64) -> Self {
        StopCondition { max_time: None, max_jumps: Some(n), absorb: None }
    }

    pub fn time(t: f64) -> Self {
        StopCondition { max_time: Some(t), max_jumps: None, absorb: None }
    }

    pub fn absorb(pred: Predicate) -> Self {
        StopCondition { max_time: None, max_jumps: None, absorb: Some(pred) }
    }

    pub fn and_jumps(mut self, n: u64) -> Self {
        self.max_jumps = Some(n);
        self
    }

    pub fn and_time(mut self, t: f64) -> Self {
        self.max_time = Some(t);
        self
    }

    pub fn and_absorb(mut self, pred: Predicate) -> Self {
        self.absorb = Some(pred);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Jump { dt: f64, reaction: usize, next: State },
    Absorbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub events: Vec<(f64, State)>,
}

impl Trajectory {
    pub fn last(&self) -> &(f64, State) {
        self.events.last().expect("trajectory holds its initial event")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.events.first().map_or(0, |e| e.1 .0.len());
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        out.write_record(&header)?;
        for (t, x) in &self.events {
            let mut row = vec![format!("{t}")];
            row.extend(x.0.iter().map(u64::to_string));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| crate::Error::Csv(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Hit { time: f64, state: State },
    Censored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitResult {
    pub outcome: Outcome,
    pub jumps_taken: u64,
}

/// Reusable direct-method kernel working in place on a state buffer.
pub struct Kernel<'a> {
    net: &'a Network,
    props: Vec<f64>,
}

impl<'a> Kernel<'a> {
    pub fn new(net: &'a Network) -> Self {
        Kernel { net, props: vec![0.0; net.len()] }
    }

    /// Total propensity at `x`, caching the per-reaction values.
    pub fn load(&mut self, x: &State) -> f64 {
        let mut total = 0.0;
        for (r, p) in self.props.iter_mut().enumerate() {
            *p = self.net.propensity(r, x);
            total += *p;
        }
        total
    }

    /// One jump from `x`; returns `(dt, reaction)` or `None` if absorbed.
    pub fn advance<R: Rng + ?Sized>(&mut self, x: &mut State, rng: &mut R) -> Option<(f64, usize)> {
        let total = self.load(x);
        if total <= 0.0 {
            return None;
        }
        let e: f64 = rng.sample(Exp1);
        let dt = e / total;
        let r = self.choose(total, rng);
        for (xi, &d) in x.0.iter_mut().zip(self.net.reaction_vector(r)) {
            *xi = (*xi as i64 + d) as u64;
        }
        Some((dt, r))
    }

    /// Applies a jump chosen from the propensities cached by the last `load`.
    pub fn jump_loaded<R: Rng + ?Sized>(&mut self, x: &mut State, rng: &mut R) -> usize {
        let total: f64 = self.props.iter().sum();
        let r = self.choose(total, rng);
        for (xi, &d) in x.0.iter_mut().zip(self.net.reaction_vector(r)) {
            *xi = (*xi as i64 + d) as u64;
        }
        r
    }

    fn choose<R: Rng + ?Sized>(&self, total: f64, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (r, &p) in self.props.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = r;
                if u < acc {
                    return r;
                }
            }
        }
        last
    }
}

pub fn step<R: Rng + ?Sized>(net: &Network, x: &State, rng: &mut R) -> Step {
    let mut y = x.clone();
    match Kernel::new(net).advance(&mut y, rng) {
        Some((dt, reaction)) => Step::Jump { dt, reaction, next: y },
        None => Step::Absorbed,
    }
}

pub fn simulate<R: Rng + ?Sized>(net: &Network, x0: &State, stop: &StopCondition, rng: &mut R) -> Trajectory {
    let mut events = vec![(0.0, x0.clone())];
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut kernel = Kernel::new(net);
    let mut jumps = 0u64;
    loop {
        if stop.max_jumps.is_some_and(|n| jumps >= n) {
            break;
        }
        if stop.absorb.as_ref().is_some_and(|p| jumps > 0 && p(&x)) {
            break;
        }
        let Some((dt, _)) = kernel.advance(&mut x, rng) else { break };
        if stop.max_time.is_some_and(|tm| t + dt > tm) {
            break;
        }
        t += dt;
        jumps += 1;
        events.push((t, x.clone()));
    }
    Trajectory { events }
}

/// First time `t > 0` with `X_t` in `target`; the initial state does not count.
pub fn hitting_time<R, F>(net: &Network, x0: &State, target: F, budget: &StopCondition, rng: &mut R) -> HitResult
where
    R: Rng + ?Sized,
    F: Fn(&State) -> bool,
{
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut kernel = Kernel::new(net);
    let mut jumps = 0u64;
    loop {
        if budget.max_jumps.is_some_and(|n| jumps >= n) {
            break;
        }
        let Some((dt, _)) = kernel.advance(&mut x, rng) else { break };
        if budget.max_time.is_some_and(|tm| t + dt > tm) {
            break;
        }
        t += dt;
        jumps += 1;
        if target(&x) {
            return HitResult { outcome: Outcome::Hit { time: t, state: x }, jumps_taken: jumps };
        }
    }
    HitResult { outcome: Outcome::Censored, jumps_taken: jumps }
}

/// Embedded chain on `{x2 < 2}` using the idealized tube probabilities;
/// stops after `n` steps or on reaching `x2 = 2`.
pub fn embedded_tube_chain<R: Rng + ?Sized>(
    v: TubeVariant,
    x0: &State,
    n: u64,
    rng: &mut R,
) -> Result<Vec<State>> {
    let (mut x1, mut x2) = (x0.0[0], x0.0[1]);
    let mut path = vec![x0.clone()];
    for _ in 0..n {
        if x2 >= 2 {
            break;
        }
        if x2 == 0 {
            x1 += 1;
            x2 = 1;
        } else {
            let (up, _) = tube_jump_probs(v, x1)?;
            if rng.random::<f64>() < up {
                x1 += 1;
                x2 = 2;
            } else {
                x2 = 0;
            }
        }
        path.push(State::xy(x1, x2));
    }
    Ok(path)
}
