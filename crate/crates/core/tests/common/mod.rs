#![allow(dead_code)]

use crnlab::crn::{Network, Reaction};
use crnlab::lyapunov::PiecewiseLyapunov;
use crnlab::scaling::{classify_region, RegionId};
use crnlab::State;

/// Same network with rates `kappa v^{1 - |c_in|}`, so propensities on counts
/// are `v` times the mass-action rate of the concentration `x / v`.
pub fn volume_scaled(net: &Network, v: f64) -> Network {
    let reactions = net
        .reactions()
        .iter()
        .map(|r| {
            let order: u32 = r.c_in.iter().sum();
            Reaction { kappa: r.kappa * v.powi(1 - order as i32), ..r.clone() }
        })
        .collect();
    Network::new(net.species().to_vec(), reactions).expect("rescaled network is valid")
}

/// Lattice points of an interface set with `rho <= |x| <= r_max` whose tag
/// is `tag`. Rays need an integer `b1`.
pub fn interface_points(v: &PiecewiseLyapunov, tag: RegionId, r_max: f64) -> Vec<State> {
    let r = v.params().region;
    let (b0, b1, b2) = (r.b0 as u64, r.b1 as u64, r.b2 as u64);
    let cand: Vec<State> = match tag {
        RegionId::T12 => (1..=r_max as u64).map(|k| State::xy(b1 * k, k)).collect(),
        RegionId::T23 => (1..=r_max as u64).map(|k| State::xy(k, b1 * k)).collect(),
        RegionId::T34 => (0..=r_max as u64).map(|y| State::xy(b2, y)).collect(),
        RegionId::T01 => (0..=r_max as u64).map(|x| State::xy(x, b0)).collect(),
        _ => vec![],
    };
    cand.into_iter()
        .filter(|x| x.norm() >= r.rho && x.norm() <= r_max && classify_region(&r, x) == tag)
        .collect()
}
