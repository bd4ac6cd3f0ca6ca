mod common;

use crnlab::boundary::transience_lower_bound;
use crnlab::crn::builtin_network;
use crnlab::lab::*;
use crnlab::lyapunov::{default_lyapunov, Variant};
use crnlab::scaling::{classify_region, RegionId};
use crnlab::ssa::stream;
use crnlab::State;

#[test]
fn crn0_returns_are_certain_and_stable() {
    let net = builtin_network("crn0").unwrap();
    let x0 = State::xy(100, 100);
    let a = return_time_stats(&net, 50.0, &x0, 1000, 1_000_000, 1).unwrap();
    let b = return_time_stats(&net, 50.0, &x0, 2000, 1_000_000, 2).unwrap();
    assert!(a.censored_fraction() <= 1e-3);
    assert!(a.samples.iter().all(|s| s.tau.is_none_or(|t| t > 0.0)));
    let se = |r: &ReturnTimes| {
        let t: Vec<f64> = r.samples.iter().filter_map(|s| s.tau).collect();
        crnlab::stats::mean_stderr(&t).1
    };
    let gap = (a.mean_uncensored() - b.mean_uncensored()).abs();
    assert!(gap <= 4.0 * se(&a).hypot(se(&b)), "means {} vs {}", a.mean_uncensored(), b.mean_uncensored());
}

#[test]
fn crn2_escapes_from_the_tube() {
    let net = builtin_network("crn2").unwrap();
    let n = 200;
    let r = return_time_stats(&net, 50.0, &State::xy(100, 0), n, 100_000, 3).unwrap();
    let q = transience_lower_bound(100);
    let sigma = (q * (1.0 - q) / n as f64).sqrt();
    assert!(r.censored_fraction() >= q - 4.0 * sigma, "{}", r.censored_fraction());
}

#[test]
fn crn1_tail_is_heavy() {
    let net = builtin_network("crn1").unwrap();
    let r = return_times(&net, 50.0, &State::xy(100, 0), 10_000, &[1_000_000], 4).unwrap();
    let fit = r.tail_fit(200, 4).unwrap();
    assert!((-1.3..=-0.7).contains(&fit.slope), "{fit:?}");
}

#[test]
fn crn0_occupation_is_concentrated() {
    let net = builtin_network("crn0").unwrap();
    let mu = occupation_measure(&net, &State::xy(0, 0), 1_000_000, &mut stream(5, 0)).unwrap();
    let sum: f64 = mu.weights.values().sum();
    assert!((sum - mu.total_time).abs() <= 1e-9 * mu.total_time);
    assert!(mu.mass_within(100.0) >= 0.99);
}

#[test]
fn crn0_occupation_is_nearly_stationary() {
    let net = builtin_network("crn0").unwrap();
    let mu = occupation_measure(&net, &State::xy(0, 0), 10_000_000, &mut stream(6, 0)).unwrap();
    let fs: [fn(&State) -> f64; 2] = [|x| (x.0[0] as f64).min(100.0), |x| (x.0[1] as f64).min(100.0)];
    for f in fs {
        let sup = mu.weights.keys().map(|x| net.apply_generator(f, x).abs()).fold(0.0, f64::max);
        assert!(stationarity_defect(&net, &mu, f) <= 0.05 * sup);
    }
}

#[test]
fn crn1_moment_increment_is_bounded() {
    let net = builtin_network("crn1").unwrap();
    let v = default_lyapunov(Variant::Crn1).unwrap();
    let mu = occupation_measure(&net, &State::xy(0, 0), 2_000_000, &mut stream(7, 0)).unwrap();
    let m = phi_moment(&mu, |x| v.value(x), |s| v.phi(s));
    assert!(m.cumulative.windows(2).all(|w| w[1] >= w[0]));
    assert!(m.last_decile_increment() < 0.01, "{:?}", m.cumulative);
}

#[test]
fn broken_h2_fails_near_the_lower_ray() {
    let net = builtin_network("crn0").unwrap();
    let mut p = default_lyapunov(Variant::Crn0).unwrap().params().clone();
    p.h2 *= 100.0;
    let v = crnlab::lyapunov::assemble(p).unwrap();
    let rep = verify_drift(&net, &v, Annulus { r_min: 200.0, r_max: 1000.0, stride: 7 }).unwrap();
    assert!(!rep.violations.is_empty());
    assert!(rep.worst_margin < 0.0);
    let b1 = v.params().region.b1;
    let near = rep
        .violations
        .iter()
        .filter(|w| {
            let (a, b) = w.x.pair();
            (a as f64 / b1 - b as f64).abs() <= 7.0 * b1
        })
        .count();
    assert!(2 * near > rep.violations.len(), "{near} of {}", rep.violations.len());
}

#[test]
fn r3_across_the_upper_ray_has_negative_flux() {
    let net = builtin_network("crn0").unwrap();
    let v = default_lyapunov(Variant::Crn0).unwrap();
    let mut seen = 0;
    for x in common::interface_points(&v, RegionId::T23, 20_000.0) {
        for f in flux_terms(&net, &v, &x).iter().filter(|f| f.reaction == 2) {
            assert!(f.flux < 0.0, "{x}: {f:?}");
            seen += 1;
        }
    }
    assert!(seen > 100);
}

#[test]
fn curvature_samples_carry_a_unit_normal() {
    let v = default_lyapunov(Variant::Crn0).unwrap();
    for tag in [RegionId::T12, RegionId::T23, RegionId::T34, RegionId::T01] {
        let x = &common::interface_points(&v, tag, 5000.0)[3];
        let rep = interface_curvature(&v, tag, x, 7).unwrap();
        assert!((rep.normal[0].hypot(rep.normal[1]) - 1.0).abs() < 1e-12);
        assert!(!rep.samples.is_empty());
    }
}

#[test]
fn lower_boundary_curvature_is_negative() {
    let v = default_lyapunov(Variant::Crn1).unwrap();
    let p = v.params().region;
    for x1 in [300, 1000, 5000] {
        let x = State::xy(x1, 2);
        assert_eq!(classify_region(&p, &x), RegionId::T00);
        let rep = interface_curvature(&v, RegionId::T00, &x, 7).unwrap();
        assert!(rep.samples.len() >= 7);
    }
}

#[test]
fn drift_report_csv_lists_violations_only() {
    let net = builtin_network("crn0").unwrap();
    let mut p = default_lyapunov(Variant::Crn0).unwrap().params().clone();
    p.h2 *= 100.0;
    let v = crnlab::lyapunov::assemble(p).unwrap();
    let rep = verify_drift(&net, &v, Annulus { r_min: 200.0, r_max: 400.0, stride: 7 }).unwrap();
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("x1,x2,region,LV,phiV,margin\n"));
    assert_eq!(text.lines().count(), rep.violations.len() + 1);
}

#[test]
fn classification_is_seed_reproducible() {
    let net = builtin_network("crn0").unwrap();
    let cfg = ClassifyConfig { samples: 500, ..Default::default() };
    let a = classify_stability(&net, &cfg).unwrap();
    let b = classify_stability(&net, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.verdict, Stability::PositiveRecurrent);
}
