//! Network model, stochastic and deterministic mass-action rates, and the
//! generator of the jump process.
//!
//! A network file is TOML:
//!
//! ```toml
//! species = ["A", "B"]
//!
//! [[reactions]]
//! input = {}
//! output = { A = 1, B = 1 }
//! kappa = 1.0
//! ```
//!
//! Species absent from a complex have count zero.

use std::collections::BTreeMap;
use std::fmt;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    pub c_in: Vec<u32>,
    pub c_out: Vec<u32>,
    pub kappa: f64,
}

impl Reaction {
    pub fn vector(&self) -> Vec<i64> {
        self.c_out
            .iter()
            .zip(&self.c_in)
            .map(|(&o, &i)| o as i64 - i as i64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    species: Vec<String>,
    reactions: Vec<Reaction>,
    vectors: Vec<Vec<i64>>,
}

/// Molecule counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State(pub Vec<u64>);

/// Molecules per unit volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Concentration(pub Vec<f64>);

impl State {
    pub fn new(x: impl Into<Vec<u64>>) -> Self {
        State(x.into())
    }

    pub fn xy(x1: u64, x2: u64) -> Self {
        State(vec![x1, x2])
    }

    /// `self + v`, or `None` if a component would go negative.
    /// First two counts of a two-species state.
    pub fn pair(&self) -> (u64, u64) {
        (self.0[0], self.0[1])
    }

    pub fn shifted(&self, v: &[i64]) -> Option<State> {
        self.0
            .iter()
            .zip(v)
            .map(|(&x, &d)| {
                let y = x as i64 + d;
                (y >= 0).then_some(y as u64)
            })
            .collect::<Option<Vec<_>>>()
            .map(State)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl Network {
    pub fn new(species: Vec<String>, reactions: Vec<Reaction>) -> Result<Self> {
        let d = species.len();
        if d == 0 {
            return Err(Error::InvalidNetwork("no species".into()));
        }
        for (k, r) in reactions.iter().enumerate() {
            if r.c_in.len() != d || r.c_out.len() != d {
                return Err(Error::InvalidNetwork(format!(
                    "reaction {k}: complex length differs from species count {d}"
                )));
            }
            if !(r.kappa > 0.0) || !r.kappa.is_finite() {
                return Err(Error::NonpositiveRate(k));
            }
            if r.c_in == r.c_out {
                return Err(Error::ZeroReactionVector(k));
            }
        }
        let vectors = reactions.iter().map(Reaction::vector).collect();
        Ok(Network { species, reactions, vectors })
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn dim(&self) -> usize {
        self.species.len()
    }

    pub fn reactions(&self) -> &[Reaction] {
        &self.reactions
    }

    pub fn len(&self) -> usize {
        self.reactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reactions.is_empty()
    }

    /// `c*`: the largest 1-norm among all input and output complexes.
    pub fn c_star(&self) -> u32 {
        self.reactions
            .iter()
            .flat_map(|r| [r.c_in.iter().sum::<u32>(), r.c_out.iter().sum::<u32>()])
            .max()
            .unwrap_or(0)
    }

    pub fn reaction_vector(&self, r: usize) -> &[i64] {
        &self.vectors[r]
    }

    /// Stochastic propensity: `kappa * prod_i x_i (x_i - 1) ... (x_i - c_i + 1)`.
    pub fn propensity(&self, r: usize, x: &State) -> f64 {
        let rx = &self.reactions[r];
        falling_product(&rx.c_in, &x.0) * rx.kappa
    }

    /// Deterministic rate `kappa * prod_i x_i^{c_i}` with `0^0 = 1`.
    pub fn mass_action_rate(&self, r: usize, x: &Concentration) -> f64 {
        let rx = &self.reactions[r];
        rx.c_in
            .iter()
            .zip(&x.0)
            .map(|(&c, &xi)| if c == 0 { 1.0 } else { xi.powi(c as i32) })
            .product::<f64>()
            * rx.kappa
    }

    /// `Lf(x) = sum_r Lambda_r(x) (f(x + c^r) - f(x))`.
    pub fn apply_generator<F>(&self, f: F, x: &State) -> f64
    where
        F: Fn(&State) -> f64,
    {
        let fx = f(x);
        let mut acc = 0.0;
        for r in 0..self.len() {
            let a = self.propensity(r, x);
            if a == 0.0 {
                continue;
            }
            let y = x
                .shifted(&self.vectors[r])
                .expect("positive propensity implies a nonnegative destination");
            acc += a * (f(&y) - fx);
        }
        acc
    }
}

/// Product of falling factorials, exact in `u128` and falling back to `f64`
/// only when the exact product overflows.
pub(crate) fn falling_product(c: &[u32], x: &[u64]) -> f64 {
    let mut exact: Option<u128> = Some(1);
    let mut approx = 1.0f64;
    for (&ci, &xi) in c.iter().zip(x) {
        if u64::from(ci) > xi {
            return 0.0;
        }
        for j in 0..u64::from(ci) {
            let term = xi - j;
            approx *= term as f64;
            exact = exact.and_then(|p| p.checked_mul(u128::from(term)));
        }
    }
    match exact {
        Some(p) => p as f64,
        None => approx,
    }
}

/// The three two-species example networks; only the second reaction differs.
pub fn builtin_network(name: &str) -> Result<Network> {
    let r2 = match name {
        "crn0" => ([0, 1], [0, 0]),
        "crn1" => ([1, 1], [1, 0]),
        "crn2" => ([2, 1], [2, 0]),
        other => return Err(Error::UnknownNetwork(other.to_string())),
    };
    let rx = |c_in: [u32; 2], c_out: [u32; 2]| Reaction {
        c_in: c_in.to_vec(),
        c_out: c_out.to_vec(),
        kappa: 1.0,
    };
    Network::new(
        vec!["A".into(), "B".into()],
        vec![
            rx([0, 0], [1, 1]),
            rx(r2.0, r2.1),
            rx([5, 2], [0, 3]),
            rx([0, 3], [2, 0]),
        ],
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    species: Vec<String>,
    reactions: Vec<ReactionDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReactionDoc {
    #[serde(default)]
    input: BTreeMap<String, i64>,
    #[serde(default)]
    output: BTreeMap<String, i64>,
    kappa: f64,
}

/// Parses the TOML network format described in the module docs.
pub fn parse_network(text: &str) -> Result<Network> {
    let doc: NetworkDoc = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(1);
        Error::Syntax { line, msg: e.message().to_string() }
    })?;
    let index: BTreeMap<&str, usize> = doc
        .species
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    if index.len() != doc.species.len() {
        return Err(Error::InvalidNetwork("duplicate species name".into()));
    }
    let d = doc.species.len();
    let complex = |k: usize, m: &BTreeMap<String, i64>| -> Result<Vec<u32>> {
        let mut c = vec![0u32; d];
        for (name, &n) in m {
            let i = *index
                .get(name.as_str())
                .ok_or_else(|| Error::UnknownSpecies { reaction: k, name: name.clone() })?;
            if n < 0 {
                return Err(Error::NegativeStoichiometry(k));
            }
            c[i] = u32::try_from(n)
                .map_err(|_| Error::InvalidNetwork(format!("reaction {k}: count too large")))?;
        }
        Ok(c)
    };
    let reactions = doc
        .reactions
        .iter()
        .enumerate()
        .map(|(k, r)| {
            Ok(Reaction {
                c_in: complex(k, &r.input)?,
                c_out: complex(k, &r.output)?,
                kappa: r.kappa,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(doc.species, reactions)
}

/// Inverse of [`parse_network`].
pub fn format_network(net: &Network) -> String {
    let names: Vec<String> = net.species.iter().map(|s| format!("\"{s}\"")).collect();
    let mut out = format!("species = [{}]\n", names.join(", "));
    let complex = |c: &[u32]| {
        let parts: Vec<String> = c
            .iter()
            .zip(&net.species)
            .filter(|(&n, _)| n > 0)
            .map(|(n, s)| format!("{s} = {n}"))
            .collect();
        format!("{{ {} }}", parts.join(", "))
    };
    for r in &net.reactions {
        out.push_str(&format!(
            "\n[[reactions]]\ninput = {}\noutput = {}\nkappa = {:?}\n",
            complex(&r.c_in),
            complex(&r.c_out),
            r.kappa
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: u64, k: u64) -> f64 {
        if k > n {
            return 0.0;
        }
        (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
    }

    fn fact(k: u64) -> f64 {
        (1..=k).map(|j| j as f64).product()
    }

    // Brute-force oracle: binomial times factorial per species.
    fn oracle_propensity(net: &Network, r: usize, x: &State) -> f64 {
        let rx = &net.reactions()[r];
        rx.c_in
            .iter()
            .zip(&x.0)
            .map(|(&c, &xi)| binom(xi, c as u64) * fact(c as u64))
            .product::<f64>()
            * rx.kappa
    }

    #[test]
    fn builtins_share_their_complexes() {
        let n0 = builtin_network("crn0").unwrap();
        assert_eq!(n0.reactions()[2].c_in, vec![5, 2]);
        assert_eq!(n0.reactions()[2].c_out, vec![0, 3]);
        let n1 = builtin_network("crn1").unwrap();
        assert_eq!(n1.reactions()[1].c_in, vec![1, 1]);
        assert_eq!(n1.reactions()[1].c_out, vec![1, 0]);
        let n2 = builtin_network("crn2").unwrap();
        assert_eq!(n2.reactions()[1].c_in, vec![2, 1]);
        assert_eq!(n2.reactions()[1].c_out, vec![2, 0]);
        assert!(matches!(builtin_network("crn9"), Err(Error::UnknownNetwork(_))));
        assert_eq!(n0.c_star(), 7);
    }

    #[test]
    fn propensity_examples() {
        let n0 = builtin_network("crn0").unwrap();
        let x = State::xy(6, 3);
        assert_eq!(oracle_propensity(&n0, 2, &x), 4320.0);
        assert_eq!(n0.propensity(2, &x), 4320.0);
        assert_eq!(n0.propensity(2, &State::xy(4, 2)), 0.0);
        for name in ["crn0", "crn1", "crn2"] {
            let n = builtin_network(name).unwrap();
            assert_eq!(n.propensity(0, &State::xy(17, 0)), 1.0);
        }
    }

    #[test]
    fn propensity_matches_oracle_on_grid() {
        for name in ["crn0", "crn1", "crn2"] {
            let n = builtin_network(name).unwrap();
            for x1 in 0..12 {
                for x2 in 0..12 {
                    let x = State::xy(x1, x2);
                    for r in 0..4 {
                        assert_eq!(n.propensity(r, &x), oracle_propensity(&n, r, &x));
                    }
                }
            }
        }
    }

    #[test]
    fn huge_states_fall_back_to_float() {
        let n0 = builtin_network("crn0").unwrap();
        let x = State::xy(10_000_000, 10_000_000);
        let p = n0.propensity(2, &x);
        let approx = 1e35 * 1e14;
        assert!((p / approx - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mass_action_examples() {
        let n0 = builtin_network("crn0").unwrap();
        assert_eq!(n0.mass_action_rate(2, &Concentration(vec![2.0, 3.0])), 288.0);
        assert_eq!(n0.mass_action_rate(2, &Concentration(vec![0.0, 0.0])), 0.0);
        assert_eq!(n0.mass_action_rate(0, &Concentration(vec![0.0, 0.0])), 1.0);
        assert_eq!(n0.mass_action_rate(0, &Concentration(vec![3.5, 9.0])), 1.0);
    }

    #[test]
    fn reaction_vectors() {
        let n0 = builtin_network("crn0").unwrap();
        assert_eq!(n0.reaction_vector(2), &[-5, 1]);
        assert_eq!(n0.reaction_vector(0), &[1, 1]);
        assert_eq!(n0.reaction_vector(3), &[2, -3]);
    }

    #[test]
    fn generator_examples() {
        let n0 = builtin_network("crn0").unwrap();
        let sum = |x: &State| (x.0[0] + x.0[1]) as f64;
        // 1*2 + 3*(-1) + 4320*(-4) + 6*(-1)
        let expected = 2.0 - 3.0 - 4.0 * oracle_propensity(&n0, 2, &State::xy(6, 3)) - 6.0;
        assert_eq!(expected, -17287.0);
        assert_eq!(n0.apply_generator(sum, &State::xy(6, 3)), expected);
        assert_eq!(n0.apply_generator(|_| 3.0, &State::xy(6, 3)), 0.0);
        assert_eq!(n0.apply_generator(|x| x.0[0] as f64, &State::xy(0, 0)), 1.0);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        for name in ["crn0", "crn1", "crn2"] {
            let n = builtin_network(name).unwrap();
            assert_eq!(parse_network(&format_network(&n)).unwrap(), n);
        }
        let zero_kappa = "species = [\"A\"]\n[[reactions]]\ninput = {}\noutput = { A = 1 }\nkappa = 0.0\n";
        let e = parse_network(zero_kappa).unwrap_err();
        assert_eq!(e, Error::NonpositiveRate(0));
        assert!(e.to_string().contains("nonpositive rate constant"));
        let trivial = "species = [\"A\"]\n[[reactions]]\ninput = { A = 1 }\noutput = { A = 1 }\nkappa = 1.0\n";
        let e = parse_network(trivial).unwrap_err();
        assert!(e.to_string().contains("zero reaction vector"));
        let negative = "species = [\"A\"]\n[[reactions]]\ninput = { A = -1 }\noutput = {}\nkappa = 1.0\n";
        assert_eq!(parse_network(negative).unwrap_err(), Error::NegativeStoichiometry(0));
        let broken = "species = [\"A\"]\n\n[[reactions]]\ninput = { A = \nkappa = 1.0\n";
        match parse_network(broken).unwrap_err() {
            Error::Syntax { line, .. } => assert!(line >= 4, "line {line}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
