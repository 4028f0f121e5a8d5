use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Reference temperature of the Arrhenius factor.
pub const T_REF: f64 = 298.15;

#[derive(Clone, Debug, PartialEq)]
pub struct Reaction {
    /// `(species, stoichiometry)`; a species appears at most once per side.
    pub reactants: Vec<(usize, u32)>,
    pub products: Vec<(usize, u32)>,
    pub k0: f64,
    /// Activation temperature `Ea/R` in kelvin.
    pub ea: f64,
    pub photo: bool,
    pub h2o: bool,
    pub line: usize,
}

impl Reaction {
    /// Net stoichiometric change of species `i`.
    pub fn net(&self, i: usize) -> i64 {
        let count = |side: &[(usize, u32)]| {
            side.iter()
                .filter(|(s, _)| *s == i)
                .map(|(_, n)| *n as i64)
                .sum::<i64>()
        };
        count(&self.products) - count(&self.reactants)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mechanism {
    pub species: Vec<String>,
    pub reactions: Vec<Reaction>,
    pub atoms: Vec<String>,
    /// `composition[a][s]`: atoms of element `a` in species `s`.
    pub composition: Vec<Vec<i64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Environment {
    /// Kelvin.
    pub temperature: f64,
    /// Fraction in `[0, 1]`.
    pub humidity: f64,
    /// Short-wave radiation, W/m^2.
    pub radiation: f64,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.humidity) {
            return Err(Error::Config(format!("humidity must lie in [0, 1], got {}", self.humidity)));
        }
        if !(self.radiation >= 0.0 && self.radiation.is_finite()) {
            return Err(Error::Config(format!("radiation must be non-negative, got {}", self.radiation)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.temperature, self.humidity, self.radiation]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Environment {
            temperature: v[0],
            humidity: v[1],
            radiation: v[2],
        }
    }
}

/// The bundled 20-species demo mechanism.
pub const DEMO_MECHANISM: &str = include_str!("../../data/demo.mech");

impl Mechanism {
    pub fn demo() -> Mechanism {
        Mechanism::parse(DEMO_MECHANISM).expect("bundled mechanism parses")
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s == name)
    }

    /// Parse the line-oriented mechanism format:
    ///
    /// ```text
    /// # comment
    /// species A B C
    /// atoms A C=1 N=1
    /// A + 2 B -> C ; k0=1e-3 ea=300 photo h2o
    /// ```
    ///
    /// Without `species`/`atoms` declarations, species are introduced by the
    /// reactions in order of appearance.
    pub fn parse(text: &str) -> Result<Mechanism> {
        let mut declared: Vec<String> = Vec::new();
        let mut comp: Vec<(usize, String, BTreeMap<String, i64>)> = Vec::new();
        let mut raw_reactions = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut words = body.split_whitespace();
            match words.next() {
                Some("species") => {
                    for name in words {
                        if !declared.iter().any(|d| d == name) {
                            declared.push(name.to_string());
                        }
                    }
                }
                Some("atoms") => {
                    let name = words.next().ok_or_else(|| parse_err(line, "atoms line without a species"))?;
                    let mut counts = BTreeMap::new();
                    for w in words {
                        let (atom, n) = w
                            .split_once('=')
                            .ok_or_else(|| parse_err(line, format!("expected <atom>=<int>, got {w:?}")))?;
                        let n: i64 = n
                            .parse()
                            .ok()
                            .filter(|n| *n >= 0)
                            .ok_or_else(|| parse_err(line, format!("atom count {n:?} is not a non-negative integer")))?;
                        counts.insert(atom.to_string(), n);
                    }
                    if !declared.iter().any(|d| d == name) {
                        declared.push(name.to_string());
                    }
                    comp.push((line, name.to_string(), counts));
                }
                _ => raw_reactions.push((line, body)),
            }
        }

        let strict = !declared.is_empty();
        let mut species = declared;
        let mut reactions = Vec::new();
        for (line, body) in raw_reactions {
            reactions.push(parse_reaction(line, body, &mut species, strict)?);
        }
        if species.is_empty() {
            return Err(parse_err(0, "mechanism declares no species"));
        }

        let mut atoms: Vec<String> = Vec::new();
        for (_, _, counts) in &comp {
            for a in counts.keys() {
                if !atoms.contains(a) {
                    atoms.push(a.clone());
                }
            }
        }
        let mut composition = vec![vec![0i64; species.len()]; atoms.len()];
        for (_, name, counts) in &comp {
            let s = species.iter().position(|x| x == name).expect("declared above");
            for (a, n) in counts {
                let ai = atoms.iter().position(|x| x == a).expect("collected above");
                composition[ai][s] = *n;
            }
        }
        let mech = Mechanism {
            species,
            reactions,
            atoms,
            composition,
        };
        mech.check_balance()?;
        Ok(mech)
    }

    /// Every reaction conserves every tracked atom.
    pub fn check_balance(&self) -> Result<()> {
        for (j, r) in self.reactions.iter().enumerate() {
            for (a, row) in self.atoms.iter().zip(&self.composition) {
                let delta: i64 = (0..self.n_species()).map(|s| row[s] * r.net(s)).sum();
                if delta != 0 {
                    return Err(Error::Parse {
                        line: r.line,
                        msg: format!("reaction {j} does not conserve {a} (net change {delta:+})"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Tracked atom totals `A c`.
    pub fn atom_totals(&self, c: &[f64]) -> Vec<f64> {
        self.composition
            .iter()
            .map(|row| row.iter().zip(c).map(|(&a, &x)| a as f64 * x).sum())
            .collect()
    }

    /// Rate constant of every reaction under `env`.
    pub fn rates(&self, env: &Environment) -> Vec<f64> {
        let arrhenius = |ea: f64| (-ea * (1.0 / env.temperature - 1.0 / T_REF)).exp();
        self.reactions
            .iter()
            .map(|r| {
                let mut k = if r.photo {
                    r.k0 * env.radiation / 1000.0
                } else {
                    r.k0 * arrhenius(r.ea)
                };
                if r.h2o {
                    k *= env.humidity;
                }
                k
            })
            .collect()
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_side(
    line: usize,
    text: &str,
    species: &mut Vec<String>,
    strict: bool,
) -> Result<Vec<(usize, u32)>> {
    let mut out: Vec<(usize, u32)> = Vec::new();
    for term in text.split('+') {
        let mut words = term.split_whitespace();
        let first = words
            .next()
            .ok_or_else(|| parse_err(line, "empty term in reaction"))?;
        let (coef, name) = match first.parse::<u32>() {
            Ok(n) => (
                n,
                words
                    .next()
                    .ok_or_else(|| parse_err(line, format!("coefficient {n} without a species")))?,
            ),
            Err(_) => (1, first),
        };
        if coef == 0 {
            return Err(parse_err(line, format!("zero coefficient for {name}")));
        }
        if let Some(extra) = words.next() {
            return Err(parse_err(line, format!("unexpected {extra:?} after {name}")));
        }
        let idx = match species.iter().position(|s| s == name) {
            Some(i) => i,
            None if strict => return Err(parse_err(line, format!("unknown species {name}"))),
            None => {
                species.push(name.to_string());
                species.len() - 1
            }
        };
        match out.iter_mut().find(|(s, _)| *s == idx) {
            Some(entry) => entry.1 += coef,
            None => out.push((idx, coef)),
        }
    }
    Ok(out)
}

fn parse_reaction(
    line: usize,
    body: &str,
    species: &mut Vec<String>,
    strict: bool,
) -> Result<Reaction> {
    let (eq, params) = body
        .split_once(';')
        .ok_or_else(|| parse_err(line, "missing ';' before rate parameters"))?;
    let (lhs, rhs) = eq
        .split_once("->")
        .ok_or_else(|| parse_err(line, "missing '->'"))?;
    let reactants = parse_side(line, lhs, species, strict)?;
    let products = parse_side(line, rhs, species, strict)?;

    let (mut k0, mut ea, mut photo, mut h2o) = (None, 0.0, false, false);
    for w in params.split_whitespace() {
        match w.split_once('=') {
            Some(("k0", v)) => {
                k0 = Some(v.parse::<f64>().map_err(|_| parse_err(line, format!("bad k0 {v:?}")))?)
            }
            Some(("ea", v)) => {
                ea = v.parse::<f64>().map_err(|_| parse_err(line, format!("bad ea {v:?}")))?
            }
            None if w == "photo" => photo = true,
            None if w == "h2o" => h2o = true,
            _ => return Err(parse_err(line, format!("unknown rate parameter {w:?}"))),
        }
    }
    let k0 = k0.ok_or_else(|| parse_err(line, "missing k0"))?;
    if !(k0 >= 0.0 && k0.is_finite()) {
        return Err(parse_err(line, format!("rate constant must be non-negative, got {k0}")));
    }
    if !ea.is_finite() {
        return Err(parse_err(line, "activation temperature must be finite"));
    }
    Ok(Reaction {
        reactants,
        products,
        k0,
        ea,
        photo,
        h2o,
        line,
    })
}
