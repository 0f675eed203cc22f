//! Security lattices: a finite set of levels with a partial order, top and bottom,
//! and binary joins/meets (checked at load time).
//!
//! Concrete syntax:
//!
//! ```text
//! lattice { levels: L, H; order: L <= H; top: H; bottom: L; }
//! ```
//!
//! `order` lists covering pairs; the loader computes the reflexive-transitive
//! closure and rejects anything that is not a lattice. Omitted `top`/`bottom`
//! are inferred and must be unique.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// A security level, identified by name. Levels are interned as plain strings;
/// every level used anywhere must be declared in the active [`Lattice`].
pub type Level = String;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lattice {
    levels: Vec<Level>,
    /// Reflexive-transitive closure of the declared order.
    leq: BTreeSet<(Level, Level)>,
    top: Level,
    bottom: Level,
}

#[derive(Debug, thiserror::Error)]
pub enum LatticeError {
    #[error("lattice parse error: {0}")]
    Parse(String),
    #[error("undeclared level `{0}`")]
    Undeclared(String),
    #[error("order is not antisymmetric: {0} and {1} are mutually related")]
    NotAntisymmetric(String, String),
    #[error("no unique {0}: candidates {1:?}")]
    NoUniqueExtremum(&'static str, Vec<String>),
    #[error("declared {0} `{1}` is not the actual {0}")]
    WrongExtremum(&'static str, String),
    #[error("pair ({0}, {1}) has no unique {2}")]
    NotALattice(String, String, &'static str),
}

impl Lattice {
    /// The default two-point lattice {L, H} with L ⊑ H.
    pub fn two_point() -> Lattice {
        Lattice::parse("lattice { levels: L, H; order: L <= H; top: H; bottom: L; }").unwrap()
    }

    /// Build a lattice from levels and covering pairs, validating the lattice laws.
    pub fn new(
        levels: Vec<String>,
        pairs: Vec<(String, String)>,
        top: Option<String>,
        bottom: Option<String>,
    ) -> Result<Lattice, LatticeError> {
        let set: BTreeSet<&String> = levels.iter().collect();
        if set.len() != levels.len() {
            return Err(LatticeError::Parse("duplicate level".into()));
        }
        for (a, b) in &pairs {
            for l in [a, b] {
                if !set.contains(l) {
                    return Err(LatticeError::Undeclared(l.clone()));
                }
            }
        }
        // Reflexive-transitive closure (Floyd-Warshall on the small level set).
        let mut leq: BTreeSet<(Level, Level)> = BTreeSet::new();
        for l in &levels {
            leq.insert((l.clone(), l.clone()));
        }
        for (a, b) in &pairs {
            leq.insert((a.clone(), b.clone()));
        }
        let mut changed = true;
        while changed {
            changed = false;
            let snapshot: Vec<(Level, Level)> = leq.iter().cloned().collect();
            for (a, b) in &snapshot {
                for (c, d) in &snapshot {
                    if b == c && leq.insert((a.clone(), d.clone())) {
                        changed = true;
                    }
                }
            }
        }
        for (a, b) in &leq {
            if a != b && leq.contains(&(b.clone(), a.clone())) {
                return Err(LatticeError::NotAntisymmetric(a.clone(), b.clone()));
            }
        }
        let tops: Vec<String> = levels
            .iter()
            .filter(|t| levels.iter().all(|l| leq.contains(&((*l).clone(), (*t).clone()))))
            .cloned()
            .collect();
        let bottoms: Vec<String> = levels
            .iter()
            .filter(|b| levels.iter().all(|l| leq.contains(&((*b).clone(), (*l).clone()))))
            .cloned()
            .collect();
        let actual_top = match tops.as_slice() {
            [t] => t.clone(),
            _ => return Err(LatticeError::NoUniqueExtremum("top", tops)),
        };
        let actual_bottom = match bottoms.as_slice() {
            [b] => b.clone(),
            _ => return Err(LatticeError::NoUniqueExtremum("bottom", bottoms)),
        };
        if let Some(t) = top {
            if t != actual_top {
                return Err(LatticeError::WrongExtremum("top", t));
            }
        }
        if let Some(b) = bottom {
            if b != actual_bottom {
                return Err(LatticeError::WrongExtremum("bottom", b));
            }
        }
        let lat = Lattice { levels, leq, top: actual_top, bottom: actual_bottom };
        // Binary joins and meets must exist for every pair.
        for a in &lat.levels {
            for b in &lat.levels {
                lat.join_checked(a, b)?;
                lat.meet_checked(a, b)?;
            }
        }
        Ok(lat)
    }

    /// Parse the `lattice { ... }` concrete syntax.
    pub fn parse(src: &str) -> Result<Lattice, LatticeError> {
        let body = src
            .trim()
            .strip_prefix("lattice")
            .and_then(|r| r.trim_start().strip_prefix('{'))
            .and_then(|r| r.trim_end().strip_suffix('}'))
            .ok_or_else(|| LatticeError::Parse("expected `lattice { ... }`".into()))?;
        let mut levels = Vec::new();
        let mut pairs = Vec::new();
        let mut top = None;
        let mut bottom = None;
        for clause in body.split(';') {
            let clause = clause.trim();
            if clause.is_empty() {
                continue;
            }
            let (key, rest) = clause
                .split_once(':')
                .ok_or_else(|| LatticeError::Parse(format!("bad clause `{clause}`")))?;
            let rest = rest.trim();
            match key.trim() {
                "levels" => {
                    for l in rest.split(',') {
                        levels.push(l.trim().to_string());
                    }
                }
                "order" => {
                    for p in rest.split(',') {
                        let (a, b) = p
                            .split_once("<=")
                            .ok_or_else(|| LatticeError::Parse(format!("bad pair `{p}`")))?;
                        pairs.push((a.trim().to_string(), b.trim().to_string()));
                    }
                }
                "top" => top = Some(rest.to_string()),
                "bottom" => bottom = Some(rest.to_string()),
                other => return Err(LatticeError::Parse(format!("unknown clause `{other}`"))),
            }
        }
        Lattice::new(levels, pairs, top, bottom)
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn contains(&self, l: &str) -> bool {
        self.levels.iter().any(|x| x == l)
    }

    pub fn top(&self) -> &Level {
        &self.top
    }

    pub fn bottom(&self) -> &Level {
        &self.bottom
    }

    /// l1 ⊑ l2. Panics in debug builds if either level is undeclared;
    /// callers validate levels at program load.
    pub fn leq(&self, l1: &str, l2: &str) -> bool {
        debug_assert!(self.contains(l1), "undeclared level `{l1}`");
        debug_assert!(self.contains(l2), "undeclared level `{l2}`");
        self.leq.contains(&(l1.to_string(), l2.to_string()))
    }

    /// Multi-bound comparison: s ⊑ s1, …, sh.
    pub fn leq_all<'a>(&self, l: &str, rhs: impl IntoIterator<Item = &'a str>) -> bool {
        rhs.into_iter().all(|r| self.leq(l, r))
    }

    fn join_checked(&self, a: &str, b: &str) -> Result<Level, LatticeError> {
        let ubs: Vec<&Level> = self
            .levels
            .iter()
            .filter(|u| self.leq(a, u) && self.leq(b, u))
            .collect();
        let least: Vec<&&Level> = ubs.iter().filter(|u| ubs.iter().all(|v| self.leq(u, v))).collect();
        match least.as_slice() {
            [u] => Ok((**u).clone()),
            _ => Err(LatticeError::NotALattice(a.into(), b.into(), "join")),
        }
    }

    fn meet_checked(&self, a: &str, b: &str) -> Result<Level, LatticeError> {
        let lbs: Vec<&Level> = self
            .levels
            .iter()
            .filter(|l| self.leq(l, a) && self.leq(l, b))
            .collect();
        let greatest: Vec<&&Level> =
            lbs.iter().filter(|l| lbs.iter().all(|v| self.leq(v, l))).collect();
        match greatest.as_slice() {
            [l] => Ok((**l).clone()),
            _ => Err(LatticeError::NotALattice(a.into(), b.into(), "meet")),
        }
    }

    /// Least upper bound (validated to exist at load).
    pub fn join(&self, a: &str, b: &str) -> Level {
        self.join_checked(a, b).expect("join validated at load")
    }

    /// Greatest lower bound (validated to exist at load).
    pub fn meet(&self, a: &str, b: &str) -> Level {
        self.meet_checked(a, b).expect("meet validated at load")
    }

    /// Join of an iterator of levels, starting from bottom.
    pub fn join_all<'a>(&self, it: impl IntoIterator<Item = &'a str>) -> Level {
        it.into_iter().fold(self.bottom.clone(), |acc, l| self.join(&acc, l))
    }
}

impl fmt::Display for Lattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lattice {{ levels: {}; top: {}; bottom: {} }}", self.levels.join(", "), self.top, self.bottom)
    }
}

/// The covering pairs of the order (for serialization back out).
pub fn closure_pairs(lat: &Lattice) -> BTreeMap<Level, BTreeSet<Level>> {
    let mut m: BTreeMap<Level, BTreeSet<Level>> = BTreeMap::new();
    for a in lat.levels() {
        for b in lat.levels() {
            if lat.leq(a, b) {
                m.entry(a.clone()).or_default().insert(b.clone());
            }
        }
    }
    m
}
