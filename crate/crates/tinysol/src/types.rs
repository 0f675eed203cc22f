//! The type language and static environments: base types, member and procedure
//! types, the interface hierarchy Σ, the global typing Γ, and local typings Δ —
//! together with nominal subtyping and Σ-consistency checking.

use crate::lattice::{Lattice, Level};
use crate::syntax::Value;
use std::collections::BTreeMap;
use std::fmt;

/// Name of the implicit root interface at the top of the hierarchy.
pub const TOP_IFACE: &str = "Top";
/// Reserved method-name value used by the canonical state construction.
pub const CANON_METHOD: &str = "__m0";
/// Reserved absent method name used to force fallback exploration in id-dispatch.
pub const ABSENT_METHOD: &str = "__absent";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BaseType {
    Int,
    Bool,
    /// The type of method names.
    Idf,
    /// A nominal interface type.
    Iface(String),
}

impl fmt::Display for BaseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseType::Int => write!(f, "int"),
            BaseType::Bool => write!(f, "bool"),
            BaseType::Idf => write!(f, "idf"),
            BaseType::Iface(i) => write!(f, "{i}"),
        }
    }
}

/// A member type: either a container ⌈B_s⌉ (field or local variable) or a
/// procedure type ⌈B̃_s̃⌉ → cmd_s.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MemberType {
    Container(BaseType, Level),
    Proc(Vec<(BaseType, Level)>, Level),
}

impl fmt::Display for MemberType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemberType::Container(b, s) => write!(f, "{b}@{s}"),
            MemberType::Proc(params, s) => {
                write!(f, "(")?;
                for (i, (b, l)) in params.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{b}@{l}")?;
                }
                write!(f, ") -> cmd@{s}")
            }
        }
    }
}

/// The interface hierarchy: a partial map from interface name to parent name,
/// forming a tree rooted at [`TOP_IFACE`] (which is its own parent).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sigma {
    pub parent: BTreeMap<String, String>,
}

impl Sigma {
    pub fn with_top() -> Sigma {
        let mut parent = BTreeMap::new();
        parent.insert(TOP_IFACE.to_string(), TOP_IFACE.to_string());
        Sigma { parent }
    }
}

/// The body of an interface: an ordered map from member name to member type.
pub type IfaceBody = BTreeMap<String, MemberType>;

/// An entry of Γ: either an address typed at an interface and level, or an
/// interface body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GammaEntry {
    Addr(String, Level),
    Iface(IfaceBody),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gamma {
    pub entries: BTreeMap<String, GammaEntry>,
}

impl Gamma {
    /// Γ(X) for an address: the (interface, level) annotation.
    pub fn addr(&self, x: &str) -> Option<(&str, &Level)> {
        match self.entries.get(x) {
            Some(GammaEntry::Addr(i, s)) => Some((i.as_str(), s)),
            _ => None,
        }
    }

    /// Γ(I) for an interface: the member map.
    pub fn iface(&self, i: &str) -> Option<&IfaceBody> {
        match self.entries.get(i) {
            Some(GammaEntry::Iface(body)) => Some(body),
            _ => None,
        }
    }

    /// Γ(I)(m): member lookup (members are not inherited from parents).
    pub fn member(&self, iface: &str, m: &str) -> Option<&MemberType> {
        self.iface(iface).and_then(|b| b.get(m))
    }

    /// All declared addresses, in lexicographic order.
    pub fn addresses(&self) -> impl Iterator<Item = (&str, &str, &Level)> {
        self.entries.iter().filter_map(|(n, e)| match e {
            GammaEntry::Addr(i, s) => Some((n.as_str(), i.as_str(), s)),
            GammaEntry::Iface(_) => None,
        })
    }

    /// All declared interfaces.
    pub fn interfaces(&self) -> impl Iterator<Item = (&str, &IfaceBody)> {
        self.entries.iter().filter_map(|(n, e)| match e {
            GammaEntry::Iface(b) => Some((n.as_str(), b)),
            GammaEntry::Addr(..) => None,
        })
    }
}

/// The type of a Δ binding: an ordinary container, or the element-wise typed
/// variadic sequence bound to `args` in fallback frames.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarType {
    Container(BaseType, Level),
    ArgsSeq(Vec<(BaseType, Level)>),
}

impl fmt::Display for VarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarType::Container(b, s) => write!(f, "{b}@{s}"),
            VarType::ArgsSeq(elems) => {
                write!(f, "[")?;
                for (i, (b, s)) in elems.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{b}@{s}")?;
                }
                write!(f, "]")
            }
        }
    }
}

/// Local variable typings, including the magic variables.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Delta {
    pub entries: BTreeMap<String, VarType>,
}

impl Delta {
    pub fn new() -> Delta {
        Delta::default()
    }

    pub fn get(&self, x: &str) -> Option<&VarType> {
        self.entries.get(x)
    }

    /// Δ(x) as a container type (None for `args` sequences).
    pub fn container(&self, x: &str) -> Option<(&BaseType, &Level)> {
        match self.entries.get(x) {
            Some(VarType::Container(b, s)) => Some((b, s)),
            _ => None,
        }
    }

    pub fn bind(&self, x: &str, t: VarType) -> Delta {
        let mut d = self.clone();
        d.entries.insert(x.to_string(), t);
        d
    }

    pub fn unbind(&self, x: &str) -> Delta {
        let mut d = self.clone();
        d.entries.remove(x);
        d
    }
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (x, t)) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}: {t}")?;
        }
        write!(f, "}}")
    }
}

/// TypeOf: integers and booleans sit at bottom, method names are `idf` at
/// bottom, and addresses take their declared type from Γ (undefined if absent).
pub fn type_of(v: &Value, gamma: &Gamma, lat: &Lattice) -> Option<(BaseType, Level)> {
    match v {
        Value::Int(_) => Some((BaseType::Int, lat.bottom().clone())),
        Value::Bool(_) => Some((BaseType::Bool, lat.bottom().clone())),
        Value::Method(_) => Some((BaseType::Idf, lat.bottom().clone())),
        Value::Addr(x) => gamma
            .addr(x)
            .map(|(i, s)| (BaseType::Iface(i.to_string()), s.clone())),
        // The internal variadic sequence has no TypeOf.
        Value::Seq(_) => None,
    }
}

/// Base-type subtyping: sub-refl, sub-trans, and sub-name (Σ parent chain).
pub fn is_subtype(b1: &BaseType, b2: &BaseType, sigma: &Sigma) -> bool {
    if b1 == b2 {
        return true;
    }
    match (b1, b2) {
        (BaseType::Iface(i1), BaseType::Iface(i2)) => {
            // Walk the parent chain from i1; bounded by the map size to stay
            // total even on malformed (cyclic) input.
            let mut cur = i1.clone();
            for _ in 0..=sigma.parent.len() {
                if &cur == i2 {
                    return true;
                }
                match sigma.parent.get(&cur) {
                    Some(p) if *p != cur => cur = p.clone(),
                    _ => return false,
                }
            }
            false
        }
        _ => false,
    }
}

/// Interface subtyping at levels: Σ ⊢ I1_s1 <: I2_s2 iff I1 <: I2 and s1 ⊑ s2.
pub fn is_iface_subtype_at(
    i1: &str,
    s1: &Level,
    i2: &str,
    s2: &Level,
    sigma: &Sigma,
    lat: &Lattice,
) -> bool {
    is_subtype(&BaseType::Iface(i1.to_string()), &BaseType::Iface(i2.to_string()), sigma)
        && lat.leq(s1, s2)
}

/// Member subtyping: rule sub-field (covariant base and level) for containers,
/// rule sub-proc (contravariant parameters and command level) for procedures.
pub fn member_subtype(t1: &MemberType, t2: &MemberType, sigma: &Sigma, lat: &Lattice) -> bool {
    match (t1, t2) {
        (MemberType::Container(b1, s1), MemberType::Container(b2, s2)) => {
            is_subtype(b1, b2, sigma) && lat.leq(s1, s2)
        }
        (MemberType::Proc(p1, s1), MemberType::Proc(p2, s2)) => {
            p1.len() == p2.len()
                && lat.leq(s2, s1)
                && p1.iter().zip(p2).all(|((b1, l1), (b2, l2))| {
                    is_subtype(b2, b1, sigma) && lat.leq(l2, l1)
                })
        }
        _ => false,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TypeEnvError {
    #[error("Σ inconsistent: {0}")]
    Sigma(String),
    #[error("Γ ill-formed: {0}")]
    Gamma(String),
}

/// Γ well-formedness: address entries resolve to declared interfaces; interface
/// entries carry the mandatory balance/send/fallback members compatible with
/// the I_top baseline; every level mentioned is declared.
pub fn check_gamma_wellformed(gamma: &Gamma, lat: &Lattice) -> Result<(), TypeEnvError> {
    let check_level = |s: &Level, what: &str| -> Result<(), TypeEnvError> {
        if lat.contains(s) {
            Ok(())
        } else {
            Err(TypeEnvError::Gamma(format!("undeclared level `{s}` in {what}")))
        }
    };
    for (name, entry) in &gamma.entries {
        match entry {
            GammaEntry::Addr(i, s) => {
                check_level(s, &format!("address {name}"))?;
                if gamma.iface(i).is_none() {
                    return Err(TypeEnvError::Gamma(format!(
                        "address {name} annotated with undeclared interface {i}"
                    )));
                }
            }
            GammaEntry::Iface(body) => {
                for (m, t) in body {
                    match t {
                        MemberType::Container(b, s) => {
                            check_level(s, &format!("{name}.{m}"))?;
                            if let BaseType::Iface(i) = b {
                                if gamma.iface(i).is_none() {
                                    return Err(TypeEnvError::Gamma(format!(
                                        "{name}.{m} mentions undeclared interface {i}"
                                    )));
                                }
                            }
                        }
                        MemberType::Proc(params, s) => {
                            check_level(s, &format!("{name}.{m}"))?;
                            for (b, l) in params {
                                check_level(l, &format!("{name}.{m} parameter"))?;
                                if let BaseType::Iface(i) = b {
                                    if gamma.iface(i).is_none() {
                                        return Err(TypeEnvError::Gamma(format!(
                                            "{name}.{m} parameter mentions undeclared interface {i}"
                                        )));
                                    }
                                }
                            }
                        }
                    }
                }
                match body.get("balance") {
                    Some(MemberType::Container(BaseType::Int, _)) => {}
                    _ => {
                        return Err(TypeEnvError::Gamma(format!(
                            "interface {name} lacks balance : int container"
                        )))
                    }
                }
                match body.get("send") {
                    // The root declares send at the bottom level; overriding
                    // interfaces may raise it (sub-proc is contravariant in
                    // the command level) but must keep it nullary.
                    Some(MemberType::Proc(p, _)) if p.is_empty() => {}
                    _ => {
                        return Err(TypeEnvError::Gamma(format!(
                            "interface {name} lacks send : () -> cmd"
                        )))
                    }
                }
                match body.get("fallback") {
                    Some(MemberType::Proc(p, _)) if p.is_empty() => {}
                    _ => {
                        return Err(TypeEnvError::Gamma(format!(
                            "interface {name} lacks fallback : () -> cmd"
                        )))
                    }
                }
            }
        }
    }
    if gamma.iface(TOP_IFACE).is_none() {
        return Err(TypeEnvError::Gamma(format!("missing root interface {TOP_IFACE}")));
    }
    Ok(())
}

/// Σ-consistency by iterated leaf trimming (rules Σ-top / Σ-rec): the parent
/// relation must be a tree rooted at the top interface, and every child must
/// re-declare each parent member at a member-subtype-compatible type.
pub fn check_sigma_consistency(
    sigma: &Sigma,
    gamma: &Gamma,
    lat: &Lattice,
) -> Result<(), TypeEnvError> {
    if sigma.parent.get(TOP_IFACE).map(String::as_str) != Some(TOP_IFACE) {
        return Err(TypeEnvError::Sigma(format!("{TOP_IFACE} must be its own parent")));
    }
    // Every interface in Σ must have a Γ body and vice versa.
    for i in sigma.parent.keys() {
        if gamma.iface(i).is_none() {
            return Err(TypeEnvError::Sigma(format!("interface {i} has no Γ entry")));
        }
    }
    for (i, _) in gamma.interfaces() {
        if !sigma.parent.contains_key(i) {
            return Err(TypeEnvError::Sigma(format!("interface {i} has no Σ entry")));
        }
    }
    // Iteratively trim leaves (interfaces that are nobody's parent, except Top).
    let mut remaining: BTreeMap<String, String> = sigma.parent.clone();
    loop {
        if remaining.len() == 1 {
            // Must be exactly {(Top, Top)}.
            return if remaining.get(TOP_IFACE).map(String::as_str) == Some(TOP_IFACE) {
                Ok(())
            } else {
                Err(TypeEnvError::Sigma(format!(
                    "hierarchy does not reduce to {TOP_IFACE}: {remaining:?}"
                )))
            };
        }
        let leaf = remaining
            .keys()
            .find(|i| i.as_str() != TOP_IFACE && !remaining.values().any(|p| p == *i))
            .cloned();
        let Some(i1) = leaf else {
            return Err(TypeEnvError::Sigma(format!(
                "cycle in interface hierarchy among {:?}",
                remaining.keys().collect::<Vec<_>>()
            )));
        };
        let i2 = remaining[&i1].clone();
        if i1 == i2 {
            return Err(TypeEnvError::Sigma(format!("self-loop at {i1}")));
        }
        let g1 = gamma.iface(&i1).unwrap();
        let g2 = gamma
            .iface(&i2)
            .ok_or_else(|| TypeEnvError::Sigma(format!("parent {i2} of {i1} undeclared")))?;
        for (n, t2) in g2 {
            let Some(t1) = g1.get(n) else {
                return Err(TypeEnvError::Sigma(format!(
                    "{i1} misses member {n} declared in parent {i2}"
                )));
            };
            if !member_subtype(t1, t2, sigma, lat) {
                return Err(TypeEnvError::Sigma(format!(
                    "{i1}.{n} : {t1} is not a member subtype of {i2}.{n} : {t2}"
                )));
            }
        }
        remaining.remove(&i1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn top_body(lat: &Lattice) -> IfaceBody {
        let mut b = BTreeMap::new();
        b.insert("balance".into(), MemberType::Container(BaseType::Int, lat.top().clone()));
        b.insert("send".into(), MemberType::Proc(vec![], lat.bottom().clone()));
        b.insert("fallback".into(), MemberType::Proc(vec![], lat.bottom().clone()));
        b
    }

    fn base_env() -> (Sigma, Gamma, Lattice) {
        let lat = Lattice::two_point();
        let sigma = Sigma::with_top();
        let mut gamma = Gamma::default();
        gamma
            .entries
            .insert(TOP_IFACE.into(), GammaEntry::Iface(top_body(&lat)));
        (sigma, gamma, lat)
    }

    #[test]
    fn subtype_refl_and_chain() {
        let (mut sigma, _, _) = base_env();
        sigma.parent.insert("I2".into(), "I3".into());
        sigma.parent.insert("I1".into(), "I2".into());
        sigma.parent.insert("I3".into(), TOP_IFACE.into());
        assert!(is_subtype(&BaseType::Int, &BaseType::Int, &sigma)); // sub-refl
        let i = |n: &str| BaseType::Iface(n.into());
        assert!(is_subtype(&i("I1"), &i("I2"), &sigma)); // sub-name
        assert!(is_subtype(&i("I1"), &i("I3"), &sigma)); // two sub-name steps via sub-trans
        assert!(is_subtype(&i("I1"), &i(TOP_IFACE), &sigma));
        assert!(!is_subtype(&i("I3"), &i("I1"), &sigma));
        assert!(!is_subtype(&i("I1"), &BaseType::Int, &sigma));
    }

    #[test]
    fn member_subtype_rules() {
        let (sigma, _, lat) = base_env();
        let c = |b: BaseType, s: &str| MemberType::Container(b, s.into());
        // sub-field: ⌈int_L⌉ <: ⌈int_H⌉
        assert!(member_subtype(&c(BaseType::Int, "L"), &c(BaseType::Int, "H"), &sigma, &lat));
        // order violated
        assert!(!member_subtype(&c(BaseType::Int, "H"), &c(BaseType::Int, "L"), &sigma, &lat));
        // sub-proc: command level and parameter levels are both contravariant
        // (s2 ⊑ s1 and s̄2 ⊑ s̄1), so ((int,H))→cmd_H <: ((int,L))→cmd_L.
        let p1 = MemberType::Proc(vec![(BaseType::Int, "H".into())], "H".into());
        let p2 = MemberType::Proc(vec![(BaseType::Int, "L".into())], "L".into());
        assert!(member_subtype(&p1, &p2, &sigma, &lat));
        assert!(!member_subtype(&p2, &p1, &sigma, &lat));
        // kind mismatch
        assert!(!member_subtype(&c(BaseType::Int, "L"), &p1, &sigma, &lat));
    }

    #[test]
    fn sigma_top_only_accepts() {
        let (sigma, gamma, lat) = base_env();
        check_sigma_consistency(&sigma, &gamma, &lat).unwrap();
    }

    #[test]
    fn sigma_rejects_cycle() {
        let (mut sigma, mut gamma, lat) = base_env();
        sigma.parent.insert("A".into(), "B".into());
        sigma.parent.insert("B".into(), "A".into());
        gamma.entries.insert("A".into(), GammaEntry::Iface(top_body(&lat)));
        gamma.entries.insert("B".into(), GammaEntry::Iface(top_body(&lat)));
        assert!(check_sigma_consistency(&sigma, &gamma, &lat).is_err());
    }

    #[test]
    fn sigma_rejects_field_level_narrowing() {
        // Child re-declares a field at a lower level than the parent: sub-field
        // requires child-to-parent direction s1 ⊑ s2, so ⌈int_L⌉ under a parent
        // ⌈int_H⌉ is fine, but the parent balance at H under a child at L is not...
        // here we make the child narrow `p` downward relative to the parent.
        let (mut sigma, mut gamma, lat) = base_env();
        let mut parent = top_body(&lat);
        parent.insert("p".into(), MemberType::Container(BaseType::Int, "L".into()));
        let mut child = top_body(&lat);
        // Child must satisfy child.p <: parent.p i.e. s_child ⊑ s_parent = L; H fails.
        child.insert("p".into(), MemberType::Container(BaseType::Int, "H".into()));
        sigma.parent.insert("P".into(), TOP_IFACE.into());
        sigma.parent.insert("C".into(), "P".into());
        gamma.entries.insert("P".into(), GammaEntry::Iface(parent));
        gamma.entries.insert("C".into(), GammaEntry::Iface(child));
        assert!(check_sigma_consistency(&sigma, &gamma, &lat).is_err());
    }

    #[test]
    fn sigma_rejects_missing_member() {
        let (mut sigma, mut gamma, lat) = base_env();
        let mut parent = top_body(&lat);
        parent.insert("p".into(), MemberType::Container(BaseType::Int, "L".into()));
        sigma.parent.insert("P".into(), TOP_IFACE.into());
        sigma.parent.insert("C".into(), "P".into());
        gamma.entries.insert("P".into(), GammaEntry::Iface(parent));
        gamma.entries.insert("C".into(), GammaEntry::Iface(top_body(&lat)));
        let err = check_sigma_consistency(&sigma, &gamma, &lat).unwrap_err();
        assert!(err.to_string().contains("misses member p"));
    }

    #[test]
    fn type_of_values() {
        let (_, mut gamma, lat) = base_env();
        gamma
            .entries
            .insert("X".into(), GammaEntry::Addr(TOP_IFACE.into(), "H".into()));
        assert_eq!(
            type_of(&Value::Int(5), &gamma, &lat),
            Some((BaseType::Int, "L".into()))
        );
        assert_eq!(
            type_of(&Value::Bool(true), &gamma, &lat),
            Some((BaseType::Bool, "L".into()))
        );
        assert_eq!(
            type_of(&Value::Method("f".into()), &gamma, &lat),
            Some((BaseType::Idf, "L".into()))
        );
        assert_eq!(
            type_of(&Value::Addr("X".into()), &gamma, &lat),
            Some((BaseType::Iface(TOP_IFACE.into()), "H".into()))
        );
        assert_eq!(type_of(&Value::Addr("unknown".into()), &gamma, &lat), None);
    }

    #[test]
    fn delta_bind_unbind_roundtrip() {
        let d = Delta::new();
        let d2 = d.bind("x", VarType::Container(BaseType::Int, "L".into()));
        let d3 = d2.bind("y", VarType::Container(BaseType::Bool, "H".into()));
        assert_eq!(d3.unbind("y"), d2);
        assert_eq!(d2.unbind("x"), d);
        assert_eq!(
            d3.container("x"),
            Some((&BaseType::Int, &"L".to_string()))
        );
    }
}
