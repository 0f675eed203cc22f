//! Abstract syntax for TinySol: values, expressions, statements, contract and
//! interface declarations, whole programs, and the free-name analyses.
//!
//! Magic variables (`this`, `sender`, `value`, `id`) are ordinary [`Expr::Var`]
//! nodes — they share the variable namespace, exactly as in the environment
//! signature env_V : (Vars ∪ {value, sender, this, id, args}) ⇀ Values.
//! `args` never occurs as an ordinary expression; it is only legal as a whole
//! argument list in calls (`f(args)`), captured by [`CallArgs::ArgsVar`].

use crate::lattice::Level;
use crate::types::BaseType;
use std::collections::BTreeSet;
use std::fmt;

/// Runtime values. `Seq` is internal-only: the variadic sequence bound to
/// `args` in fallback frames; it has no source syntax and no TypeOf.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Int(i64),
    Bool(bool),
    Addr(String),
    Method(String),
    Seq(Vec<Value>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Addr(a) => write!(f, "{a}"),
            Value::Method(m) => write!(f, "{m}"),
            Value::Seq(vs) => {
                write!(f, "[")?;
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, "]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Expr {
    Lit(Value),
    Var(String),
    /// Field read `e.p`; `e.balance` is the same node with p = "balance".
    Field(Box<Expr>, String),
    Op(String, Vec<Expr>),
}

impl Expr {
    pub fn var(x: &str) -> Expr {
        Expr::Var(x.to_string())
    }
    pub fn this() -> Expr {
        Expr::var("this")
    }
    pub fn int(n: i64) -> Expr {
        Expr::Lit(Value::Int(n))
    }
}

/// The method position of a call: a literal method name or the magic `id`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodRef {
    Name(String),
    Id,
}

impl fmt::Display for MethodRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodRef::Name(n) => write!(f, "{n}"),
            MethodRef::Id => write!(f, "id"),
        }
    }
}

/// Call argument lists: an explicit expression list, or the whole stored
/// variadic list `args`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CallArgs {
    List(Vec<Expr>),
    ArgsVar,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stm {
    Skip,
    Throw,
    /// `let x: B@s := e in S`
    DeclVar {
        base: BaseType,
        level: Level,
        name: String,
        init: Expr,
        body: Box<Stm>,
    },
    AssignVar(String, Expr),
    /// `this.p := e` (p ≠ balance, enforced by the parser)
    AssignField(String, Expr),
    Seq(Box<Stm>, Box<Stm>),
    If(Expr, Box<Stm>, Box<Stm>),
    While(Expr, Box<Stm>),
    /// `call e1.m(ē)$e2`
    Call {
        target: Expr,
        method: MethodRef,
        args: CallArgs,
        amount: Expr,
    },
    /// `dcall e.m(ē)`
    DCall {
        target: Expr,
        method: MethodRef,
        args: CallArgs,
    },
}

// ---------------------------------------------------------------------------
// Pretty-printing (the inverse of the parser; round-trips on abstract syntax).
// ---------------------------------------------------------------------------

fn op_info(op: &str) -> Option<(u8, bool)> {
    // (binding power, is_binary); higher binds tighter.
    match op {
        "or" => Some((1, true)),
        "and" => Some((2, true)),
        "=" | "<" | "<=" => Some((3, true)),
        "+" | "-" => Some((4, true)),
        "*" => Some((5, true)),
        "not" => Some((6, false)),
        _ => None,
    }
}

fn fmt_expr(e: &Expr, parent_bp: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match e {
        Expr::Lit(v) => write!(f, "{v}"),
        Expr::Var(x) => write!(f, "{x}"),
        Expr::Field(e, p) => {
            fmt_expr(e, 7, f)?;
            write!(f, ".{p}")
        }
        Expr::Op(op, args) => match op_info(op) {
            Some((bp, true)) if args.len() == 2 => {
                let need = bp <= parent_bp;
                if need {
                    write!(f, "(")?;
                }
                fmt_expr(&args[0], bp - 1, f)?;
                write!(f, " {op} ")?;
                fmt_expr(&args[1], bp, f)?;
                if need {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Some((bp, false)) if args.len() == 1 => {
                let need = bp <= parent_bp;
                if need {
                    write!(f, "(")?;
                }
                write!(f, "{op} ")?;
                fmt_expr(&args[0], bp - 1, f)?;
                if need {
                    write!(f, ")")?;
                }
                Ok(())
            }
            _ => {
                // Fallback prefix form (not produced by the parser).
                write!(f, "{op}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    fmt_expr(a, 0, f)?;
                }
                write!(f, ")")
            }
        },
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_expr(self, 0, f)
    }
}

impl fmt::Display for CallArgs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CallArgs::ArgsVar => write!(f, "args"),
            CallArgs::List(es) => {
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{e}")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Stm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stm::Skip => write!(f, "skip"),
            Stm::Throw => write!(f, "throw"),
            Stm::DeclVar { base, level, name, init, body } => {
                write!(f, "let {name}: {base}@{level} := {init} in {{ {body} }}")
            }
            Stm::AssignVar(x, e) => write!(f, "{x} := {e}"),
            Stm::AssignField(p, e) => write!(f, "this.{p} := {e}"),
            Stm::Seq(a, b) => write!(f, "{a}; {b}"),
            Stm::If(e, t, e2) => write!(f, "if {e} then {{ {t} }} else {{ {e2} }}"),
            Stm::While(e, s) => write!(f, "while {e} do {{ {s} }}"),
            Stm::Call { target, method, args, amount } => {
                write!(f, "call {}.{method}({args})${}", TargetFmt(target), AmountFmt(amount))
            }
            Stm::DCall { target, method, args } => {
                write!(f, "dcall {}.{method}({args})", TargetFmt(target))
            }
        }
    }
}

/// Call targets print parenthesized unless they are postfix-safe (vars,
/// literals, field chains), so `call (x).f()` round-trips.
struct TargetFmt<'a>(&'a Expr);
impl fmt::Display for TargetFmt<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Expr::Lit(_) | Expr::Var(_) | Expr::Field(..) => write!(f, "{}", self.0),
            other => write!(f, "({other})"),
        }
    }
}

/// Amounts print parenthesized unless atomic, so `$z` binds tightly.
struct AmountFmt<'a>(&'a Expr);
impl fmt::Display for AmountFmt<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Expr::Lit(_) | Expr::Var(_) | Expr::Field(..) => write!(f, "{}", self.0),
            other => write!(f, "({other})"),
        }
    }
}

// ---------------------------------------------------------------------------
// Declarations and programs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractDecl {
    pub address: String,
    pub iface: String,
    pub level: Level,
    /// Ordered fields, beginning with balance.
    pub fields: Vec<(String, Value)>,
    /// Ordered methods, beginning with send() { skip }.
    pub methods: Vec<(String, Vec<String>, Stm)>,
    pub fallback: Stm,
}

impl ContractDecl {
    pub fn method(&self, f: &str) -> Option<(&[String], &Stm)> {
        self.methods
            .iter()
            .find(|(n, _, _)| n == f)
            .map(|(_, p, b)| (p.as_slice(), b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub contracts: Vec<ContractDecl>,
    pub sigma: crate::types::Sigma,
    pub gamma: crate::types::Gamma,
    pub lattice: crate::lattice::Lattice,
    /// Raw sources (contracts, interfaces, lattice) for content hashing.
    pub sources: (String, String, String),
}

impl Program {
    pub fn contract(&self, addr: &str) -> Option<&ContractDecl> {
        self.contracts.iter().find(|c| c.address == addr)
    }

    /// SHA-256 digest over the (source, interfaces, lattice) triple with
    /// length-prefixed fields.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for part in [&self.sources.0, &self.sources.1, &self.sources.2] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Free names
// ---------------------------------------------------------------------------

/// Free variable names of an expression.
pub fn free_vars_expr(e: &Expr) -> BTreeSet<String> {
    match e {
        Expr::Lit(_) => BTreeSet::new(),
        Expr::Var(x) => [x.clone()].into(),
        Expr::Field(e, _) => free_vars_expr(e),
        Expr::Op(_, args) => args.iter().flat_map(free_vars_expr).collect(),
    }
}

fn free_vars_args(a: &CallArgs) -> BTreeSet<String> {
    match a {
        CallArgs::ArgsVar => ["args".to_string()].into(),
        CallArgs::List(es) => es.iter().flat_map(free_vars_expr).collect(),
    }
}

/// Free variable names of a statement: `this.p := e`
/// contributes {this}; a call's method position contributes {id} when it is
/// the magic `id`; dcall always contributes {id}.
pub fn free_vars_stm(s: &Stm) -> BTreeSet<String> {
    match s {
        Stm::Skip | Stm::Throw => BTreeSet::new(),
        Stm::DeclVar { init, name, body, .. } => {
            let mut fv = free_vars_stm(body);
            fv.remove(name);
            fv.extend(free_vars_expr(init));
            fv
        }
        Stm::AssignVar(x, e) => {
            let mut fv = free_vars_expr(e);
            fv.insert(x.clone());
            fv
        }
        Stm::AssignField(_, e) => {
            let mut fv = free_vars_expr(e);
            fv.insert("this".into());
            fv
        }
        Stm::Seq(a, b) => {
            let mut fv = free_vars_stm(a);
            fv.extend(free_vars_stm(b));
            fv
        }
        Stm::If(e, t, f2) => {
            let mut fv = free_vars_expr(e);
            fv.extend(free_vars_stm(t));
            fv.extend(free_vars_stm(f2));
            fv
        }
        Stm::While(e, b) => {
            let mut fv = free_vars_expr(e);
            fv.extend(free_vars_stm(b));
            fv
        }
        Stm::Call { target, method, args, amount } => {
            let mut fv = free_vars_expr(target);
            fv.extend(free_vars_args(args));
            fv.extend(free_vars_expr(amount));
            if matches!(method, MethodRef::Id) {
                fv.insert("id".into());
            }
            fv
        }
        Stm::DCall { target, args, .. } => {
            let mut fv = free_vars_expr(target);
            fv.extend(free_vars_args(args));
            fv.insert("id".into());
            fv
        }
    }
}

/// Address literals syntactically occurring in an expression.
pub fn free_addrs_expr(e: &Expr) -> BTreeSet<String> {
    match e {
        Expr::Lit(Value::Addr(a)) => [a.clone()].into(),
        Expr::Lit(_) | Expr::Var(_) => BTreeSet::new(),
        Expr::Field(e, _) => free_addrs_expr(e),
        Expr::Op(_, args) => args.iter().flat_map(free_addrs_expr).collect(),
    }
}

/// Address literals syntactically occurring in a statement (addresses cannot
/// be bound, so this is a plain scan).
pub fn free_addrs_stm(s: &Stm) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut exprs: Vec<&Expr> = Vec::new();
    collect_exprs(s, &mut exprs);
    for e in exprs {
        out.extend(free_addrs_expr(e));
    }
    out
}

fn collect_exprs<'a>(s: &'a Stm, out: &mut Vec<&'a Expr>) {
    match s {
        Stm::Skip | Stm::Throw => {}
        Stm::DeclVar { init, body, .. } => {
            out.push(init);
            collect_exprs(body, out);
        }
        Stm::AssignVar(_, e) | Stm::AssignField(_, e) => out.push(e),
        Stm::Seq(a, b) => {
            collect_exprs(a, out);
            collect_exprs(b, out);
        }
        Stm::If(e, t, f) => {
            out.push(e);
            collect_exprs(t, out);
            collect_exprs(f, out);
        }
        Stm::While(e, b) => {
            out.push(e);
            collect_exprs(b, out);
        }
        Stm::Call { target, args, amount, .. } => {
            out.push(target);
            if let CallArgs::List(es) = args {
                out.extend(es.iter());
            }
            out.push(amount);
        }
        Stm::DCall { target, args, .. } => {
            out.push(target);
            if let CallArgs::List(es) = args {
                out.extend(es.iter());
            }
        }
    }
}
