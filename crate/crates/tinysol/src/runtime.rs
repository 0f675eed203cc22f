//! Runtime environments, declaration elaboration, and the untyped small-step
//! semantics of stacks, with labelled call traces for call-integrity checking.

use crate::lattice::Level;
use crate::parser::TxEntry;
use crate::syntax::{CallArgs, ContractDecl, Expr, MethodRef, Program, Stm, Value};
use crate::types::{BaseType, Delta};
use std::collections::BTreeMap;
use std::fmt;

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// One variable binding: name, value, and an optional container-type
/// annotation.
pub type VarBinding = (String, Value, Option<(BaseType, Level)>);

/// An ordered variable environment. Each binding optionally carries a container
/// type annotation: the untyped semantics' decv rule stores typed pairs
/// (v, B_s), while the typed semantics stores plain values (with Δ aside).
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarEnv {
    pub entries: Vec<VarBinding>,
}

impl VarEnv {
    pub fn new() -> VarEnv {
        VarEnv::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Value)>) -> VarEnv {
        VarEnv { entries: pairs.into_iter().map(|(x, v)| (x, v, None)).collect() }
    }

    pub fn get(&self, x: &str) -> Option<&Value> {
        self.entries.iter().rev().find(|(n, _, _)| n == x).map(|(_, v, _)| v)
    }

    pub fn contains(&self, x: &str) -> bool {
        self.get(x).is_some()
    }

    /// Append a binding (rule decv requires x ∉ dom first; callers check).
    pub fn bind(&mut self, x: &str, v: Value, ann: Option<(BaseType, Level)>) {
        self.entries.push((x.to_string(), v, ann));
    }

    /// Update an existing binding in place (rule assv).
    pub fn set(&mut self, x: &str, v: Value) -> bool {
        match self.entries.iter_mut().rev().find(|(n, _, _)| n == x) {
            Some(slot) => {
                slot.1 = v;
                true
            }
            None => false,
        }
    }

    /// Remove the most recent binding of x (rule delv).
    pub fn remove(&mut self, x: &str) -> bool {
        match self.entries.iter().rposition(|(n, _, _)| n == x) {
            Some(i) => {
                self.entries.remove(i);
                true
            }
            None => false,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    /// Canonical form: bindings sorted by name (used for memoization keys).
    pub fn canonical(&self) -> VarEnv {
        let mut e = self.entries.clone();
        e.sort();
        VarEnv { entries: e }
    }
}

impl fmt::Display for VarEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (x, v, ann)) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            match ann {
                Some((b, s)) => write!(f, "{x}: ({v}, {b}@{s})")?,
                None => write!(f, "{x}: {v}")?,
            }
        }
        write!(f, "}}")
    }
}

pub type FieldEnv = BTreeMap<String, Value>;
pub type State = BTreeMap<String, FieldEnv>;
/// Method environment: method name → (parameters, body); includes fallback.
pub type MethodEnv = BTreeMap<String, (Vec<String>, Stm)>;
pub type MethodTable = BTreeMap<String, MethodEnv>;

// ---------------------------------------------------------------------------
// Stacks and configurations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StackSym {
    Stm(Stm),
    Del(String),
    /// Return symbol: a saved variable environment, optionally paired with a
    /// saved Δ (typed-semantics return symbols carry the Δ snapshot).
    Ret(VarEnv, Option<Delta>),
    Lvl(Level),
}

/// A stack: symbols from top to bottom, with the terminating ⊥ implicit.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stack {
    pub syms: Vec<StackSym>,
}

impl Stack {
    pub fn bottom() -> Stack {
        Stack::default()
    }

    pub fn from_syms(syms: Vec<StackSym>) -> Stack {
        let mut q = Stack::bottom();
        for s in syms.into_iter().rev() {
            match s {
                StackSym::Stm(st) => q.push_stm(st),
                other => q.syms.insert(0, other),
            }
        }
        q
    }

    /// Push a statement, flattening sequences into separate symbols (stack `;`
    /// is sequencing).
    pub fn push_stm(&mut self, s: Stm) {
        match s {
            Stm::Seq(a, b) => {
                self.push_stm(*b);
                self.push_stm(*a);
            }
            other => self.syms.insert(0, StackSym::Stm(other)),
        }
    }

    pub fn head(&self) -> Option<&StackSym> {
        self.syms.first()
    }

    pub fn pop(&mut self) -> Option<StackSym> {
        if self.syms.is_empty() {
            None
        } else {
            Some(self.syms.remove(0))
        }
    }

    /// Terminal stacks TQ: ⊥ or throw;Q.
    pub fn is_terminal(&self) -> bool {
        matches!(self.head(), None | Some(StackSym::Stm(Stm::Throw)))
    }
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for sym in &self.syms {
            match sym {
                StackSym::Stm(s) => write!(f, "{s}; ")?,
                StackSym::Del(x) => write!(f, "del({x}); ")?,
                StackSym::Ret(env, d) => match d {
                    Some(d) => write!(f, "ret({env} | {d}); ")?,
                    None => write!(f, "ret({env}); ")?,
                },
                StackSym::Lvl(s) => write!(f, "lvl({s}); ")?,
            }
        }
        write!(f, "bot")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    pub stack: Stack,
    pub table: MethodTable,
    pub state: State,
    pub vars: VarEnv,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TraceLabel {
    Silent,
    Call {
        caller: String,
        callee: String,
        method: String,
        args: Vec<String>,
        amount: i64,
    },
}

impl TraceLabel {
    pub fn call(caller: &str, callee: &str, method: &str, args: &[Value], amount: i64) -> TraceLabel {
        TraceLabel::Call {
            caller: caller.to_string(),
            callee: callee.to_string(),
            method: method.to_string(),
            args: args.iter().map(|v| v.to_string()).collect(),
            amount,
        }
    }
}

pub type Trace = Vec<TraceLabel>;

/// Keep exactly the labels whose caller equals x, order preserved.
pub fn project_trace(t: &[TraceLabel], x: &str) -> Trace {
    t.iter()
        .filter(|l| matches!(l, TraceLabel::Call { caller, .. } if caller == x))
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// Elaboration of declarations
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum ElabError {
    #[error("duplicate contract address {0}")]
    Duplicate(String),
}

/// Rules decf/decm/decc: each contract contributes its field map (balance
/// first) and its method map (send, declared methods, fallback).
pub fn elaborate_declarations(p: &Program) -> Result<(MethodTable, State), ElabError> {
    let mut table = MethodTable::new();
    let mut state = State::new();
    for c in &p.contracts {
        if state.contains_key(&c.address) {
            return Err(ElabError::Duplicate(c.address.clone()));
        }
        state.insert(c.address.clone(), elaborate_fields(c));
        table.insert(c.address.clone(), elaborate_methods(c));
    }
    Ok((table, state))
}

pub fn elaborate_fields(c: &ContractDecl) -> FieldEnv {
    c.fields.iter().cloned().collect()
}

pub fn elaborate_methods(c: &ContractDecl) -> MethodEnv {
    let mut m: MethodEnv = c
        .methods
        .iter()
        .map(|(n, p, b)| (n.clone(), (p.clone(), b.clone())))
        .collect();
    m.insert("fallback".into(), (vec![], c.fallback.clone()));
    m
}

// ---------------------------------------------------------------------------
// Expression evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("stuck: {0}")]
pub struct Stuck(pub String);

fn stuck<T>(msg: impl Into<String>) -> Result<T, Stuck> {
    Err(Stuck(msg.into()))
}

/// Apply one of the fixed operators. Total on well-typed inputs; equality is
/// additionally defined on method names and addresses (yielding bool).
pub fn apply_op(op: &str, args: &[Value]) -> Result<Value, Stuck> {
    use Value::*;
    match (op, args) {
        ("+", [Int(a), Int(b)]) => Ok(Int(a.wrapping_add(*b))),
        ("-", [Int(a), Int(b)]) => Ok(Int(a.wrapping_sub(*b))),
        ("*", [Int(a), Int(b)]) => Ok(Int(a.wrapping_mul(*b))),
        ("<", [Int(a), Int(b)]) => Ok(Bool(a < b)),
        ("<=", [Int(a), Int(b)]) => Ok(Bool(a <= b)),
        ("=", [Int(a), Int(b)]) => Ok(Bool(a == b)),
        ("=", [Bool(a), Bool(b)]) => Ok(Bool(a == b)),
        ("=", [Method(a), Method(b)]) => Ok(Bool(a == b)),
        ("=", [Addr(a), Addr(b)]) => Ok(Bool(a == b)),
        ("and", [Bool(a), Bool(b)]) => Ok(Bool(*a && *b)),
        ("or", [Bool(a), Bool(b)]) => Ok(Bool(*a || *b)),
        ("not", [Bool(a)]) => Ok(Bool(!a)),
        _ => stuck(format!("operator `{op}` undefined on {args:?}")),
    }
}

/// The signature ⊢ op : B̄ → B of each operator, used by the type systems.
/// Equality is overloaded; the admissible instantiations are returned.
pub fn op_signatures(op: &str) -> Vec<(Vec<BaseType>, BaseType)> {
    use BaseType::*;
    match op {
        "+" | "-" | "*" => vec![(vec![Int, Int], Int)],
        "<" | "<=" => vec![(vec![Int, Int], Bool)],
        "and" | "or" => vec![(vec![Bool, Bool], Bool)],
        "not" => vec![(vec![Bool], Bool)],
        // `=` instances over int/bool/idf are closed here; the interface
        // instances are provided by the type checker (any interface base).
        "=" => vec![(vec![Int, Int], Bool), (vec![Bool, Bool], Bool), (vec![Idf, Idf], Bool)],
        _ => vec![],
    }
}

/// Big-step evaluation per rules exp-val/exp-var/exp-field/exp-op.
pub fn eval_expr(e: &Expr, state: &State, vars: &VarEnv) -> Result<Value, Stuck> {
    match e {
        Expr::Lit(v) => Ok(v.clone()),
        Expr::Var(x) => match vars.get(x) {
            Some(v) => Ok(v.clone()),
            None => stuck(format!("unbound variable `{x}`")),
        },
        Expr::Field(e, p) => {
            let v = eval_expr(e, state, vars)?;
            let Value::Addr(x) = v else {
                return stuck(format!("field read on non-address value {v}"));
            };
            let Some(fe) = state.get(&x) else {
                return stuck(format!("unknown address {x}"));
            };
            match fe.get(p) {
                Some(v) => Ok(v.clone()),
                None => stuck(format!("{x} has no field {p}")),
            }
        }
        Expr::Op(op, args) => {
            let vs: Vec<Value> = args
                .iter()
                .map(|a| eval_expr(a, state, vars))
                .collect::<Result<_, _>>()?;
            apply_op(op, &vs)
        }
    }
}

// ---------------------------------------------------------------------------
// The untyped small-step semantics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    Next(Configuration, TraceLabel),
    /// Stack is ⊥ or throw;Q.
    Terminal,
    /// Non-terminal but no rule applies.
    Stuck(String),
}

/// Resolve the method position of a call: a literal name, or the value of the
/// magic variable `id`.
pub fn resolve_method(m: &MethodRef, vars: &VarEnv) -> Result<String, Stuck> {
    match m {
        MethodRef::Name(f) => Ok(f.clone()),
        MethodRef::Id => match vars.get("id") {
            Some(Value::Method(f)) => Ok(f.clone()),
            Some(v) => stuck(format!("id is bound to non-method value {v}")),
            None => stuck("id is unbound"),
        },
    }
}

/// Evaluate a call's argument list: explicit expressions, or the stored
/// variadic sequence bound to `args`.
pub fn eval_call_args(args: &CallArgs, state: &State, vars: &VarEnv) -> Result<Vec<Value>, Stuck> {
    match args {
        CallArgs::List(es) => es.iter().map(|e| eval_expr(e, state, vars)).collect(),
        CallArgs::ArgsVar => match vars.get("args") {
            Some(Value::Seq(vs)) => Ok(vs.clone()),
            Some(v) => stuck(format!("args is bound to non-sequence value {v}")),
            None => stuck("args is unbound"),
        },
    }
}

/// One untyped small step, per rules skip/if/while/decv/assv/assf/delv/return
/// and the three call rules; returns the reduct and its trace label.
pub fn step_untyped(c: &Configuration) -> StepResult {
    if c.stack.is_terminal() {
        return StepResult::Terminal;
    }
    let mut next = c.clone();
    match step_untyped_in_place(&mut next) {
        InPlaceStep::Terminal => StepResult::Terminal,
        InPlaceStep::Next(label) => StepResult::Next(next, label),
        InPlaceStep::Stuck(msg) => StepResult::Stuck(msg),
    }
}

/// Outcome of an in-place step (the configuration is mutated to the reduct).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InPlaceStep {
    Next(TraceLabel),
    Terminal,
    Stuck(String),
}

/// [`step_untyped`] without cloning the configuration: the reduct is written
/// over `c`. On a stuck step `c` is left unchanged (the popped head is pushed
/// back). This keeps long runs linear in the stack size — the cloning variant
/// copies the whole method table, state, and stack on every step.
pub fn step_untyped_in_place(c: &mut Configuration) -> InPlaceStep {
    if c.stack.is_terminal() {
        return InPlaceStep::Terminal;
    }
    let head = c.stack.pop().expect("non-terminal stack has a head");
    match untyped_reduce(c, head.clone()) {
        Ok(label) => InPlaceStep::Next(label),
        Err(Stuck(msg)) => {
            // Every arm of untyped_reduce performs all fallible work before
            // mutating, so restoring the head restores the configuration.
            c.stack.syms.insert(0, head);
            InPlaceStep::Stuck(msg)
        }
    }
}

/// Reduce one popped head against the configuration. All fallible evaluation
/// happens before any mutation, so errors leave `c` unchanged (modulo the
/// already-popped head, which the caller restores).
fn untyped_reduce(c: &mut Configuration, head: StackSym) -> Result<TraceLabel, Stuck> {
    match head {
        StackSym::Del(x) => {
            if !c.vars.remove(&x) {
                return stuck(format!("del({x}) but {x} unbound"));
            }
            Ok(TraceLabel::Silent)
        }
        StackSym::Ret(saved, _) => {
            c.vars = saved;
            Ok(TraceLabel::Silent)
        }
        StackSym::Lvl(s) => stuck(format!("security level symbol {s} in untyped execution")),
        StackSym::Stm(s) => match s {
            Stm::Skip => Ok(TraceLabel::Silent),
            Stm::Throw => unreachable!("throw-headed stacks are terminal"),
            Stm::Seq(a, b) => {
                c.stack.push_stm(*b);
                c.stack.push_stm(*a);
                Ok(TraceLabel::Silent)
            }
            Stm::If(e, t, f) => {
                match eval_expr(&e, &c.state, &c.vars)? {
                    Value::Bool(true) => c.stack.push_stm(*t),
                    Value::Bool(false) => c.stack.push_stm(*f),
                    v => return stuck(format!("if guard evaluated to non-boolean {v}")),
                }
                Ok(TraceLabel::Silent)
            }
            Stm::While(e, b) => {
                match eval_expr(&e, &c.state, &c.vars)? {
                    Value::Bool(true) => {
                        c.stack.push_stm(Stm::While(e, b.clone()));
                        c.stack.push_stm(*b);
                    }
                    Value::Bool(false) => {}
                    v => return stuck(format!("while guard evaluated to non-boolean {v}")),
                }
                Ok(TraceLabel::Silent)
            }
            Stm::DeclVar { base, level, name, init, body } => {
                if c.vars.contains(&name) {
                    return stuck(format!("decv: {name} already bound"));
                }
                let v = eval_expr(&init, &c.state, &c.vars)?;
                c.vars.bind(&name, v, Some((base, level)));
                c.stack.syms.insert(0, StackSym::Del(name));
                c.stack.push_stm(*body);
                Ok(TraceLabel::Silent)
            }
            Stm::AssignVar(x, e) => {
                if !c.vars.contains(&x) {
                    return stuck(format!("assv: {x} unbound"));
                }
                let v = eval_expr(&e, &c.state, &c.vars)?;
                c.vars.set(&x, v);
                Ok(TraceLabel::Silent)
            }
            Stm::AssignField(p, e) => {
                let Some(Value::Addr(x)) = c.vars.get("this").cloned() else {
                    return stuck("assf: this is not bound to an address");
                };
                let v = eval_expr(&e, &c.state, &c.vars)?;
                let fe = c.state.get_mut(&x).ok_or(Stuck(format!("assf: unknown address {x}")))?;
                if !fe.contains_key(&p) {
                    return stuck(format!("assf: {x} has no field {p}"));
                }
                fe.insert(p, v);
                Ok(TraceLabel::Silent)
            }
            Stm::Call { target, method, args, amount } => {
                let Value::Addr(y) = eval_expr(&target, &c.state, &c.vars)? else {
                    return stuck("call target is not an address");
                };
                let Value::Int(z) = eval_expr(&amount, &c.state, &c.vars)? else {
                    return stuck("call amount is not an integer");
                };
                let vs = eval_call_args(&args, &c.state, &c.vars)?;
                let f = resolve_method(&method, &c.vars)?;
                let Some(Value::Addr(x)) = c.vars.get("this").cloned() else {
                    return stuck("call: this is not bound to an address");
                };
                let menv = c.table.get(&y).ok_or(Stuck(format!("call: no contract at {y}")))?;
                let mut new_vars = VarEnv::new();
                new_vars.bind("this", Value::Addr(y.clone()), None);
                new_vars.bind("sender", Value::Addr(x.clone()), None);
                new_vars.bind("value", Value::Int(z), None);
                let body = if let Some((params, body)) = menv.get(&f) {
                    // Rule call.
                    if params.len() != vs.len() {
                        return stuck(format!(
                            "call: {y}.{f} expects {} arguments, got {}",
                            params.len(),
                            vs.len()
                        ));
                    }
                    for (p, v) in params.iter().zip(&vs) {
                        new_vars.bind(p, v.clone(), None);
                    }
                    body.clone()
                } else {
                    // Rule fcall: the invoked method is not provided by the callee.
                    let (_, body) = menv
                        .get("fallback")
                        .ok_or(Stuck(format!("fcall: {y} has no fallback")))?;
                    new_vars.bind("id", Value::Method(f.clone()), None);
                    new_vars.bind("args", Value::Seq(vs.clone()), None);
                    body.clone()
                };
                // Transfer the amount (balances may go negative; calls always succeed).
                transfer(&mut c.state, &x, &y, z)?;
                let saved = std::mem::replace(&mut c.vars, new_vars);
                c.stack.syms.insert(0, StackSym::Ret(saved, None));
                c.stack.push_stm(body);
                Ok(TraceLabel::call(&x, &y, &f, &vs, z))
            }
            Stm::DCall { target, method, args } => {
                let Value::Addr(y) = eval_expr(&target, &c.state, &c.vars)? else {
                    return stuck("dcall target is not an address");
                };
                let vs = eval_call_args(&args, &c.state, &c.vars)?;
                let f = resolve_method(&method, &c.vars)?;
                let menv = c.table.get(&y).ok_or(Stuck(format!("dcall: no contract at {y}")))?;
                // No fallback variant for dcall: absent method means stuck.
                let Some((params, body)) = menv.get(&f) else {
                    return stuck(format!("dcall: {y} has no method {f}"));
                };
                if params.len() != vs.len() {
                    return stuck(format!(
                        "dcall: {y}.{f} expects {} arguments, got {}",
                        params.len(),
                        vs.len()
                    ));
                }
                // Executed in the context of the caller: this/sender/value kept.
                let mut new_vars = VarEnv::new();
                for magic in ["this", "sender", "value"] {
                    let v = c
                        .vars
                        .get(magic)
                        .ok_or(Stuck(format!("dcall: {magic} is unbound")))?
                        .clone();
                    new_vars.bind(magic, v, None);
                }
                let Some(Value::Addr(caller)) = c.vars.get("this").cloned() else {
                    return stuck("dcall: this is not bound to an address");
                };
                for (p, v) in params.iter().zip(&vs) {
                    new_vars.bind(p, v.clone(), None);
                }
                let body = body.clone();
                let saved = std::mem::replace(&mut c.vars, new_vars);
                c.stack.syms.insert(0, StackSym::Ret(saved, None));
                c.stack.push_stm(body);
                Ok(TraceLabel::call(&caller, &y, &f, &vs, 0))
            }
        },
    }
}

fn transfer(state: &mut State, from: &str, to: &str, z: i64) -> Result<(), Stuck> {
    let get = |state: &mut State, who: &str| -> Result<i64, Stuck> {
        match state.get(who).and_then(|fe| fe.get("balance")) {
            Some(Value::Int(n)) => Ok(*n),
            _ => stuck(format!("{who} has no integer balance")),
        }
    };
    // Validate both ends before mutating either, so failures leave the state
    // untouched (in-place stepping relies on this).
    let fb = get(state, from)?;
    let tb = get(state, to)?;
    state.get_mut(from).unwrap().insert("balance".into(), Value::Int(fb - z));
    let tb = if from == to { tb - z } else { tb };
    state.get_mut(to).unwrap().insert("balance".into(), Value::Int(tb + z));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Terminated,
    Threw,
    Stuck(String),
    BudgetExhausted,
}

/// Iterate [`step_untyped`] up to `max_steps`, collecting the non-silent labels.
pub fn run_untyped(c: &Configuration, max_steps: usize) -> (Configuration, Trace, RunStatus) {
    let mut cur = c.clone();
    let mut trace = Trace::new();
    for _ in 0..max_steps {
        match step_untyped_in_place(&mut cur) {
            InPlaceStep::Terminal => {
                let status = if cur.stack.syms.is_empty() {
                    RunStatus::Terminated
                } else {
                    RunStatus::Threw
                };
                return (cur, trace, status);
            }
            InPlaceStep::Stuck(msg) => return (cur, trace, RunStatus::Stuck(msg)),
            InPlaceStep::Next(label) => {
                if !matches!(label, TraceLabel::Silent) {
                    trace.push(label);
                }
            }
        }
    }
    // One last terminality check so exact-budget runs report correctly.
    if cur.stack.is_terminal() {
        let status =
            if cur.stack.syms.is_empty() { RunStatus::Terminated } else { RunStatus::Threw };
        return (cur, trace, status);
    }
    (cur, trace, RunStatus::BudgetExhausted)
}

/// Compile a transaction list into the τ stack shape: alternating {(this, X)}
/// snapshot symbols and call statements, ending at ⊥.
pub fn compile_tx(entries: &[TxEntry]) -> Stack {
    let mut syms = Vec::new();
    for e in entries {
        syms.push(StackSym::Ret(
            VarEnv::from_pairs([("this".to_string(), Value::Addr(e.caller.clone()))]),
            None,
        ));
        syms.push(StackSym::Stm(Stm::Call {
            target: Expr::Lit(Value::Addr(e.callee.clone())),
            method: MethodRef::Name(e.method.clone()),
            args: CallArgs::List(e.args.iter().map(|v| Expr::Lit(v.clone())).collect()),
            amount: Expr::Lit(Value::Int(e.amount)),
        }));
    }
    Stack::from_syms(syms)
}

/// Build the initial configuration for a program and transaction.
pub fn initial_configuration(p: &Program, tx: &[TxEntry]) -> Result<Configuration, ElabError> {
    let (table, state) = elaborate_declarations(p)?;
    Ok(Configuration { stack: compile_tx(tx), table, state, vars: VarEnv::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_program, parse_stm, parse_tx};

    const LAT: &str = "lattice { levels: L, H; order: L <= H; top: H; bottom: L; }";

    fn demo() -> Program {
        let tsi = "interface I { owner : Top@L; f : (int@L) -> cmd@L; g : () -> cmd@L; }";
        let src = "
contract X : I@L {
  field balance := 10;
  field owner := Y;
  func f(a) { this.owner := this.owner }
  func g() { call Y.f(1)$2 }
  func fallback() { skip }
}
contract Y : I@L {
  field balance := 5;
  field owner := X;
  func f(a) { skip }
  func g() { skip }
  func fallback() { skip }
}";
        parse_program(src, tsi, LAT).unwrap()
    }

    fn run_stm(p: &Program, caller: &str, text: &str, max: usize) -> (Configuration, Trace, RunStatus) {
        let (table, state) = elaborate_declarations(p).unwrap();
        let stm = parse_stm(text, p).unwrap();
        let mut stack = Stack::bottom();
        stack.push_stm(stm);
        let vars = VarEnv::from_pairs([
            ("this".to_string(), Value::Addr(caller.to_string())),
            ("sender".to_string(), Value::Addr(caller.to_string())),
            ("value".to_string(), Value::Int(0)),
        ]);
        run_untyped(&Configuration { stack, table, state, vars }, max)
    }

    #[test]
    fn elaboration_shape() {
        let p = demo();
        let (table, state) = elaborate_declarations(&p).unwrap();
        assert_eq!(table.keys().collect::<Vec<_>>(), state.keys().collect::<Vec<_>>());
        let x = &table["X"];
        assert!(x.contains_key("send") && x.contains_key("fallback") && x.contains_key("f"));
        assert_eq!(state["X"]["balance"], Value::Int(10));
        assert_eq!(state["X"]["owner"], Value::Addr("Y".into()));
    }

    #[test]
    fn eval_examples() {
        let p = demo();
        let (_, state) = elaborate_declarations(&p).unwrap();
        let vars = VarEnv::new();
        assert_eq!(eval_expr(&Expr::int(5), &state, &vars), Ok(Value::Int(5)));
        // Field(Lit(X), owner) → Y
        let e = Expr::Field(Box::new(Expr::Lit(Value::Addr("X".into()))), "owner".into());
        assert_eq!(eval_expr(&e, &state, &vars), Ok(Value::Addr("Y".into())));
        let e = Expr::Op("+".into(), vec![Expr::int(2), Expr::int(3)]);
        assert_eq!(eval_expr(&e, &state, &vars), Ok(Value::Int(5)));
        assert!(eval_expr(&Expr::var("zz"), &state, &vars).is_err());
    }

    #[test]
    fn empty_stack_terminates() {
        let p = demo();
        let c = initial_configuration(&p, &[]).unwrap();
        let (_, trace, status) = run_untyped(&c, 100);
        assert_eq!(status, RunStatus::Terminated);
        assert!(trace.is_empty());
    }

    #[test]
    fn while_true_exhausts_budget() {
        let p = demo();
        let (_, _, status) = run_stm(&p, "X", "while true do skip", 100);
        assert_eq!(status, RunStatus::BudgetExhausted);
    }

    #[test]
    fn call_transfers_and_labels() {
        let p = demo();
        let (cfg, trace, status) = run_stm(&p, "X", "call Y.f(1)$2", 100);
        assert_eq!(status, RunStatus::Terminated);
        assert_eq!(cfg.state["X"]["balance"], Value::Int(8));
        assert_eq!(cfg.state["Y"]["balance"], Value::Int(7));
        assert_eq!(trace, vec![TraceLabel::call("X", "Y", "f", &[Value::Int(1)], 2)]);
    }

    #[test]
    fn fcall_binds_id_and_args() {
        // Y has no method `h` → fallback runs with id/args bound.
        let p = demo();
        let (cfg, trace, status) = run_stm(&p, "X", "call Y.h(1, 2)$0", 100);
        assert_eq!(status, RunStatus::Terminated);
        assert_eq!(trace, vec![TraceLabel::call("X", "Y", "h", &[Value::Int(1), Value::Int(2)], 0)]);
        assert_eq!(cfg.state["X"]["balance"], Value::Int(10));
    }

    #[test]
    fn dcall_runs_in_caller_context_no_transfer() {
        let tsi = "interface I { owner : Top@L; setowner : (Top@L) -> cmd@L; }";
        let src = "
contract P : I@L {
  field balance := 10;
  field owner := P;
  func setowner(x) { skip }
  func fallback() { dcall Lib.setowner(Q) }
}
contract Lib : I@L {
  field balance := 0;
  field owner := Lib;
  func setowner(x) { this.owner := x }
  func fallback() { skip }
}
contract Q : I@L {
  field balance := 0;
  field owner := Q;
  func setowner(x) { skip }
  func fallback() { skip }
}";
        let p = parse_program(src, tsi, LAT).unwrap();
        // Call a method P does not have → P's fallback delegates to Lib.setowner,
        // which runs with this = P and therefore mutates P.owner, not Lib.owner.
        let tx = parse_tx("Q CALL P.missing()$0", &p).unwrap();
        let c = initial_configuration(&p, &tx).unwrap();
        let (cfg, trace, status) = run_untyped(&c, 200);
        assert_eq!(status, RunStatus::Terminated);
        assert_eq!(cfg.state["P"]["owner"], Value::Addr("Q".into()));
        assert_eq!(cfg.state["Lib"]["owner"], Value::Addr("Lib".into()));
        // Balances unchanged by the dcall.
        assert_eq!(cfg.state["P"]["balance"], Value::Int(10));
        assert_eq!(cfg.state["Lib"]["balance"], Value::Int(0));
        // dcall label: caller is env_V(this) = P, amount 0.
        assert_eq!(
            trace,
            vec![
                TraceLabel::call("Q", "P", "missing", &[], 0),
                TraceLabel::call("P", "Lib", "setowner", &[Value::Addr("Q".into())], 0),
            ]
        );
    }

    #[test]
    fn dcall_on_absent_method_is_stuck() {
        let p = demo();
        let (_, _, status) = run_stm(&p, "X", "dcall Y.missing()", 100);
        assert!(matches!(status, RunStatus::Stuck(_)));
    }

    #[test]
    fn decv_scoping_and_del() {
        let p = demo();
        let (cfg, _, status) = run_stm(&p, "X", "let v: int@L := 1 in v := v + 41", 100);
        assert_eq!(status, RunStatus::Terminated);
        // v removed by del(v) at end of scope.
        assert!(!cfg.vars.contains("v"));
    }

    #[test]
    fn throw_is_terminal_threw() {
        let p = demo();
        let (cfg, _, status) = run_stm(&p, "X", "skip; throw; skip", 100);
        assert_eq!(status, RunStatus::Threw);
        assert!(cfg.stack.is_terminal());
        assert!(!cfg.stack.syms.is_empty());
    }

    #[test]
    fn currency_conservation() {
        let p = demo();
        let (table, state) = elaborate_declarations(&p).unwrap();
        let total = |st: &State| -> i64 {
            st.values()
                .map(|fe| match fe.get("balance") {
                    Some(Value::Int(n)) => *n,
                    _ => 0,
                })
                .sum()
        };
        let t0 = total(&state);
        let stm = parse_stm("call Y.g()$3; call Y.h(1)$4", &p).unwrap();
        let mut stack = Stack::bottom();
        stack.push_stm(stm);
        let vars = VarEnv::from_pairs([
            ("this".to_string(), Value::Addr("X".to_string())),
            ("sender".to_string(), Value::Addr("X".to_string())),
            ("value".to_string(), Value::Int(0)),
        ]);
        let mut cur = Configuration { stack, table, state, vars };
        loop {
            match step_untyped(&cur) {
                StepResult::Next(n, _) => {
                    assert_eq!(total(&n.state), t0, "balance sum changed");
                    cur = n;
                }
                StepResult::Terminal => break,
                StepResult::Stuck(m) => panic!("stuck: {m}"),
            }
        }
    }

    #[test]
    fn projection_examples() {
        let t = vec![
            TraceLabel::call("A", "P", "f", &[], 0),
            TraceLabel::call("P", "X", "f", &[], 0),
        ];
        assert_eq!(project_trace(&[], "X"), Vec::<TraceLabel>::new());
        assert_eq!(project_trace(&t, "P"), vec![t[1].clone()]);
        assert_eq!(project_trace(&project_trace(&t, "P"), "P"), project_trace(&t, "P"));
    }
}
