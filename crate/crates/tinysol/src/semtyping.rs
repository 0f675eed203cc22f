//! Semantic typing: type-lifted transitions over stack triplets, bounded
//! construction and verification of typing interpretations, the semantic type
//! rules (including the fallback rule), progression and up-to-union checking,
//! and portable certificates.

use crate::lattice::Level;
use crate::runtime::{MethodTable, Stack, StackSym, State, VarEnv};
use crate::statics::{least_type_expr, method_delta, typecheck_stm, Ctx, TypeErr};
use crate::syntax::{CallArgs, Expr, MethodRef, Program, Stm, Value};
use crate::types::{is_subtype, BaseType, Delta, MemberType, VarType, ABSENT_METHOD, TOP_IFACE};
use crate::typed::{
    build_canonical_state, eval_expr_typed, step_typed_mode, TypedConfiguration, TypedStep,
};
use std::collections::{BTreeMap, BTreeSet};

/// The global context of the lifted transition system: the static world plus
/// the (fixed, well-typed) method table.
#[derive(Clone, Copy)]
pub struct Global<'a> {
    pub ctx: Ctx<'a>,
    pub table: &'a MethodTable,
}

// ---------------------------------------------------------------------------
// Stack triplets
// ---------------------------------------------------------------------------

/// A stack type triplet (Q, Δ, s). Set membership uses the canonical form
/// (return-symbol snapshots with sorted bindings).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StackTriplet {
    pub stack: Stack,
    pub delta: Delta,
    pub level: Level,
}

impl StackTriplet {
    pub fn new(stack: Stack, delta: Delta, level: Level) -> StackTriplet {
        StackTriplet { stack, delta, level }.canonical()
    }

    /// For a statement judgment ⊨ S : cmd_s, the root triplet (S;⊥, Δ, s).
    pub fn of_stm(stm: Stm, delta: Delta, level: Level) -> StackTriplet {
        let mut stack = Stack::bottom();
        stack.push_stm(stm);
        StackTriplet::new(stack, delta, level)
    }

    pub fn canonical(&self) -> StackTriplet {
        let syms = self
            .stack
            .syms
            .iter()
            .map(|sym| match sym {
                StackSym::Ret(env, d) => StackSym::Ret(env.canonical(), d.clone()),
                other => other.clone(),
            })
            .collect();
        StackTriplet {
            stack: Stack { syms },
            delta: self.delta.clone(),
            level: self.level.clone(),
        }
    }
}

impl std::fmt::Display for StackTriplet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.stack, self.delta, self.level)
    }
}

pub type TripletSet = BTreeSet<StackTriplet>;

// ---------------------------------------------------------------------------
// Type-lifted transitions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lifted {
    /// Stack ∈ TQ.
    Terminal,
    /// Non-terminal, but no construction-conformant state admits a typed step.
    NoTransition(String),
    /// The finite successor set over all construction-conformant states.
    Next(TripletSet),
}

fn typed_cfg(t: &StackTriplet, table: &MethodTable, state: State, vars: VarEnv) -> TypedConfiguration {
    TypedConfiguration {
        delta: t.delta.clone(),
        level: t.level.clone(),
        config: crate::runtime::Configuration {
            stack: t.stack.clone(),
            table: table.clone(),
            state,
            vars,
        },
    }
}

/// Force the dispatch expression of a call to evaluate to address `y` in a
/// canonical (state, vars) pair, when the expression shape permits it.
fn force_target(state: &mut State, vars: &mut VarEnv, target: &Expr, y: &str) -> bool {
    match target {
        Expr::Lit(Value::Addr(a)) => a == y,
        Expr::Var(x) => vars.set(x, Value::Addr(y.to_string())),
        Expr::Field(e0, p) => {
            let Ok(Value::Addr(x0)) = crate::runtime::eval_expr(e0, state, vars) else {
                return false;
            };
            match state.get_mut(&x0) {
                Some(fe) if fe.contains_key(p) => {
                    fe.insert(p.clone(), Value::Addr(y.to_string()));
                    true
                }
                _ => false,
            }
        }
        _ => false,
    }
}

/// Addresses admissible as the value of an interface-typed expression with
/// least type (iface, level): declared interface a subtype, level ⊑.
fn admissible_addresses(g: Global, iface: &str, level: &Level) -> Vec<String> {
    g.ctx
        .gamma
        .addresses()
        .filter(|(_, j, sy)| {
            is_subtype(&BaseType::Iface(j.to_string()), &BaseType::Iface(iface.to_string()), g.ctx.sigma)
                && g.ctx.lattice.leq(sy, level)
        })
        .map(|(x, _, _)| x.to_string())
        .collect()
}

/// The lifted successors of a triplet: the reduct shapes over all
/// construction-conformant states, per the typed rules.
pub fn lifted_successors(g: Global, t: &StackTriplet) -> Lifted {
    if t.stack.is_terminal() {
        return Lifted::Terminal;
    }
    let ctx = g.ctx;
    let head = t.stack.head().expect("non-terminal stack has a head").clone();
    let (state, vars) = match build_canonical_state(ctx, &t.delta) {
        Ok(sv) => sv,
        Err(e) => return Lifted::NoTransition(format!("construction failure: {e}")),
    };

    // Branching statements: both reduct shapes exist whenever the guard is
    // evaluable at all (constructions realize either guard value).
    if let StackSym::Stm(stm) = &head {
        match stm {
            Stm::If(e, tb, fb) => {
                return branch_successors(g, t, e, &state, &vars, |s2, rest| {
                    let mut out = TripletSet::new();
                    for b in [tb.as_ref(), fb.as_ref()] {
                        let mut q = rest.clone();
                        q.syms.insert(0, StackSym::Lvl(t.level.clone()));
                        q.push_stm(b.clone());
                        out.insert(StackTriplet::new(q, t.delta.clone(), s2.clone()));
                    }
                    out
                });
            }
            Stm::While(e, body) => {
                return branch_successors(g, t, e, &state, &vars, |s2, rest| {
                    let mut out = TripletSet::new();
                    // Loop shape: S ; s ; while e do S ; Q at s′.
                    let mut q = rest.clone();
                    q.push_stm(Stm::While(e.clone(), body.clone()));
                    q.syms.insert(0, StackSym::Lvl(t.level.clone()));
                    q.push_stm(body.as_ref().clone());
                    out.insert(StackTriplet::new(q, t.delta.clone(), s2));
                    // Exit shape: Q at s.
                    out.insert(StackTriplet::new(rest, t.delta.clone(), t.level.clone()));
                    out
                });
            }
            Stm::Call { target, method, args: _, amount } => {
                return call_successors(g, t, target, method, Some(amount), &state, &vars);
            }
            Stm::DCall { target, method, .. } => {
                return call_successors(g, t, target, method, None, &state, &vars);
            }
            _ => {}
        }
    }

    // Everything else is deterministic: step the canonical realization.
    match step_typed_mode(ctx, &typed_cfg(t, g.table, state, vars), false) {
        TypedStep::Terminal => Lifted::Terminal,
        TypedStep::Stuck(e) => Lifted::NoTransition(e.0),
        TypedStep::Next(next, _) => {
            let mut set = TripletSet::new();
            set.insert(StackTriplet::new(next.config.stack, next.delta, next.level));
            Lifted::Next(set)
        }
    }
}

fn branch_successors(
    g: Global,
    t: &StackTriplet,
    guard: &Expr,
    state: &State,
    vars: &VarEnv,
    make: impl FnOnce(Level, Stack) -> TripletSet,
) -> Lifted {
    let ctx = g.ctx;
    let (gb, gs) = match least_type_expr(ctx, &t.delta, guard) {
        Ok(t) => t,
        Err(e) => return Lifted::NoTransition(format!("r-if/r-while: {e}")),
    };
    if gb != BaseType::Bool {
        return Lifted::NoTransition(format!("r-if/r-while: guard has type {gb}, not bool"));
    }
    let s2 = ctx.lattice.join(&t.level, &gs);
    if let Err(e) =
        eval_expr_typed(ctx, &t.delta, &(BaseType::Bool, s2.clone()), guard, state, vars)
    {
        return Lifted::NoTransition(format!("r-if/r-while: {e}"));
    }
    let mut rest = t.stack.clone();
    rest.pop();
    Lifted::Next(make(s2, rest))
}

fn call_successors(
    g: Global,
    t: &StackTriplet,
    target: &Expr,
    method: &MethodRef,
    amount: Option<&Expr>,
    state: &State,
    vars: &VarEnv,
) -> Lifted {
    let ctx = g.ctx;
    let (tb, ts) = match least_type_expr(ctx, &t.delta, target) {
        Ok(t) => t,
        Err(e) => return Lifted::NoTransition(format!("call: target: {e}")),
    };
    let BaseType::Iface(it) = &tb else {
        return Lifted::NoTransition(format!("call: target has non-interface type {tb}"));
    };
    let callees = admissible_addresses(g, it, &ts);
    if callees.is_empty() {
        return Lifted::NoTransition(format!("construction failure: no address inhabits {it}@{ts}"));
    }
    // The conservative amount rule: the balance-level condition is enforced
    // for every realization unless the amount is the literal 0.
    let ci_mode = match amount {
        None => false, // dcall has no amount condition
        Some(Expr::Lit(Value::Int(0))) => false,
        Some(_) => true,
    };
    let mut succs = TripletSet::new();
    let mut first_diag: Option<String> = None;
    for y in &callees {
        let methods: Vec<String> = match method {
            MethodRef::Name(f) => vec![f.clone()],
            MethodRef::Id => {
                if t.delta.container("id").map(|(b, _)| b) != Some(&BaseType::Idf) {
                    return Lifted::NoTransition("call: id dispatch with id ∉ dom(Δ)".into());
                }
                let mut ms: Vec<String> = g
                    .table
                    .get(y)
                    .map(|m| m.keys().cloned().collect())
                    .unwrap_or_default();
                // One reserved absent name forces the fallback branch.
                ms.push(ABSENT_METHOD.to_string());
                ms
            }
        };
        for f in methods {
            let mut st = state.clone();
            let mut vr = vars.clone();
            if !force_target(&mut st, &mut vr, target, y) {
                continue;
            }
            if matches!(method, MethodRef::Id) && !vr.set("id", Value::Method(f.clone())) {
                continue;
            }
            match step_typed_mode(ctx, &typed_cfg(t, g.table, st, vr), ci_mode) {
                TypedStep::Next(next, _) => {
                    succs.insert(StackTriplet::new(next.config.stack, next.delta, next.level));
                }
                TypedStep::Stuck(e) => {
                    first_diag.get_or_insert(e.0);
                }
                TypedStep::Terminal => unreachable!("head is a call"),
            }
        }
    }
    if succs.is_empty() {
        Lifted::NoTransition(first_diag.unwrap_or_else(|| "call: no realization steps".into()))
    } else {
        Lifted::Next(succs)
    }
}

// ---------------------------------------------------------------------------
// Interpretation verification and bounded construction
// ---------------------------------------------------------------------------

/// True iff every member is terminal, or has at least one lifted successor
/// with all successors inside the candidate set.
pub fn verify_typing_interpretation(g: Global, cand: &TripletSet) -> Result<(), String> {
    check_progression(g, cand, cand)
}

/// Ř ⤳ Ř̂: every lhs member is terminal or all its successors lie in rhs.
pub fn check_progression(g: Global, lhs: &TripletSet, rhs: &TripletSet) -> Result<(), String> {
    for t in lhs {
        match lifted_successors(g, t) {
            Lifted::Terminal => {}
            Lifted::NoTransition(d) => {
                return Err(format!("member {t} is non-terminal with no lifted transition: {d}"))
            }
            Lifted::Next(succs) => {
                for s in succs {
                    if !rhs.contains(&s) {
                        return Err(format!("successor {s} of member {t} escapes the set"));
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_triplets: usize,
    pub max_depth: usize,
}

impl Default for Budget {
    fn default() -> Budget {
        Budget { max_triplets: 10_000, max_depth: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildResult {
    Full(TripletSet),
    /// A reachable non-terminal triplet with no lifted transition; the path
    /// from the root witnesses untypability.
    Untypable { path: Vec<StackTriplet>, diagnostic: String },
    Unknown,
}

/// Breadth-first closure of the lifted transition relation from the root,
/// memoized on canonical triplets. Frontier expansion fans out across worker
/// threads when the `parallel` feature is enabled; the result is
/// deterministic either way (set semantics).
pub fn build_interpretation(g: Global, root: &StackTriplet, budget: Budget) -> BuildResult {
    let root = root.canonical();
    let mut visited: TripletSet = TripletSet::new();
    let mut parent: BTreeMap<StackTriplet, StackTriplet> = BTreeMap::new();
    visited.insert(root.clone());
    let mut frontier: Vec<StackTriplet> = vec![root.clone()];
    for _depth in 0..budget.max_depth {
        if frontier.is_empty() {
            return BuildResult::Full(visited);
        }
        let expanded: Vec<(StackTriplet, Lifted)> = expand(g, &frontier);
        let mut next_frontier = Vec::new();
        for (t, res) in expanded {
            match res {
                Lifted::Terminal => {}
                Lifted::NoTransition(diagnostic) => {
                    // Reconstruct the path root → t.
                    let mut path = vec![t.clone()];
                    let mut cur = t;
                    while let Some(p) = parent.get(&cur) {
                        path.push(p.clone());
                        cur = p.clone();
                    }
                    path.reverse();
                    return BuildResult::Untypable { path, diagnostic };
                }
                Lifted::Next(succs) => {
                    for s in succs {
                        if visited.insert(s.clone()) {
                            parent.insert(s.clone(), t.clone());
                            next_frontier.push(s);
                        }
                    }
                }
            }
        }
        if visited.len() > budget.max_triplets {
            return BuildResult::Unknown;
        }
        frontier = next_frontier;
    }
    if frontier.is_empty() {
        BuildResult::Full(visited)
    } else {
        BuildResult::Unknown
    }
}

#[cfg(feature = "parallel")]
fn expand(g: Global, frontier: &[StackTriplet]) -> Vec<(StackTriplet, Lifted)> {
    use rayon::prelude::*;
    frontier
        .par_iter()
        .map(|t| (t.clone(), lifted_successors(g, t)))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn expand(g: Global, frontier: &[StackTriplet]) -> Vec<(StackTriplet, Lifted)> {
    frontier
        .iter()
        .map(|t| (t.clone(), lifted_successors(g, t)))
        .collect()
}

/// Bounded search for a reachable stuck (non-terminal, no-transition) triplet:
/// a human-readable certificate of untypability.
pub fn find_stuck_witness(
    g: Global,
    root: &StackTriplet,
    budget: Budget,
) -> Option<(Vec<StackTriplet>, String)> {
    match build_interpretation(g, root, budget) {
        BuildResult::Untypable { path, diagnostic } => Some((path, diagnostic)),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Semantic type rules (st-*), including the fallback rule
// ---------------------------------------------------------------------------

/// What to do with an obligation the store does not cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DischargeMode {
    /// Reconstruct the interpretation within budget; only budget exhaustion
    /// leaves an open obligation.
    #[default]
    Construct,
    /// Reject: the client-side discipline, where the proof must come with the
    /// code.
    StoreOnly,
    /// Collect: return every obligation root undischarged (used to find out
    /// which roots need certificates).
    CollectOnly,
}

/// Roots already known to lie in verified typing interpretations (e.g. from
/// ledger certificates); used to discharge fallback obligations.
#[derive(Debug, Clone, Default)]
pub struct CertStore {
    pub roots: TripletSet,
    pub mode: DischargeMode,
}

impl CertStore {
    pub fn contains(&self, t: &StackTriplet) -> bool {
        self.roots.contains(&t.canonical())
    }
}

/// Derivability of Σ;Γ;Δ;env_T ⊨ S : cmd_s under the semantic rule set. The
/// rules mirror the syntactic ones, plus the fallback rule for calls whose
/// method is absent from the target interface; its per-address premises are
/// discharged by the certificate store, by bounded interpretation
/// construction, or returned as open obligations.
pub fn sem_typecheck_stm(
    g: Global,
    d: &Delta,
    stm: &Stm,
    level: &Level,
    store: &CertStore,
    budget: Budget,
) -> Result<Vec<StackTriplet>, TypeErr> {
    let ctx = g.ctx;
    let lat = ctx.lattice;
    match stm {
        Stm::Seq(a, b) => {
            let mut o = sem_typecheck_stm(g, d, a, level, store, budget)?;
            o.extend(sem_typecheck_stm(g, d, b, level, store, budget)?);
            Ok(o)
        }
        Stm::If(e, tb, fb) => {
            let (gb, gs) = least_type_expr(ctx, d, e)?;
            if gb != BaseType::Bool {
                return Err(TypeErr(format!("st-if: guard {e} has non-boolean type {gb}")));
            }
            let s2 = lat.join(level, &gs);
            let mut o = sem_typecheck_stm(g, d, tb, &s2, store, budget)?;
            o.extend(sem_typecheck_stm(g, d, fb, &s2, store, budget)?);
            Ok(o)
        }
        Stm::While(e, body) => {
            let (gb, gs) = least_type_expr(ctx, d, e)?;
            if gb != BaseType::Bool {
                return Err(TypeErr(format!("st-while: guard {e} has non-boolean type {gb}")));
            }
            let s2 = lat.join(level, &gs);
            sem_typecheck_stm(g, d, body, &s2, store, budget)
        }
        Stm::DeclVar { base, level: sx, name, init, body } => {
            crate::statics::typecheck_expr(ctx, d, init, &(base.clone(), sx.clone()))
                .map_err(|e| TypeErr(format!("st-decv: {e}")))?;
            let d2 = d.bind(name, VarType::Container(base.clone(), sx.clone()));
            sem_typecheck_stm(g, &d2, body, level, store, budget)
        }
        Stm::Call { target, method, args, amount } => {
            let (tb, _) = least_type_expr(ctx, d, target)?;
            let declared = match (&tb, method) {
                (BaseType::Iface(iy), MethodRef::Name(f)) => {
                    matches!(ctx.gamma.member(iy, f), Some(MemberType::Proc(..)))
                }
                _ => false,
            };
            if declared {
                // st-call: same shape as the syntactic rule.
                typecheck_stm(ctx, d, stm, level).map_err(|e| TypeErr(format!("st-call: {e}")))?;
                Ok(vec![])
            } else if matches!(method, MethodRef::Id) {
                // id-dispatch: safety shown by an explicit typing
                // interpretation for the whole call.
                discharge(g, StackTriplet::of_stm(stm.clone(), d.clone(), level.clone()), store, budget)
            } else {
                st_fcall(g, d, target, method, args, amount, level, store, budget)
            }
        }
        Stm::DCall { method: MethodRef::Id, .. } => {
            discharge(g, StackTriplet::of_stm(stm.clone(), d.clone(), level.clone()), store, budget)
        }
        // Leaves and dcall: identical to the syntactic rules.
        other => {
            typecheck_stm(ctx, d, other, level).map_err(|e| TypeErr(format!("st: {e}")))?;
            Ok(vec![])
        }
    }
}

/// Try to discharge a judgment: known certificate root, or a bounded
/// interpretation construction; otherwise return it as an open obligation.
fn discharge(
    g: Global,
    root: StackTriplet,
    store: &CertStore,
    budget: Budget,
) -> Result<Vec<StackTriplet>, TypeErr> {
    if store.contains(&root) {
        return Ok(vec![]);
    }
    match store.mode {
        DischargeMode::StoreOnly => {
            return Err(TypeErr(format!("no stored certificate covers the obligation {root}")))
        }
        DischargeMode::CollectOnly => return Ok(vec![root]),
        DischargeMode::Construct => {}
    }
    match build_interpretation(g, &root, budget) {
        BuildResult::Full(_) => Ok(vec![]),
        BuildResult::Untypable { diagnostic, .. } => {
            Err(TypeErr(format!("obligation {root} is untypable: {diagnostic}")))
        }
        BuildResult::Unknown => Ok(vec![root]),
    }
}

/// The fallback rule: every declared address whose type is a subtype of the
/// target's static type must have a type-safe fallback body at the call level.
#[allow(clippy::too_many_arguments)]
fn st_fcall(
    g: Global,
    d: &Delta,
    target: &Expr,
    method: &MethodRef,
    args: &CallArgs,
    amount: &Expr,
    level: &Level,
    store: &CertStore,
    budget: Budget,
) -> Result<Vec<StackTriplet>, TypeErr> {
    let ctx = g.ctx;
    let lat = ctx.lattice;
    let MethodRef::Name(_f) = method else {
        return Err(TypeErr("st-fcall: id dispatch handled separately".into()));
    };
    let Some((ctb, s1)) = d.container("this") else {
        return Err(TypeErr("st-fcall: this ∉ dom(Δ)".into()));
    };
    let BaseType::Iface(ix) = ctb.clone() else {
        return Err(TypeErr(format!("st-fcall: this has non-interface type {ctb}")));
    };
    let (tb, se1) = least_type_expr(ctx, d, target)?;
    let BaseType::Iface(iy) = &tb else {
        return Err(TypeErr(format!("st-fcall: target has non-interface type {tb}")));
    };
    let (ab, se2) = least_type_expr(ctx, d, amount)?;
    if ab != BaseType::Int {
        return Err(TypeErr(format!("st-fcall: amount has non-int type {ab}")));
    }
    // The call level s: least level typing e1, e2 and dominating s1 and cmd_s.
    let s = lat.join_all([level.as_str(), se1.as_str(), se2.as_str(), s1.as_str()]);
    // Balance-level side condition, waived when the amount is the literal 0
    // (no transfer can occur), mirroring the lifted-successor rule.
    if !matches!(amount, Expr::Lit(Value::Int(0))) {
        for (who, i) in [("caller", ix.as_str()), ("callee", iy.as_str())] {
            let Some(MemberType::Container(_, sb)) = ctx.gamma.member(i, "balance") else {
                return Err(TypeErr(format!("st-fcall: Γ({i}) has no balance")));
            };
            if !lat.leq(&s, sb) {
                return Err(TypeErr(format!("st-fcall: s = {s} ⋢ {sb} ({who} balance level)")));
            }
        }
    }
    // Argument types B̄, s̄.
    let arg_types: Vec<(BaseType, Level)> = match args {
        CallArgs::List(es) => es
            .iter()
            .map(|e| least_type_expr(ctx, d, e))
            .collect::<Result<_, _>>()?,
        CallArgs::ArgsVar => match d.get("args") {
            Some(VarType::ArgsSeq(ts)) => ts.clone(),
            _ => return Err(TypeErr("st-fcall: Δ(args) is not a typed sequence".into())),
        },
    };
    // ∀ Y ∈ dom(env_T) with Γ(Y) = I′_s′ <: I^Y_s: fallback body safe at cmd_s.
    let mut obligations = Vec::new();
    for (y, iprime, sprime) in ctx.gamma.addresses() {
        if !(is_subtype(
            &BaseType::Iface(iprime.to_string()),
            &BaseType::Iface(iy.clone()),
            ctx.sigma,
        ) && lat.leq(sprime, &s))
        {
            continue;
        }
        let Some((params, body)) = g.table.get(y).and_then(|m| m.get("fallback")).map(|(p, b)| (p, b))
        else {
            return Err(TypeErr(format!("st-fcall: {y} has no fallback")));
        };
        if !params.is_empty() {
            return Err(TypeErr(format!("st-fcall: {y}'s fallback is not nullary")));
        }
        let d2 = Delta::new()
            .bind("this", VarType::Container(BaseType::Iface(iprime.to_string()), sprime.clone()))
            .bind("value", VarType::Container(BaseType::Int, s.clone()))
            .bind(
                "sender",
                VarType::Container(BaseType::Iface(TOP_IFACE.to_string()), lat.top().clone()),
            )
            .bind("id", VarType::Container(BaseType::Idf, s.clone()))
            .bind("args", VarType::ArgsSeq(arg_types.clone()));
        let root = StackTriplet::of_stm(body.clone(), d2, s.clone());
        obligations.extend(discharge(g, root, store, budget)?);
    }
    Ok(obligations)
}

/// Σ;Γ;env_T ⊨ env_T: every non-fallback method body semantically safe at its
/// signature level under the method Δ.
pub fn sem_table(g: Global, store: &CertStore, budget: Budget) -> Result<Vec<StackTriplet>, TypeErr> {
    let ctx = g.ctx;
    let mut obligations = Vec::new();
    for (x, menv) in g.table {
        let Some((iface, s1)) = ctx.gamma.addr(x) else {
            return Err(TypeErr(format!("st-envm: address {x} ∉ dom(Γ)")));
        };
        for (f, (params, body)) in menv {
            if f == "fallback" {
                continue;
            }
            let Some(MemberType::Proc(ptypes, sm)) = ctx.gamma.member(iface, f) else {
                return Err(TypeErr(format!("st-envm: Γ({iface}) has no procedure {f}")));
            };
            if !ctx.lattice.leq(sm, s1) {
                return Err(TypeErr(format!("st-envm: {iface}.{f} level {sm} ⋢ {s1}")));
            }
            let d = method_delta(ctx, iface, s1, params, ptypes)?;
            let o = sem_typecheck_stm(g, &d, body, sm, store, budget)
                .map_err(|e| TypeErr(format!("st-envm: body of {x}.{f}: {e}")))?;
            obligations.extend(o);
        }
    }
    Ok(obligations)
}

/// Semantic stack typing: like the syntactic stack rules, with statements
/// checked semantically.
pub fn sem_typecheck_stack(
    g: Global,
    d: &Delta,
    q: &Stack,
    level: &Level,
    store: &CertStore,
    budget: Budget,
) -> Result<Vec<StackTriplet>, TypeErr> {
    let mut d = d.clone();
    let mut obligations = Vec::new();
    for sym in &q.syms {
        match sym {
            StackSym::Stm(s) => {
                obligations.extend(sem_typecheck_stm(g, &d, s, level, store, budget)?)
            }
            StackSym::Del(x) => {
                if d.get(x).is_none() {
                    return Err(TypeErr(format!("st-del: {x} ∉ dom(Δ)")));
                }
                d = d.unbind(x);
            }
            StackSym::Ret(env, snap) => {
                d = match snap {
                    Some(d2) => d2.clone(),
                    None => crate::statics::extract(g.ctx, env)?,
                };
            }
            StackSym::Lvl(s) => {
                return Err(TypeErr(format!("st-stack: level symbol {s} has no stack rule")))
            }
        }
    }
    Ok(obligations)
}

/// The obligation roots a statement would need certificates for: every
/// fallback/id-dispatch judgment, undischarged.
pub fn collect_obligation_roots(
    g: Global,
    d: &Delta,
    stm: &Stm,
    level: &Level,
) -> Result<Vec<StackTriplet>, TypeErr> {
    let store = CertStore { roots: TripletSet::new(), mode: DischargeMode::CollectOnly };
    let mut roots = sem_typecheck_stm(g, d, stm, level, &store, Budget::default())?;
    roots.sort();
    roots.dedup();
    Ok(roots)
}

// ---------------------------------------------------------------------------
// Up-to union
// ---------------------------------------------------------------------------

/// Verify a core set up-to union: each base obligation must generate a full
/// interpretation by bounded construction (its existence is what the semantic
/// rules guarantee), and the core must progress into core ∪ those
/// interpretations.
pub fn verify_upto_union(
    g: Global,
    core: &TripletSet,
    obligations: &[StackTriplet],
) -> Result<(), String> {
    let mut rhs: TripletSet = core.iter().map(|t| t.canonical()).collect();
    for o in obligations {
        match build_interpretation(g, o, Budget::default()) {
            BuildResult::Full(set) => rhs.extend(set),
            BuildResult::Untypable { diagnostic, .. } => {
                return Err(format!("obligation {o} is untypable: {diagnostic}"))
            }
            BuildResult::Unknown => {
                return Err(format!("obligation {o} could not be discharged within budget"))
            }
        }
    }
    let lhs: TripletSet = core.iter().map(|t| t.canonical()).collect();
    check_progression(g, &lhs, &rhs)
}

/// Materialize the union core ∪ obligation interpretations (for the validity
/// theorem: the union must be a typing interpretation outright).
pub fn materialize_union(
    g: Global,
    core: &TripletSet,
    obligations: &[StackTriplet],
) -> Result<TripletSet, String> {
    let mut u: TripletSet = core.iter().map(|t| t.canonical()).collect();
    for o in obligations {
        match build_interpretation(g, o, Budget::default()) {
            BuildResult::Full(set) => u.extend(set),
            other => return Err(format!("obligation {o} not dischargeable: {other:?}")),
        }
    }
    Ok(u)
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CertTriplet {
    pub stack: String,
    pub delta: BTreeMap<String, String>,
    pub level: String,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Certificate {
    /// "full" or "upto".
    pub kind: String,
    pub program_sha256: String,
    pub root: CertTriplet,
    pub core: Vec<CertTriplet>,
    #[serde(default)]
    pub obligations: Vec<CertTriplet>,
}

impl CertTriplet {
    pub fn encode(t: &StackTriplet) -> CertTriplet {
        let t = t.canonical();
        CertTriplet {
            stack: t.stack.to_string(),
            delta: t
                .delta
                .entries
                .iter()
                .map(|(x, vt)| (x.clone(), vt.to_string()))
                .collect(),
            level: t.level.clone(),
        }
    }

    pub fn decode(&self, p: &Program) -> Result<StackTriplet, String> {
        let stack = parse_stack_text(&self.stack, p)?;
        let mut delta = Delta::new();
        for (x, t) in &self.delta {
            delta = delta.bind(x, parse_vartype_text(t, p)?);
        }
        Ok(StackTriplet::new(stack, delta, self.level.clone()))
    }
}

/// Build a full-interpretation certificate for a root judgment.
pub fn certify_full(p: &Program, g: Global, root: &StackTriplet, budget: Budget) -> Result<Certificate, String> {
    match build_interpretation(g, root, budget) {
        BuildResult::Full(set) => Ok(Certificate {
            kind: "full".into(),
            program_sha256: p.hash(),
            root: CertTriplet::encode(root),
            core: set.iter().map(CertTriplet::encode).collect(),
            obligations: vec![],
        }),
        BuildResult::Untypable { path, diagnostic } => Err(format!(
            "untypable ({diagnostic}); witness path of length {}:\n{}",
            path.len(),
            path.iter().map(|t| format!("  {t}")).collect::<Vec<_>>().join("\n")
        )),
        BuildResult::Unknown => Err("budget exhausted (unknown)".into()),
    }
}

pub fn certify_upto(
    p: &Program,
    root: &StackTriplet,
    core: &TripletSet,
    obligations: &[StackTriplet],
) -> Certificate {
    Certificate {
        kind: "upto".into(),
        program_sha256: p.hash(),
        root: CertTriplet::encode(root),
        core: core.iter().map(CertTriplet::encode).collect(),
        obligations: obligations.iter().map(CertTriplet::encode).collect(),
    }
}

/// Verify a certificate against a program: hash first, then semantic work.
pub fn verify_certificate(p: &Program, g: Global, cert: &Certificate) -> Result<(), String> {
    if cert.program_sha256 != p.hash() {
        return Err(format!(
            "program hash mismatch: certificate is for {}, program is {}",
            cert.program_sha256,
            p.hash()
        ));
    }
    let root = cert.root.decode(p)?;
    let core: TripletSet = cert
        .core
        .iter()
        .map(|t| t.decode(p))
        .collect::<Result<_, _>>()?;
    if !core.contains(&root) {
        return Err("root triplet is not a member of the certified set".into());
    }
    match cert.kind.as_str() {
        "full" => {
            if !cert.obligations.is_empty() {
                return Err("full certificate must not carry obligations".into());
            }
            verify_typing_interpretation(g, &core)
        }
        "upto" => {
            let obls: Vec<StackTriplet> = cert
                .obligations
                .iter()
                .map(|t| t.decode(p))
                .collect::<Result<_, _>>()?;
            verify_upto_union(g, &core, &obls)
        }
        k => Err(format!("unknown certificate kind `{k}`")),
    }
}

// ---------------------------------------------------------------------------
// Canonical stack text codec
// ---------------------------------------------------------------------------

/// Split at top-level occurrences of a separator, respecting (), {}, [].
fn split_top(src: &str, sep: char) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for c in src.chars() {
        match c {
            '(' | '{' | '[' => depth += 1,
            ')' | '}' | ']' => depth = depth.saturating_sub(1),
            _ => {}
        }
        if c == sep && depth == 0 {
            out.push(cur.trim().to_string());
            cur = String::new();
        } else {
            cur.push(c);
        }
    }
    let last = cur.trim();
    if !last.is_empty() {
        out.push(last.to_string());
    }
    out
}

fn parse_value_text(src: &str, p: &Program) -> Result<Value, String> {
    let s = src.trim();
    if let Ok(n) = s.parse::<i64>() {
        return Ok(Value::Int(n));
    }
    match s {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let vs = split_top(inner, ',')
            .into_iter()
            .filter(|e| !e.is_empty())
            .map(|e| parse_value_text(&e, p))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(Value::Seq(vs));
    }
    if !s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '\'') || s.is_empty() {
        return Err(format!("unparsable value `{s}`"));
    }
    if p.contract(s).is_some() {
        Ok(Value::Addr(s.to_string()))
    } else {
        Ok(Value::Method(s.to_string()))
    }
}

fn parse_basetype_text(src: &str) -> Result<BaseType, String> {
    match src.trim() {
        "int" => Ok(BaseType::Int),
        "bool" => Ok(BaseType::Bool),
        "idf" => Ok(BaseType::Idf),
        i if !i.is_empty() && i.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '\'') => {
            Ok(BaseType::Iface(i.to_string()))
        }
        other => Err(format!("unparsable base type `{other}`")),
    }
}

fn parse_container_text(src: &str) -> Result<(BaseType, Level), String> {
    let (b, s) = src
        .rsplit_once('@')
        .ok_or(format!("container type `{src}` lacks `@`"))?;
    Ok((parse_basetype_text(b)?, s.trim().to_string()))
}

pub fn parse_vartype_text(src: &str, _p: &Program) -> Result<VarType, String> {
    let s = src.trim();
    if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let ts = split_top(inner, ',')
            .into_iter()
            .filter(|e| !e.is_empty())
            .map(|e| parse_container_text(&e))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(VarType::ArgsSeq(ts));
    }
    let (b, l) = parse_container_text(s)?;
    Ok(VarType::Container(b, l))
}

fn parse_env_text(src: &str, p: &Program) -> Result<VarEnv, String> {
    let inner = src
        .trim()
        .strip_prefix('{')
        .and_then(|r| r.strip_suffix('}'))
        .ok_or(format!("environment `{src}` not brace-delimited"))?;
    let mut env = VarEnv::new();
    for entry in split_top(inner, ',') {
        if entry.is_empty() {
            continue;
        }
        let (x, rest) = entry
            .split_once(':')
            .ok_or(format!("environment entry `{entry}` lacks `:`"))?;
        let (x, rest) = (x.trim(), rest.trim());
        if let Some(body) = rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
            // Typed entry `(v, B@s)`.
            let parts = split_top(body, ',');
            if parts.len() != 2 {
                return Err(format!("typed entry `{entry}` malformed"));
            }
            let v = parse_value_text(&parts[0], p)?;
            let (b, s) = parse_container_text(&parts[1])?;
            env.bind(x, v, Some((b, s)));
        } else {
            env.bind(x, parse_value_text(rest, p)?, None);
        }
    }
    Ok(env)
}

fn parse_delta_text(src: &str, p: &Program) -> Result<Delta, String> {
    let inner = src
        .trim()
        .strip_prefix('{')
        .and_then(|r| r.strip_suffix('}'))
        .ok_or(format!("Δ `{src}` not brace-delimited"))?;
    let mut d = Delta::new();
    for entry in split_top(inner, ',') {
        if entry.is_empty() {
            continue;
        }
        let (x, t) = entry
            .split_once(':')
            .ok_or(format!("Δ entry `{entry}` lacks `:`"))?;
        d = d.bind(x.trim(), parse_vartype_text(t, p)?);
    }
    Ok(d)
}

/// Parse the canonical stack text `sym (';' sym)* ';' 'bot'`.
pub fn parse_stack_text(src: &str, p: &Program) -> Result<Stack, String> {
    let parts = split_top(src, ';');
    let Some((last, syms_src)) = parts.split_last() else {
        return Err("empty stack text".into());
    };
    if last != "bot" {
        return Err(format!("stack text must end with `bot`, found `{last}`"));
    }
    let mut syms = Vec::new();
    for s in syms_src {
        if let Some(inner) = s.strip_prefix("del(").and_then(|r| r.strip_suffix(')')) {
            syms.push(StackSym::Del(inner.trim().to_string()));
        } else if let Some(inner) = s.strip_prefix("lvl(").and_then(|r| r.strip_suffix(')')) {
            syms.push(StackSym::Lvl(inner.trim().to_string()));
        } else if let Some(inner) = s.strip_prefix("ret(").and_then(|r| r.strip_suffix(')')) {
            let parts = split_top(inner, '|');
            match parts.len() {
                1 => syms.push(StackSym::Ret(parse_env_text(&parts[0], p)?, None)),
                2 => syms.push(StackSym::Ret(
                    parse_env_text(&parts[0], p)?,
                    Some(parse_delta_text(&parts[1], p)?),
                )),
                _ => return Err(format!("ret symbol `{s}` malformed")),
            }
        } else {
            let stm = crate::parser::parse_stm(s, p).map_err(|e| e.to_string())?;
            syms.push(StackSym::Stm(stm));
        }
    }
    Ok(Stack::from_syms(syms))
}
