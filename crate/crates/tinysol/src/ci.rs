//! Call integrity: the labelled typed-semantics variant with the
//! unconditional balance condition, s-contract classification, and the
//! differential harness comparing trusted-projection traces across mutations
//! of untrusted contracts.

use crate::lattice::Level;
use crate::runtime::{
    compile_tx, elaborate_declarations, project_trace, run_untyped, Configuration, MethodTable,
    RunStatus, State, Trace, TraceLabel, VarEnv,
};
use crate::statics::Ctx;
use crate::syntax::{CallArgs, Expr, MethodRef, Program, Stm, Value};
use crate::typed::{run_typed_mode, step_typed_mode, TypedConfiguration, TypedStep};
use crate::types::{is_subtype, BaseType, Delta, Gamma, MemberType};
use crate::parser::TxEntry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

/// Trusted/untrusted split of the declared addresses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustPartition {
    pub trusted: BTreeSet<String>,
}

impl TrustPartition {
    pub fn new(trusted: impl IntoIterator<Item = String>) -> TrustPartition {
        TrustPartition { trusted: trusted.into_iter().collect() }
    }

    pub fn is_trusted(&self, x: &str) -> bool {
        self.trusted.contains(x)
    }
}

/// X is an s-contract w.r.t. Γ: Γ(X) = I_s with every field of I a container
/// at level s and every method at cmd_s.
pub fn is_s_contract(gamma: &Gamma, x: &str, s: &Level) -> bool {
    let Some((iface, sx)) = gamma.addr(x) else { return false };
    if sx != s {
        return false;
    }
    let Some(body) = gamma.iface(iface) else { return false };
    body.values().all(|m| match m {
        MemberType::Container(_, sq) => sq == s,
        MemberType::Proc(_, sm) => sm == s,
    })
}

/// One step of the call-integrity typed semantics: the balance-level side
/// condition of r-call/r-fcall applies unconditionally (even for amount 0).
pub fn step_typed_ci(ctx: Ctx, tc: &TypedConfiguration) -> TypedStep {
    step_typed_mode(ctx, tc, true)
}

pub fn run_typed_ci(
    ctx: Ctx,
    tc: &TypedConfiguration,
    max_steps: usize,
) -> (TypedConfiguration, Trace, RunStatus) {
    run_typed_mode(ctx, tc, max_steps, true)
}

// ---------------------------------------------------------------------------
// Mutation harness
// ---------------------------------------------------------------------------

fn random_literal(rng: &mut ChaCha8Rng, p: &Program, b: &BaseType) -> Option<Value> {
    let gamma = &p.gamma;
    match b {
        BaseType::Int => Some(Value::Int(rng.gen_range(0..4))),
        BaseType::Bool => Some(Value::Bool(rng.gen())),
        BaseType::Idf => {
            // Any method name declared on any interface.
            let names: Vec<&str> = gamma
                .interfaces()
                .flat_map(|(_, body)| {
                    body.iter()
                        .filter(|(_, t)| matches!(t, MemberType::Proc(..)))
                        .map(|(n, _)| n.as_str())
                })
                .collect();
            if names.is_empty() {
                None
            } else {
                Some(Value::Method(names[rng.gen_range(0..names.len())].to_string()))
            }
        }
        BaseType::Iface(i) => {
            let addrs: Vec<&str> = gamma
                .addresses()
                .filter(|(_, j, _)| {
                    is_subtype(
                        &BaseType::Iface(j.to_string()),
                        &BaseType::Iface(i.clone()),
                        &p.sigma,
                    )
                })
                .map(|(x, _, _)| x)
                .collect();
            if addrs.is_empty() {
                None
            } else {
                Some(Value::Addr(addrs[rng.gen_range(0..addrs.len())].to_string()))
            }
        }
    }
}

/// One random statement from the mutation grammar: skip, an assignment to an
/// own field with a literal of the declared type, or a call to a declared
/// method with literal arguments and amount 0.
fn random_stm(rng: &mut ChaCha8Rng, p: &Program, own_iface: &str) -> Stm {
    let gamma = &p.gamma;
    match rng.gen_range(0..3u8) {
        0 => Stm::Skip,
        1 => {
            // this.q := lit, q an own non-balance field.
            let fields: Vec<(&String, &MemberType)> = gamma
                .iface(own_iface)
                .map(|b| {
                    b.iter()
                        .filter(|(n, t)| {
                            n.as_str() != "balance" && matches!(t, MemberType::Container(..))
                        })
                        .collect()
                })
                .unwrap_or_default();
            if fields.is_empty() {
                return Stm::Skip;
            }
            let (q, t) = &fields[rng.gen_range(0..fields.len())];
            let MemberType::Container(b, _) = t else { unreachable!() };
            match random_literal(rng, p, b) {
                Some(v) => Stm::AssignField((*q).clone(), Expr::Lit(v)),
                None => Stm::Skip,
            }
        }
        _ => {
            // call Y.f(lits)$0 for a declared address and declared procedure.
            let addrs: Vec<(&str, &str)> =
                gamma.addresses().map(|(x, i, _)| (x, i)).collect();
            if addrs.is_empty() {
                return Stm::Skip;
            }
            let (y, iface) = addrs[rng.gen_range(0..addrs.len())];
            let procs: Vec<(&String, &Vec<(BaseType, Level)>)> = gamma
                .iface(iface)
                .map(|b| {
                    b.iter()
                        .filter_map(|(n, t)| match t {
                            MemberType::Proc(ps, _) if n != "fallback" && n != "send" => {
                                Some((n, ps))
                            }
                            _ => None,
                        })
                        .collect()
                })
                .unwrap_or_default();
            if procs.is_empty() {
                return Stm::Skip;
            }
            let (f, params) = &procs[rng.gen_range(0..procs.len())];
            let mut args = Vec::new();
            for (b, _) in params.iter() {
                match random_literal(rng, p, b) {
                    Some(v) => args.push(Expr::Lit(v)),
                    None => return Stm::Skip,
                }
            }
            Stm::Call {
                target: Expr::Lit(Value::Addr(y.to_string())),
                method: MethodRef::Name((*f).clone()),
                args: CallArgs::List(args),
                amount: Expr::Lit(Value::Int(0)),
            }
        }
    }
}

fn random_body(rng: &mut ChaCha8Rng, p: &Program, own_iface: &str) -> Stm {
    let n = rng.gen_range(1..=5usize);
    let mut stms: Vec<Stm> = (0..n).map(|_| random_stm(rng, p, own_iface)).collect();
    let mut body = stms.pop().unwrap();
    while let Some(s) = stms.pop() {
        body = Stm::Seq(Box::new(s), Box::new(body));
    }
    body
}

/// A mutated copy of (table, state): untrusted contracts get random method
/// bodies from the mutation grammar and random field values within their
/// declared types. Trusted entries are untouched.
pub fn mutate_untrusted(
    rng: &mut ChaCha8Rng,
    p: &Program,
    partition: &TrustPartition,
    table: &MethodTable,
    state: &State,
) -> (MethodTable, State) {
    let mut table = table.clone();
    let mut state = state.clone();
    for (x, iface, _) in p.gamma.addresses() {
        if partition.is_trusted(x) {
            continue;
        }
        if let Some(menv) = table.get_mut(x) {
            for (f, (_params, body)) in menv.iter_mut() {
                // Mutate each body with probability 1/2; fallback included.
                if rng.gen() {
                    let _ = f;
                    *body = random_body(rng, p, iface);
                }
            }
        }
        if let Some(fe) = state.get_mut(x) {
            for (q, v) in fe.iter_mut() {
                if q == "balance" {
                    continue;
                }
                if let Some(MemberType::Container(b, _)) = p.gamma.member(iface, q) {
                    if rng.gen() {
                        if let Some(nv) = random_literal(rng, p, b) {
                            *v = nv;
                        }
                    }
                }
            }
        }
    }
    (table, state)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Divergence {
    pub variant: usize,
    pub trusted: String,
    /// Index of the first differing label in the trusted projection.
    pub position: usize,
    pub baseline: Vec<TraceLabel>,
    pub variant_trace: Vec<TraceLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CiReport {
    pub mutations: usize,
    pub terminating_pairs: usize,
    pub inconclusive_pairs: usize,
    pub divergences: Vec<Divergence>,
    pub pass: bool,
}

fn first_divergence(
    variant: usize,
    trusted: &BTreeSet<String>,
    base: &Trace,
    var: &Trace,
) -> Option<Divergence> {
    for x in trusted {
        let pb = project_trace(base, x);
        let pv = project_trace(var, x);
        if pb != pv {
            let position = pb
                .iter()
                .zip(pv.iter())
                .position(|(a, b)| a != b)
                .unwrap_or_else(|| pb.len().min(pv.len()));
            return Some(Divergence {
                variant,
                trusted: x.clone(),
                position,
                baseline: pb,
                variant_trace: pv,
            });
        }
    }
    None
}

fn run_terminates(c: &Configuration, max_steps: usize) -> Option<Trace> {
    let (_, trace, status) = run_untyped(c, max_steps);
    match status {
        RunStatus::Terminated | RunStatus::Threw => Some(trace),
        _ => None,
    }
}

/// The differential harness: run the untyped labelled semantics on the
/// original program and on `mutations` variants whose untrusted contracts are
/// mutated, comparing trusted projections among pairs where both runs reach a
/// terminal stack.
pub fn check_call_integrity(
    p: &Program,
    partition: &TrustPartition,
    tx: &[TxEntry],
    mutations: usize,
    seed: u64,
    max_steps: usize,
) -> Result<CiReport, String> {
    let (table, state) = elaborate_declarations(p).map_err(|e| e.to_string())?;
    let stack = compile_tx(tx);
    let base_cfg = Configuration {
        stack: stack.clone(),
        table: table.clone(),
        state: state.clone(),
        vars: VarEnv::new(),
    };
    let base_trace = run_terminates(&base_cfg, max_steps)
        .ok_or("baseline run does not terminate within the step budget")?;

    // Pre-draw each variant from its own seeded stream so results are
    // independent of evaluation order.
    let variants: Vec<(usize, MethodTable, State)> = (0..mutations)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let (t, s) = mutate_untrusted(&mut rng, p, partition, &table, &state);
            (i, t, s)
        })
        .collect();

    let outcomes: Vec<Option<Option<Divergence>>> = run_variants(&variants, |&(i, ref t, ref s)| {
        let cfg = Configuration {
            stack: stack.clone(),
            table: t.clone(),
            state: s.clone(),
            vars: VarEnv::new(),
        };
        run_terminates(&cfg, max_steps)
            .map(|trace| first_divergence(i, &partition.trusted, &base_trace, &trace))
    });

    let mut report = CiReport {
        mutations,
        terminating_pairs: 0,
        inconclusive_pairs: 0,
        divergences: Vec::new(),
        pass: true,
    };
    for o in outcomes {
        match o {
            None => report.inconclusive_pairs += 1,
            Some(div) => {
                report.terminating_pairs += 1;
                if let Some(d) = div {
                    report.divergences.push(d);
                }
            }
        }
    }
    report.pass = report.divergences.is_empty();
    Ok(report)
}

#[cfg(feature = "parallel")]
fn run_variants<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_variants<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

// ---------------------------------------------------------------------------
// Theorem check: runtime call integrity for typed stacks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TheoremOutcome {
    /// Both runs reached a terminal stack with equal trusted projections.
    Holds,
    /// Preconditions unmet or a run did not reach a terminal stack.
    Inapplicable(String),
    /// Trusted projections differ: a counterexample to the theorem.
    Violated(Divergence),
}

/// The partition induced by s-contract classification: trusted = contracts
/// that are bottom-level contracts, untrusted = top-level contracts. Addresses
/// that are neither make the theorem inapplicable.
pub fn induced_partition(p: &Program) -> Result<TrustPartition, String> {
    let lat = &p.lattice;
    if lat.levels().len() != 2 {
        return Err(format!(
            "theorem requires a two-point lattice, found {} levels",
            lat.levels().len()
        ));
    }
    let (lo, hi) = (lat.bottom(), lat.top());
    let mut trusted = BTreeSet::new();
    for (x, _, _) in p.gamma.addresses() {
        if is_s_contract(&p.gamma, x, lo) {
            trusted.insert(x.to_string());
        } else if !is_s_contract(&p.gamma, x, hi) {
            return Err(format!("{x} is neither a {lo}-contract nor a {hi}-contract"));
        }
    }
    if trusted.is_empty() {
        return Err("no trusted (bottom-level) contract".into());
    }
    Ok(TrustPartition { trusted })
}

/// Perturb untrusted contracts' field values within their declared types,
/// leaving trusted entries untouched — a state pair equal on trusted entries
/// and low-equal overall (untrusted fields are all high-level).
pub fn perturb_untrusted_state(
    rng: &mut ChaCha8Rng,
    p: &Program,
    partition: &TrustPartition,
    state: &State,
) -> State {
    let mut state = state.clone();
    for (x, iface, _) in p.gamma.addresses() {
        if partition.is_trusted(x) {
            continue;
        }
        if let Some(fe) = state.get_mut(x) {
            for (q, v) in fe.iter_mut() {
                if let Some(MemberType::Container(b, _)) = p.gamma.member(iface, q) {
                    if q == "balance" {
                        *v = Value::Int(rng.gen_range(0..100));
                    } else if let Some(nv) = random_literal(rng, p, b) {
                        *v = nv;
                    }
                }
            }
        }
    }
    state
}

/// One paired typed-CI run: the original state versus a perturbed-untrusted
/// state, under the same transaction; trusted projections must agree when
/// both runs reach a terminal stack.
pub fn theorem_ci_check(
    p: &Program,
    tx: &[TxEntry],
    seed: u64,
    max_steps: usize,
) -> Result<TheoremOutcome, String> {
    let partition = induced_partition(p)?;
    let (table, state) = elaborate_declarations(p).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state2 = perturb_untrusted_state(&mut rng, p, &partition, &state);
    let ctx = Ctx::of(p);
    let stack = compile_tx(tx);
    let run = |st: State| {
        let tc = TypedConfiguration {
            delta: Delta::new(),
            level: p.lattice.bottom().clone(),
            config: Configuration {
                stack: stack.clone(),
                table: table.clone(),
                state: st,
                vars: VarEnv::new(),
            },
        };
        run_typed_ci(ctx, &tc, max_steps)
    };
    let (_, t1, st1) = run(state);
    let (_, t2, st2) = run(state2);
    let terminal =
        |s: &RunStatus| matches!(s, RunStatus::Terminated | RunStatus::Threw);
    if !terminal(&st1) || !terminal(&st2) {
        return Ok(TheoremOutcome::Inapplicable(format!(
            "runs did not both reach a terminal stack: {st1:?} / {st2:?}"
        )));
    }
    match first_divergence(0, &partition.trusted, &t1, &t2) {
        None => Ok(TheoremOutcome::Holds),
        Some(d) => Ok(TheoremOutcome::Violated(d)),
    }
}
