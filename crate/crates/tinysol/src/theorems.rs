//! Executable runtime-theorem suites over the built-in corpus.
//!
//! Each suite draws instances from typed executions of the ten corpus
//! programs under seeded random transactions and checks the corresponding
//! metatheoretic property, panicking on the first violation and returning
//! the number of instances checked: runtime preservation, runtime
//! non-interference for stacks, the coercion properties for expressions and
//! stacks, semantic compatibility with the untyped semantics, and runtime
//! safety for expressions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus;
use crate::parser::TxEntry;
use crate::runtime::{
    initial_configuration, step_untyped, Configuration, StepResult, StackSym, TraceLabel, VarEnv,
};
use crate::statics::{
    check_consistency, check_stack_wellformed, first_level, least_type_expr, states_equal_at,
    typecheck_envs, Ctx,
};
use crate::syntax::{Expr, Program, Stm, Value};
use crate::typed::{
    eval_expr_typed, eval_expr_typed_logged, step_typed, strip_levels, TypedConfiguration,
    TypedStep,
};
use crate::types::{is_subtype, type_of, BaseType, MemberType};

// ---------------------------------------------------------------------------
// Instance generation
// ---------------------------------------------------------------------------

/// A random but mostly type-correct transaction against `p`: random caller,
/// random callee, a declared method (or, occasionally, an undeclared name to
/// exercise fallback dispatch), arguments matching the declared parameter
/// types, and usually a zero amount.
fn random_tx(p: &Program, rng: &mut ChaCha8Rng, len: usize) -> Vec<TxEntry> {
    let addrs: Vec<(String, String)> = p
        .gamma
        .addresses()
        .map(|(x, i, _)| (x.to_string(), i.to_string()))
        .collect();
    let methods: Vec<String> = p
        .contracts
        .iter()
        .flat_map(|c| c.methods.iter().map(|(n, _, _)| n.clone()))
        .filter(|m| m != "send" && m != "fallback")
        .collect();
    let mut out = Vec::new();
    for _ in 0..len {
        let caller = addrs[rng.gen_range(0..addrs.len())].0.clone();
        let (callee, iface) = addrs[rng.gen_range(0..addrs.len())].clone();
        let declared: Vec<(String, Vec<(BaseType, String)>)> = p
            .contract(&callee)
            .map(|c| {
                c.methods
                    .iter()
                    .filter(|(n, _, _)| n != "send" && n != "fallback")
                    .filter_map(|(n, _, _)| match p.gamma.member(&iface, n) {
                        Some(MemberType::Proc(params, _)) => Some((n.clone(), params.clone())),
                        _ => None,
                    })
                    .collect()
            })
            .unwrap_or_default();
        let (method, params) = if declared.is_empty() || rng.gen_bool(0.2) {
            (format!("zz{}", rng.gen_range(0..3)), Vec::new())
        } else {
            declared[rng.gen_range(0..declared.len())].clone()
        };
        let args = params
            .iter()
            .map(|(b, s)| match b {
                BaseType::Int => Value::Int(rng.gen_range(0..5)),
                BaseType::Bool => Value::Bool(rng.gen_bool(0.5)),
                BaseType::Idf => {
                    if methods.is_empty() {
                        Value::Method("zz0".into())
                    } else {
                        Value::Method(methods[rng.gen_range(0..methods.len())].clone())
                    }
                }
                BaseType::Iface(i) => {
                    // The least declared address inhabiting (I, s); always
                    // exists in the corpus for interface-typed parameters.
                    let candidates: Vec<&str> = p
                        .gamma
                        .addresses()
                        .filter(|(_, ix, sx)| {
                            is_subtype(
                                &BaseType::Iface(ix.to_string()),
                                &BaseType::Iface(i.clone()),
                                &p.sigma,
                            ) && p.lattice.leq(sx, s)
                        })
                        .map(|(x, _, _)| x)
                        .collect();
                    if candidates.is_empty() {
                        Value::Addr(addrs[0].0.clone())
                    } else {
                        Value::Addr(candidates[rng.gen_range(0..candidates.len())].to_string())
                    }
                }
            })
            .collect();
        let amount = if rng.gen_bool(0.8) { 0 } else { rng.gen_range(1..3) };
        out.push(TxEntry { caller, callee, method, args, amount });
    }
    out
}

/// A (pre, post, label) typed-step triple.
type StepPair = (TypedConfiguration, TypedConfiguration, TraceLabel);

/// All consecutive typed-step pairs of a run, up to `cap` steps.
fn typed_pairs(
    p: &Program,
    tx: &[TxEntry],
    cap: usize,
) -> Vec<StepPair> {
    let ctx = Ctx::of(p);
    let c = initial_configuration(p, tx).expect("initial configuration");
    let mut cur = TypedConfiguration {
        delta: Default::default(),
        level: p.lattice.bottom().clone(),
        config: c,
    };
    let mut out = Vec::new();
    for _ in 0..cap {
        match step_typed(ctx, &cur) {
            TypedStep::Next(next, label) => {
                out.push((cur.clone(), next.clone(), label));
                cur = next;
            }
            TypedStep::Terminal | TypedStep::Stuck(_) => break,
        }
    }
    out
}

/// Step pairs from the sample transaction plus `extra` random transactions.
fn corpus_pairs(
    rng: &mut ChaCha8Rng,
    extra: usize,
) -> Vec<(&'static str, Program, Vec<StepPair>)> {
    let mut out = Vec::new();
    for e in corpus::CORPUS.iter() {
        let p = e.program();
        let mut pairs = typed_pairs(&p, &e.transaction(&p), 400);
        for _ in 0..extra {
            let len = rng.gen_range(1..=3);
            let tx = random_tx(&p, rng, len);
            pairs.extend(typed_pairs(&p, &tx, 200));
        }
        out.push((e.name, p, pairs));
    }
    out
}

/// Drop type annotations from an environment: the (name, value) view shared
/// by the typed and untyped worlds.
fn erase_env(v: &VarEnv) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> =
        v.entries.iter().map(|(x, val, _)| (x.clone(), val.clone())).collect();
    out.sort();
    out
}

/// Erase annotations inside return symbols too, for stack comparison modulo
/// the Δ information that `merge` re-attaches.
fn erase_stack(q: &crate::runtime::Stack) -> Vec<StackSym> {
    q.syms
        .iter()
        .map(|sym| match sym {
            StackSym::Ret(env, _) => StackSym::Ret(
                VarEnv::from_pairs(env.entries.iter().map(|(x, v, _)| (x.clone(), v.clone()))),
                None,
            ),
            other => other.clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Runtime preservation
// ---------------------------------------------------------------------------

pub fn preservation_suite() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let empty = VarEnv::new();
    let mut instances = 0usize;
    for (name, p, pairs) in corpus_pairs(&mut rng, 4) {
        let ctx = Ctx::of(&p);
        for (pre, post, _) in &pairs {
            typecheck_envs(ctx, &post.config.table, &post.config.state, &post.config.vars, &post.delta)
                .unwrap_or_else(|e| panic!("{name}: well-typedness lost after step: {e}"));
            check_consistency(ctx.gamma, &post.config.table, &post.config.state, &post.config.vars)
                .unwrap_or_else(|e| panic!("{name}: consistency lost after step: {e}"));
            check_stack_wellformed(
                ctx,
                &post.config.table,
                &post.config.state,
                &post.config.vars,
                &post.level,
                &post.config.stack,
            )
            .unwrap_or_else(|e| panic!("{name}: well-formedness lost after step: {e}"));
            // A step at level s leaves every observer s″ with s ⋢ s″ blind:
            // old and new environments are s″-equal.
            for obs in p.lattice.levels() {
                if p.lattice.leq(&pre.level, obs) {
                    continue;
                }
                states_equal_at(
                    ctx,
                    (&pre.config.state, &empty),
                    (&post.config.state, &empty),
                    None,
                    obs,
                )
                .unwrap_or_else(|e| {
                    panic!("{name}: step at {} visible to observer {obs}: {e}", pre.level)
                });
            }
            instances += 1;
        }
    }
    instances
}

// ---------------------------------------------------------------------------
// Runtime non-interference for stacks
// ---------------------------------------------------------------------------

/// Mutate every non-balance container not observable at `obs` (random int
/// bump or boolean flip). Returns None when the configuration has no
/// unobservable container to vary.
fn high_variant(
    p: &Program,
    tc: &TypedConfiguration,
    obs: &str,
    rng: &mut ChaCha8Rng,
) -> Option<TypedConfiguration> {
    let mut out = tc.clone();
    let mut changed = false;
    for (addr, fields) in &mut out.config.state {
        let Some((iface, _)) = p.gamma.addr(addr) else { continue };
        let iface = iface.to_string();
        for (fld, val) in fields.iter_mut() {
            if fld == "balance" {
                continue;
            }
            let Some(MemberType::Container(_, s)) = p.gamma.member(&iface, fld) else { continue };
            if p.lattice.leq(s, obs) {
                continue;
            }
            match val {
                Value::Int(n) => {
                    *n += rng.gen_range(1..4);
                    changed = true;
                }
                Value::Bool(b) => {
                    *b = !*b;
                    changed = true;
                }
                _ => {}
            }
        }
    }
    for (_, val, ann) in &mut out.config.vars.entries {
        let Some((_, s)) = ann else { continue };
        if p.lattice.leq(s, obs) {
            continue;
        }
        match val {
            Value::Int(n) => {
                *n += rng.gen_range(1..4);
                changed = true;
            }
            Value::Bool(b) => {
                *b = !*b;
                changed = true;
            }
            _ => {}
        }
    }
    changed.then_some(out)
}

pub fn noninterference_suite() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut instances = 0usize;
    for (name, p, pairs) in corpus_pairs(&mut rng, 6) {
        let ctx = Ctx::of(&p);
        for (pre, _, _) in &pairs {
            for obs in p.lattice.levels() {
                let Some(variant) = high_variant(&p, pre, obs, &mut rng) else { continue };
                // The variant is itself a well-typed consistent configuration
                // that is obs-equal to the original.
                check_consistency(ctx.gamma, &variant.config.table, &variant.config.state, &variant.config.vars)
                    .unwrap_or_else(|e| panic!("{name}: variant inconsistent: {e}"));
                states_equal_at(
                    ctx,
                    (&pre.config.state, &pre.config.vars),
                    (&variant.config.state, &variant.config.vars),
                    Some(&pre.delta),
                    obs,
                )
                .unwrap_or_else(|e| panic!("{name}: variant not {obs}-equal to original: {e}"));
                match (step_typed(ctx, pre), step_typed(ctx, &variant)) {
                    (TypedStep::Next(a, _), TypedStep::Next(b, _)) => {
                        states_equal_at(
                            ctx,
                            (&a.config.state, &a.config.vars),
                            (&b.config.state, &b.config.vars),
                            Some(&a.delta),
                            obs,
                        )
                        .unwrap_or_else(|e| {
                            panic!("{name}: non-interference violated at observer {obs}: {e}")
                        });
                    }
                    (TypedStep::Stuck(_), TypedStep::Stuck(_)) => {}
                    (TypedStep::Terminal, TypedStep::Terminal) => {}
                    (a, b) => panic!(
                        "{name}: step kinds diverge at observer {obs}: {a:?} vs {b:?}"
                    ),
                }
                instances += 1;
            }
        }
    }
    instances
}

// ---------------------------------------------------------------------------
// Coercion for expressions and stacks
// ---------------------------------------------------------------------------

fn head_exprs(stm: &Stm, out: &mut Vec<Expr>) {
    match stm {
        Stm::Skip | Stm::Throw => {}
        Stm::DeclVar { init, body, .. } => {
            out.push(init.clone());
            head_exprs(body, out);
        }
        Stm::AssignVar(_, e) | Stm::AssignField(_, e) => out.push(e.clone()),
        Stm::Seq(a, b) => {
            head_exprs(a, out);
            head_exprs(b, out);
        }
        Stm::If(e, a, b) => {
            out.push(e.clone());
            head_exprs(a, out);
            head_exprs(b, out);
        }
        Stm::While(e, b) => {
            out.push(e.clone());
            head_exprs(b, out);
        }
        Stm::Call { target, args, amount, .. } => {
            out.push(target.clone());
            out.push(amount.clone());
            if let crate::syntax::CallArgs::List(es) = args {
                out.extend(es.iter().cloned());
            }
        }
        Stm::DCall { target, args, .. } => {
            out.push(target.clone());
            if let crate::syntax::CallArgs::List(es) = args {
                out.extend(es.iter().cloned());
            }
        }
    }
}

pub fn coercion_suite() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut expr_instances = 0usize;
    let mut stack_instances = 0usize;
    for (name, p, pairs) in corpus_pairs(&mut rng, 4) {
        let ctx = Ctx::of(&p);
        for (pre, post1, _) in &pairs {
            // Expressions: success at the least level implies success at
            // every higher level with the same value.
            if let Some(StackSym::Stm(stm)) = pre.config.stack.head() {
                let mut es = Vec::new();
                head_exprs(stm, &mut es);
                for e in es {
                    let Ok((b, s)) = least_type_expr(ctx, &pre.delta, &e) else { continue };
                    let Ok(v) = eval_expr_typed(
                        ctx,
                        &pre.delta,
                        &(b.clone(), s.clone()),
                        &e,
                        &pre.config.state,
                        &pre.config.vars,
                    ) else {
                        continue;
                    };
                    for hi in p.lattice.levels() {
                        if !p.lattice.leq(&s, hi) {
                            continue;
                        }
                        let v2 = eval_expr_typed(
                            ctx,
                            &pre.delta,
                            &(b.clone(), hi.clone()),
                            &e,
                            &pre.config.state,
                            &pre.config.vars,
                        )
                        .unwrap_or_else(|err| {
                            panic!("{name}: expr coercion {s} -> {hi} failed on {e}: {err}")
                        });
                        assert_eq!(v, v2, "{name}: coerced value differs on {e}");
                        expr_instances += 1;
                    }
                }
            }
            // Stacks: a step firing at s1 also fires at every s2 between
            // first_level(Q) and s1, with the same effects modulo level
            // symbols.
            let fl = first_level(&pre.config.stack, &p.lattice);
            for s2 in p.lattice.levels() {
                if !p.lattice.leq(&fl, s2) || !p.lattice.leq(s2, &pre.level) {
                    continue;
                }
                let lowered = TypedConfiguration {
                    delta: pre.delta.clone(),
                    level: s2.clone(),
                    config: pre.config.clone(),
                };
                match step_typed(ctx, &lowered) {
                    TypedStep::Next(post2, _) => {
                        assert_eq!(
                            strip_levels(&post1.config.stack).unwrap(),
                            strip_levels(&post2.config.stack).unwrap(),
                            "{name}: coerced reduct stack differs at {s2}"
                        );
                        assert_eq!(
                            post1.config.state, post2.config.state,
                            "{name}: coerced state differs at {s2}"
                        );
                        assert_eq!(
                            post1.config.vars.canonical(),
                            post2.config.vars.canonical(),
                            "{name}: coerced variables differ at {s2}"
                        );
                        stack_instances += 1;
                    }
                    other => panic!(
                        "{name}: step fires at {} but not at {s2} ⊒ first level {fl}: {other:?}",
                        pre.level
                    ),
                }
            }
        }
    }
    (expr_instances, stack_instances)
}

// ---------------------------------------------------------------------------
// Semantic compatibility with the untyped semantics
// ---------------------------------------------------------------------------

pub fn semantic_compatibility_suite() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut instances = 0usize;
    for (name, _p, pairs) in corpus_pairs(&mut rng, 4) {
        for (pre, post, label) in &pairs {
            // r-restore consumes a level symbol and has no untyped image.
            if matches!(pre.config.stack.head(), Some(StackSym::Lvl(_))) {
                continue;
            }
            let untyped = Configuration {
                stack: strip_levels(&pre.config.stack).unwrap(),
                table: pre.config.table.clone(),
                state: pre.config.state.clone(),
                vars: pre.config.vars.clone(),
            };
            match step_untyped(&untyped) {
                StepResult::Next(next, ulabel) => {
                    assert_eq!(
                        erase_stack(&next.stack),
                        erase_stack(&strip_levels(&post.config.stack).unwrap()),
                        "{name}: untyped reduct stack differs"
                    );
                    assert_eq!(next.state, post.config.state, "{name}: untyped state differs");
                    assert_eq!(
                        erase_env(&next.vars),
                        erase_env(&post.config.vars),
                        "{name}: untyped variables differ"
                    );
                    assert_eq!(&ulabel, label, "{name}: trace labels differ");
                    instances += 1;
                }
                other => panic!("{name}: typed step has no untyped image: {other:?}"),
            }
        }
    }
    instances
}

// ---------------------------------------------------------------------------
// Runtime safety for expressions
// ---------------------------------------------------------------------------

pub fn expression_safety_suite() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut instances = 0usize;
    for (name, p, pairs) in corpus_pairs(&mut rng, 4) {
        let ctx = Ctx::of(&p);
        for (pre, _, _) in &pairs {
            let Some(StackSym::Stm(stm)) = pre.config.stack.head() else { continue };
            let mut es = Vec::new();
            head_exprs(stm, &mut es);
            for e in es {
                let Ok((b, s)) = least_type_expr(ctx, &pre.delta, &e) else { continue };
                for lvl in p.lattice.levels() {
                    if !p.lattice.leq(&s, lvl) {
                        continue;
                    }
                    let mut reads = Vec::new();
                    let Ok(v) = eval_expr_typed_logged(
                        ctx,
                        &pre.delta,
                        &(b.clone(), lvl.clone()),
                        &e,
                        &pre.config.state,
                        &pre.config.vars,
                        &mut reads,
                    ) else {
                        continue;
                    };
                    let (vb, vs) = type_of(&v, ctx.gamma, ctx.lattice)
                        .unwrap_or_else(|| panic!("{name}: result {v} has no type"));
                    assert!(
                        is_subtype(&vb, &b, ctx.sigma),
                        "{name}: result base {vb} not a subtype of {b} for {e}"
                    );
                    assert!(
                        p.lattice.leq(&vs, lvl),
                        "{name}: result level {vs} ⋢ {lvl} for {e}"
                    );
                    for r in &reads {
                        assert!(
                            p.lattice.leq(r, lvl),
                            "{name}: evaluation of {e} at {lvl} read a {r}-container"
                        );
                    }
                    instances += 1;
                }
            }
        }
    }
    instances
}
