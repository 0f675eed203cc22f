//! The typed operational semantics: expression evaluation with runtime type
//! and level checks, typed stack stepping, canonical-state construction,
//! terminal-type computation, and level stripping.

use crate::lattice::Level;
use crate::runtime::{
    eval_expr, Configuration, RunStatus, Stack, StackSym, State, Trace, TraceLabel,
    VarEnv,
};
use crate::statics::{extract, least_type_expr, typecheck_varenv, Ctx, TypeErr};
use crate::syntax::{CallArgs, Expr, MethodRef, Stm, Value};
use crate::types::{
    is_subtype, type_of, BaseType, Delta, MemberType, VarType, CANON_METHOD,
};

fn stuck<T>(rule: &str, reason: impl Into<String>) -> Result<T, TypeErr> {
    Err(TypeErr(format!("{rule}: {}", reason.into())))
}

// ---------------------------------------------------------------------------
// Typed expression evaluation (rules r-val / r-var / r-field / r-op)
// ---------------------------------------------------------------------------

/// Evaluate `e` at the prescribed (base, level), logging the level of every
/// container read. Failure is a typed-stuck with the violated side condition.
pub fn eval_expr_typed_logged(
    ctx: Ctx,
    d: &Delta,
    want: &(BaseType, Level),
    e: &Expr,
    state: &State,
    vars: &VarEnv,
    reads: &mut Vec<Level>,
) -> Result<Value, TypeErr> {
    let (bw, sw) = want;
    let lat = ctx.lattice;
    match e {
        Expr::Lit(v) => {
            let Some((b1, s1)) = type_of(v, ctx.gamma, lat) else {
                return stuck("r-val", format!("TypeOf undefined on {v}"));
            };
            if !lat.leq(&s1, sw) {
                return stuck("r-val", format!("{s1} ⋢ {sw}"));
            }
            if !is_subtype(&b1, bw, ctx.sigma) {
                return stuck("r-val", format!("Σ ⊬ {b1} <: {bw}"));
            }
            Ok(v.clone())
        }
        Expr::Var(x) => {
            let Some(v) = vars.get(x) else {
                return stuck("r-var", format!("{x} ∉ dom(env_V)"));
            };
            let Some((b2, s2)) = d.container(x) else {
                return stuck("r-var", format!("Δ({x}) is not a container"));
            };
            let Some((b1, s1)) = type_of(v, ctx.gamma, lat) else {
                return stuck("r-var", format!("TypeOf undefined on {v}"));
            };
            if !(lat.leq(&s1, s2) && lat.leq(s2, sw)) {
                return stuck("r-var", format!("level chain {s1} ⊑ {s2} ⊑ {sw} broken"));
            }
            if !(is_subtype(&b1, b2, ctx.sigma) && is_subtype(b2, bw, ctx.sigma)) {
                return stuck("r-var", format!("subtype chain {b1} <: {b2} <: {bw} broken"));
            }
            reads.push(s2.clone());
            Ok(v.clone())
        }
        Expr::Field(e0, p) => {
            // The reference is evaluated at its least static interface type,
            // coerced up to the wanted level.
            let (bi, _) = least_type_expr(ctx, d, e0)
                .map_err(|e| TypeErr(format!("r-field: {e}")))?;
            let BaseType::Iface(i) = &bi else {
                return stuck("r-field", format!("{e0} has non-interface type {bi}"));
            };
            let xv = eval_expr_typed_logged(
                ctx,
                d,
                &(BaseType::Iface(i.clone()), sw.clone()),
                e0,
                state,
                vars,
                reads,
            )?;
            let Value::Addr(x) = xv else {
                return stuck("r-field", format!("{e0} evaluated to non-address {xv}"));
            };
            let Some(MemberType::Container(b2, s2)) = ctx.gamma.member(i, p) else {
                return stuck("r-field", format!("Γ({i}) has no container {p}"));
            };
            let Some(v) = state.get(&x).and_then(|fe| fe.get(p)) else {
                return stuck("r-field", format!("env_S({x}) has no {p}"));
            };
            let Some((b1, s1)) = type_of(v, ctx.gamma, lat) else {
                return stuck("r-field", format!("TypeOf undefined on {v}"));
            };
            if !(lat.leq(&s1, s2) && lat.leq(s2, sw)) {
                return stuck("r-field", format!("level chain {s1} ⊑ {s2} ⊑ {sw} broken"));
            }
            if !(is_subtype(&b1, b2, ctx.sigma) && is_subtype(b2, bw, ctx.sigma)) {
                return stuck("r-field", format!("subtype chain {b1} <: {b2} <: {bw} broken"));
            }
            reads.push(s2.clone());
            Ok(v.clone())
        }
        Expr::Op(op, args) => {
            // Pick the operator signature from the least static types, then
            // evaluate every operand at its signature base and the wanted level.
            let (b, _) = least_type_expr(ctx, d, e).map_err(|e| TypeErr(format!("r-op: {e}")))?;
            if !is_subtype(&b, bw, ctx.sigma) {
                return stuck("r-op", format!("Σ ⊬ {b} <: {bw}"));
            }
            let mut vs = Vec::new();
            for a in args {
                let (ab, _) =
                    least_type_expr(ctx, d, a).map_err(|e| TypeErr(format!("r-op: {e}")))?;
                vs.push(eval_expr_typed_logged(ctx, d, &(ab, sw.clone()), a, state, vars, reads)?);
            }
            crate::runtime::apply_op(op, &vs).map_err(|e| TypeErr(format!("r-op: {e}")))
        }
    }
}

pub fn eval_expr_typed(
    ctx: Ctx,
    d: &Delta,
    want: &(BaseType, Level),
    e: &Expr,
    state: &State,
    vars: &VarEnv,
) -> Result<Value, TypeErr> {
    let mut reads = Vec::new();
    eval_expr_typed_logged(ctx, d, want, e, state, vars, &mut reads)
}

// ---------------------------------------------------------------------------
// Typed stack stepping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedConfiguration {
    pub delta: Delta,
    pub level: Level,
    pub config: Configuration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum TypedStep {
    Next(TypedConfiguration, TraceLabel),
    Terminal,
    /// Non-terminal, but a side condition failed; the diagnostic names the
    /// rule and the condition.
    Stuck(TypeErr),
}

/// One typed small step. With `ci_mode`, the balance-level side condition of
/// r-call/r-fcall applies unconditionally (the labelled call-integrity
/// variant); otherwise only when the transferred amount is nonzero.
pub fn step_typed_mode(ctx: Ctx, tc: &TypedConfiguration, ci_mode: bool) -> TypedStep {
    if tc.config.stack.is_terminal() {
        return TypedStep::Terminal;
    }
    let mut next = tc.clone();
    let head = next.config.stack.pop().expect("non-terminal stack has a head");
    let res: Result<TraceLabel, TypeErr> = (|| {
        let lat = ctx.lattice;
        let d = &tc.delta;
        let s = &tc.level;
        let state = &tc.config.state;
        let vars = &tc.config.vars;
        match head {
            StackSym::Lvl(s0) => {
                // r-restore: the current level must dominate the restored one.
                if !lat.leq(&s0, s) {
                    return stuck("r-restore", format!("{s} ⋣ {s0}"));
                }
                next.level = s0;
                Ok(TraceLabel::Silent)
            }
            StackSym::Del(x) => {
                if d.get(&x).is_none() {
                    return stuck("r-delv", format!("{x} ∉ dom(Δ)"));
                }
                if !next.config.vars.remove(&x) {
                    return stuck("r-delv", format!("{x} ∉ dom(env_V)"));
                }
                next.delta = d.unbind(&x);
                Ok(TraceLabel::Silent)
            }
            StackSym::Ret(env2, snap) => {
                // r-return: the restored environment must be well-typed
                // against its Δ snapshot.
                let d2 = match &snap {
                    Some(d2) => d2.clone(),
                    None => extract(ctx, &env2).map_err(|e| TypeErr(format!("r-return: {e}")))?,
                };
                typecheck_varenv(ctx, &d2, &env2)
                    .map_err(|e| TypeErr(format!("r-return: {e}")))?;
                next.config.vars = env2;
                next.delta = d2;
                Ok(TraceLabel::Silent)
            }
            StackSym::Stm(stm) => match stm {
                Stm::Skip => Ok(TraceLabel::Silent),
                Stm::Throw => unreachable!("throw-headed stacks are terminal"),
                Stm::Seq(a, b) => {
                    next.config.stack.push_stm(*b);
                    next.config.stack.push_stm(*a);
                    Ok(TraceLabel::Silent)
                }
                Stm::If(e, t, f) => {
                    let (gb, gs) = least_type_expr(ctx, d, &e)
                        .map_err(|e| TypeErr(format!("r-if: {e}")))?;
                    if gb != BaseType::Bool {
                        return stuck("r-if", format!("guard has type {gb}, not bool"));
                    }
                    let s2 = lat.join(s, &gs);
                    let v = eval_expr_typed(ctx, d, &(BaseType::Bool, s2.clone()), &e, state, vars)
                        .map_err(|e| TypeErr(format!("r-if: {e}")))?;
                    let Value::Bool(b) = v else {
                        return stuck("r-if", format!("guard evaluated to {v}"));
                    };
                    next.config.stack.syms.insert(0, StackSym::Lvl(s.clone()));
                    next.config.stack.push_stm(if b { *t } else { *f });
                    next.level = s2;
                    Ok(TraceLabel::Silent)
                }
                Stm::While(e, body) => {
                    let (gb, gs) = least_type_expr(ctx, d, &e)
                        .map_err(|e| TypeErr(format!("r-while: {e}")))?;
                    if gb != BaseType::Bool {
                        return stuck("r-while", format!("guard has type {gb}, not bool"));
                    }
                    let s2 = lat.join(s, &gs);
                    let v = eval_expr_typed(ctx, d, &(BaseType::Bool, s2.clone()), &e, state, vars)
                        .map_err(|e| TypeErr(format!("r-while: {e}")))?;
                    match v {
                        Value::Bool(true) => {
                            // r-while_T: S ; s ; while e do S ; Q at level s′.
                            next.config.stack.push_stm(Stm::While(e, body.clone()));
                            next.config.stack.syms.insert(0, StackSym::Lvl(s.clone()));
                            next.config.stack.push_stm(*body);
                            next.level = s2;
                        }
                        Value::Bool(false) => {} // r-while_F: level unchanged.
                        v => return stuck("r-while", format!("guard evaluated to {v}")),
                    }
                    Ok(TraceLabel::Silent)
                }
                Stm::DeclVar { base, level: sx, name, init, body } => {
                    if vars.contains(&name) || d.get(&name).is_some() {
                        return stuck("r-decv", format!("{name} already bound"));
                    }
                    let v =
                        eval_expr_typed(ctx, d, &(base.clone(), sx.clone()), &init, state, vars)
                            .map_err(|e| TypeErr(format!("r-decv: {e}")))?;
                    next.delta = d.bind(&name, VarType::Container(base, sx));
                    next.config.vars.bind(&name, v, None);
                    next.config.stack.syms.insert(0, StackSym::Del(name));
                    next.config.stack.push_stm(*body);
                    Ok(TraceLabel::Silent)
                }
                Stm::AssignVar(x, e) => {
                    if !vars.contains(&x) {
                        return stuck("r-assv", format!("{x} ∉ dom(env_V)"));
                    }
                    let Some((b, sx)) = d.container(&x) else {
                        return stuck("r-assv", format!("Δ({x}) is not a container"));
                    };
                    if !lat.leq(s, sx) {
                        return stuck("r-assv", format!("cmd level {s} ⋢ {sx}"));
                    }
                    let v =
                        eval_expr_typed(ctx, d, &(b.clone(), sx.clone()), &e, state, vars)
                            .map_err(|e| TypeErr(format!("r-assv: {e}")))?;
                    next.config.vars.set(&x, v);
                    Ok(TraceLabel::Silent)
                }
                Stm::AssignField(p, e) => {
                    let Some(Value::Addr(x)) = vars.get("this").cloned() else {
                        return stuck("r-assf", "this is not bound to an address");
                    };
                    let Some((bt, s1)) = d.container("this") else {
                        return stuck("r-assf", "Δ(this) is not a container");
                    };
                    let BaseType::Iface(i) = bt.clone() else {
                        return stuck("r-assf", format!("this has non-interface type {bt}"));
                    };
                    let Some(MemberType::Container(b, sp)) = ctx.gamma.member(&i, &p) else {
                        return stuck("r-assf", format!("Γ({i}) has no container {p}"));
                    };
                    if !lat.leq(s1, sp) {
                        return stuck("r-assf", format!("s1 = {s1} ⋢ {sp}"));
                    }
                    if !lat.leq(s, sp) {
                        return stuck("r-assf", format!("cmd level {s} ⋢ {sp}"));
                    }
                    let v = eval_expr_typed(ctx, d, &(b.clone(), sp.clone()), &e, state, vars)
                        .map_err(|e| TypeErr(format!("r-assf: {e}")))?;
                    let fe = next
                        .config
                        .state
                        .get_mut(&x)
                        .ok_or(TypeErr(format!("r-assf: unknown address {x}")))?;
                    if !fe.contains_key(&p) {
                        return stuck("r-assf", format!("{x} has no field {p}"));
                    }
                    fe.insert(p, v);
                    Ok(TraceLabel::Silent)
                }
                Stm::Call { target, method, args, amount } => step_call(
                    ctx, tc, &mut next, &target, &method, &args, Some(&amount), false, ci_mode,
                ),
                Stm::DCall { target, method, args } => {
                    step_call(ctx, tc, &mut next, &target, &method, &args, None, true, ci_mode)
                }
            },
        }
    })();
    match res {
        Ok(label) => TypedStep::Next(next, label),
        Err(e) => TypedStep::Stuck(e),
    }
}

pub fn step_typed(ctx: Ctx, tc: &TypedConfiguration) -> TypedStep {
    step_typed_mode(ctx, tc, false)
}

/// Shared body of r-call / r-fcall / r-dcall.
#[allow(clippy::too_many_arguments)]
fn step_call(
    ctx: Ctx,
    tc: &TypedConfiguration,
    next: &mut TypedConfiguration,
    target: &Expr,
    method: &MethodRef,
    args: &CallArgs,
    amount: Option<&Expr>,
    is_dcall: bool,
    ci_mode: bool,
) -> Result<TraceLabel, TypeErr> {
    let lat = ctx.lattice;
    let d = &tc.delta;
    let s = &tc.level;
    let state = &tc.config.state;
    let vars = &tc.config.vars;
    let rule0 = if is_dcall { "r-dcall" } else { "r-call" };

    // Identify the concrete callee first (the typed premises then re-evaluate
    // the target at (I^Y, s′)).
    let yv = eval_expr(target, state, vars).map_err(|e| TypeErr(format!("{rule0}: {e}")))?;
    let Value::Addr(y) = yv else {
        return stuck(rule0, format!("target evaluated to non-address {yv}"));
    };
    let Some((iy, s2)) = ctx.gamma.addr(&y) else {
        return stuck(rule0, format!("Γ has no address {y}"));
    };
    let (iy, s2) = (iy.to_string(), s2.clone());
    let f = crate::runtime::resolve_method(method, vars)
        .map_err(|e| TypeErr(format!("{rule0}: {e}")))?;
    let menv = tc
        .config
        .table
        .get(&y)
        .ok_or(TypeErr(format!("{rule0}: no contract at {y}")))?;
    let fallback = !is_dcall && !menv.contains_key(&f);
    let rule = if fallback { "r-fcall" } else { rule0 };
    if is_dcall && !menv.contains_key(&f) {
        return stuck("r-dcall", format!("{y} has no method {f} (no fallback for dcall)"));
    }

    // The method's signature fixes s′ and the parameter types.
    let (sig_name, sig_params, sp): (&str, Vec<(BaseType, Level)>, Level) = if fallback {
        match ctx.gamma.member(&iy, "fallback") {
            Some(MemberType::Proc(ps, sm)) if ps.is_empty() => ("fallback", vec![], sm.clone()),
            _ => return stuck(rule, format!("Γ({iy})(fallback) is not a nullary procedure")),
        }
    } else {
        match ctx.gamma.member(&iy, &f) {
            Some(MemberType::Proc(ps, sm)) => (&f, ps.clone(), sm.clone()),
            _ => return stuck(rule, format!("Γ({iy}) has no procedure {f}")),
        }
    };
    let _ = sig_name;

    // Caller typing: Δ(this) = ⌈I^X, s1⌉.
    let Some((ctb, s1)) = d.container("this") else {
        return stuck(rule, "Δ(this) is not a container");
    };
    let BaseType::Iface(ix) = ctb.clone() else {
        return stuck(rule, format!("this has non-interface type {ctb}"));
    };
    if !lat.leq(s1, &sp) {
        return stuck(rule, format!("s1 = {s1} ⋢ s′ = {sp}"));
    }
    if !lat.leq(s, &sp) {
        return stuck(rule, format!("cmd level {s} ⋢ s′ = {sp}"));
    }

    // Typed evaluation of target at (I^Y, s′).
    eval_expr_typed(ctx, d, &(BaseType::Iface(iy.clone()), sp.clone()), target, state, vars)
        .map_err(|e| TypeErr(format!("{rule}: target: {e}")))?;

    // Arguments: at the signature types for r-call/r-dcall, at their least
    // types for r-fcall (the signature has no parameters).
    let (vs, arg_types): (Vec<Value>, Vec<(BaseType, Level)>) = match args {
        CallArgs::List(es) => {
            let types: Vec<(BaseType, Level)> = if fallback {
                es.iter()
                    .map(|e| least_type_expr(ctx, d, e))
                    .collect::<Result<_, _>>()
                    .map_err(|e| TypeErr(format!("{rule}: {e}")))?
            } else {
                if es.len() != sig_params.len() {
                    return stuck(rule, format!("arity mismatch on {y}.{f}"));
                }
                sig_params.clone()
            };
            let vs = es
                .iter()
                .zip(&types)
                .map(|(e, t)| eval_expr_typed(ctx, d, t, e, state, vars))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| TypeErr(format!("{rule}: argument: {e}")))?;
            (vs, types)
        }
        CallArgs::ArgsVar => {
            let Some(Value::Seq(vs)) = vars.get("args").cloned() else {
                return stuck(rule, "args is not bound to a sequence");
            };
            let Some(VarType::ArgsSeq(ts)) = d.get("args").cloned() else {
                return stuck(rule, "Δ(args) is not a typed sequence");
            };
            if !fallback {
                if vs.len() != sig_params.len() {
                    return stuck(rule, format!("arity mismatch on {y}.{f}"));
                }
                for ((b, lv), (pb, ps)) in ts.iter().zip(&sig_params) {
                    if !is_subtype(b, pb, ctx.sigma) || !lat.leq(lv, ps) {
                        return stuck(rule, format!("args element {b}@{lv} ⊄ {pb}@{ps}"));
                    }
                }
                (vs, sig_params.clone())
            } else {
                (vs, ts)
            }
        }
    };

    let mut new_vars = VarEnv::new();
    let mut new_delta = Delta::new();
    let label;
    if is_dcall {
        // Σ ⊢ I^X <: I^Y plus field-type agreement.
        if !is_subtype(&BaseType::Iface(ix.clone()), &BaseType::Iface(iy.clone()), ctx.sigma) {
            return stuck("r-dcall", format!("Σ ⊬ {ix} <: {iy}"));
        }
        if let Some(body) = ctx.gamma.iface(&iy) {
            for (q, t) in body {
                if matches!(t, MemberType::Container(..)) && ctx.gamma.member(&ix, q) != Some(t) {
                    return stuck(
                        "r-dcall",
                        format!("Γ({iy})({q}) ≠ Γ({ix})({q}) (field agreement)"),
                    );
                }
            }
        }
        // this/sender/value are kept, in both env_V′ and Δ′.
        for magic in ["this", "sender", "value"] {
            let Some(v) = vars.get(magic).cloned() else {
                return stuck("r-dcall", format!("{magic} ∉ dom(env_V)"));
            };
            let Some(t) = d.get(magic).cloned() else {
                return stuck("r-dcall", format!("{magic} ∉ dom(Δ)"));
            };
            new_vars.bind(magic, v, None);
            new_delta = new_delta.bind(magic, t);
        }
        let Some(Value::Addr(caller)) = vars.get("this").cloned() else {
            return stuck("r-dcall", "this is not bound to an address");
        };
        label = TraceLabel::call(&caller, &y, &f, &vs, 0);
    } else {
        let Some(Value::Addr(x)) = vars.get("this").cloned() else {
            return stuck(rule, "this is not bound to an address");
        };
        let amount = amount.expect("call carries an amount");
        let zv = eval_expr_typed(ctx, d, &(BaseType::Int, sp.clone()), amount, state, vars)
            .map_err(|e| TypeErr(format!("{rule}: amount: {e}")))?;
        let Value::Int(z) = zv else {
            return stuck(rule, format!("amount evaluated to {zv}"));
        };
        // z ≠ 0 ⇒ s′ ⊑ s3, s4 (unconditional in the call-integrity variant).
        if ci_mode || z != 0 {
            for (who, i) in [("caller", ix.as_str()), ("callee", iy.as_str())] {
                let Some(MemberType::Container(_, sb)) = ctx.gamma.member(i, "balance") else {
                    return stuck(rule, format!("Γ({i}) has no balance"));
                };
                if !lat.leq(&sp, sb) {
                    return stuck(rule, format!("s′ = {sp} ⋢ {sb} ({who} balance level)"));
                }
            }
        }
        new_vars.bind("this", Value::Addr(y.clone()), None);
        new_vars.bind("sender", Value::Addr(x.clone()), None);
        new_vars.bind("value", Value::Int(z), None);
        new_delta = new_delta
            .bind("this", VarType::Container(BaseType::Iface(iy.clone()), s2.clone()))
            .bind("sender", VarType::Container(BaseType::Iface(ix.clone()), s1.clone()))
            .bind("value", VarType::Container(BaseType::Int, sp.clone()));
        if fallback {
            new_vars.bind("id", Value::Method(f.clone()), None);
            new_vars.bind("args", Value::Seq(vs.clone()), None);
            new_delta = new_delta
                .bind("id", VarType::Container(BaseType::Idf, sp.clone()))
                .bind("args", VarType::ArgsSeq(arg_types.clone()));
        }
        // Balance transfer.
        let get = |st: &State, who: &str| match st.get(who).and_then(|fe| fe.get("balance")) {
            Some(Value::Int(n)) => Ok(*n),
            _ => stuck(rule, format!("{who} has no integer balance")),
        };
        let fb = get(&next.config.state, &x)?;
        next.config.state.get_mut(&x).unwrap().insert("balance".into(), Value::Int(fb - z));
        let tb = get(&next.config.state, &y)?;
        next.config.state.get_mut(&y).unwrap().insert("balance".into(), Value::Int(tb + z));
        label = TraceLabel::call(&x, &y, &f, &vs, z);
    }

    // Parameters (r-call / r-dcall only; the fallback body is nullary).
    if !fallback {
        let (params, body) = menv.get(&f).expect("checked above");
        if params.len() != vs.len() {
            return stuck(rule, format!("arity mismatch on {y}.{f}"));
        }
        for ((x, v), t) in params.iter().zip(&vs).zip(&arg_types) {
            new_vars.bind(x, v.clone(), None);
            new_delta = new_delta.bind(x, VarType::Container(t.0.clone(), t.1.clone()));
        }
        next.config.stack.syms.insert(0, StackSym::Lvl(s.clone()));
        next.config.stack.syms.insert(0, StackSym::Ret(vars.clone(), Some(d.clone())));
        next.config.stack.push_stm(body.clone());
    } else {
        let (_, body) = menv.get("fallback").expect("fallback mandatory");
        next.config.stack.syms.insert(0, StackSym::Lvl(s.clone()));
        next.config.stack.syms.insert(0, StackSym::Ret(vars.clone(), Some(d.clone())));
        next.config.stack.push_stm(body.clone());
    }
    next.config.vars = new_vars;
    next.delta = new_delta;
    next.level = sp;
    Ok(label)
}

/// Iterate typed steps up to a budget, collecting call labels.
pub fn run_typed(
    ctx: Ctx,
    tc: &TypedConfiguration,
    max_steps: usize,
) -> (TypedConfiguration, Trace, RunStatus) {
    run_typed_mode(ctx, tc, max_steps, false)
}

pub fn run_typed_mode(
    ctx: Ctx,
    tc: &TypedConfiguration,
    max_steps: usize,
    ci_mode: bool,
) -> (TypedConfiguration, Trace, RunStatus) {
    let mut cur = tc.clone();
    let mut trace = Trace::new();
    for _ in 0..=max_steps {
        match step_typed_mode(ctx, &cur, ci_mode) {
            TypedStep::Terminal => {
                let status = if cur.config.stack.syms.is_empty() {
                    RunStatus::Terminated
                } else {
                    RunStatus::Threw
                };
                return (cur, trace, status);
            }
            TypedStep::Stuck(e) => return (cur, trace, RunStatus::Stuck(e.0)),
            TypedStep::Next(n, label) => {
                if !matches!(label, TraceLabel::Silent) {
                    trace.push(label);
                }
                cur = n;
            }
        }
    }
    (cur, trace, RunStatus::BudgetExhausted)
}

// ---------------------------------------------------------------------------
// Canonical-state construction
// ---------------------------------------------------------------------------

/// One deterministic value of each container type: 0, false, the reserved
/// method name, or the least declared address inhabiting the interface type.
pub fn canonical_value(ctx: Ctx, b: &BaseType, s: &Level) -> Result<Value, TypeErr> {
    match b {
        BaseType::Int => Ok(Value::Int(0)),
        BaseType::Bool => Ok(Value::Bool(false)),
        BaseType::Idf => Ok(Value::Method(CANON_METHOD.to_string())),
        BaseType::Iface(i) => {
            let mut best: Option<String> = None;
            for (x, j, sx) in ctx.gamma.addresses() {
                if is_subtype(&BaseType::Iface(j.to_string()), b, ctx.sigma)
                    && ctx.lattice.leq(sx, s)
                    && best.as_deref().is_none_or(|cur| x < cur)
                {
                    best = Some(x.to_string());
                }
            }
            best.map(Value::Addr)
                .ok_or(TypeErr(format!("construction: no declared address inhabits {i}@{s}")))
        }
    }
}

/// The canonical (state, vars) pair of the construction: every Γ field and
/// every Δ container holds its canonical value. The result is well-typed and
/// consistent by construction.
pub fn build_canonical_state(ctx: Ctx, d: &Delta) -> Result<(State, VarEnv), TypeErr> {
    let mut state = State::new();
    for (x, iface, _) in ctx.gamma.addresses() {
        let body = ctx
            .gamma
            .iface(iface)
            .ok_or(TypeErr(format!("construction: unknown interface {iface}")))?;
        let mut fields = std::collections::BTreeMap::new();
        for (p, t) in body {
            if let MemberType::Container(b, s) = t {
                fields.insert(p.clone(), canonical_value(ctx, b, s)?);
            }
        }
        state.insert(x.to_string(), fields);
    }
    let mut vars = VarEnv::new();
    for (x, t) in &d.entries {
        match t {
            VarType::Container(b, s) => vars.bind(x, canonical_value(ctx, b, s)?, None),
            VarType::ArgsSeq(ts) => {
                let vs = ts
                    .iter()
                    .map(|(b, s)| canonical_value(ctx, b, s))
                    .collect::<Result<Vec<_>, _>>()?;
                vars.bind(x, Value::Seq(vs), None);
            }
        }
    }
    Ok((state, vars))
}

/// Finitely many construction-conformant variants of the canonical state:
/// for each boolean variable or field read by a guard, the flipped state; for
/// each interface-typed variable, one rebinding per admissible address.
pub fn enumerate_branch_states(
    ctx: Ctx,
    d: &Delta,
    guards: &[Expr],
) -> Result<Vec<(State, VarEnv)>, TypeErr> {
    let (state, vars) = build_canonical_state(ctx, d)?;
    let mut out = vec![(state.clone(), vars.clone())];
    for g in guards {
        for x in crate::syntax::free_vars_expr(g) {
            match d.get(&x) {
                Some(VarType::Container(BaseType::Bool, _)) => {
                    let mut v2 = vars.clone();
                    v2.set(&x, Value::Bool(true));
                    out.push((state.clone(), v2));
                }
                Some(VarType::Container(BaseType::Iface(i), s)) => {
                    for (a, j, sa) in ctx.gamma.addresses() {
                        if is_subtype(
                            &BaseType::Iface(j.to_string()),
                            &BaseType::Iface(i.clone()),
                            ctx.sigma,
                        ) && ctx.lattice.leq(sa, s)
                        {
                            let mut v2 = vars.clone();
                            v2.set(&x, Value::Addr(a.to_string()));
                            out.push((state.clone(), v2));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    out.dedup();
    Ok(out)
}

// ---------------------------------------------------------------------------
// finish / remS / merge
// ---------------------------------------------------------------------------

/// The terminal (Δ, s) of a stack: finish walks the symbols, replaying del,
/// return-snapshot, and level effects on the typing context.
pub fn finish_types(
    ctx: Ctx,
    q: &Stack,
    d: &Delta,
    s: &Level,
) -> Result<(Delta, Level), TypeErr> {
    let mut d = d.clone();
    let mut s = s.clone();
    for sym in &q.syms {
        match sym {
            StackSym::Stm(_) => {}
            StackSym::Del(x) => {
                if d.get(x).is_none() {
                    return Err(TypeErr(format!("finish: del({x}) but {x} ∉ dom(Δ)")));
                }
                d = d.unbind(x);
            }
            StackSym::Ret(env, snap) => {
                d = match snap {
                    Some(d2) => d2.clone(),
                    None => extract(ctx, env)?,
                };
            }
            StackSym::Lvl(s2) => s = s2.clone(),
        }
    }
    Ok((d, s))
}

/// MERGE: zip a plain environment with its Δ into a typed snapshot.
pub fn merge_env(env: &VarEnv, d: &Delta) -> Result<VarEnv, TypeErr> {
    let mut out = VarEnv::new();
    for (x, v, _) in &env.entries {
        match d.get(x) {
            Some(VarType::Container(b, s)) => out.bind(x, v.clone(), Some((b.clone(), s.clone()))),
            // The variadic sequence keeps its values; its element types live
            // only in Δ.
            Some(VarType::ArgsSeq(_)) => out.bind(x, v.clone(), None),
            None => return Err(TypeErr(format!("merge: {x} ∉ dom(Δ)"))),
        }
    }
    Ok(out)
}

/// remS: drop level symbols and merge (env_V, Δ) return symbols into typed
/// snapshots — the image of a typed stack in the untyped world.
pub fn strip_levels(q: &Stack) -> Result<Stack, TypeErr> {
    let mut syms = Vec::new();
    for sym in &q.syms {
        match sym {
            StackSym::Lvl(_) => {}
            StackSym::Ret(env, Some(d)) => syms.push(StackSym::Ret(merge_env(env, d)?, None)),
            other => syms.push(other.clone()),
        }
    }
    Ok(Stack { syms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_program, parse_stm, parse_tx};
    use crate::runtime::{elaborate_declarations, initial_configuration, run_untyped};
    use crate::statics::{check_consistency, typecheck_envs};
    use crate::syntax::Program;

    const LAT: &str = "lattice { levels: L, H; order: L <= H; top: H; bottom: L; }";

    fn demo() -> Program {
        let tsi = "
interface I {
  owner : Top@L;
  secret : int@H;
  f : (int@L) -> cmd@L;
  g : () -> cmd@L;
}";
        let src = "
contract X : I@L {
  field balance := 10;
  field owner := Y;
  field secret := 0;
  func f(a) { this.owner := this.owner }
  func g() { call Y.f(1)$2 }
  func fallback() { skip }
}
contract Y : I@L {
  field balance := 5;
  field owner := X;
  field secret := 7;
  func f(a) { skip }
  func g() { skip }
  func fallback() { skip }
}";
        parse_program(src, tsi, LAT).unwrap()
    }

    fn typed_cfg(p: &Program, stm: &str, caller: &str) -> TypedConfiguration {
        let (table, state) = elaborate_declarations(p).unwrap();
        let mut stack = Stack::bottom();
        stack.push_stm(parse_stm(stm, p).unwrap());
        let mut vars = VarEnv::new();
        vars.bind("this", Value::Addr(caller.into()), None);
        vars.bind("sender", Value::Addr(caller.into()), None);
        vars.bind("value", Value::Int(0), None);
        let ctx = Ctx::of(p);
        let delta = crate::statics::method_delta(ctx, "I", &"L".to_string(), &[], &[]).unwrap();
        TypedConfiguration {
            delta,
            level: p.lattice.bottom().clone(),
            config: Configuration { stack, table, state, vars },
        }
    }

    #[test]
    fn typed_expr_rules() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let (_, state) = elaborate_declarations(&p).unwrap();
        let d = Delta::new().bind("x", VarType::Container(BaseType::Int, "H".into()));
        let mut vars = VarEnv::new();
        vars.bind("x", Value::Int(3), None);
        // r-val at (int, L).
        assert_eq!(
            eval_expr_typed(ctx, &d, &(BaseType::Int, "L".into()), &Expr::int(5), &state, &vars),
            Ok(Value::Int(5))
        );
        // r-var: H container read at L is typed-stuck; at H it succeeds.
        let e = Expr::var("x");
        assert!(eval_expr_typed(ctx, &d, &(BaseType::Int, "L".into()), &e, &state, &vars).is_err());
        assert_eq!(
            eval_expr_typed(ctx, &d, &(BaseType::Int, "H".into()), &e, &state, &vars),
            Ok(Value::Int(3))
        );
        // Read log records the container level.
        let mut reads = Vec::new();
        eval_expr_typed_logged(ctx, &d, &(BaseType::Int, "H".into()), &e, &state, &vars, &mut reads)
            .unwrap();
        assert_eq!(reads, vec!["H".to_string()]);
    }

    #[test]
    fn typed_call_matches_untyped_effects() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let tc = typed_cfg(&p, "call Y.f(1)$2", "X");
        let (end, trace, status) = run_typed(ctx, &tc, 100);
        assert_eq!(status, RunStatus::Terminated);
        assert_eq!(end.config.state["X"]["balance"], Value::Int(8));
        assert_eq!(end.config.state["Y"]["balance"], Value::Int(7));
        assert_eq!(trace, vec![TraceLabel::call("X", "Y", "f", &[Value::Int(1)], 2)]);
        // The level is restored to bottom after the return.
        assert_eq!(end.level, "L");
    }

    #[test]
    fn branch_raises_and_restores_level() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let tc = typed_cfg(&p, "if this.secret = 0 then this.secret := 1 else skip", "X");
        let TypedStep::Next(after_if, _) = step_typed(ctx, &tc) else { panic!("if should step") };
        assert_eq!(after_if.level, "H"); // raised by the H guard
        assert!(matches!(&after_if.config.stack.syms[1], StackSym::Lvl(s) if s == "L"));
        let (end, _, status) = run_typed(ctx, &after_if, 100);
        assert_eq!(status, RunStatus::Terminated);
        assert_eq!(end.level, "L"); // r-restore dropped back
        assert_eq!(end.config.state["X"]["secret"], Value::Int(1));
    }

    #[test]
    fn implicit_flow_is_typed_stuck() {
        // Writing an L container under an H level is blocked by r-assf.
        let p = demo();
        let ctx = Ctx::of(&p);
        let tc = typed_cfg(&p, "if this.secret = 0 then this.owner := X else skip", "X");
        let TypedStep::Next(after_if, _) = step_typed(ctx, &tc) else { panic!() };
        let TypedStep::Stuck(e) = step_typed(ctx, &after_if) else { panic!("expected stuck") };
        assert!(e.0.contains("r-assf"), "{e}");
    }

    #[test]
    fn dcall_blocked_without_subtype() {
        let tsi = "
interface IX { f : () -> cmd@L; }
interface IP { g : () -> cmd@L; }";
        let src = "
contract P : IP@L {
  field balance := 0;
  func g() { dcall X.f() }
  func fallback() { skip }
}
contract X : IX@L {
  field balance := 0;
  func f() { skip }
  func fallback() { skip }
}";
        let p = parse_program(src, tsi, LAT).unwrap();
        let ctx = Ctx::of(&p);
        let (table, state) = elaborate_declarations(&p).unwrap();
        let mut stack = Stack::bottom();
        stack.push_stm(parse_stm("dcall X.f()", &p).unwrap());
        let mut vars = VarEnv::new();
        vars.bind("this", Value::Addr("P".into()), None);
        vars.bind("sender", Value::Addr("P".into()), None);
        vars.bind("value", Value::Int(0), None);
        let delta = crate::statics::method_delta(ctx, "IP", &"L".to_string(), &[], &[]).unwrap();
        let tc = TypedConfiguration {
            delta,
            level: "L".into(),
            config: Configuration { stack, table, state, vars },
        };
        let TypedStep::Stuck(e) = step_typed(ctx, &tc) else { panic!("expected typed-stuck") };
        assert!(e.0.contains("r-dcall") && e.0.contains("<:"), "{e}");
    }

    #[test]
    fn canonical_state_is_well_typed_and_consistent() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let d = crate::statics::method_delta(ctx, "I", &"L".to_string(), &[], &[]).unwrap();
        let (state, vars) = build_canonical_state(ctx, &d).unwrap();
        let (table, _) = elaborate_declarations(&p).unwrap();
        assert!(typecheck_envs(ctx, &table, &state, &vars, &d).is_ok());
        assert!(check_consistency(&p.gamma, &table, &state, &vars).is_ok());
        assert_eq!(state["X"]["secret"], Value::Int(0));
        // Interface-typed containers get the least admissible address.
        assert_eq!(state["X"]["owner"], Value::Addr("X".into()));
        assert_eq!(vars.get("this"), Some(&Value::Addr("X".into())));
    }

    #[test]
    fn finish_and_strip() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let d = Delta::new().bind("x", VarType::Container(BaseType::Int, "L".into()));
        // (L; ⊥, Δ, H) finishes at (Δ, L).
        let q = Stack::from_syms(vec![StackSym::Lvl("L".into())]);
        let (d2, s2) = finish_types(ctx, &q, &d, &"H".to_string()).unwrap();
        assert_eq!((d2, s2), (d.clone(), "L".to_string()));
        // (del(x); ⊥, (Δ,x:T), s) finishes at (Δ, s).
        let q = Stack::from_syms(vec![StackSym::Del("x".into())]);
        let (d2, _) = finish_types(ctx, &q, &d, &"L".to_string()).unwrap();
        assert!(d2.get("x").is_none());
        // remS drops levels and merges snapshots.
        let mut env = VarEnv::new();
        env.bind("x", Value::Int(1), None);
        let q = Stack::from_syms(vec![
            StackSym::Lvl("H".into()),
            StackSym::Ret(env, Some(d.clone())),
        ]);
        let stripped = strip_levels(&q).unwrap();
        assert_eq!(stripped.syms.len(), 1);
        let StackSym::Ret(env2, None) = &stripped.syms[0] else { panic!() };
        assert_eq!(env2.entries[0].2, Some((BaseType::Int, "L".to_string())));
    }

    #[test]
    fn typed_tx_run_matches_untyped() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let tx = parse_tx("X CALL Y.f(1)$2\nX CALL Y.g()$0", &p).unwrap();
        let c = initial_configuration(&p, &tx).unwrap();
        let (u_end, u_trace, u_status) = run_untyped(&c, 500);
        let tc = TypedConfiguration {
            delta: Delta::new(),
            level: p.lattice.bottom().clone(),
            config: c.clone(),
        };
        let (t_end, t_trace, t_status) = run_typed(ctx, &tc, 500);
        assert_eq!(u_status, RunStatus::Terminated);
        assert_eq!(t_status, RunStatus::Terminated);
        assert_eq!(u_end.state, t_end.config.state);
        assert_eq!(u_trace, t_trace);
    }
}
