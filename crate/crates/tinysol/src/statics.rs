//! The syntactic type system: expression/statement/stack typing, environment
//! well-typedness, consistency checks, stack well-formedness, and the
//! level-parameterised state equivalence relation.

use crate::lattice::{Lattice, Level};
use crate::runtime::{op_signatures, MethodTable, State, VarEnv};
use crate::syntax::{free_addrs_stm, free_vars_stm, CallArgs, Expr, MethodRef, Program, Stm, Value};
use crate::types::{
    is_subtype, type_of, BaseType, Delta, Gamma, MemberType, Sigma, VarType, TOP_IFACE,
};
use crate::runtime::{Stack, StackSym};
use std::collections::BTreeSet;
use std::fmt;

/// A failed rule instance, naming the rule and the violated side condition.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct TypeErr(pub String);

impl fmt::Display for TypeErr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn fail<T>(msg: impl Into<String>) -> Result<T, TypeErr> {
    Err(TypeErr(msg.into()))
}

/// The static world a judgment is read in: Σ, Γ, and the lattice.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub sigma: &'a Sigma,
    pub gamma: &'a Gamma,
    pub lattice: &'a Lattice,
}

impl<'a> Ctx<'a> {
    pub fn of(p: &'a Program) -> Ctx<'a> {
        Ctx { sigma: &p.sigma, gamma: &p.gamma, lattice: &p.lattice }
    }
}

// ---------------------------------------------------------------------------
// Expressions (rules t-val / t-var / t-field / t-op)
// ---------------------------------------------------------------------------

/// Least common interface supertype along the Σ chain (Top is always one).
fn least_common_iface(ctx: Ctx, i1: &str, i2: &str) -> String {
    let mut cur = i1.to_string();
    for _ in 0..=ctx.sigma.parent.len() {
        if is_subtype(&BaseType::Iface(i2.to_string()), &BaseType::Iface(cur.clone()), ctx.sigma) {
            return cur;
        }
        match ctx.sigma.parent.get(&cur) {
            Some(p) if *p != cur => cur = p.clone(),
            _ => break,
        }
    }
    TOP_IFACE.to_string()
}

/// Least derivable type of an expression: minimal base along Σ and the join of
/// all container levels read. Any derivable type is a coercion of this one.
pub fn least_type_expr(ctx: Ctx, d: &Delta, e: &Expr) -> Result<(BaseType, Level), TypeErr> {
    match e {
        Expr::Lit(v) => match type_of(v, ctx.gamma, ctx.lattice) {
            Some(t) => Ok(t),
            None => fail(format!("t-val: TypeOf undefined on {v}")),
        },
        Expr::Var(x) => match d.get(x) {
            Some(VarType::Container(b, s)) => Ok((b.clone(), s.clone())),
            Some(VarType::ArgsSeq(_)) => {
                fail("t-var: `args` is not usable as an ordinary expression")
            }
            None => fail(format!("t-var: {x} ∉ dom(Δ)")),
        },
        Expr::Field(e0, p) => {
            let (b, s) = least_type_expr(ctx, d, e0)?;
            let BaseType::Iface(i) = &b else {
                return fail(format!("t-field: {e0} has non-interface type {b}"));
            };
            match ctx.gamma.member(i, p) {
                Some(MemberType::Container(bp, sp)) => {
                    // Result level must dominate both the reference's level and
                    // the member's level.
                    Ok((bp.clone(), ctx.lattice.join(&s, sp)))
                }
                Some(MemberType::Proc(..)) => fail(format!("t-field: {i}.{p} is a procedure")),
                None => fail(format!("t-field: Γ({i}) has no container {p}")),
            }
        }
        Expr::Op(op, args) => {
            let ts: Vec<(BaseType, Level)> = args
                .iter()
                .map(|a| least_type_expr(ctx, d, a))
                .collect::<Result<_, _>>()?;
            let lvl = ctx.lattice.join_all(ts.iter().map(|(_, s)| s.as_str()));
            // Interface instance of equality: any common supertype interface.
            if op == "=" && ts.len() == 2 {
                if let (BaseType::Iface(i1), BaseType::Iface(i2)) = (&ts[0].0, &ts[1].0) {
                    let _ = least_common_iface(ctx, i1, i2);
                    return Ok((BaseType::Bool, lvl));
                }
            }
            for (params, ret) in op_signatures(op) {
                if params.len() == ts.len()
                    && ts.iter().zip(&params).all(|((b, _), pb)| is_subtype(b, pb, ctx.sigma))
                {
                    return Ok((ret, lvl));
                }
            }
            fail(format!(
                "t-op: no instance of `{op}` at ({})",
                ts.iter().map(|(b, s)| format!("{b}@{s}")).collect::<Vec<_>>().join(", ")
            ))
        }
    }
}

/// Derivability of Σ;Γ;Δ ⊢ e : B_s (checking = least type plus coercion).
pub fn typecheck_expr(
    ctx: Ctx,
    d: &Delta,
    e: &Expr,
    want: &(BaseType, Level),
) -> Result<(), TypeErr> {
    let (b, s) = least_type_expr(ctx, d, e)?;
    if !is_subtype(&b, &want.0, ctx.sigma) {
        return fail(format!("expression {e}: base {b} is not a subtype of {}", want.0));
    }
    if !ctx.lattice.leq(&s, &want.1) {
        return fail(format!("expression {e}: level {s} ⋢ {}", want.1));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Statements (rules t-skip … t-dcall)
// ---------------------------------------------------------------------------

/// Call-argument checking against a procedure signature.
fn check_call_args(
    ctx: Ctx,
    d: &Delta,
    args: &CallArgs,
    params: &[(BaseType, Level)],
    rule: &str,
) -> Result<(), TypeErr> {
    match args {
        CallArgs::List(es) => {
            if es.len() != params.len() {
                return fail(format!(
                    "{rule}: arity mismatch ({} arguments vs {} parameters)",
                    es.len(),
                    params.len()
                ));
            }
            for (e, t) in es.iter().zip(params) {
                typecheck_expr(ctx, d, e, t)?;
            }
            Ok(())
        }
        CallArgs::ArgsVar => match d.get("args") {
            Some(VarType::ArgsSeq(ts)) => {
                if ts.len() != params.len() {
                    return fail(format!(
                        "{rule}: args sequence has {} elements vs {} parameters",
                        ts.len(),
                        params.len()
                    ));
                }
                for ((b, s), (pb, ps)) in ts.iter().zip(params) {
                    if !is_subtype(b, pb, ctx.sigma) || !ctx.lattice.leq(s, ps) {
                        return fail(format!(
                            "{rule}: args element {b}@{s} incompatible with {pb}@{ps}"
                        ));
                    }
                }
                Ok(())
            }
            _ => fail(format!("{rule}: `args` is not bound to a typed sequence in Δ")),
        },
    }
}

/// Derivability of Σ;Γ;Δ ⊢ S : cmd_s per the statement rules. Calls through
/// `id` or to a method absent from the target interface are syntactically
/// untypable (no rule covers the fallback function).
pub fn typecheck_stm(ctx: Ctx, d: &Delta, stm: &Stm, level: &Level) -> Result<(), TypeErr> {
    let lat = ctx.lattice;
    match stm {
        Stm::Skip | Stm::Throw => Ok(()),
        Stm::Seq(a, b) => {
            typecheck_stm(ctx, d, a, level)?;
            typecheck_stm(ctx, d, b, level)
        }
        Stm::If(e, t, f) => {
            // t-if: guard bool_s′ with s ⊑ s′; both branches at cmd_s′. Least s′
            // is the join of the guard's least level with s.
            let (b, gs) = least_type_expr(ctx, d, e)?;
            if b != BaseType::Bool {
                return fail(format!("t-if: guard {e} has non-boolean type {b}"));
            }
            let s2 = lat.join(level, &gs);
            typecheck_stm(ctx, d, t, &s2)?;
            typecheck_stm(ctx, d, f, &s2)
        }
        Stm::While(e, body) => {
            let (b, gs) = least_type_expr(ctx, d, e)?;
            if b != BaseType::Bool {
                return fail(format!("t-while: guard {e} has non-boolean type {b}"));
            }
            let s2 = lat.join(level, &gs);
            typecheck_stm(ctx, d, body, &s2)
        }
        Stm::DeclVar { base, level: sx, name, init, body } => {
            typecheck_expr(ctx, d, init, &(base.clone(), sx.clone()))?;
            let d2 = d.bind(name, VarType::Container(base.clone(), sx.clone()));
            typecheck_stm(ctx, &d2, body, level)
        }
        Stm::AssignVar(x, e) => {
            let Some((b, sx)) = d.container(x) else {
                return fail(format!("t-assv: {x} ∉ dom(Δ)"));
            };
            if !lat.leq(level, sx) {
                return fail(format!("t-assv: cmd level {level} ⋢ {sx} (level of {x})"));
            }
            typecheck_expr(ctx, d, e, &(b.clone(), sx.clone()))
        }
        Stm::AssignField(p, e) => {
            let Some((bt, s1)) = d.container("this") else {
                return fail("t-assf: this ∉ dom(Δ)");
            };
            let BaseType::Iface(i) = bt else {
                return fail(format!("t-assf: this has non-interface type {bt}"));
            };
            let Some(MemberType::Container(bp, sp)) = ctx.gamma.member(i, p) else {
                return fail(format!("t-assf: Γ({i}) has no container {p}"));
            };
            if !lat.leq(s1, sp) {
                return fail(format!("t-assf: this-level {s1} ⋢ {sp} (level of {p})"));
            }
            if !lat.leq(level, sp) {
                return fail(format!("t-assf: cmd level {level} ⋢ {sp} (level of {p})"));
            }
            typecheck_expr(ctx, d, e, &(bp.clone(), sp.clone()))
        }
        Stm::Call { target, method, args, amount } => {
            let f = match method {
                MethodRef::Name(f) => f,
                MethodRef::Id => {
                    return fail(
                        "untypable: fallback/id — semantic certificate required (call through `id`)",
                    )
                }
            };
            let (tb, _) = least_type_expr(ctx, d, target)?;
            let BaseType::Iface(iy) = &tb else {
                return fail(format!("t-call: target {target} has non-interface type {tb}"));
            };
            let Some(member) = ctx.gamma.member(iy, f) else {
                return fail(format!(
                    "untypable: fallback/id — semantic certificate required (Γ({iy}) has no method {f})"
                ));
            };
            let MemberType::Proc(params, sp) = member else {
                return fail(format!("t-call: {iy}.{f} is not a procedure"));
            };
            // The call's level s′ is fixed by the signature's cmd level.
            typecheck_expr(ctx, d, target, &(tb.clone(), sp.clone()))?;
            typecheck_expr(ctx, d, amount, &(BaseType::Int, sp.clone()))?;
            check_call_args(ctx, d, args, params, "t-call")?;
            let Some((ctb, s1)) = d.container("this") else {
                return fail("t-call: this ∉ dom(Δ)");
            };
            let BaseType::Iface(ix) = ctb else {
                return fail(format!("t-call: this has non-interface type {ctb}"));
            };
            if !lat.leq(s1, sp) {
                return fail(format!("t-call: this-level {s1} ⋢ {sp}"));
            }
            if !lat.leq(level, sp) {
                return fail(format!("t-call: cmd level {level} ⋢ {sp}"));
            }
            // s′ ⊑ s3, s4: both caller and callee balance levels.
            for (who, i) in [("caller", ix.as_str()), ("callee", iy.as_str())] {
                let Some(MemberType::Container(_, sb)) = ctx.gamma.member(i, "balance") else {
                    return fail(format!("t-call: Γ({i}) has no balance"));
                };
                if !lat.leq(sp, sb) {
                    return fail(format!("t-call: level {sp} ⋢ {sb} ({who} balance level)"));
                }
            }
            Ok(())
        }
        Stm::DCall { target, method, args } => {
            let f = match method {
                MethodRef::Name(f) => f,
                MethodRef::Id => {
                    return fail(
                        "untypable: fallback/id — semantic certificate required (dcall through `id`)",
                    )
                }
            };
            let (tb, _) = least_type_expr(ctx, d, target)?;
            let BaseType::Iface(iy) = &tb else {
                return fail(format!("t-dcall: target {target} has non-interface type {tb}"));
            };
            let Some(member) = ctx.gamma.member(iy, f) else {
                return fail(format!(
                    "untypable: fallback/id — semantic certificate required (Γ({iy}) has no method {f})"
                ));
            };
            let MemberType::Proc(params, sp) = member else {
                return fail(format!("t-dcall: {iy}.{f} is not a procedure"));
            };
            typecheck_expr(ctx, d, target, &(tb.clone(), sp.clone()))?;
            check_call_args(ctx, d, args, params, "t-dcall")?;
            let Some((ctb, s1)) = d.container("this") else {
                return fail("t-dcall: this ∉ dom(Δ)");
            };
            let BaseType::Iface(ix) = ctb else {
                return fail(format!("t-dcall: this has non-interface type {ctb}"));
            };
            // Σ ⊢ I^X <: I^Y — the caller runs the callee's code in its own
            // context, so it must be a subtype.
            if !is_subtype(&BaseType::Iface(ix.clone()), &BaseType::Iface(iy.clone()), ctx.sigma) {
                return fail(format!("t-dcall: Σ ⊬ {ix} <: {iy}"));
            }
            // Field-type agreement on every container member of the callee.
            if let Some(body) = ctx.gamma.iface(iy) {
                for (q, t) in body {
                    if matches!(t, MemberType::Container(..))
                        && ctx.gamma.member(ix, q) != Some(t)
                    {
                        return fail(format!(
                            "t-dcall: Γ({iy})({q}) ≠ Γ({ix})({q}) (field agreement)"
                        ));
                    }
                }
            }
            if !lat.leq(s1, sp) {
                return fail(format!("t-dcall: this-level {s1} ⋢ {sp}"));
            }
            if !lat.leq(level, sp) {
                return fail(format!("t-dcall: cmd level {level} ⋢ {sp}"));
            }
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Environment typing and consistency
// ---------------------------------------------------------------------------

/// The Δ under which a method body types: this at the contract's declared
/// type, value at the balance level, sender at ⌈Top, s⊤⌉, plus parameters.
pub fn method_delta(
    ctx: Ctx,
    iface: &str,
    contract_level: &Level,
    param_names: &[String],
    param_types: &[(BaseType, Level)],
) -> Result<Delta, TypeErr> {
    let Some(MemberType::Container(_, sb)) = ctx.gamma.member(iface, "balance") else {
        return fail(format!("t-env-m: Γ({iface}) has no balance"));
    };
    let mut d = Delta::new()
        .bind("this", VarType::Container(BaseType::Iface(iface.to_string()), contract_level.clone()))
        .bind("value", VarType::Container(BaseType::Int, sb.clone()))
        .bind(
            "sender",
            VarType::Container(BaseType::Iface(TOP_IFACE.to_string()), ctx.lattice.top().clone()),
        );
    for (x, t) in param_names.iter().zip(param_types) {
        d = d.bind(x, VarType::Container(t.0.clone(), t.1.clone()));
    }
    Ok(d)
}

/// Well-typedness of the method table (rule t-env-m): every non-fallback body
/// types at its signature's cmd level under the constructed Δ. Fallback bodies
/// have no syntactic rule and are skipped here; their safety is the semantic
/// layer's concern.
pub fn typecheck_table(ctx: Ctx, table: &MethodTable) -> Result<(), TypeErr> {
    for (x, menv) in table {
        let Some((iface, s1)) = ctx.gamma.addr(x) else {
            return fail(format!("t-env-m: address {x} ∉ dom(Γ)"));
        };
        for (f, (params, body)) in menv {
            if f == "fallback" {
                continue;
            }
            let Some(member) = ctx.gamma.member(iface, f) else {
                return fail(format!("t-env-m: {x} implements {f} but Γ({iface}) lacks it"));
            };
            let MemberType::Proc(ptypes, sm) = member else {
                return fail(format!("t-env-m: {iface}.{f} is not a procedure"));
            };
            if ptypes.len() != params.len() {
                return fail(format!("t-env-m: {x}.{f} arity mismatch with Γ({iface})({f})"));
            }
            if !ctx.lattice.leq(sm, s1) {
                return fail(format!("t-env-m: {iface}.{f} level {sm} ⋢ {s1} (contract level)"));
            }
            let d = method_delta(ctx, iface, s1, params, ptypes)?;
            typecheck_stm(ctx, &d, body, sm)
                .map_err(|e| TypeErr(format!("t-env-m: body of {x}.{f}: {e}")))?;
        }
    }
    Ok(())
}

/// Well-typedness of a stored value against a container type (⊢ v : B_s).
fn value_has_type(ctx: Ctx, v: &Value, b: &BaseType, s: &Level) -> bool {
    match type_of(v, ctx.gamma, ctx.lattice) {
        Some((bv, sv)) => is_subtype(&bv, b, ctx.sigma) && ctx.lattice.leq(&sv, s),
        None => false,
    }
}

/// Well-typedness of the state (rule t-envf): every stored field value types
/// at its declared container type.
pub fn typecheck_state(ctx: Ctx, state: &State) -> Result<(), TypeErr> {
    for (x, fields) in state {
        let Some((iface, _)) = ctx.gamma.addr(x) else {
            return fail(format!("t-envf: address {x} ∉ dom(Γ)"));
        };
        for (p, v) in fields {
            let Some(MemberType::Container(b, s)) = ctx.gamma.member(iface, p) else {
                return fail(format!("t-envf: Γ({iface}) has no container {p}"));
            };
            if !value_has_type(ctx, v, b, s) {
                return fail(format!("t-envf: {x}.{p} = {v} does not have type {b}@{s}"));
            }
        }
    }
    Ok(())
}

/// Well-typedness of a variable environment against Δ. Mode t-envv_u: plain
/// values checked against Δ; annotated entries (mode t-envv_t) are checked
/// against their own annotation, which must agree with Δ when Δ binds them.
pub fn typecheck_varenv(ctx: Ctx, d: &Delta, vars: &VarEnv) -> Result<(), TypeErr> {
    for (x, v, ann) in &vars.entries {
        let vt = match (ann, d.get(x)) {
            (Some((b, s)), _) => VarType::Container(b.clone(), s.clone()),
            (None, Some(t)) => t.clone(),
            (None, None) => return fail(format!("t-envv: {x} ∉ dom(Δ) and unannotated")),
        };
        match (&vt, v) {
            (VarType::Container(b, s), v) => {
                if !value_has_type(ctx, v, b, s) {
                    return fail(format!("t-envv: {x} = {v} does not have type {b}@{s}"));
                }
            }
            (VarType::ArgsSeq(ts), Value::Seq(vs)) => {
                if ts.len() != vs.len() {
                    return fail(format!("t-envv: args length mismatch for {x}"));
                }
                for ((b, s), v) in ts.iter().zip(vs) {
                    if !value_has_type(ctx, v, b, s) {
                        return fail(format!("t-envv: args element {v} not of type {b}@{s}"));
                    }
                }
            }
            (VarType::ArgsSeq(_), v) => {
                return fail(format!("t-envv: {x} typed as sequence but holds {v}"))
            }
        }
    }
    Ok(())
}

/// Environment well-typedness: table, state, and variables together.
pub fn typecheck_envs(
    ctx: Ctx,
    table: &MethodTable,
    state: &State,
    vars: &VarEnv,
    d: &Delta,
) -> Result<(), TypeErr> {
    typecheck_table(ctx, table)?;
    typecheck_state(ctx, state)?;
    typecheck_varenv(ctx, d, vars)
}

/// Extract a Δ from a (fully or partially) annotated environment snapshot:
/// annotated bindings contribute their annotation, plain bindings their
/// least value type, and `args` sequences their element-wise least types.
pub fn extract(ctx: Ctx, vars: &VarEnv) -> Result<Delta, TypeErr> {
    let mut d = Delta::new();
    for (x, v, ann) in &vars.entries {
        let t = match ann {
            Some((b, s)) => VarType::Container(b.clone(), s.clone()),
            None => match v {
                Value::Seq(vs) => {
                    let ts = vs
                        .iter()
                        .map(|v| {
                            type_of(v, ctx.gamma, ctx.lattice)
                                .ok_or(TypeErr(format!("extract: TypeOf undefined on {v}")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    VarType::ArgsSeq(ts)
                }
                v => match type_of(v, ctx.gamma, ctx.lattice) {
                    Some((b, s)) => VarType::Container(b, s),
                    None => return fail(format!("extract: TypeOf undefined on {v}")),
                },
            },
        };
        d = d.bind(x, t);
    }
    Ok(d)
}

/// Derivability of Σ;Γ;Δ ⊢ Q : cmd_s per rules t-bot / t-stm / t-del / t-ret.
pub fn typecheck_stack(ctx: Ctx, d: &Delta, q: &Stack, level: &Level) -> Result<(), TypeErr> {
    let mut d = d.clone();
    for sym in &q.syms {
        match sym {
            StackSym::Stm(s) => typecheck_stm(ctx, &d, s, level)?,
            StackSym::Del(x) => {
                if d.get(x).is_none() {
                    return fail(format!("t-del: {x} ∉ dom(Δ)"));
                }
                d = d.unbind(x);
            }
            StackSym::Ret(env, snap) => {
                // Typed entries must be self-consistent (t-envv_t)…
                for (x, v, ann) in &env.entries {
                    if let Some((b, s)) = ann {
                        if !value_has_type(ctx, v, b, s) {
                            return fail(format!("t-ret: snapshot {x} = {v} not of type {b}@{s}"));
                        }
                    }
                }
                // …and the continuation types under the extracted Δ (or the
                // recorded snapshot Δ for typed-semantics return symbols).
                d = match snap {
                    Some(d2) => {
                        typecheck_varenv(ctx, d2, env)?;
                        d2.clone()
                    }
                    None => extract(ctx, env)?,
                };
            }
            StackSym::Lvl(s) => {
                return fail(format!("t-stack: level symbol {s} has no stack typing rule"))
            }
        }
    }
    Ok(())
}

/// Consistency (rules c-envf / c-envm / c-envv / c-envt / c-envs / c-envtsv):
/// declared members implemented, addresses resolve, domains agree.
pub fn check_consistency(
    gamma: &Gamma,
    table: &MethodTable,
    state: &State,
    vars: &VarEnv,
) -> Result<(), TypeErr> {
    // c-envtsv: the table and the state describe the same contracts.
    let tdom: BTreeSet<&String> = table.keys().collect();
    let sdom: BTreeSet<&String> = state.keys().collect();
    if tdom != sdom {
        return fail("c-envtsv: dom(env_T) ≠ dom(env_S)");
    }
    let addr_ok = |v: &Value| match v {
        Value::Addr(a) => state.contains_key(a),
        Value::Seq(vs) => vs.iter().all(|v| !matches!(v, Value::Addr(a) if !state.contains_key(a))),
        _ => true,
    };
    for (x, menv) in table {
        let Some((iface, _)) = gamma.addr(x) else {
            return fail(format!("c-envm: {x} ∉ dom(Γ)"));
        };
        let body = gamma
            .iface(iface)
            .ok_or(TypeErr(format!("c-envm: unknown interface {iface}")))?;
        // c-envm: every declared procedure implemented with matching arity…
        for (f, t) in body {
            if let MemberType::Proc(params, _) = t {
                match menv.get(f) {
                    Some((impl_params, _)) if impl_params.len() == params.len() => {}
                    Some(_) => {
                        return fail(format!("c-envm: {x}.{f} arity differs from Γ({iface})({f})"))
                    }
                    None => return fail(format!("c-envm: {x} does not implement {iface}.{f}")),
                }
            }
        }
        // …every implementation declared (fallback aside), fallback present.
        for f in menv.keys() {
            if f != "fallback" && !matches!(body.get(f), Some(MemberType::Proc(..))) {
                return fail(format!("c-envm: {x}.{f} has no signature in Γ({iface})"));
            }
        }
        if !menv.contains_key("fallback") {
            return fail(format!("c-envm: {x} has no fallback"));
        }
        // c-envt: free addresses of every body resolve in the state.
        for (f, (_, b)) in menv {
            for a in free_addrs_stm(b) {
                if !state.contains_key(&a) {
                    return fail(format!("c-envt: body of {x}.{f} mentions unknown address {a}"));
                }
            }
        }
        // c-envf: every declared container stored, every stored field declared,
        // address values resolve.
        let fields = state.get(x).expect("domain agreement checked above");
        for (p, t) in body {
            if matches!(t, MemberType::Container(..)) && !fields.contains_key(p) {
                return fail(format!("c-envf: {x} lacks declared field {p}"));
            }
        }
        for (p, v) in fields {
            if !matches!(body.get(p), Some(MemberType::Container(..))) {
                return fail(format!("c-envf: {x}.{p} is not declared in Γ({iface})"));
            }
            if !addr_ok(v) {
                return fail(format!("c-envf: {x}.{p} = {v} points outside dom(env_S)"));
            }
        }
    }
    // c-envv: address-valued variables resolve.
    for (x, v, _) in &vars.entries {
        if !addr_ok(v) {
            return fail(format!("c-envv: {x} = {v} points outside dom(env_S)"));
        }
    }
    Ok(())
}

/// Well-formedness of stacks (rules wf-bot / wf-stm / wf-del / wf-ret /
/// wf-sec): free names resolve, return snapshots are well-typed and
/// consistent, and level symbols descend under the given level.
pub fn check_stack_wellformed(
    ctx: Ctx,
    table: &MethodTable,
    state: &State,
    vars: &VarEnv,
    level: &Level,
    q: &Stack,
) -> Result<(), TypeErr> {
    let mut vars = vars.clone();
    let mut level = level.clone();
    for sym in &q.syms {
        match sym {
            StackSym::Stm(s) => {
                for a in free_addrs_stm(s) {
                    if !state.contains_key(&a) {
                        return fail(format!("wf-stm: FA: unknown address {a} in {s}"));
                    }
                }
                for x in free_vars_stm(s) {
                    if !vars.contains(&x) {
                        return fail(format!("wf-stm: FV: {x} ∉ dom(env_V) in {s}"));
                    }
                }
            }
            StackSym::Del(x) => {
                if !vars.remove(x) {
                    return fail(format!("wf-del: {x} ∉ dom(env_V)"));
                }
            }
            StackSym::Ret(env, snap) => {
                let d = match snap {
                    Some(d) => d.clone(),
                    None => extract(ctx, env)?,
                };
                typecheck_varenv(ctx, &d, env)
                    .map_err(|e| TypeErr(format!("wf-ret: {e}")))?;
                check_consistency(ctx.gamma, table, state, env)
                    .map_err(|e| TypeErr(format!("wf-ret: {e}")))?;
                vars = env.clone();
            }
            StackSym::Lvl(s) => {
                if !ctx.lattice.leq(s, &level) {
                    return fail(format!("wf-sec: {level} ⋣ {s} (levels must descend)"));
                }
                level = s.clone();
            }
        }
    }
    Ok(())
}

/// firstS: the first level symbol top-down, or the lattice bottom.
pub fn first_level(q: &Stack, lat: &Lattice) -> Level {
    for sym in &q.syms {
        if let StackSym::Lvl(s) = sym {
            return s.clone();
        }
    }
    lat.bottom().clone()
}

/// The s-parameterised equivalence relation on (state, vars) pairs: every
/// container of level ⊑ the given level must hold equal values. Variable
/// levels come from annotations, then from the optional Δ; variables with
/// no level information are treated as bottom-level (always compared).
pub fn states_equal_at(
    ctx: Ctx,
    sv1: (&State, &VarEnv),
    sv2: (&State, &VarEnv),
    d: Option<&Delta>,
    level: &Level,
) -> Result<(), String> {
    let (state1, vars1) = sv1;
    let (state2, vars2) = sv2;
    if state1.keys().ne(state2.keys()) {
        return Err("eq-env_S: state domains differ".into());
    }
    for (x, f1) in state1 {
        let f2 = &state2[x];
        if f1.keys().ne(f2.keys()) {
            return Err(format!("eq-env_F: field domains of {x} differ"));
        }
        let Some((iface, _)) = ctx.gamma.addr(x) else {
            return Err(format!("eq-env_F: {x} ∉ dom(Γ)"));
        };
        for (p, v1) in f1 {
            let sp = match ctx.gamma.member(iface, p) {
                Some(MemberType::Container(_, s)) => s.clone(),
                _ => ctx.lattice.bottom().clone(),
            };
            if ctx.lattice.leq(&sp, level) && v1 != &f2[p] {
                return Err(format!("eq-env_F: {x}.{p} differs at observable level {sp}"));
            }
        }
    }
    let names1: BTreeSet<&str> = vars1.names().collect();
    let names2: BTreeSet<&str> = vars2.names().collect();
    if names1 != names2 {
        return Err("eq-env_V: variable domains differ".into());
    }
    for (x, v1, ann) in &vars1.entries {
        let sx = match ann {
            Some((_, s)) => Some(s.clone()),
            None => match d.and_then(|d| d.get(x)) {
                Some(VarType::Container(_, s)) => Some(s.clone()),
                Some(VarType::ArgsSeq(_)) | None => None,
            },
        };
        let observable = match &sx {
            Some(s) => ctx.lattice.leq(s, level),
            None => true,
        };
        if observable && vars2.get(x) != Some(v1) {
            return Err(format!("eq-env_V: {x} differs at an observable level"));
        }
    }
    Ok(())
}

/// Whole-program syntactic acceptance: Γ/Σ checks re-run, then environment
/// well-typedness and consistency of the elaborated declarations.
pub fn typecheck_program(p: &Program) -> Result<(), TypeErr> {
    use crate::types::{check_gamma_wellformed, check_sigma_consistency};
    let ctx = Ctx::of(p);
    check_gamma_wellformed(&p.gamma, &p.lattice).map_err(|e| TypeErr(e.to_string()))?;
    check_sigma_consistency(&p.sigma, &p.gamma, &p.lattice).map_err(|e| TypeErr(e.to_string()))?;
    let (table, state) =
        crate::runtime::elaborate_declarations(p).map_err(|e| TypeErr(e.to_string()))?;
    typecheck_envs(ctx, &table, &state, &VarEnv::new(), &Delta::new())?;
    check_consistency(&p.gamma, &table, &state, &VarEnv::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_expr, parse_program, parse_stm};
    use crate::runtime::elaborate_declarations;

    const LAT: &str = "lattice { levels: L, H; order: L <= H; top: H; bottom: L; }";

    fn demo() -> Program {
        let tsi = "
interface I {
  owner : Top@L;
  secret : int@H;
  f : (int@L) -> cmd@L;
  g : () -> cmd@L;
  h : () -> cmd@L;
}";
        let src = "
contract X : I@L {
  field balance := 10;
  field owner := Y;
  field secret := 0;
  func f(a) { this.owner := this.owner }
  func g() { call Y.f(1)$2 }
  func h() { this.secret := 1 }
  func fallback() { skip }
}
contract Y : I@L {
  field balance := 5;
  field owner := X;
  field secret := 7;
  func f(a) { skip }
  func g() { skip }
  func h() { skip }
  func fallback() { skip }
}";
        parse_program(src, tsi, LAT).unwrap()
    }

    fn base_delta(p: &Program) -> Delta {
        method_delta(Ctx::of(p), "I", &"L".to_string(), &[], &[]).unwrap()
    }

    #[test]
    fn expr_least_types() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let d = base_delta(&p);
        // t-val: 5 at least level bottom.
        assert_eq!(
            least_type_expr(ctx, &d, &Expr::int(5)).unwrap(),
            (BaseType::Int, "L".to_string())
        );
        // t-var with H binding does not check at L.
        let dh = d.bind("x", VarType::Container(BaseType::Int, "H".into()));
        assert!(typecheck_expr(ctx, &dh, &Expr::var("x"), &(BaseType::Int, "L".into())).is_err());
        assert!(typecheck_expr(ctx, &dh, &Expr::var("x"), &(BaseType::Int, "H".into())).is_ok());
        // t-field coercion: this.owner : Top@L checks at Top@H.
        let e = parse_expr("this.owner", &p).unwrap();
        assert!(typecheck_expr(ctx, &d, &e, &(BaseType::Iface("Top".into()), "H".into())).is_ok());
        // Reading an H field raises the least level.
        let e = parse_expr("this.secret", &p).unwrap();
        assert_eq!(least_type_expr(ctx, &d, &e).unwrap().1, "H".to_string());
    }

    #[test]
    fn stm_rules() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let d = base_delta(&p);
        let ck = |src: &str, lvl: &str| typecheck_stm(ctx, &d, &parse_stm(src, &p).unwrap(), &lvl.to_string());
        // t-skip at every level.
        assert!(ck("skip", "L").is_ok());
        assert!(ck("skip", "H").is_ok());
        // t-assf: H-field written from L context is fine (upward flow).
        assert!(ck("this.secret := 1", "L").is_ok());
        // Writing the L field under an H guard (implicit flow) is rejected.
        assert!(ck("if this.secret = 0 then this.owner := X else skip", "L").is_err());
        // Same guard writing the H field is fine.
        assert!(ck("if this.secret = 0 then this.secret := 1 else skip", "L").is_ok());
        // t-call at L on an L-signature method.
        assert!(ck("call Y.f(1)$2", "L").is_ok());
        // t-call: cmd level H ⋢ signature level L.
        assert!(ck("call Y.f(1)$2", "H").is_err());
        // id-dispatch is syntactically untypable.
        let err = ck("call Y.id()$0", "L").unwrap_err();
        assert!(err.0.contains("fallback/id"), "{err}");
        // absent method is syntactically untypable.
        let err = ck("call Y.nope()$0", "L").unwrap_err();
        assert!(err.0.contains("fallback/id"), "{err}");
    }

    #[test]
    fn dcall_requires_subtype_and_field_agreement() {
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
        let d = method_delta(ctx, "IP", &"L".to_string(), &[], &[]).unwrap();
        let s = parse_stm("dcall X.f()", &p).unwrap();
        let err = typecheck_stm(ctx, &d, &s, &"L".to_string()).unwrap_err();
        assert!(err.0.contains("<:"), "{err}");
    }

    #[test]
    fn table_and_program_accept() {
        let p = demo();
        assert!(typecheck_program(&p).is_ok());
    }

    #[test]
    fn consistency_catches_dangling_address() {
        let p = demo();
        let (table, mut state) = elaborate_declarations(&p).unwrap();
        state.get_mut("X").unwrap().insert("owner".into(), Value::Addr("Z".into()));
        let err = check_consistency(&p.gamma, &table, &state, &VarEnv::new()).unwrap_err();
        assert!(err.0.contains("c-env"), "{err}");
    }

    #[test]
    fn stack_typing_and_del() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let d = base_delta(&p).bind("x", VarType::Container(BaseType::Int, "L".into()));
        // del(x); ⊥ under Δ,x:T → ok; x gone afterwards.
        let q = Stack::from_syms(vec![
            StackSym::Del("x".into()),
            StackSym::Stm(parse_stm("skip", &p).unwrap()),
        ]);
        assert!(typecheck_stack(ctx, &d, &q, &"L".to_string()).is_ok());
        // Using x after del(x) fails.
        let q = Stack::from_syms(vec![
            StackSym::Del("x".into()),
            StackSym::Stm(parse_stm("x := 1", &p).unwrap()),
        ]);
        assert!(typecheck_stack(ctx, &d, &q, &"L".to_string()).is_err());
    }

    #[test]
    fn wellformedness_levels_descend() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let (table, state) = elaborate_declarations(&p).unwrap();
        let v = VarEnv::new();
        let wf = |syms: Vec<StackSym>, lvl: &str| {
            check_stack_wellformed(ctx, &table, &state, &v, &lvl.to_string(), &Stack::from_syms(syms))
        };
        assert!(wf(vec![], "L").is_ok()); // wf-bot
        assert!(wf(vec![StackSym::Lvl("H".into()), StackSym::Lvl("L".into())], "H").is_ok());
        assert!(wf(vec![StackSym::Lvl("L".into()), StackSym::Lvl("H".into())], "H").is_err());
        // wf-stm: free variable not in env_V.
        let s = parse_stm("x := 1", &p).unwrap();
        assert!(wf(vec![StackSym::Stm(s)], "L").is_err());
    }

    #[test]
    fn first_level_cases() {
        let p = demo();
        assert_eq!(first_level(&Stack::bottom(), &p.lattice), "L");
        let q = Stack::from_syms(vec![
            StackSym::Del("x".into()),
            StackSym::Lvl("L".into()),
            StackSym::Lvl("H".into()),
        ]);
        assert_eq!(first_level(&q, &p.lattice), "L");
    }

    #[test]
    fn state_equivalence() {
        let p = demo();
        let ctx = Ctx::of(&p);
        let (_, state) = elaborate_declarations(&p).unwrap();
        let v = VarEnv::new();
        // Reflexive at every level.
        assert!(states_equal_at(ctx, (&state, &v), (&state, &v), None, &"H".into()).is_ok());
        // Differ only in the H field `secret`: equal at L, unequal at H.
        let mut s2 = state.clone();
        s2.get_mut("X").unwrap().insert("secret".into(), Value::Int(99));
        assert!(states_equal_at(ctx, (&state, &v), (&s2, &v), None, &"L".into()).is_ok());
        assert!(states_equal_at(ctx, (&state, &v), (&s2, &v), None, &"H".into()).is_err());
    }

    #[test]
    fn monotone_in_contravariant_direction() {
        // Acceptance at cmd_H implies acceptance at cmd_L ⊑ H for raise-style
        // statements (if/while fold the level into the join).
        let p = demo();
        let ctx = Ctx::of(&p);
        let d = base_delta(&p);
        let s = parse_stm("if this.secret = 0 then this.secret := 1 else skip", &p).unwrap();
        assert!(typecheck_stm(ctx, &d, &s, &"H".to_string()).is_ok());
        assert!(typecheck_stm(ctx, &d, &s, &"L".to_string()).is_ok());
    }
}
