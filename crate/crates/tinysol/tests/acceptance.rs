//! Acceptance suite: one test per top-level acceptance criterion, each
//! printing a single `criterion N (<name>): PASS/FAIL` line with its runtime
//! and enforcing the criterion's time limit.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinysol::ci::{check_call_integrity, theorem_ci_check, TheoremOutcome, TrustPartition};
use tinysol::corpus;
use tinysol::ledger::{
    client_typecheck_against_ledger, ledger_append, ledger_init, ledger_verify,
};
use tinysol::parser::parse_stm;
use tinysol::runtime::{elaborate_declarations, initial_configuration, run_untyped, RunStatus};
use tinysol::semtyping::{
    build_interpretation, certify_full, certify_upto, collect_obligation_roots,
    lifted_successors, materialize_union, verify_certificate, verify_typing_interpretation,
    verify_upto_union, Budget, BuildResult, CertStore, Global, Lifted, StackTriplet, TripletSet,
};
use tinysol::statics::{method_delta, typecheck_table, Ctx};
use tinysol::syntax::{Program, Value};
use tinysol::theorems;
use tinysol::typed::{run_typed, TypedConfiguration};
use tinysol::types::{BaseType, Delta, MemberType, VarType};

fn criterion(n: u32, name: &str, limit: Duration, body: impl FnOnce() -> Result<(), String>) {
    let start = Instant::now();
    let result = body();
    let elapsed = start.elapsed();
    let verdict = if result.is_ok() && elapsed <= limit { "PASS" } else { "FAIL" };
    println!("criterion {n} ({name}): {verdict} ({elapsed:.2?}, limit {limit:?})");
    if let Err(e) = result {
        panic!("criterion {n} ({name}) failed: {e}");
    }
    assert!(elapsed <= limit, "criterion {n} ({name}) exceeded time limit: {elapsed:.2?}");
}

/// Δ = { this : ⌈I^addr, s_addr⌉ }: external client code owned by `addr`.
fn client_delta(p: &Program, addr: &str) -> Delta {
    let (iface, lvl) = p.gamma.addr(addr).expect("declared address");
    Delta::default()
        .bind("this", VarType::Container(BaseType::Iface(iface.to_string()), lvl.clone()))
}

/// Criterion 1: Ownership takeover through a delegate-call fallback: observable under
/// the untyped semantics, typed-stuck at r-dcall under the typed semantics,
/// and untypable by bounded interpretation construction.
#[test]
fn criterion_1_ownership_takeover() {
    criterion(1, "ownership takeover", Duration::from_secs(1), || {
        let e = corpus::entry("pmw").unwrap();
        let p = e.program();
        let tx = e.transaction(&p);
        let c = initial_configuration(&p, &tx).map_err(|e| e.to_string())?;

        let (cfg, _, status) = run_untyped(&c, 10_000);
        if status != RunStatus::Terminated {
            return Err(format!("untyped run did not terminate: {status:?}"));
        }
        if cfg.state["Proxy"]["owner"] != Value::Addr("A".into()) {
            return Err(format!(
                "expected takeover to set Proxy.owner = A, found {:?}",
                cfg.state["Proxy"]["owner"]
            ));
        }

        let tc = TypedConfiguration {
            delta: Delta::default(),
            level: p.lattice.bottom().clone(),
            config: c,
        };
        let (_, _, tstatus) = run_typed(Ctx::of(&p), &tc, 10_000);
        match &tstatus {
            RunStatus::Stuck(msg) if msg.contains("r-dcall") => {}
            other => return Err(format!("typed run should stick at r-dcall, got {other:?}")),
        }

        let (table, _) = elaborate_declarations(&p).map_err(|e| e.to_string())?;
        let g = Global { ctx: Ctx::of(&p), table: &table };
        let d = client_delta(&p, "A");
        let stm = parse_stm("call Proxy.init(A)$0", &p).map_err(|e| e.to_string())?;
        let roots =
            collect_obligation_roots(g, &d, &stm, p.lattice.bottom()).map_err(|e| e.to_string())?;
        if roots.is_empty() {
            return Err("call to undeclared init produced no fallback obligation".into());
        }
        for root in &roots {
            match build_interpretation(g, root, Budget::default()) {
                BuildResult::Untypable { path, .. } if path.len() <= 3 => {}
                BuildResult::Untypable { path, .. } => {
                    return Err(format!("untypable witness too long: {}", path.len()))
                }
                other => return Err(format!("expected Untypable, got {other:?}")),
            }
        }
        Ok(())
    });
}

/// Criterion 2: A safe forwarding fallback gets a full typing interpretation, the
/// verifier accepts it, and a ledger certificate lets client code call an
/// undeclared method.
#[test]
fn criterion_2_safe_fallback_certification() {
    criterion(2, "safe-fallback certification", Duration::from_secs(5), || {
        let e = corpus::entry("proxy").unwrap();
        let p = e.program();
        let (table, _) = elaborate_declarations(&p).map_err(|e| e.to_string())?;
        let g = Global { ctx: Ctx::of(&p), table: &table };
        let d = client_delta(&p, "A");
        let stm = parse_stm("call Proxy.ping()$0", &p).map_err(|e| e.to_string())?;
        let roots =
            collect_obligation_roots(g, &d, &stm, p.lattice.bottom()).map_err(|e| e.to_string())?;
        if roots.len() != 1 {
            return Err(format!("expected one obligation root, found {}", roots.len()));
        }
        let set = match build_interpretation(g, &roots[0], Budget::default()) {
            BuildResult::Full(set) => set,
            other => return Err(format!("expected a full interpretation, got {other:?}")),
        };
        if set.len() > 200 {
            return Err(format!("interpretation too large: {} triplets", set.len()));
        }
        verify_typing_interpretation(g, &set)
            .map_err(|e| format!("verifier rejected the interpretation: {e}"))?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = dir.path().join("ledger.jsonl");
        ledger_init(&store)?;
        let cert = certify_full(&p, g, &roots[0], Budget::default())?;
        let lat = corpus::entry("proxy").unwrap().lattice;
        ledger_append(&store, e.contracts, e.interfaces, lat, Some(cert))?;
        client_typecheck_against_ledger(&store, &p, &d, &stm, p.lattice.bottom())
            .map_err(|e| format!("client call to undeclared method rejected: {e}"))
    });
}

/// Criterion 3: Up-to-union compression: a 12-triplet core for the h = 3 dispatcher,
/// with materialized-union verification and delete-one rejection.
#[test]
fn criterion_3_upto_union() {
    criterion(3, "up-to-union compression", Duration::from_secs(5), || {
        let e = corpus::entry("upto").unwrap();
        let p = e.program();
        let (table, _) = elaborate_declarations(&p).map_err(|e| e.to_string())?;
        let g = Global { ctx: Ctx::of(&p), table: &table };
        let d = client_delta(&p, "A");
        let stm = parse_stm("call D.nope()$0", &p).map_err(|e| e.to_string())?;
        let roots =
            collect_obligation_roots(g, &d, &stm, p.lattice.bottom()).map_err(|e| e.to_string())?;
        if roots.len() != 1 {
            return Err(format!("expected one obligation root, found {}", roots.len()));
        }
        let root = roots[0].canonical();

        // Core = root, its two branch successors, and their immediate frames;
        // the frames' tails are discharged up-to union.
        let mut core = TripletSet::new();
        core.insert(root.clone());
        let mut obligations: Vec<StackTriplet> = Vec::new();
        let Lifted::Next(branches) = lifted_successors(g, &root) else {
            return Err("root has no lifted successors".into());
        };
        for b in &branches {
            core.insert(b.clone());
            let Lifted::Next(frames) = lifted_successors(g, b) else {
                return Err("branch has no lifted successors".into());
            };
            for f in &frames {
                core.insert(f.clone());
                obligations.push(f.clone());
            }
        }
        if core.len() != 12 {
            return Err(format!("core has {} triplets, expected exactly 12", core.len()));
        }
        verify_upto_union(g, &core, &obligations)
            .map_err(|e| format!("up-to-union verification rejected the core: {e}"))?;

        let full = materialize_union(g, &core, &obligations)
            .map_err(|e| format!("materializing the union failed: {e}"))?;
        verify_typing_interpretation(g, &full)
            .map_err(|e| format!("materialized union rejected: {e}"))?;

        // Deleting any single core triplet must be rejected with a
        // counterexample (certificate verification also covers deletion of
        // the root itself, which up-to-union progression alone cannot see).
        for t in core.iter() {
            let mut core2 = core.clone();
            core2.remove(t);
            let obls2: Vec<StackTriplet> =
                obligations.iter().filter(|o| *o != t).cloned().collect();
            let cert = certify_upto(&p, &root, &core2, &obls2);
            match verify_certificate(&p, g, &cert) {
                Err(msg) if !msg.is_empty() => {}
                Err(_) => return Err("rejection carried no counterexample".into()),
                Ok(()) => {
                    return Err(format!("deleting core triplet {t} went undetected"));
                }
            }
        }
        Ok(())
    });
}

/// Criterion 4: Randomized runtime-theorem suites, ≥ 200 instances each.
#[test]
fn criterion_4_theorem_suites() {
    criterion(4, "runtime theorem suites", Duration::from_secs(60), || {
        let pres = theorems::preservation_suite();
        let ni = theorems::noninterference_suite();
        let (ce, cs) = theorems::coercion_suite();
        let compat = theorems::semantic_compatibility_suite();
        let safety = theorems::expression_safety_suite();
        for (name, n) in [
            ("preservation", pres),
            ("non-interference", ni),
            ("expression coercion", ce),
            ("stack coercion", cs),
            ("semantic compatibility", compat),
            ("expression safety", safety),
        ] {
            if n < 200 {
                return Err(format!("{name}: only {n} instances (need ≥ 200)"));
            }
        }
        Ok(())
    });
}

/// Criterion 5: Compatibility: syntactic acceptance implies semantic acceptance, and
/// every (non-fallback) method body gets a full interpretation within the
/// default budget. Fallback bodies have no syntactic typing rule; their
/// semantic status is criteria 1–3's subject.
#[test]
fn criterion_5_compatibility() {
    criterion(5, "syntactic/semantic compatibility", Duration::from_secs(30), || {
        for e in corpus::CORPUS.iter() {
            let p = e.program();
            let ctx = Ctx::of(&p);
            let (table, _) = elaborate_declarations(&p).map_err(|e| e.to_string())?;
            typecheck_table(ctx, &table)
                .map_err(|err| format!("{}: syntactic checker rejected: {err}", e.name))?;
            let g = Global { ctx, table: &table };
            let open = tinysol::semtyping::sem_table(g, &CertStore::default(), Budget::default())
                .map_err(|err| format!("{}: semantic checker rejected: {err}", e.name))?;
            if !open.is_empty() {
                return Err(format!(
                    "{}: {} undischarged semantic obligations",
                    e.name,
                    open.len()
                ));
            }
            for (x, menv) in &table {
                let (iface, s1) = ctx.gamma.addr(x).ok_or(format!("{x} ∉ dom(Γ)"))?;
                for (f, (params, body)) in menv {
                    if f == "fallback" {
                        continue;
                    }
                    let Some(MemberType::Proc(ptypes, sm)) = ctx.gamma.member(iface, f) else {
                        return Err(format!("{}: Γ({iface}) has no procedure {f}", e.name));
                    };
                    let d = method_delta(ctx, iface, s1, params, ptypes)
                        .map_err(|err| err.to_string())?;
                    let root = StackTriplet::of_stm(body.clone(), d, sm.clone());
                    match build_interpretation(g, &root, Budget::default()) {
                        BuildResult::Full(_) => {}
                        other => {
                            return Err(format!(
                                "{}: body of {x}.{f} has no full interpretation: {other:?}",
                                e.name
                            ))
                        }
                    }
                }
            }
        }
        Ok(())
    });
}

/// Criterion 6: Call integrity: the combined forwarding proxy withstands 50 untrusted
/// mutations, the takeover variant diverges within 20 mutations at seed 7,
/// and the paired typed-run theorem holds on 200 runs over the partitionable
/// corpus programs.
#[test]
fn criterion_6_call_integrity() {
    criterion(6, "call integrity", Duration::from_secs(60), || {
        let e = corpus::COMBINED;
        let p = e.program();
        let tx = e.transaction(&p);
        let partition = TrustPartition::new(["Proxy".to_string(), "X".to_string()]);
        let report = check_call_integrity(&p, &partition, &tx, 50, 7, 5_000)?;
        if !report.pass {
            return Err(format!(
                "combined proxy failed call integrity: {} divergences",
                report.divergences.len()
            ));
        }

        let e = corpus::entry("pmw").unwrap();
        let p = e.program();
        let tx = e.transaction(&p);
        let partition = TrustPartition::new(["Proxy".to_string()]);
        let report = check_call_integrity(&p, &partition, &tx, 20, 7, 5_000)?;
        if report.pass || report.divergences.is_empty() {
            return Err("takeover variant produced no divergence within 20 mutations".into());
        }

        // 200 paired typed runs over the programs whose addresses split into
        // bottom- and top-level contracts.
        let applicable = ["bank", "tokens", "loops", "idf", "escrow"];
        let mut pairs = 0usize;
        for name in applicable {
            let e = corpus::entry(name).unwrap();
            let p = e.program();
            let tx = e.transaction(&p);
            for seed in 0..40u64 {
                match theorem_ci_check(&p, &tx, seed, 10_000)? {
                    TheoremOutcome::Holds => pairs += 1,
                    TheoremOutcome::Inapplicable(why) => {
                        return Err(format!("{name} seed {seed}: inapplicable: {why}"))
                    }
                    TheoremOutcome::Violated(d) => {
                        return Err(format!(
                            "{name} seed {seed}: call integrity violated for trusted {} at {}",
                            d.trusted, d.position
                        ))
                    }
                }
            }
        }
        if pairs < 200 {
            return Err(format!("only {pairs} paired typed runs (need 200)"));
        }
        Ok(())
    });
}

/// Criterion 7: Ledger integrity: 100 randomized appends verify all-PASS and any
/// sampled single-byte on-disk mutation is detected.
#[test]
fn criterion_7_ledger_integrity() {
    criterion(7, "ledger integrity", Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = dir.path().join("ledger.jsonl");
        ledger_init(&store)?;

        let lattice = "lattice { levels: L, H; order: L <= H; top: H; bottom: L; }";
        let interfaces =
            "interface IC { balance : int@L; n : int@L; f : (int@L) -> cmd@L; }";
        for i in 0..100 {
            let source = format!(
                "contract C{i} : IC@L {{\n  field balance := {};\n  field n := {};\n  func f(a) {{ this.n := this.n + a }}\n  func fallback() {{ skip }}\n}}\n",
                rng.gen_range(0..1000),
                rng.gen_range(0..1000),
            );
            let cert = if i % 10 == 0 {
                // Certify the fallback obligation of a client call to an
                // undeclared method.
                let p = tinysol::parser::parse_program(&source, interfaces, lattice)
                    .map_err(|e| e.to_string())?;
                let (table, _) = elaborate_declarations(&p).map_err(|e| e.to_string())?;
                let g = Global { ctx: Ctx::of(&p), table: &table };
                let d = client_delta(&p, &format!("C{i}"));
                let stm = parse_stm(&format!("call C{i}.nope()$0"), &p).map_err(|e| e.to_string())?;
                let roots = collect_obligation_roots(g, &d, &stm, p.lattice.bottom())
                    .map_err(|e| e.to_string())?;
                Some(certify_full(&p, g, &roots[0], Budget::default())?)
            } else {
                None
            };
            ledger_append(&store, &source, interfaces, lattice, cert)?;
        }
        let report = ledger_verify(&store);
        if !report.pass {
            return Err("freshly appended ledger failed verification".into());
        }
        if report.entries.len() != 100 {
            return Err(format!("expected 100 entries, found {}", report.entries.len()));
        }

        let pristine = std::fs::read(&store).map_err(|e| e.to_string())?;
        for _ in 0..40 {
            let pos = rng.gen_range(0..pristine.len());
            let mut corrupted = pristine.clone();
            let old = corrupted[pos];
            let mut new = old;
            while new == old {
                new = rng.gen();
            }
            corrupted[pos] = new;
            std::fs::write(&store, &corrupted).map_err(|e| e.to_string())?;
            if ledger_verify(&store).pass {
                return Err(format!(
                    "single-byte mutation at offset {pos} ({old:#04x} -> {new:#04x}) went undetected"
                ));
            }
        }
        std::fs::write(&store, &pristine).map_err(|e| e.to_string())?;
        if !ledger_verify(&store).pass {
            return Err("restored ledger failed verification".into());
        }
        Ok(())
    });
}
