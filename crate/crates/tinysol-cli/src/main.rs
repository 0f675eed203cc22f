//! `tinysol` — command-line front end: run transactions (untyped or typed),
//! typecheck, build and verify certificates, run the call-integrity harness,
//! and manage the certificate ledger.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use tinysol::ci::{check_call_integrity, theorem_ci_check, TheoremOutcome, TrustPartition};
use tinysol::parser::{parse_program, parse_stm, parse_tx};
use tinysol::runtime::{
    elaborate_declarations, initial_configuration, run_untyped, RunStatus, TraceLabel,
};
use tinysol::semtyping::{
    certify_full, collect_obligation_roots, find_stuck_witness, verify_certificate, Budget,
    Certificate, Global, StackTriplet,
};
use tinysol::statics::{
    check_consistency, check_stack_wellformed, typecheck_program, typecheck_stm, Ctx,
};
use tinysol::syntax::Program;
use tinysol::typed::{step_typed, TypedConfiguration, TypedStep};
use tinysol::types::{BaseType, Delta, VarType};

#[derive(Parser)]
#[command(name = "tinysol", version, about = "TinySol security-typed contract toolchain")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ProgramArgs {
    /// Contract source file (.tsol).
    file: PathBuf,
    /// Interface file (defaults to FILE with extension .tsi).
    #[arg(long)]
    interfaces: Option<PathBuf>,
    /// Lattice file (defaults to FILE with extension .lat).
    #[arg(long)]
    lattice: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a transaction file against a program.
    Run {
        #[command(flatten)]
        prog: ProgramArgs,
        /// Transaction file: one `caller CALL callee.method(args)$amount` per line.
        #[arg(long)]
        tx: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        max_steps: usize,
        /// Write the non-silent trace labels to this file as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Use the typed semantics instead of the untyped one.
        #[arg(long)]
        typed: bool,
        /// Initial command level for the typed semantics (default: lattice bottom).
        #[arg(long)]
        level: Option<String>,
        /// Re-check consistency and well-formedness after every typed step.
        #[arg(long)]
        assert_preservation: bool,
        /// Statement source: build its interpretation and print the stuck path
        /// (if any) instead of running the transaction.
        #[arg(long)]
        stuck_witness: Option<String>,
        /// Print the parsed program and exit.
        #[arg(long)]
        dump_ast: bool,
    },
    /// Type check a program (and optionally one statement) syntactically.
    Typecheck {
        #[command(flatten)]
        prog: ProgramArgs,
        /// A statement to check in addition to the program.
        #[arg(long)]
        stm: Option<String>,
        /// Command level for --stm (default: lattice bottom).
        #[arg(long)]
        stm_level: Option<String>,
        /// Print the failing rule instance on error.
        #[arg(long)]
        explain: bool,
    },
    /// Build a certificate for the fallback obligations of an entry statement.
    Certify {
        #[command(flatten)]
        prog: ProgramArgs,
        /// Entry statement, e.g. "call X.f()$0".
        #[arg(long)]
        entry: String,
        /// Address whose interface types `this` in the entry (default: first contract).
        #[arg(long)]
        caller: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a certificate file against a program.
    VerifyCert {
        #[command(flatten)]
        prog: ProgramArgs,
        cert: PathBuf,
    },
    /// Differential call-integrity harness over untrusted-code mutations.
    Ci {
        #[command(flatten)]
        prog: ProgramArgs,
        /// Comma-separated trusted addresses.
        #[arg(long, value_delimiter = ',')]
        trusted: Vec<String>,
        #[arg(long)]
        tx: PathBuf,
        #[arg(long, default_value_t = 100)]
        mutations: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 5_000)]
        max_steps: usize,
        /// Write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also run the paired typed-semantics theorem check with the
        /// partition induced by s-contract classification.
        #[arg(long)]
        theorem: bool,
    },
    /// Certificate ledger operations.
    Ledger {
        #[command(subcommand)]
        op: LedgerOp,
    },
    /// Semantically check client code, discharging fallback obligations with
    /// ledger certificates.
    ClientCheck {
        #[command(flatten)]
        prog: ProgramArgs,
        #[arg(long)]
        store: PathBuf,
        /// Client statement to check, e.g. "call Proxy.ping()$0".
        #[arg(long)]
        stm: String,
        /// Address whose interface types `this` (default: first contract).
        #[arg(long)]
        caller: Option<String>,
        /// Command level (default: lattice bottom).
        #[arg(long)]
        level: Option<String>,
    },
}

#[derive(Subcommand)]
enum LedgerOp {
    /// Create an empty ledger file.
    Init {
        #[arg(long)]
        store: PathBuf,
    },
    /// Append a program (and optional certificate) to the ledger.
    Append {
        #[command(flatten)]
        prog: ProgramArgs,
        #[arg(long)]
        store: PathBuf,
        /// Certificate file produced by `tinysol certify`.
        #[arg(long)]
        cert: Option<PathBuf>,
    },
    /// Re-verify the hash chain and every stored certificate.
    Verify {
        #[arg(long)]
        store: PathBuf,
    },
    /// Print a summary of every entry.
    Show {
        #[arg(long)]
        store: PathBuf,
    },
}

fn sibling(file: &Path, ext: &str) -> PathBuf {
    file.with_extension(ext)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_sources(a: &ProgramArgs) -> Result<(String, String, String)> {
    let source = read(&a.file)?;
    let ipath = a.interfaces.clone().unwrap_or_else(|| sibling(&a.file, "tsi"));
    let lpath = a.lattice.clone().unwrap_or_else(|| sibling(&a.file, "lat"));
    Ok((source, read(&ipath)?, read(&lpath)?))
}

fn load_program(a: &ProgramArgs) -> Result<Program> {
    let (s, i, l) = load_sources(a)?;
    parse_program(&s, &i, &l).map_err(|e| anyhow!("parse error: {e}"))
}

/// Δ = { this: ⌈I^caller, s_caller⌉ }: the typing context of external client
/// code belonging to `caller`.
fn caller_delta(p: &Program, caller: Option<&str>) -> Result<(Delta, String)> {
    let addr = match caller {
        Some(a) => a.to_string(),
        None => {
            p.contracts.first().map(|c| c.address.clone()).ok_or_else(|| anyhow!("no contracts"))?
        }
    };
    let (iface, lvl) = p
        .gamma
        .addr(&addr)
        .ok_or_else(|| anyhow!("address {addr} is not declared"))?;
    let d = Delta::default()
        .bind("this", VarType::Container(BaseType::Iface(iface.to_string()), lvl.clone()));
    Ok((d, addr))
}

fn level_or_bottom(p: &Program, l: Option<&str>) -> Result<String> {
    match l {
        None => Ok(p.lattice.bottom().clone()),
        Some(l) if p.lattice.contains(l) => Ok(l.to_string()),
        Some(l) => bail!("level {l} is not in the lattice"),
    }
}

fn write_trace(path: &Path, trace: &[TraceLabel]) -> Result<()> {
    let mut out = String::new();
    for l in trace {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn print_status(status: &RunStatus) -> i32 {
    match status {
        RunStatus::Terminated => {
            println!("status: terminated");
            0
        }
        RunStatus::Threw => {
            println!("status: threw");
            0
        }
        RunStatus::Stuck(msg) => {
            println!("status: stuck ({msg})");
            1
        }
        RunStatus::BudgetExhausted => {
            println!("status: step budget exhausted");
            1
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    prog: ProgramArgs,
    tx: PathBuf,
    max_steps: usize,
    trace_out: Option<PathBuf>,
    typed: bool,
    level: Option<String>,
    assert_preservation: bool,
    stuck_witness: Option<String>,
    dump_ast: bool,
) -> Result<i32> {
    let p = load_program(&prog)?;
    if dump_ast {
        println!("{p:#?}");
        return Ok(0);
    }
    if let Some(src) = stuck_witness {
        let stm = parse_stm(&src, &p).map_err(|e| anyhow!("parse error in statement: {e}"))?;
        let (table, _) = elaborate_declarations(&p)?;
        let g = Global { ctx: Ctx::of(&p), table: &table };
        let (d, _) = caller_delta(&p, None)?;
        let lvl = level_or_bottom(&p, level.as_deref())?;
        let root = StackTriplet::of_stm(stm, d, lvl);
        return Ok(match find_stuck_witness(g, &root, Budget::default()) {
            Some((path, diag)) => {
                println!("untypable: {diag}");
                for t in &path {
                    println!("  {t}");
                }
                1
            }
            None => {
                println!("no stuck witness found (typable or budget exhausted)");
                0
            }
        });
    }
    let entries = parse_tx(&read(&tx)?, &p).map_err(|e| anyhow!("parse error in tx: {e}"))?;
    let c = initial_configuration(&p, &entries)?;
    if typed {
        let lvl = level_or_bottom(&p, level.as_deref())?;
        let tc = TypedConfiguration { delta: Delta::default(), level: lvl, config: c };
        let ctx = Ctx::of(&p);
        let mut cur = tc;
        let mut trace = Vec::new();
        let mut status = RunStatus::BudgetExhausted;
        for _ in 0..=max_steps {
            if assert_preservation {
                check_consistency(ctx.gamma, &cur.config.table, &cur.config.state, &cur.config.vars)
                    .map_err(|e| anyhow!("preservation violated (consistency): {e}"))?;
                check_stack_wellformed(
                    ctx,
                    &cur.config.table,
                    &cur.config.state,
                    &cur.config.vars,
                    &cur.level,
                    &cur.config.stack,
                )
                .map_err(|e| anyhow!("preservation violated (well-formedness): {e}"))?;
            }
            match step_typed(ctx, &cur) {
                TypedStep::Terminal => {
                    status = if cur.config.stack.syms.is_empty() {
                        RunStatus::Terminated
                    } else {
                        RunStatus::Threw
                    };
                    break;
                }
                TypedStep::Stuck(e) => {
                    status = RunStatus::Stuck(e.0);
                    break;
                }
                TypedStep::Next(n, label) => {
                    if !matches!(label, TraceLabel::Silent) {
                        trace.push(label);
                    }
                    cur = n;
                }
            }
        }
        for (x, fields) in &cur.config.state {
            println!("{x}: {fields:?}");
        }
        if let Some(out) = trace_out {
            write_trace(&out, &trace)?;
        }
        Ok(print_status(&status))
    } else {
        let (cfg, trace, status) = run_untyped(&c, max_steps);
        for (x, fields) in &cfg.state {
            println!("{x}: {fields:?}");
        }
        if let Some(out) = trace_out {
            write_trace(&out, &trace)?;
        }
        Ok(print_status(&status))
    }
}

fn cmd_typecheck(
    prog: ProgramArgs,
    stm: Option<String>,
    stm_level: Option<String>,
    explain: bool,
) -> Result<i32> {
    let p = load_program(&prog)?;
    let res = typecheck_program(&p).and_then(|()| {
        if let Some(src) = &stm {
            let s = parse_stm(src, &p).map_err(|e| tinysol::statics::TypeErr(e.to_string()))?;
            let (d, _) = caller_delta(&p, None)
                .map_err(|e| tinysol::statics::TypeErr(e.to_string()))?;
            let lvl = level_or_bottom(&p, stm_level.as_deref())
                .map_err(|e| tinysol::statics::TypeErr(e.to_string()))?;
            typecheck_stm(Ctx::of(&p), &d, &s, &lvl)?;
        }
        Ok(())
    });
    match res {
        Ok(()) => {
            println!("well-typed");
            Ok(0)
        }
        Err(e) => {
            if explain {
                println!("ill-typed: {e}");
            } else {
                println!("ill-typed");
            }
            Ok(1)
        }
    }
}

fn cmd_certify(prog: ProgramArgs, entry: String, caller: Option<String>, out: PathBuf) -> Result<i32> {
    let p = load_program(&prog)?;
    let stm = parse_stm(&entry, &p).map_err(|e| anyhow!("parse error in entry: {e}"))?;
    let (table, _) = elaborate_declarations(&p)?;
    let g = Global { ctx: Ctx::of(&p), table: &table };
    let (d, addr) = caller_delta(&p, caller.as_deref())?;
    let roots = collect_obligation_roots(g, &d, &stm, p.lattice.bottom())
        .map_err(|e| anyhow!("entry is not semantically typable: {e}"))?;
    let root = match roots.as_slice() {
        [] => bail!("entry statement produces no fallback obligation; nothing to certify"),
        [r] => r,
        many => bail!(
            "entry statement produces {} obligations; certify them one at a time:\n{}",
            many.len(),
            many.iter().map(|t| format!("  {t}")).collect::<Vec<_>>().join("\n")
        ),
    };
    let cert = certify_full(&p, g, root, Budget::default()).map_err(|e| anyhow!(e))?;
    std::fs::write(&out, serde_json::to_string_pretty(&cert)?)?;
    println!(
        "certified obligation of caller {addr}: {} triplets -> {}",
        cert.core.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_verify_cert(prog: ProgramArgs, cert: PathBuf) -> Result<i32> {
    let p = load_program(&prog)?;
    let cert: Certificate = serde_json::from_str(&read(&cert)?)?;
    let (table, _) = elaborate_declarations(&p)?;
    let g = Global { ctx: Ctx::of(&p), table: &table };
    match verify_certificate(&p, g, &cert) {
        Ok(()) => {
            println!("certificate OK ({} core triplets, kind {})", cert.core.len(), cert.kind);
            Ok(0)
        }
        Err(e) => {
            println!("certificate REJECTED: {e}");
            Ok(1)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_ci(
    prog: ProgramArgs,
    trusted: Vec<String>,
    tx: PathBuf,
    mutations: usize,
    seed: u64,
    max_steps: usize,
    report_out: Option<PathBuf>,
    theorem: bool,
) -> Result<i32> {
    let p = load_program(&prog)?;
    let entries = parse_tx(&read(&tx)?, &p).map_err(|e| anyhow!("parse error in tx: {e}"))?;
    let partition = TrustPartition::new(trusted);
    let report = check_call_integrity(&p, &partition, &entries, mutations, seed, max_steps)
        .map_err(|e| anyhow!(e))?;
    println!(
        "call integrity: {} ({} mutations, {} terminating pairs, {} inconclusive)",
        if report.pass { "PASS" } else { "FAIL" },
        report.mutations,
        report.terminating_pairs,
        report.inconclusive_pairs
    );
    for d in report.divergences.iter().take(3) {
        println!(
            "  divergence in variant {} (trusted {} at position {})",
            d.variant, d.trusted, d.position
        );
    }
    if theorem {
        match theorem_ci_check(&p, &entries, seed, max_steps).map_err(|e| anyhow!(e))? {
            TheoremOutcome::Holds => println!("theorem check: holds"),
            TheoremOutcome::Inapplicable(why) => println!("theorem check: inapplicable ({why})"),
            TheoremOutcome::Violated(d) => {
                println!("theorem check: VIOLATED (trusted {} at position {})", d.trusted, d.position)
            }
        }
    }
    if let Some(out) = report_out {
        std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_ledger(op: LedgerOp) -> Result<i32> {
    use tinysol::ledger::{ledger_append, ledger_init, ledger_read, ledger_verify};
    match op {
        LedgerOp::Init { store } => {
            ledger_init(&store).map_err(|e| anyhow!(e))?;
            println!("initialized {}", store.display());
            Ok(0)
        }
        LedgerOp::Append { prog, store, cert } => {
            let (s, i, l) = load_sources(&prog)?;
            let cert = match cert {
                Some(path) => Some(serde_json::from_str(&read(&path)?)?),
                None => None,
            };
            let entry = ledger_append(&store, &s, &i, &l, cert).map_err(|e| anyhow!(e))?;
            println!(
                "appended entry {}: {} : {}@{} ({})",
                entry.index,
                entry.address,
                entry.iface,
                entry.level,
                if entry.certificate.is_some() { "certified" } else { "syntactic-only" }
            );
            Ok(0)
        }
        LedgerOp::Verify { store } => {
            let report = ledger_verify(&store);
            for e in &report.entries {
                println!("entry {}: {}", e.index, e.status);
            }
            println!("ledger: {}", if report.pass { "OK" } else { "FAIL" });
            Ok(if report.pass { 0 } else { 1 })
        }
        LedgerOp::Show { store } => {
            for e in ledger_read(&store).map_err(|e| anyhow!(e))? {
                println!(
                    "{}: {} : {}@{} hash {} ({})",
                    e.index,
                    e.address,
                    e.iface,
                    e.level,
                    &e.source_hash[..12],
                    if e.certificate.is_some() { "certified" } else { "syntactic-only" }
                );
            }
            Ok(0)
        }
    }
}

fn cmd_client_check(
    prog: ProgramArgs,
    store: PathBuf,
    stm: String,
    caller: Option<String>,
    level: Option<String>,
) -> Result<i32> {
    let p = load_program(&prog)?;
    let s = parse_stm(&stm, &p).map_err(|e| anyhow!("parse error in statement: {e}"))?;
    let (d, addr) = caller_delta(&p, caller.as_deref())?;
    let lvl = level_or_bottom(&p, level.as_deref())?;
    match tinysol::ledger::client_typecheck_against_ledger(&store, &p, &d, &s, &lvl) {
        Ok(()) => {
            println!("accepted (caller {addr} at level {lvl})");
            Ok(0)
        }
        Err(e) => {
            println!("rejected: {e}");
            Ok(1)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Run {
            prog,
            tx,
            max_steps,
            trace,
            typed,
            level,
            assert_preservation,
            stuck_witness,
            dump_ast,
        } => cmd_run(
            prog,
            tx,
            max_steps,
            trace,
            typed,
            level,
            assert_preservation,
            stuck_witness,
            dump_ast,
        ),
        Cmd::Typecheck { prog, stm, stm_level, explain } => {
            cmd_typecheck(prog, stm, stm_level, explain)
        }
        Cmd::Certify { prog, entry, caller, out } => cmd_certify(prog, entry, caller, out),
        Cmd::VerifyCert { prog, cert } => cmd_verify_cert(prog, cert),
        Cmd::Ci { prog, trusted, tx, mutations, seed, max_steps, report, theorem } => {
            cmd_ci(prog, trusted, tx, mutations, seed, max_steps, report, theorem)
        }
        Cmd::Ledger { op } => cmd_ledger(op),
        Cmd::ClientCheck { prog, store, stm, caller, level } => {
            cmd_client_check(prog, store, stm, caller, level)
        }
    }
}
