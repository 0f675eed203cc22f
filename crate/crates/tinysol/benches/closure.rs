//! Benchmarks for the two data-parallel cores: breadth-first typing
//! interpretation construction and the mutation-based call-integrity harness.
//!
//! The crate's `parallel` feature (on by default) switches both to rayon.
//! Run `cargo bench` and `cargo bench --no-default-features` to compare the
//! parallel and sequential implementations; group names carry the active
//! mode so reports from the two runs line up.

use criterion::{criterion_group, criterion_main, Criterion};

use tinysol::ci::{check_call_integrity, TrustPartition};
use tinysol::corpus;
use tinysol::parser::parse_stm;
use tinysol::runtime::elaborate_declarations;
use tinysol::semtyping::{
    build_interpretation, collect_obligation_roots, Budget, BuildResult, Global,
};
use tinysol::statics::Ctx;
use tinysol::types::{BaseType, Delta, VarType};

fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_build_interpretation(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("build_interpretation/{}", mode()));
    for (name, entry_stm) in [("proxy", "call Proxy.ping()$0"), ("upto", "call D.nope()$0")] {
        let e = corpus::entry(name).unwrap();
        let p = e.program();
        let (table, _) = elaborate_declarations(&p).unwrap();
        let g = Global { ctx: Ctx::of(&p), table: &table };
        let (iface, lvl) = p.gamma.addr("A").unwrap();
        let d = Delta::default()
            .bind("this", VarType::Container(BaseType::Iface(iface.to_string()), lvl.clone()));
        let stm = parse_stm(entry_stm, &p).unwrap();
        let roots = collect_obligation_roots(g, &d, &stm, p.lattice.bottom()).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                for root in &roots {
                    match build_interpretation(g, root, Budget::default()) {
                        BuildResult::Full(set) => {
                            assert!(!set.is_empty());
                        }
                        other => panic!("expected full interpretation, got {other:?}"),
                    }
                }
            })
        });
    }
    group.finish();
}

fn bench_call_integrity(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("call_integrity/{}", mode()));
    group.sample_size(20);
    let e = corpus::COMBINED;
    let p = e.program();
    let tx = e.transaction(&p);
    let partition = TrustPartition::new(["Proxy".to_string(), "X".to_string()]);
    group.bench_function("combined-50-mutations", |b| {
        b.iter(|| {
            let report = check_call_integrity(&p, &partition, &tx, 50, 7, 5_000).unwrap();
            assert!(report.pass);
        })
    });
    group.finish();
}

criterion_group!(benches, bench_build_interpretation, bench_call_integrity);
criterion_main!(benches);
