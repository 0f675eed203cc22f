//! Built-in example programs.
//!
//! Ten small contract systems embedded at compile time, each with its
//! interface file, lattice, and a sample transaction. They exercise the whole
//! feature surface: proxy patterns with `id`-dispatch, delegate calls,
//! currency transfers, loops, method-name values, mixed security levels, and
//! a three-point lattice. `all()` returns the ten core programs; `combined()`
//! is an extra fixture for the call-integrity harness whose delegate-call
//! forwarding admits unbounded self-delegation and is therefore kept out of
//! the interpretation-building suites.

use crate::parser::{parse_program, parse_tx};
use crate::parser::TxEntry;
use crate::syntax::Program;

/// One embedded program: contract source, interfaces, lattice, and a sample
/// transaction, all as source text.
#[derive(Debug, Clone, Copy)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub contracts: &'static str,
    pub interfaces: &'static str,
    pub lattice: &'static str,
    pub tx: &'static str,
}

const TWO_LAT: &str = include_str!("../corpus/two.lat");

/// The ten core programs.
pub const CORPUS: [CorpusEntry; 10] = [
    CorpusEntry {
        name: "proxy",
        contracts: include_str!("../corpus/proxy.tsol"),
        interfaces: include_str!("../corpus/proxy.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/proxy.tx"),
    },
    CorpusEntry {
        name: "pmw",
        contracts: include_str!("../corpus/pmw.tsol"),
        interfaces: include_str!("../corpus/pmw.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/pmw.tx"),
    },
    CorpusEntry {
        name: "upto",
        contracts: include_str!("../corpus/upto.tsol"),
        interfaces: include_str!("../corpus/upto.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/upto.tx"),
    },
    CorpusEntry {
        name: "bank",
        contracts: include_str!("../corpus/bank.tsol"),
        interfaces: include_str!("../corpus/bank.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/bank.tx"),
    },
    CorpusEntry {
        name: "flows",
        contracts: include_str!("../corpus/flows.tsol"),
        interfaces: include_str!("../corpus/flows.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/flows.tx"),
    },
    CorpusEntry {
        name: "loops",
        contracts: include_str!("../corpus/loops.tsol"),
        interfaces: include_str!("../corpus/loops.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/loops.tx"),
    },
    CorpusEntry {
        name: "idf",
        contracts: include_str!("../corpus/idf.tsol"),
        interfaces: include_str!("../corpus/idf.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/idf.tx"),
    },
    CorpusEntry {
        name: "tokens",
        contracts: include_str!("../corpus/tokens.tsol"),
        interfaces: include_str!("../corpus/tokens.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/tokens.tx"),
    },
    CorpusEntry {
        name: "escrow",
        contracts: include_str!("../corpus/escrow.tsol"),
        interfaces: include_str!("../corpus/escrow.tsi"),
        lattice: TWO_LAT,
        tx: include_str!("../corpus/escrow.tx"),
    },
    CorpusEntry {
        name: "multi",
        contracts: include_str!("../corpus/multi.tsol"),
        interfaces: include_str!("../corpus/multi.tsi"),
        lattice: include_str!("../corpus/multi.lat"),
        tx: include_str!("../corpus/multi.tx"),
    },
];

/// Extra fixture: a combined upgradeable proxy that forwards declared methods
/// through delegate calls and everything else through `id`-dispatch.
pub const COMBINED: CorpusEntry = CorpusEntry {
    name: "combined",
    contracts: include_str!("../corpus/combined.tsol"),
    interfaces: include_str!("../corpus/combined.tsi"),
    lattice: TWO_LAT,
    tx: include_str!("../corpus/combined.tx"),
};

impl CorpusEntry {
    /// Parse and validate the program. Panics on malformed embedded sources
    /// (covered by unit tests).
    pub fn program(&self) -> Program {
        parse_program(self.contracts, self.interfaces, self.lattice)
            .unwrap_or_else(|e| panic!("corpus program {} failed to parse: {e}", self.name))
    }

    /// Parse the sample transaction against the program.
    pub fn transaction(&self, p: &Program) -> Vec<TxEntry> {
        parse_tx(self.tx, p)
            .unwrap_or_else(|e| panic!("corpus tx {} failed to parse: {e}", self.name))
    }
}

/// Look up a core corpus program (or the `combined` fixture) by name.
pub fn entry(name: &str) -> Option<CorpusEntry> {
    if name == COMBINED.name {
        return Some(COMBINED);
    }
    CORPUS.into_iter().find(|e| e.name == name)
}

/// Parse all ten core programs.
pub fn all() -> Vec<(&'static str, Program)> {
    CORPUS.iter().map(|e| (e.name, e.program())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{elaborate_declarations, initial_configuration, run_untyped, RunStatus};
    use crate::statics::{typecheck_table, Ctx};

    #[test]
    fn all_programs_parse() {
        assert_eq!(all().len(), 10);
        COMBINED.program();
    }

    #[test]
    fn all_programs_syntactically_typable() {
        for e in CORPUS.iter().chain([&COMBINED]) {
            let p = e.program();
            let (table, _) = elaborate_declarations(&p).expect(e.name);
            if let Err(err) = typecheck_table(Ctx::of(&p), &table) {
                panic!("{}: {err}", e.name);
            }
        }
    }

    #[test]
    fn sample_transactions_run_to_termination() {
        for e in CORPUS.iter().chain([&COMBINED]) {
            let p = e.program();
            let tx = e.transaction(&p);
            let c = initial_configuration(&p, &tx).expect(e.name);
            let (_, _, status) = run_untyped(&c, 10_000);
            assert_eq!(status, RunStatus::Terminated, "untyped run of {}", e.name);
        }
    }
}
