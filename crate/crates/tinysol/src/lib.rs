//! TinySol: a minimal Solidity-like smart-contract language with security
//! types, implemented end to end — parser, untyped small-step interpreter,
//! syntactic information-flow type checker, typed operational semantics,
//! coinductive typing-interpretation builder/verifier with up-to-union
//! certificates, a call-integrity differential harness, and a file-backed
//! certificate ledger.

pub mod lattice;
pub mod types;
pub mod syntax;
pub mod parser;
pub mod runtime;
pub mod statics;
pub mod typed;
pub mod semtyping;
pub mod ci;
pub mod ledger;
pub mod corpus;
pub mod theorems;
