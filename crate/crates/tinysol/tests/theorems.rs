//! Randomized runtime-theorem suites over the built-in corpus.
//!
//! Each suite must check at least 200 instances with zero violations; the
//! suite bodies live in `tinysol::theorems` and panic on the first
//! counterexample.

use tinysol::theorems;

#[test]
fn preservation_suite() {
    let n = theorems::preservation_suite();
    assert!(n >= 200, "only {n} preservation instances");
    println!("preservation: {n} instances, 0 violations");
}

#[test]
fn noninterference_suite() {
    let n = theorems::noninterference_suite();
    assert!(n >= 200, "only {n} non-interference instances");
    println!("non-interference: {n} instances, 0 violations");
}

#[test]
fn coercion_suite() {
    let (e, s) = theorems::coercion_suite();
    assert!(e >= 200, "only {e} expression coercion instances");
    assert!(s >= 200, "only {s} stack coercion instances");
    println!("coercion: {e} expression + {s} stack instances, 0 violations");
}

#[test]
fn semantic_compatibility_suite() {
    let n = theorems::semantic_compatibility_suite();
    assert!(n >= 200, "only {n} compatibility instances");
    println!("semantic compatibility: {n} instances, 0 violations");
}

#[test]
fn expression_safety_suite() {
    let n = theorems::expression_safety_suite();
    assert!(n >= 200, "only {n} expression safety instances");
    println!("expression safety: {n} instances, 0 violations");
}
