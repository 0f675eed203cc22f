//! Concrete syntax for TinySol: `.tsol` contract files, `.tsi` interface
//! files, `.lat` lattice files, and transaction files.
//!
//! Security-annotated forms use `@`: `I@s` for interface annotations, `B@s`
//! for container types, `let x: B@s := e in S` for typed declarations, and
//! `$e` for the currency amount of a call.
//!
//! Identifier resolution: after parsing, unbound identifiers that name a
//! declared contract address become address literals, identifiers that name a
//! declared method become method-name literals, and everything else stays a
//! variable (magic variables `this`/`sender`/`value`/`id` are ordinary
//! variables and always win over declarations).

use crate::lattice::{Lattice, Level};
use crate::syntax::*;
use crate::types::{
    check_gamma_wellformed, check_sigma_consistency, BaseType, Gamma, GammaEntry, IfaceBody,
    MemberType, Sigma, TOP_IFACE,
};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.msg)
    }
}

impl std::error::Error for ParseError {}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Kw(&'static str),
    Sym(&'static str),
    Eof,
}

const KEYWORDS: &[&str] = &[
    "contract", "interface", "field", "func", "skip", "throw", "let", "in", "if", "then", "else",
    "while", "do", "call", "dcall", "true", "false", "and", "or", "not", "args", "cmd", "int",
    "bool", "idf", "bot", "del", "ret", "lvl",
];

struct Lexer {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize, usize)>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    let (mut line, mut col) = (1usize, 1usize);
    macro_rules! advance {
        () => {{
            if chars[i] == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, col);
        if c.is_whitespace() {
            advance!();
            continue;
        }
        if c == '/' && i + 1 < chars.len() && chars[i + 1] == '/' {
            while i < chars.len() && chars[i] != '\n' {
                advance!();
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '\'') {
                s.push(chars[i]);
                advance!();
            }
            let tok = match KEYWORDS.iter().find(|k| **k == s) {
                Some(k) => Tok::Kw(k),
                None => Tok::Ident(s),
            };
            out.push((tok, l0, c0));
            continue;
        }
        if c.is_ascii_digit() {
            let mut n: i64 = 0;
            while i < chars.len() && chars[i].is_ascii_digit() {
                n = n * 10 + (chars[i] as i64 - '0' as i64);
                advance!();
            }
            out.push((Tok::Int(n), l0, c0));
            continue;
        }
        let two: Option<&'static str> = if i + 1 < chars.len() {
            match (c, chars[i + 1]) {
                (':', '=') => Some(":="),
                ('<', '=') => Some("<="),
                ('<', ':') => Some("<:"),
                ('-', '>') => Some("->"),
                _ => None,
            }
        } else {
            None
        };
        if let Some(s) = two {
            advance!();
            advance!();
            out.push((Tok::Sym(s), l0, c0));
            continue;
        }
        let one: Option<&'static str> = match c {
            '{' => Some("{"),
            '}' => Some("}"),
            '(' => Some("("),
            ')' => Some(")"),
            '[' => Some("["),
            ']' => Some("]"),
            ':' => Some(":"),
            ';' => Some(";"),
            ',' => Some(","),
            '.' => Some("."),
            '$' => Some("$"),
            '@' => Some("@"),
            '=' => Some("="),
            '<' => Some("<"),
            '+' => Some("+"),
            '-' => Some("-"),
            '*' => Some("*"),
            '|' => Some("|"),
            _ => None,
        };
        match one {
            Some(s) => {
                advance!();
                out.push((Tok::Sym(s), l0, c0));
            }
            None => {
                return Err(ParseError { line: l0, col: c0, msg: format!("unexpected character `{c}`") })
            }
        }
    }
    out.push((Tok::Eof, line, col));
    Ok(out)
}

impl Lexer {
    fn new(src: &str) -> Result<Lexer, ParseError> {
        Ok(Lexer { toks: lex(src)?, pos: 0 })
    }
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }
    fn peek2(&self) -> &Tok {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)].0
    }
    fn here(&self) -> (usize, usize) {
        (self.toks[self.pos].1, self.toks[self.pos].2)
    }
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        let (line, col) = self.here();
        Err(ParseError { line, col, msg: msg.into() })
    }
    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }
    fn eat_sym(&mut self, s: &str) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Sym(x) if *x == s => {
                self.bump();
                Ok(())
            }
            other => self.err(format!("expected `{s}`, found {other:?}")),
        }
    }
    fn eat_kw(&mut self, k: &str) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Kw(x) if *x == k => {
                self.bump();
                Ok(())
            }
            other => self.err(format!("expected `{k}`, found {other:?}")),
        }
    }
    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }
    fn at_kw(&self, k: &str) -> bool {
        matches!(self.peek(), Tok::Kw(x) if *x == k)
    }
    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            other => self.err(format!("expected identifier, found {other:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Expression / statement parsing (raw: all identifiers are Var)
// ---------------------------------------------------------------------------

fn parse_base(lx: &mut Lexer) -> Result<BaseType, ParseError> {
    match lx.peek().clone() {
        Tok::Kw("int") => {
            lx.bump();
            Ok(BaseType::Int)
        }
        Tok::Kw("bool") => {
            lx.bump();
            Ok(BaseType::Bool)
        }
        Tok::Kw("idf") => {
            lx.bump();
            Ok(BaseType::Idf)
        }
        Tok::Ident(i) => {
            lx.bump();
            Ok(BaseType::Iface(i))
        }
        other => lx.err(format!("expected base type, found {other:?}")),
    }
}

fn parse_level(lx: &mut Lexer) -> Result<Level, ParseError> {
    lx.ident()
}

fn parse_atom(lx: &mut Lexer) -> Result<Expr, ParseError> {
    match lx.peek().clone() {
        Tok::Int(n) => {
            lx.bump();
            Ok(Expr::Lit(Value::Int(n)))
        }
        Tok::Sym("-") => {
            lx.bump();
            match lx.bump() {
                Tok::Int(n) => Ok(Expr::Lit(Value::Int(-n))),
                other => lx.err(format!("expected integer after `-`, found {other:?}")),
            }
        }
        Tok::Kw("true") => {
            lx.bump();
            Ok(Expr::Lit(Value::Bool(true)))
        }
        Tok::Kw("false") => {
            lx.bump();
            Ok(Expr::Lit(Value::Bool(false)))
        }
        Tok::Ident(x) => {
            lx.bump();
            Ok(Expr::Var(x))
        }
        Tok::Sym("(") => {
            lx.bump();
            let e = parse_expr_raw(lx)?;
            lx.eat_sym(")")?;
            Ok(e)
        }
        other => lx.err(format!("expected expression, found {other:?}")),
    }
}

fn parse_postfix(lx: &mut Lexer) -> Result<Expr, ParseError> {
    let mut e = parse_atom(lx)?;
    while lx.at_sym(".") {
        lx.bump();
        let p = lx.ident()?;
        e = Expr::Field(Box::new(e), p);
    }
    Ok(e)
}

fn parse_unary(lx: &mut Lexer) -> Result<Expr, ParseError> {
    if lx.at_kw("not") {
        lx.bump();
        let e = parse_unary(lx)?;
        return Ok(Expr::Op("not".into(), vec![e]));
    }
    parse_postfix(lx)
}

fn parse_binary(lx: &mut Lexer, min_bp: u8) -> Result<Expr, ParseError> {
    let mut lhs = parse_unary(lx)?;
    loop {
        let op: Option<&'static str> = match lx.peek() {
            Tok::Kw("or") => Some("or"),
            Tok::Kw("and") => Some("and"),
            Tok::Sym("=") => Some("="),
            Tok::Sym("<=") => Some("<="),
            Tok::Sym("<") => Some("<"),
            Tok::Sym("+") => Some("+"),
            Tok::Sym("-") => Some("-"),
            Tok::Sym("*") => Some("*"),
            _ => None,
        };
        let Some(op) = op else { break };
        let bp = match op {
            "or" => 1,
            "and" => 2,
            "=" | "<" | "<=" => 3,
            "+" | "-" => 4,
            "*" => 5,
            _ => unreachable!(),
        };
        if bp < min_bp {
            break;
        }
        lx.bump();
        let rhs = parse_binary(lx, bp + 1)?;
        lhs = Expr::Op(op.into(), vec![lhs, rhs]);
    }
    Ok(lhs)
}

fn parse_expr_raw(lx: &mut Lexer) -> Result<Expr, ParseError> {
    parse_binary(lx, 0)
}

/// Parse a call's `e.m(` prefix: a postfix chain whose last segment before `(`
/// is the method reference.
fn parse_call_head(lx: &mut Lexer) -> Result<(Expr, MethodRef), ParseError> {
    let mut e = parse_atom(lx)?;
    loop {
        lx.eat_sym(".")?;
        let seg = match lx.peek().clone() {
            Tok::Ident(s) => {
                lx.bump();
                s
            }
            other => return lx.err(format!("expected field or method name, found {other:?}")),
        };
        if lx.at_sym("(") {
            let m = if seg == "id" { MethodRef::Id } else { MethodRef::Name(seg) };
            return Ok((e, m));
        }
        e = Expr::Field(Box::new(e), seg);
    }
}

fn parse_call_args(lx: &mut Lexer) -> Result<CallArgs, ParseError> {
    lx.eat_sym("(")?;
    if lx.at_kw("args") {
        lx.bump();
        lx.eat_sym(")")?;
        return Ok(CallArgs::ArgsVar);
    }
    let mut es = Vec::new();
    if !lx.at_sym(")") {
        loop {
            es.push(parse_expr_raw(lx)?);
            if lx.at_sym(",") {
                lx.bump();
            } else {
                break;
            }
        }
    }
    lx.eat_sym(")")?;
    Ok(CallArgs::List(es))
}

fn parse_simple_stm(lx: &mut Lexer) -> Result<Stm, ParseError> {
    match lx.peek().clone() {
        Tok::Kw("skip") => {
            lx.bump();
            Ok(Stm::Skip)
        }
        Tok::Kw("throw") => {
            lx.bump();
            Ok(Stm::Throw)
        }
        Tok::Sym("{") => {
            lx.bump();
            let s = parse_stm_seq(lx)?;
            lx.eat_sym("}")?;
            Ok(s)
        }
        Tok::Kw("let") => {
            lx.bump();
            let name = lx.ident()?;
            lx.eat_sym(":")?;
            let base = parse_base(lx)?;
            lx.eat_sym("@")?;
            let level = parse_level(lx)?;
            lx.eat_sym(":=")?;
            let init = parse_expr_raw(lx)?;
            lx.eat_kw("in")?;
            let body = parse_simple_stm(lx)?;
            Ok(Stm::DeclVar { base, level, name, init, body: Box::new(body) })
        }
        Tok::Kw("if") => {
            lx.bump();
            let e = parse_expr_raw(lx)?;
            lx.eat_kw("then")?;
            let t = parse_simple_stm(lx)?;
            lx.eat_kw("else")?;
            let f = parse_simple_stm(lx)?;
            Ok(Stm::If(e, Box::new(t), Box::new(f)))
        }
        Tok::Kw("while") => {
            lx.bump();
            let e = parse_expr_raw(lx)?;
            lx.eat_kw("do")?;
            let b = parse_simple_stm(lx)?;
            Ok(Stm::While(e, Box::new(b)))
        }
        Tok::Kw("call") => {
            lx.bump();
            let (target, method) = parse_call_head(lx)?;
            let args = parse_call_args(lx)?;
            lx.eat_sym("$")?;
            let amount = parse_postfix(lx)?;
            Ok(Stm::Call { target, method, args, amount })
        }
        Tok::Kw("dcall") => {
            lx.bump();
            let (target, method) = parse_call_head(lx)?;
            let args = parse_call_args(lx)?;
            Ok(Stm::DCall { target, method, args })
        }
        Tok::Ident(x) => {
            if x == "this" && matches!(lx.peek2(), Tok::Sym(".")) {
                // Might be `this.p := e`; field reads `this.p` alone are not
                // statements, so `.` after `this` at statement head means
                // field assignment.
                lx.bump();
                lx.eat_sym(".")?;
                let p = lx.ident()?;
                if p == "balance" {
                    return lx.err("balance can be read but not directly assigned");
                }
                lx.eat_sym(":=")?;
                let e = parse_expr_raw(lx)?;
                Ok(Stm::AssignField(p, e))
            } else {
                lx.bump();
                lx.eat_sym(":=")?;
                let e = parse_expr_raw(lx)?;
                Ok(Stm::AssignVar(x, e))
            }
        }
        other => lx.err(format!("expected statement, found {other:?}")),
    }
}

fn parse_stm_seq(lx: &mut Lexer) -> Result<Stm, ParseError> {
    let first = parse_simple_stm(lx)?;
    if lx.at_sym(";") {
        lx.bump();
        // Trailing `;` before a closing brace is tolerated.
        if lx.at_sym("}") || matches!(lx.peek(), Tok::Eof) {
            return Ok(first);
        }
        let rest = parse_stm_seq(lx)?;
        Ok(Stm::Seq(Box::new(first), Box::new(rest)))
    } else {
        Ok(first)
    }
}

// ---------------------------------------------------------------------------
// Identifier resolution
// ---------------------------------------------------------------------------

/// Declared-name context used to resolve bare identifiers.
#[derive(Debug, Clone, Default)]
pub struct Resolver {
    pub addresses: BTreeSet<String>,
    pub methods: BTreeSet<String>,
}

const MAGIC: &[&str] = &["this", "sender", "value", "id", "args"];

impl Resolver {
    pub fn from_program(p: &Program) -> Resolver {
        let mut r = Resolver::default();
        for c in &p.contracts {
            r.addresses.insert(c.address.clone());
            for (m, _, _) in &c.methods {
                r.methods.insert(m.clone());
            }
            r.methods.insert("fallback".into());
        }
        for (_, body) in p.gamma.interfaces() {
            for (m, t) in body {
                if matches!(t, MemberType::Proc(..)) {
                    r.methods.insert(m.clone());
                }
            }
        }
        r
    }

    pub fn resolve_value_ident(&self, x: &str) -> Option<Value> {
        if MAGIC.contains(&x) {
            return None;
        }
        if self.addresses.contains(x) {
            Some(Value::Addr(x.to_string()))
        } else if self.methods.contains(x) {
            Some(Value::Method(x.to_string()))
        } else {
            None
        }
    }

    fn resolve_expr(&self, e: Expr, bound: &BTreeSet<String>) -> Expr {
        match e {
            Expr::Var(x) => {
                if bound.contains(&x) || MAGIC.contains(&x.as_str()) {
                    Expr::Var(x)
                } else {
                    match self.resolve_value_ident(&x) {
                        Some(v) => Expr::Lit(v),
                        None => Expr::Var(x),
                    }
                }
            }
            Expr::Lit(v) => Expr::Lit(v),
            Expr::Field(e, p) => Expr::Field(Box::new(self.resolve_expr(*e, bound)), p),
            Expr::Op(op, args) => {
                Expr::Op(op, args.into_iter().map(|a| self.resolve_expr(a, bound)).collect())
            }
        }
    }

    fn resolve_args(&self, a: CallArgs, bound: &BTreeSet<String>) -> CallArgs {
        match a {
            CallArgs::ArgsVar => CallArgs::ArgsVar,
            CallArgs::List(es) => {
                CallArgs::List(es.into_iter().map(|e| self.resolve_expr(e, bound)).collect())
            }
        }
    }

    pub fn resolve_stm(&self, s: Stm, bound: &BTreeSet<String>) -> Stm {
        match s {
            Stm::Skip => Stm::Skip,
            Stm::Throw => Stm::Throw,
            Stm::DeclVar { base, level, name, init, body } => {
                let init = self.resolve_expr(init, bound);
                let mut inner = bound.clone();
                inner.insert(name.clone());
                Stm::DeclVar { base, level, name, init, body: Box::new(self.resolve_stm(*body, &inner)) }
            }
            Stm::AssignVar(x, e) => Stm::AssignVar(x, self.resolve_expr(e, bound)),
            Stm::AssignField(p, e) => Stm::AssignField(p, self.resolve_expr(e, bound)),
            Stm::Seq(a, b) => Stm::Seq(
                Box::new(self.resolve_stm(*a, bound)),
                Box::new(self.resolve_stm(*b, bound)),
            ),
            Stm::If(e, t, f) => Stm::If(
                self.resolve_expr(e, bound),
                Box::new(self.resolve_stm(*t, bound)),
                Box::new(self.resolve_stm(*f, bound)),
            ),
            Stm::While(e, b) => Stm::While(
                self.resolve_expr(e, bound),
                Box::new(self.resolve_stm(*b, bound)),
            ),
            Stm::Call { target, method, args, amount } => Stm::Call {
                target: self.resolve_expr(target, bound),
                method,
                args: self.resolve_args(args, bound),
                amount: self.resolve_expr(amount, bound),
            },
            Stm::DCall { target, method, args } => Stm::DCall {
                target: self.resolve_expr(target, bound),
                method,
                args: self.resolve_args(args, bound),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Interface files (.tsi)
// ---------------------------------------------------------------------------

fn top_body(lat: &Lattice) -> IfaceBody {
    let mut b = BTreeMap::new();
    b.insert("balance".into(), MemberType::Container(BaseType::Int, lat.top().clone()));
    b.insert("send".into(), MemberType::Proc(vec![], lat.bottom().clone()));
    b.insert("fallback".into(), MemberType::Proc(vec![], lat.bottom().clone()));
    b
}

fn parse_member_type(lx: &mut Lexer) -> Result<MemberType, ParseError> {
    if lx.at_sym("(") {
        lx.bump();
        let mut params = Vec::new();
        if !lx.at_sym(")") {
            loop {
                let b = parse_base(lx)?;
                lx.eat_sym("@")?;
                let s = parse_level(lx)?;
                params.push((b, s));
                if lx.at_sym(",") {
                    lx.bump();
                } else {
                    break;
                }
            }
        }
        lx.eat_sym(")")?;
        lx.eat_sym("->")?;
        lx.eat_kw("cmd")?;
        lx.eat_sym("@")?;
        let s = parse_level(lx)?;
        Ok(MemberType::Proc(params, s))
    } else {
        let b = parse_base(lx)?;
        lx.eat_sym("@")?;
        let s = parse_level(lx)?;
        Ok(MemberType::Container(b, s))
    }
}

fn parse_interfaces(src: &str, lat: &Lattice) -> Result<(Sigma, BTreeMap<String, IfaceBody>), ParseError> {
    let mut lx = Lexer::new(src)?;
    let mut sigma = Sigma::with_top();
    let mut bodies: BTreeMap<String, IfaceBody> = BTreeMap::new();
    bodies.insert(TOP_IFACE.into(), top_body(lat));
    while !matches!(lx.peek(), Tok::Eof) {
        lx.eat_kw("interface")?;
        let name = lx.ident()?;
        if name == TOP_IFACE {
            return lx.err(format!("interface {TOP_IFACE} is implicit and cannot be re-declared"));
        }
        let parent = if lx.at_sym("<:") {
            lx.bump();
            lx.ident()?
        } else {
            TOP_IFACE.to_string()
        };
        lx.eat_sym("{")?;
        let mut body: IfaceBody = BTreeMap::new();
        while !lx.at_sym("}") {
            let m = match lx.peek().clone() {
                Tok::Ident(m) => {
                    lx.bump();
                    m
                }
                other => return lx.err(format!("expected member name, found {other:?}")),
            };
            lx.eat_sym(":")?;
            let t = parse_member_type(&mut lx)?;
            if body.insert(m.clone(), t).is_some() {
                return lx.err(format!("duplicate member {m} in interface {name}"));
            }
            lx.eat_sym(";")?;
        }
        lx.eat_sym("}")?;
        // Fill in the mandatory members from the root defaults when omitted.
        for (m, t) in top_body(lat) {
            body.entry(m).or_insert(t);
        }
        if sigma.parent.insert(name.clone(), parent).is_some() {
            return lx.err(format!("duplicate interface {name}"));
        }
        bodies.insert(name, body);
    }
    Ok((sigma, bodies))
}

// ---------------------------------------------------------------------------
// Contract files (.tsol)
// ---------------------------------------------------------------------------

fn parse_value_lit(lx: &mut Lexer) -> Result<Expr, ParseError> {
    // Field initializers are value literals: integers, booleans, or bare
    // identifiers resolved to addresses/method names after the whole program
    // is known.
    parse_atom(lx)
}

struct RawContract {
    address: String,
    iface: String,
    level: Level,
    fields: Vec<(String, Expr)>,
    methods: Vec<(String, Vec<String>, Stm)>,
    fallback: Option<Stm>,
}

fn parse_contracts(src: &str) -> Result<Vec<RawContract>, ParseError> {
    let mut lx = Lexer::new(src)?;
    let mut out = Vec::new();
    while !matches!(lx.peek(), Tok::Eof) {
        lx.eat_kw("contract")?;
        let address = lx.ident()?;
        lx.eat_sym(":")?;
        let iface = lx.ident()?;
        lx.eat_sym("@")?;
        let level = parse_level(&mut lx)?;
        lx.eat_sym("{")?;
        let mut fields = Vec::new();
        let mut methods: Vec<(String, Vec<String>, Stm)> = Vec::new();
        let mut fallback = None;
        while !lx.at_sym("}") {
            if lx.at_kw("field") {
                lx.bump();
                let name = lx.ident()?;
                lx.eat_sym(":=")?;
                let v = parse_value_lit(&mut lx)?;
                lx.eat_sym(";")?;
                fields.push((name, v));
            } else if lx.at_kw("func") {
                lx.bump();
                let name = lx.ident()?;
                lx.eat_sym("(")?;
                let mut params = Vec::new();
                if !lx.at_sym(")") {
                    loop {
                        params.push(lx.ident()?);
                        if lx.at_sym(",") {
                            lx.bump();
                        } else {
                            break;
                        }
                    }
                }
                lx.eat_sym(")")?;
                lx.eat_sym("{")?;
                let body = if lx.at_sym("}") { Stm::Skip } else { parse_stm_seq(&mut lx)? };
                lx.eat_sym("}")?;
                if name == "fallback" {
                    if !params.is_empty() {
                        return lx.err("fallback takes no parameters");
                    }
                    fallback = Some(body);
                } else {
                    methods.push((name, params, body));
                }
            } else {
                return lx.err(format!("expected `field` or `func`, found {:?}", lx.peek()));
            }
        }
        lx.eat_sym("}")?;
        out.push(RawContract { address, iface, level, fields, methods, fallback });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Whole-program assembly
// ---------------------------------------------------------------------------

/// Parse and validate a whole program from contract, interface, and lattice
/// sources. Validation covers Γ well-formedness, Σ-consistency, mandatory
/// balance/send/fallback, duplicate names, and undeclared interfaces/levels.
pub fn parse_program(source: &str, interface_source: &str, lattice_source: &str) -> Result<Program, ParseError> {
    let lattice = Lattice::parse(lattice_source)
        .map_err(|e| ParseError { line: 0, col: 0, msg: e.to_string() })?;
    let (sigma, bodies) = parse_interfaces(interface_source, &lattice)?;
    let raws = parse_contracts(source)?;

    let mut gamma = Gamma::default();
    for (name, body) in &bodies {
        gamma.entries.insert(name.clone(), GammaEntry::Iface(body.clone()));
    }
    let perr = |msg: String| ParseError { line: 0, col: 0, msg };
    let mut seen = BTreeSet::new();
    for rc in &raws {
        if !seen.insert(rc.address.clone()) {
            return Err(perr(format!("duplicate contract address {}", rc.address)));
        }
        if !bodies.contains_key(&rc.iface) {
            return Err(perr(format!(
                "contract {} annotated with undeclared interface {}",
                rc.address, rc.iface
            )));
        }
        if !lattice.contains(&rc.level) {
            return Err(perr(format!(
                "contract {} annotated with undeclared level {}",
                rc.address, rc.level
            )));
        }
        gamma
            .entries
            .insert(rc.address.clone(), GammaEntry::Addr(rc.iface.clone(), rc.level.clone()));
    }

    check_gamma_wellformed(&gamma, &lattice).map_err(|e| perr(e.to_string()))?;
    check_sigma_consistency(&sigma, &gamma, &lattice).map_err(|e| perr(e.to_string()))?;

    // Build the resolver from the raw declarations.
    let mut resolver = Resolver::default();
    for rc in &raws {
        resolver.addresses.insert(rc.address.clone());
        for (m, _, _) in &rc.methods {
            resolver.methods.insert(m.clone());
        }
        resolver.methods.insert("fallback".into());
        resolver.methods.insert("send".into());
    }
    for body in bodies.values() {
        for (m, t) in body {
            if matches!(t, MemberType::Proc(..)) {
                resolver.methods.insert(m.clone());
            }
        }
    }

    let mut contracts = Vec::new();
    for rc in raws {
        // Mandatory members, canonical ordering: balance first, send first.
        let mut fields: Vec<(String, Value)> = Vec::new();
        let mut field_names = BTreeSet::new();
        for (name, raw) in rc.fields {
            if !field_names.insert(name.clone()) {
                return Err(perr(format!("duplicate field {name} in contract {}", rc.address)));
            }
            let v = match raw {
                Expr::Lit(v) => v,
                Expr::Var(x) => match resolver.resolve_value_ident(&x) {
                    Some(v) => v,
                    None => {
                        return Err(perr(format!(
                            "field {name} of {}: identifier `{x}` is neither a declared address nor a declared method",
                            rc.address
                        )))
                    }
                },
                other => {
                    return Err(perr(format!(
                        "field {name} of {}: initializer must be a literal value, got `{other}`",
                        rc.address
                    )))
                }
            };
            fields.push((name, v));
        }
        let bal_pos = fields.iter().position(|(n, _)| n == "balance").ok_or_else(|| {
            perr(format!("contract {} is missing the mandatory balance field", rc.address))
        })?;
        if !matches!(fields[bal_pos].1, Value::Int(_)) {
            return Err(perr(format!("contract {}: balance must be an integer", rc.address)));
        }
        let bal = fields.remove(bal_pos);
        fields.insert(0, bal);

        let mut methods = rc.methods;
        let mut method_names = BTreeSet::new();
        for (m, _, _) in &methods {
            if !method_names.insert(m.clone()) {
                return Err(perr(format!("duplicate method {m} in contract {}", rc.address)));
            }
        }
        match methods.iter().position(|(n, _, _)| n == "send") {
            Some(i) => {
                let (_, p, b) = &methods[i];
                if !p.is_empty() || *b != Stm::Skip {
                    return Err(perr(format!(
                        "contract {}: send must be declared as send() {{ skip }}",
                        rc.address
                    )));
                }
                let send = methods.remove(i);
                methods.insert(0, send);
            }
            None => methods.insert(0, ("send".into(), vec![], Stm::Skip)),
        }
        let fallback = rc.fallback.ok_or_else(|| {
            perr(format!("contract {} is missing the mandatory fallback function", rc.address))
        })?;

        // Resolve identifiers in all bodies.
        let methods = methods
            .into_iter()
            .map(|(name, params, body)| {
                let bound: BTreeSet<String> = params.iter().cloned().collect();
                let body = resolver.resolve_stm(body, &bound);
                (name, params, body)
            })
            .collect();
        let fallback = resolver.resolve_stm(fallback, &BTreeSet::new());

        contracts.push(ContractDecl {
            address: rc.address,
            iface: rc.iface,
            level: rc.level,
            fields,
            methods,
            fallback,
        });
    }

    Ok(Program {
        contracts,
        sigma,
        gamma,
        lattice,
        sources: (source.to_string(), interface_source.to_string(), lattice_source.to_string()),
    })
}

/// Parse a statement in the context of a program (identifiers resolved against
/// its declarations). Used for CLI entry statements and certificate stacks.
pub fn parse_stm(src: &str, prog: &Program) -> Result<Stm, ParseError> {
    let mut lx = Lexer::new(src)?;
    let s = parse_stm_seq(&mut lx)?;
    if !matches!(lx.peek(), Tok::Eof) {
        return lx.err(format!("trailing input after statement: {:?}", lx.peek()));
    }
    let r = Resolver::from_program(prog);
    Ok(r.resolve_stm(s, &BTreeSet::new()))
}

/// Parse an expression in the context of a program.
pub fn parse_expr(src: &str, prog: &Program) -> Result<Expr, ParseError> {
    let mut lx = Lexer::new(src)?;
    let e = parse_expr_raw(&mut lx)?;
    if !matches!(lx.peek(), Tok::Eof) {
        return lx.err(format!("trailing input after expression: {:?}", lx.peek()));
    }
    let r = Resolver::from_program(prog);
    Ok(r.resolve_expr(e, &BTreeSet::new()))
}

/// Parse a literal value (integers, booleans, declared addresses or method names).
pub fn parse_value(src: &str, prog: &Program) -> Result<Value, ParseError> {
    let e = parse_expr(src, prog)?;
    match e {
        Expr::Lit(v) => Ok(v),
        other => Err(ParseError { line: 0, col: 0, msg: format!("not a literal value: `{other}`") }),
    }
}

// ---------------------------------------------------------------------------
// Transaction files
// ---------------------------------------------------------------------------

/// One transaction entry: `caller CALL callee.method(v, ...)$amount`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxEntry {
    pub caller: String,
    pub callee: String,
    pub method: String,
    pub args: Vec<Value>,
    pub amount: i64,
}

/// Parse a transaction file: one `caller CALL callee.method(args)$amount` per line.
pub fn parse_tx(src: &str, prog: &Program) -> Result<Vec<TxEntry>, ParseError> {
    let mut out = Vec::new();
    for (lineno, line) in src.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("//") {
            continue;
        }
        let err = |msg: String| ParseError { line: lineno + 1, col: 1, msg };
        let (caller, rest) = line
            .split_once(" CALL ")
            .ok_or_else(|| err(format!("expected `caller CALL callee.method(args)$amount`: {line}")))?;
        let caller = caller.trim().to_string();
        let (head, amount) = rest
            .rsplit_once('$')
            .ok_or_else(|| err("missing `$amount`".into()))?;
        let amount: i64 = amount
            .trim()
            .parse()
            .map_err(|_| err(format!("bad amount `{amount}`")))?;
        let (calleemethod, argsrc) = head
            .split_once('(')
            .ok_or_else(|| err("missing `(`".into()))?;
        let argsrc = argsrc
            .trim_end()
            .strip_suffix(')')
            .ok_or_else(|| err("missing `)`".into()))?;
        let (callee, method) = calleemethod
            .trim()
            .rsplit_once('.')
            .ok_or_else(|| err("missing `.method`".into()))?;
        let mut args = Vec::new();
        for a in argsrc.split(',') {
            let a = a.trim();
            if a.is_empty() {
                continue;
            }
            args.push(parse_value(a, prog).map_err(|e| err(e.to_string()))?);
        }
        if !prog.gamma.addr(caller.trim()).is_some() {
            return Err(err(format!("caller `{caller}` is not a declared address")));
        }
        out.push(TxEntry {
            caller,
            callee: callee.trim().to_string(),
            method: method.trim().to_string(),
            args,
            amount,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAT: &str = "lattice { levels: L, H; order: L <= H; top: H; bottom: L; }";

    fn tsi_min() -> String {
        "interface I { p : int@L; f : (int@L) -> cmd@L; }".to_string()
    }

    #[test]
    fn parses_minimal_contract() {
        let src = "contract X : I@L {\n  field balance := 0;\n  field p := 7;\n  func f(x) { this.p := x }\n  func fallback() { skip }\n}";
        let p = parse_program(src, &tsi_min(), LAT).unwrap();
        let c = p.contract("X").unwrap();
        assert_eq!(c.fields[0], ("balance".into(), Value::Int(0)));
        assert_eq!(c.methods[0].0, "send"); // auto-inserted, first
        assert_eq!(c.method("f").unwrap().1, &Stm::AssignField("p".into(), Expr::var("x")));
        assert_eq!(c.fallback, Stm::Skip);
    }

    #[test]
    fn missing_balance_is_an_error() {
        let src = "contract X : I@L { func fallback() { skip } }";
        let e = parse_program(src, &tsi_min(), LAT).unwrap_err();
        assert!(e.to_string().contains("balance"));
    }

    #[test]
    fn proxy_fallback_shape() {
        // The pointer-to-implementation fallback: call this.impl.id()$value
        let tsi = "interface IP { owner : Top@L; impl : Top@L; }";
        let src = "contract P : IP@L {\n  field balance := 0;\n  field owner := P;\n  field impl := P;\n  func fallback() { call this.impl.id()$value }\n}";
        let p = parse_program(src, tsi, LAT).unwrap();
        let c = p.contract("P").unwrap();
        assert_eq!(
            c.fallback,
            Stm::Call {
                target: Expr::Field(Box::new(Expr::this()), "impl".into()),
                method: MethodRef::Id,
                args: CallArgs::List(vec![]),
                amount: Expr::var("value"),
            }
        );
    }

    #[test]
    fn id_dispatch_guard_shape() {
        let tsi = "interface I { f1 : () -> cmd@L; f2 : () -> cmd@L; }";
        let src = "contract X : I@L {\n  field balance := 0;\n  func f1() { skip }\n  func f2() { skip }\n  func fallback() { if id = f1 or id = f2 then skip else throw }\n}";
        let p = parse_program(src, tsi, LAT).unwrap();
        let c = p.contract("X").unwrap();
        match &c.fallback {
            Stm::If(g, _, _) => {
                assert_eq!(
                    g,
                    &Expr::Op(
                        "or".into(),
                        vec![
                            Expr::Op("=".into(), vec![Expr::var("id"), Expr::Lit(Value::Method("f1".into()))]),
                            Expr::Op("=".into(), vec![Expr::var("id"), Expr::Lit(Value::Method("f2".into()))]),
                        ]
                    )
                );
            }
            other => panic!("expected if, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_statements() {
        let tsi = "interface I { p : int@L; f : (int@L) -> cmd@L; }";
        let src = "contract X : I@L { field balance := 0; field p := 1; func f(x) { skip } func fallback() { skip } }";
        let p = parse_program(src, tsi, LAT).unwrap();
        for text in [
            "skip",
            "throw",
            "x := 1 + 2 * 3",
            "let y: int@L := 0 in y := y + 1",
            "if x = 1 then skip else throw",
            "while x < 10 do x := x + 1",
            "call X.f(1)$0",
            "call this.p.id()$value",
            "dcall X.f(x)",
            "skip; skip; throw",
            "this.p := 5",
        ] {
            let s1 = parse_stm(text, &p).unwrap();
            let printed = s1.to_string();
            let s2 = parse_stm(&printed, &p).unwrap();
            assert_eq!(s1, s2, "round-trip failed for `{text}` printed as `{printed}`");
        }
    }

    #[test]
    fn args_only_in_call_position() {
        let tsi = "interface I { f : (int@L) -> cmd@L; }";
        let src = "contract X : I@L { field balance := 0; func f(x) { skip } func fallback() { call X.f(args)$0 } }";
        let p = parse_program(src, tsi, LAT).unwrap();
        let c = p.contract("X").unwrap();
        assert_eq!(
            c.fallback,
            Stm::Call {
                target: Expr::Lit(Value::Addr("X".into())),
                method: MethodRef::Name("f".into()),
                args: CallArgs::ArgsVar,
                amount: Expr::int(0),
            }
        );
        assert!(parse_stm("x := args", &p).is_err());
    }

    #[test]
    fn tx_parsing() {
        let tsi = "interface I { f : (int@L) -> cmd@L; }";
        let src = "contract X : I@L { field balance := 0; func f(x) { skip } func fallback() { skip } }";
        let p = parse_program(src, tsi, LAT).unwrap();
        let tx = parse_tx("X CALL X.f(5)$2\n\n// comment\nX CALL X.g()$0\n", &p).unwrap();
        assert_eq!(tx.len(), 2);
        assert_eq!(tx[0], TxEntry { caller: "X".into(), callee: "X".into(), method: "f".into(), args: vec![Value::Int(5)], amount: 2 });
        assert_eq!(tx[1].args, vec![]);
    }

    #[test]
    fn balance_not_assignable() {
        let tsi = "interface I { }";
        let src = "contract X : I@L { field balance := 0; func g() { this.balance := 5 } func fallback() { skip } }";
        assert!(parse_program(src, tsi, LAT).is_err());
    }
}
