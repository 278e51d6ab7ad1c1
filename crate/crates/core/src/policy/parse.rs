//! Parser for the textual policy language.
//!
//! ```text
//! policy NAME { read :- DNF ; update :- DNF ; declassify :- propagate [until CONJ => DNF]* ; }
//! DNF  := CONJ ('|' CONJ)*
//! CONJ := ATOM ('&' ATOM)*
//! ATOM := true | false | key(ID) | key(X) | region(ID) | in(LIST, TERM)
//!       | notin(LIST, TERM) | after(TIMESTAMP) | fdonly
//! ```
//!
//! `#` starts a comment running to the end of the line. Identifiers starting
//! with an upper-case letter are variables.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use chrono::NaiveDateTime;
use thiserror::Error;

use super::{Atom, DeclassRule, Policy, Rule, RuleError, Term};
use crate::model::{is_ident, ListId, Region};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("unbound variable `{0}`: bind it with key({0}) in the same conjunct")]
    UnboundVariable(String),
    #[error("conjunct uses more than one variable (`{0}` and `{1}`)")]
    MultipleVariables(String, String),
    #[error("bad identifier `{0}`")]
    BadIdentifier(String),
    #[error("bad timestamp `{0}`")]
    BadTimestamp(String),
    #[error("clause `{0}` given twice")]
    DuplicateClause(String),
    #[error("clause `{0}` missing")]
    MissingClause(String),
    #[error("policy `{0}` defined twice")]
    DuplicatePolicy(String),
    #[error("{0}")]
    Rule(RuleError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    ColonDash,
    Semi,
    Pipe,
    Amp,
    LParen,
    RParen,
    Comma,
    LBrace,
    RBrace,
    Arrow,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) => write!(f, "`{w}`"),
            Tok::ColonDash => f.write_str("`:-`"),
            Tok::Semi => f.write_str("`;`"),
            Tok::Pipe => f.write_str("`|`"),
            Tok::Amp => f.write_str("`&`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::LBrace => f.write_str("`{`"),
            Tok::RBrace => f.write_str("`}`"),
            Tok::Arrow => f.write_str("`=>`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '@' | ':')
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let mut push = |tok: Tok, width: usize, i: &mut usize, col: &mut usize| {
            out.push(Spanned { tok, line: tl, col: tc });
            *i += width;
            *col += width;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                i += 1;
                col += 1;
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            ':' if chars.get(i + 1) == Some(&'-') => push(Tok::ColonDash, 2, &mut i, &mut col),
            '=' if chars.get(i + 1) == Some(&'>') => push(Tok::Arrow, 2, &mut i, &mut col),
            ';' => push(Tok::Semi, 1, &mut i, &mut col),
            '|' => push(Tok::Pipe, 1, &mut i, &mut col),
            '&' => push(Tok::Amp, 1, &mut i, &mut col),
            '(' => push(Tok::LParen, 1, &mut i, &mut col),
            ')' => push(Tok::RParen, 1, &mut i, &mut col),
            ',' => push(Tok::Comma, 1, &mut i, &mut col),
            '{' => push(Tok::LBrace, 1, &mut i, &mut col),
            '}' => push(Tok::RBrace, 1, &mut i, &mut col),
            c if is_word_char(c) => {
                let start = i;
                while i < chars.len() && is_word_char(chars[i]) && !(chars[i] == ':' && chars.get(i + 1) == Some(&'-'))
                {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                col += i - start;
                out.push(Spanned { tok: Tok::Word(word), line: tl, col: tc });
            }
            other => {
                return Err(ParseError {
                    line,
                    col,
                    kind: ParseErrorKind::Syntax(format!("unexpected character `{other}`")),
                })
            }
        }
    }
    out.push(Spanned { tok: Tok::Eof, line, col });
    Ok(out)
}

/// Parses a timestamp: integer seconds, or an ISO-8601 UTC date-time such as
/// `2018-01-01T00:00Z`.
pub(crate) fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(n) = s.parse::<i64>() {
        return Some(n);
    }
    let trimmed = s.strip_suffix('Z').unwrap_or(s);
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(trimmed, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    chrono::NaiveDate::parse_from_str(trimmed, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

type PResult<T> = Result<T, ParseError>;
/// An atom and the variable it binds, if any.
type BoundAtom = (Atom, Option<String>);

impl Parser {
    fn new(src: &str) -> PResult<Parser> {
        Ok(Parser { toks: lex(src)?, pos: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn here(&self) -> (usize, usize) {
        let t = &self.toks[self.pos];
        (t.line, t.col)
    }

    fn err<T>(&self, kind: ParseErrorKind) -> PResult<T> {
        let (line, col) = self.here();
        Err(ParseError { line, col, kind })
    }

    fn err_at<T>(&self, at: (usize, usize), kind: ParseErrorKind) -> PResult<T> {
        Err(ParseError { line: at.0, col: at.1, kind })
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> PResult<()> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            let got = self.peek().clone();
            self.err(ParseErrorKind::Syntax(format!("expected {want}, found {got}")))
        }
    }

    fn word(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Word(w) => {
                self.bump();
                Ok(w)
            }
            other => self.err(ParseErrorKind::Syntax(format!("expected identifier, found {other}"))),
        }
    }

    fn ident(&mut self) -> PResult<String> {
        let at = self.here();
        let w = self.word()?;
        if !is_ident(&w) {
            return self.err_at(at, ParseErrorKind::BadIdentifier(w));
        }
        Ok(w)
    }

    /// Returns the term plus the variable name when it is one.
    fn term(&mut self) -> PResult<(Term, Option<String>)> {
        let at = self.here();
        let w = self.word()?;
        if w.starts_with(|c: char| c.is_ascii_uppercase()) {
            if !w.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return self.err_at(at, ParseErrorKind::BadIdentifier(w));
            }
            Ok((Term::Var, Some(w)))
        } else if is_ident(&w) {
            Ok((Term::Id(w), None))
        } else {
            self.err_at(at, ParseErrorKind::BadIdentifier(w))
        }
    }

    fn atom(&mut self) -> PResult<BoundAtom> {
        let at = self.here();
        let name = self.word()?;
        let with_parens = |p: &mut Parser, f: &mut dyn FnMut(&mut Parser) -> PResult<BoundAtom>| {
            p.expect(Tok::LParen)?;
            let r = f(p)?;
            p.expect(Tok::RParen)?;
            Ok(r)
        };
        match name.as_str() {
            "true" => Ok((Atom::True, None)),
            "false" => Ok((Atom::False, None)),
            "fdonly" => Ok((Atom::FdOnly, None)),
            "key" => with_parens(self, &mut |p| {
                let (t, v) = p.term()?;
                Ok((Atom::Key(t), v))
            }),
            "region" => with_parens(self, &mut |p| Ok((Atom::RegionIs(Region::new(p.ident()?)), None))),
            "in" | "notin" => {
                let negated = name == "notin";
                with_parens(self, &mut |p| {
                    let list = ListId::new(p.ident()?);
                    p.expect(Tok::Comma)?;
                    let (t, v) = p.term()?;
                    Ok((if negated { Atom::ListLacks(list, t) } else { Atom::ListHas(list, t) }, v))
                })
            }
            "after" => with_parens(self, &mut |p| {
                let at = p.here();
                let w = p.word()?;
                match parse_timestamp(&w) {
                    Some(ts) => Ok((Atom::TimeAfter(ts), None)),
                    None => p.err_at(at, ParseErrorKind::BadTimestamp(w)),
                }
            }),
            _ => self.err_at(at, ParseErrorKind::UnknownPredicate(name)),
        }
    }

    fn conj(&mut self) -> PResult<Vec<Atom>> {
        let start = self.here();
        let mut atoms = Vec::new();
        let mut var: Option<String> = None;
        loop {
            let (a, v) = self.atom()?;
            if let Some(v) = v {
                match &var {
                    Some(existing) if *existing != v => {
                        return self.err_at(start, ParseErrorKind::MultipleVariables(existing.clone(), v));
                    }
                    _ => var = Some(v),
                }
            }
            atoms.push(a);
            if *self.peek() == Tok::Amp {
                self.bump();
            } else {
                break;
            }
        }
        if let Some(v) = var {
            if !atoms.contains(&Atom::Key(Term::Var)) {
                return self.err_at(start, ParseErrorKind::UnboundVariable(v));
            }
        }
        Ok(atoms)
    }

    fn dnf(&mut self) -> PResult<Rule> {
        let start = self.here();
        let mut conjuncts = vec![self.conj()?];
        while *self.peek() == Tok::Pipe {
            self.bump();
            conjuncts.push(self.conj()?);
        }
        Rule::from_conjuncts(conjuncts).or_else(|e| self.err_at(start, ParseErrorKind::Rule(e)))
    }

    fn declass(&mut self) -> PResult<DeclassRule> {
        let at = self.here();
        let w = self.word()?;
        if w != "propagate" {
            return self.err_at(at, ParseErrorKind::Syntax(format!("expected `propagate`, found `{w}`")));
        }
        let mut d = DeclassRule::propagate();
        while let Tok::Word(w) = self.peek() {
            if w != "until" {
                break;
            }
            self.bump();
            let at = self.here();
            let trigger = self.conj()?;
            self.expect(Tok::Arrow)?;
            let result = self.dnf()?;
            d = d.with_escape(trigger, result).or_else(|e| self.err_at(at, ParseErrorKind::Rule(e)))?;
        }
        Ok(d)
    }

    /// Parses the three clauses, stopping at `}` or end of input.
    fn body(&mut self) -> PResult<Policy> {
        let (mut read, mut update, mut declassify) = (None, None, None);
        while !matches!(self.peek(), Tok::RBrace | Tok::Eof) {
            let at = self.here();
            let clause = self.word()?;
            self.expect(Tok::ColonDash)?;
            let dup = |p: &Parser| p.err_at::<()>(at, ParseErrorKind::DuplicateClause(clause.clone()));
            match clause.as_str() {
                "read" => {
                    if read.is_some() {
                        dup(self)?;
                    }
                    read = Some(self.dnf()?);
                }
                "update" => {
                    if update.is_some() {
                        dup(self)?;
                    }
                    update = Some(self.dnf()?);
                }
                "declassify" => {
                    if declassify.is_some() {
                        dup(self)?;
                    }
                    declassify = Some(self.declass()?);
                }
                _ => {
                    return self.err_at(at, ParseErrorKind::Syntax(format!("unknown clause `{clause}`")));
                }
            }
            self.expect(Tok::Semi)?;
        }
        let missing = |name: &str| ParseErrorKind::MissingClause(name.to_owned());
        let read = match read {
            Some(r) => r,
            None => return self.err(missing("read")),
        };
        let update = match update {
            Some(r) => r,
            None => return self.err(missing("update")),
        };
        let declassify = match declassify {
            Some(r) => r,
            None => return self.err(missing("declassify")),
        };
        Ok(Policy::new(read, update, declassify))
    }
}

/// Parses a bare policy body: `read :- ...; update :- ...; declassify :- ...;`.
pub fn parse_policy(text: &str) -> Result<Policy, ParseError> {
    let mut p = Parser::new(text)?;
    let policy = p.body()?;
    p.expect(Tok::Eof)?;
    Ok(policy)
}

/// Parses a single DNF rule such as `key(X) & in(bob.friends, X) | key(bob)`.
pub fn parse_rule(text: &str) -> Result<Rule, ParseError> {
    let mut p = Parser::new(text)?;
    let r = p.dnf()?;
    p.expect(Tok::Eof)?;
    Ok(r)
}

/// Named policies, as loaded from a policy file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicySet {
    policies: BTreeMap<String, Arc<Policy>>,
}

impl PolicySet {
    pub fn new() -> PolicySet {
        PolicySet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, policy: Policy) -> Option<Arc<Policy>> {
        self.policies.insert(name.into(), Arc::new(policy))
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Policy>> {
        self.policies.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Policy>)> {
        self.policies.iter()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Canonical file text, one block per line, sorted by name.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (name, p) in &self.policies {
            out.push_str(&p.serialize_named(name));
            out.push('\n');
        }
        out
    }
}

/// Parses a policy file made of `policy NAME { ... }` blocks.
pub fn parse_policy_file(text: &str) -> Result<PolicySet, ParseError> {
    let mut p = Parser::new(text)?;
    let mut set = PolicySet::new();
    while *p.peek() != Tok::Eof {
        let at = p.here();
        let kw = p.word()?;
        if kw != "policy" {
            return p.err_at(at, ParseErrorKind::Syntax(format!("expected `policy`, found `{kw}`")));
        }
        let name_at = p.here();
        let name = p.ident()?;
        p.expect(Tok::LBrace)?;
        let policy = p.body()?;
        p.expect(Tok::RBrace)?;
        if set.insert(name.clone(), policy).is_some() {
            return p.err_at(name_at, ParseErrorKind::DuplicatePolicy(name));
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_permissive_read() {
        let p = parse_policy("read :- true; update :- key(admin); declassify :- propagate;").unwrap();
        assert!(p.read().is_true());
        assert_eq!(p.update(), &Rule::only("admin"));
        assert!(p.declassify().is_empty());
        assert_eq!(p.serialize(), "read :- true; update :- key(admin); declassify :- propagate;");
    }

    #[test]
    fn false_read_denies() {
        let p = parse_policy("read :- false; update :- false; declassify :- propagate;").unwrap();
        assert!(p.read().is_false());
    }

    #[test]
    fn escapes_and_iso_timestamps() {
        let p = parse_policy(
            "read :- key(alice); update :- key(alice);\n\
             declassify :- propagate until after(2018-01-01T00:00Z) => true until fdonly => true;",
        )
        .unwrap();
        assert_eq!(p.declassify().escapes().count(), 2);
        assert!(p.serialize().contains("after(1514764800)"));
        assert_eq!(parse_timestamp("2018-01-01"), Some(1514764800));
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse_policy("read :- key(alice)\n; update :- frob(x); declassify :- propagate;").unwrap_err();
        assert_eq!((e.line, e.col), (2, 13));
        assert_eq!(e.kind, ParseErrorKind::UnknownPredicate("frob".into()));

        let e = parse_rule("in(bob.friends, X)").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnboundVariable("X".into()));

        let e = parse_rule("key(X) & in(l, Y)").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::MultipleVariables(..)));

        let e = parse_policy("read :- true; update :- true;").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::MissingClause("declassify".into()));

        let e = parse_policy("read :- true; read :- true; update :- true; declassify :- propagate;").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::DuplicateClause("read".into()));

        let e = parse_policy("read :- key(alice; update :- true; declassify :- propagate;").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Syntax(_)));
    }

    #[test]
    fn triggers_reject_session_atoms() {
        let e =
            parse_policy("read :- true; update :- true; declassify :- propagate until key(a) => true;").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Rule(RuleError::BadTrigger(_))));
    }

    #[test]
    fn policy_files_with_comments() {
        let text = "# Sys-E policies\n\
                    policy public { read :- true; update :- key(admin); declassify :- propagate; }\n\
                    policy bob_friends { # shared with friends\n read :- key(bob) | key(Y) & in(bob.friends, Y);\n update :- key(bob); declassify :- propagate until fdonly => true; }\n";
        let set = parse_policy_file(text).unwrap();
        assert_eq!(set.len(), 2);
        let reparsed = parse_policy_file(&set.serialize()).unwrap();
        assert_eq!(reparsed, set);
        assert!(set.serialize().contains("in(bob.friends, X)"));
    }

    #[test]
    fn duplicate_policy_names() {
        let text = "policy a { read :- true; update :- true; declassify :- propagate; }\n\
                    policy a { read :- false; update :- true; declassify :- propagate; }";
        let e = parse_policy_file(text).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::DuplicatePolicy("a".into()));
        assert_eq!(e.line, 2);
    }
}
