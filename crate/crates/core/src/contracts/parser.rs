//! Recursive-descent parser for the contract predicate language.
//!
//! ```text
//! predicate  = disjunct ;
//! disjunct   = conjunct { ("or" | "||") conjunct } ;
//! conjunct   = unary { ("and" | "&&") unary } ;
//! unary      = ("not" | "!") unary | quantifier | primary ;
//! quantifier = "forall" ident "in" path ":" predicate ;
//! primary    = "true" | "false" | "(" predicate ")" | atom | comparison ;
//! atom       = atom_name "(" path [ "," string ] ")" | "exists" "(" ( "state." key | key ) ")" ;
//! atom_name  = "has_field" | "is_list" | "is_numeric" | "is_text" | "is_record" | "non_empty" ;
//! comparison = path cmp_op ( literal | path ) ;
//! cmp_op     = "=" | "==" | "!=" | "<" | "<=" | ">" | ">=" ;
//! literal    = number | string | "true" | "false" | "null" ;
//! ```
//!
//! A quantifier body extends as far to the right as possible. The two-argument
//! atom form `has_field(v, "title")` is shorthand for `has_field(v.title)`.

use thiserror::Error;

use super::predicate::{
    path_is_renderable, CompareOp, Operand, Predicate, DEFAULT_MAX_PREDICATE_DEPTH,
};
use crate::symstate::{is_plain_key, Path, PathRoot, Segment, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("binder `{name}` is used outside a forall that binds it ({line}:{column})")]
    BinderUnbound {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("precondition reads `{path}`; preconditions may only read `state.` paths")]
    NamespaceViolation { path: String },
    #[error("predicate nesting exceeds {limit}")]
    TooDeep { limit: usize },
}

const KEYWORDS: &[&str] = &[
    "true",
    "false",
    "null",
    "and",
    "or",
    "not",
    "forall",
    "in",
    "state",
    "result",
    "exists",
    "has_field",
    "is_list",
    "is_numeric",
    "is_text",
    "is_record",
    "non_empty",
];

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub max_depth: usize,
    /// Accept binder paths with no enclosing quantifier. Used when reading
    /// back failing atoms that were reported from inside a `forall` body.
    pub allow_free_binders: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            max_depth: DEFAULT_MAX_PREDICATE_DEPTH,
            allow_free_binders: false,
        }
    }
}

pub fn parse_predicate(source: &str) -> Result<Predicate, ParseError> {
    parse_predicate_with(source, ParseOptions::default())
}

/// Parses a precondition and enforces that it reads only the state.
pub fn parse_precondition(source: &str) -> Result<Predicate, ParseError> {
    let p = parse_predicate(source)?;
    check_namespace(&p)?;
    Ok(p)
}

pub fn check_namespace(p: &Predicate) -> Result<(), ParseError> {
    match p
        .paths()
        .into_iter()
        .find(|path| path.root == PathRoot::Result)
    {
        Some(path) => Err(ParseError::NamespaceViolation {
            path: path.to_string(),
        }),
        None => Ok(()),
    }
}

pub fn parse_predicate_with(source: &str, options: ParseOptions) -> Result<Predicate, ParseError> {
    let mut parser = Parser {
        src: source,
        pos: 0,
        scope: Vec::new(),
        depth: 0,
        options,
    };
    parser.skip_ws();
    if parser.at_end() {
        return parser.syntax("empty predicate");
    }
    let p = parser.disjunct()?;
    parser.skip_ws();
    if !parser.at_end() {
        return parser.syntax("unexpected trailing input");
    }
    Ok(p)
}

struct Parser<'s> {
    src: &'s str,
    pos: usize,
    scope: Vec<String>,
    depth: usize,
    options: ParseOptions,
}

impl<'s> Parser<'s> {
    fn rest(&self) -> &'s str {
        &self.src[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn line_col(&self, pos: usize) -> (usize, usize) {
        let before = &self.src[..pos];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        (line, column)
    }

    fn syntax<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        self.syntax_at(self.pos, message)
    }

    fn syntax_at<T>(&self, pos: usize, message: impl Into<String>) -> Result<T, ParseError> {
        let (line, column) = self.line_col(pos);
        Err(ParseError::Syntax {
            line,
            column,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), ParseError> {
        if self.eat(token) {
            Ok(())
        } else {
            self.syntax(format!("expected `{token}`"))
        }
    }

    /// The identifier at the cursor, without consuming it.
    fn peek_ident(&mut self) -> Option<&'s str> {
        self.skip_ws();
        let rest = self.rest();
        let first = rest.chars().next()?;
        if !crate::symstate::is_ident_start(first) {
            return None;
        }
        let end = rest
            .find(|c: char| !crate::symstate::is_ident_char(c))
            .unwrap_or(rest.len());
        Some(&rest[..end])
    }

    fn eat_keyword(&mut self, word: &str) -> bool {
        if self.peek_ident() == Some(word) {
            self.pos += word.len();
            true
        } else {
            false
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > self.options.max_depth {
            return Err(ParseError::TooDeep {
                limit: self.options.max_depth,
            });
        }
        Ok(())
    }

    fn disjunct(&mut self) -> Result<Predicate, ParseError> {
        let first = self.conjunct()?;
        let mut items = vec![first];
        loop {
            if self.eat_keyword("or") || self.eat("||") {
                items.push(self.conjunct()?);
            } else {
                break;
            }
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Predicate::Or(items)
        })
    }

    fn conjunct(&mut self) -> Result<Predicate, ParseError> {
        let first = self.unary()?;
        let mut items = vec![first];
        loop {
            if self.eat_keyword("and") || self.eat("&&") {
                items.push(self.unary()?);
            } else {
                break;
            }
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Predicate::And(items)
        })
    }

    fn unary(&mut self) -> Result<Predicate, ParseError> {
        self.skip_ws();
        let negated = if self.eat_keyword("not") {
            true
        } else if self.rest().starts_with('!') && !self.rest().starts_with("!=") {
            self.pos += 1;
            true
        } else {
            false
        };
        if negated {
            self.enter()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Predicate::not(inner));
        }
        if self.eat_keyword("forall") {
            return self.quantifier();
        }
        self.primary()
    }

    fn quantifier(&mut self) -> Result<Predicate, ParseError> {
        self.enter()?;
        let at = self.pos;
        let binder = match self.peek_ident() {
            Some(name) if !KEYWORDS.contains(&name) => name.to_string(),
            Some(name) => {
                return self.syntax_at(at, format!("`{name}` cannot be used as a binder name"))
            }
            None => return self.syntax("expected a binder name after `forall`"),
        };
        self.pos += binder.len();
        if !self.eat_keyword("in") {
            return self.syntax("expected `in`");
        }
        let list = self.path()?;
        self.expect(":")?;
        self.scope.push(binder.clone());
        let body = self.disjunct();
        self.scope.pop();
        self.depth -= 1;
        Ok(Predicate::ForAll {
            list,
            binder,
            body: Box::new(body?),
        })
    }

    fn primary(&mut self) -> Result<Predicate, ParseError> {
        self.skip_ws();
        if self.eat("(") {
            self.enter()?;
            let inner = self.disjunct()?;
            self.expect(")")?;
            self.depth -= 1;
            return Ok(inner);
        }
        let Some(word) = self.peek_ident() else {
            return self.syntax("expected a predicate");
        };
        match word {
            "true" => {
                self.pos += 4;
                Ok(Predicate::True)
            }
            "false" => {
                self.pos += 5;
                Ok(Predicate::False)
            }
            "exists" => {
                self.pos += word.len();
                self.exists()
            }
            "has_field" | "is_list" | "is_numeric" | "is_text" | "is_record" | "non_empty" => {
                self.pos += word.len();
                let path = self.atom_argument()?;
                Ok(match word {
                    "has_field" => Predicate::HasField(path),
                    "is_list" => Predicate::IsList(path),
                    "is_numeric" => Predicate::IsNumeric(path),
                    "is_text" => Predicate::IsText(path),
                    "is_record" => Predicate::IsRecord(path),
                    _ => Predicate::NonEmpty(path),
                })
            }
            _ => self.comparison(),
        }
    }

    fn exists(&mut self) -> Result<Predicate, ParseError> {
        self.expect("(")?;
        self.skip_ws();
        let at = self.pos;
        let key = if self.rest().starts_with("state.") {
            let path = self.path()?;
            match path.segments.as_slice() {
                [Segment::Key(k)] => k.clone(),
                _ => {
                    return self.syntax_at(
                        at,
                        "exists takes a single state key; use has_field for nested paths",
                    )
                }
            }
        } else {
            match self.peek_ident() {
                Some(k) if !KEYWORDS.contains(&k) => {
                    self.pos += k.len();
                    k.to_string()
                }
                _ => return self.syntax("expected a state key"),
            }
        };
        self.expect(")")?;
        Ok(Predicate::Exists(key))
    }

    fn atom_argument(&mut self) -> Result<Path, ParseError> {
        self.expect("(")?;
        let mut path = self.path()?;
        if self.eat(",") {
            self.skip_ws();
            let at = self.pos;
            let field = self.string()?;
            if !is_plain_key(&field) {
                return self.syntax_at(at, format!("field name {field:?} is not a plain key"));
            }
            path = path.key(&field);
        }
        self.expect(")")?;
        Ok(path)
    }

    fn path(&mut self) -> Result<Path, ParseError> {
        self.skip_ws();
        let at = self.pos;
        let (path, used) = match Path::parse_prefix(self.rest()) {
            Ok(ok) => ok,
            Err(e) => return self.syntax_at(at + e.offset, e.message),
        };
        if !path_is_renderable(&path) {
            return self.syntax_at(at, "path contains an unsupported key");
        }
        let mut unbound = None;
        path.for_each_path(&mut |p| {
            if let PathRoot::Binder(name) = &p.root {
                if unbound.is_none()
                    && (KEYWORDS.contains(&name.as_str()) || !self.scope.contains(name))
                {
                    unbound = Some(name.clone());
                }
            }
        });
        if let Some(name) = unbound {
            if KEYWORDS.contains(&name.as_str()) {
                return self.syntax_at(at, format!("unexpected keyword `{name}`"));
            }
            if !self.options.allow_free_binders {
                let (line, column) = self.line_col(at);
                return Err(ParseError::BinderUnbound { name, line, column });
            }
        }
        self.pos += used;
        Ok(path)
    }

    fn comparison(&mut self) -> Result<Predicate, ParseError> {
        let lhs = self.path()?;
        self.skip_ws();
        let op = if self.eat("==") || self.eat("=") {
            CompareOp::Eq
        } else if self.eat("!=") {
            CompareOp::Ne
        } else if self.eat("<=") {
            CompareOp::Le
        } else if self.eat(">=") {
            CompareOp::Ge
        } else if self.eat("<") {
            CompareOp::Lt
        } else if self.eat(">") {
            CompareOp::Gt
        } else {
            return self.syntax("expected a comparison operator");
        };
        self.skip_ws();
        let rhs = match self.peek() {
            Some('"') => Operand::Literal(Value::Text(self.string()?)),
            Some(c) if c == '-' || c.is_ascii_digit() => {
                Operand::Literal(Value::Number(self.number()?))
            }
            _ => match self.peek_ident() {
                Some("true") => {
                    self.pos += 4;
                    Operand::Literal(Value::Bool(true))
                }
                Some("false") => {
                    self.pos += 5;
                    Operand::Literal(Value::Bool(false))
                }
                Some("null") => {
                    self.pos += 4;
                    Operand::Literal(Value::Null)
                }
                Some(_) => Operand::Path(self.path()?),
                None => return self.syntax("expected a literal or a path"),
            },
        };
        Ok(Predicate::Compare { lhs, op, rhs })
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        let rest = self.rest();
        let bytes = rest.as_bytes();
        let mut end = 0;
        if bytes.first() == Some(&b'-') {
            end += 1;
        }
        let digits = |from: usize| {
            from + bytes[from..]
                .iter()
                .take_while(|b| b.is_ascii_digit())
                .count()
        };
        let int_end = digits(end);
        if int_end == end {
            return self.syntax("expected digits");
        }
        end = int_end;
        if bytes.get(end) == Some(&b'.') {
            let frac_end = digits(end + 1);
            if frac_end == end + 1 {
                return self.syntax_at(self.pos + end + 1, "expected digits after `.`");
            }
            end = frac_end;
        }
        if matches!(bytes.get(end), Some(b'e' | b'E')) {
            let mut exp = end + 1;
            if matches!(bytes.get(exp), Some(b'+' | b'-')) {
                exp += 1;
            }
            let exp_end = digits(exp);
            if exp_end == exp {
                return self.syntax_at(self.pos + exp, "expected exponent digits");
            }
            end = exp_end;
        }
        let value: f64 = rest[..end].parse().map_err(|_| ParseError::Syntax {
            line: self.line_col(self.pos).0,
            column: self.line_col(self.pos).1,
            message: "invalid number".into(),
        })?;
        if !value.is_finite() {
            return self.syntax("number out of range");
        }
        self.pos += end;
        Ok(value)
    }

    /// A JSON string literal.
    fn string(&mut self) -> Result<String, ParseError> {
        let rest = self.rest();
        if !rest.starts_with('"') {
            return self.syntax("expected a string literal");
        }
        let mut escaped = false;
        let mut close = None;
        for (i, c) in rest.char_indices().skip(1) {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                close = Some(i);
                break;
            }
        }
        let Some(close) = close else {
            return self.syntax("unterminated string literal");
        };
        match serde_json::from_str::<String>(&rest[..=close]) {
            Ok(s) => {
                self.pos += close + 1;
                Ok(s)
            }
            Err(e) => self.syntax(format!("invalid string literal: {e}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(src: &str) -> Predicate {
        parse_predicate(src).unwrap_or_else(|e| panic!("{src}: {e}"))
    }

    #[test]
    fn exists_forms() {
        assert_eq!(p("exists(state.query)"), Predicate::Exists("query".into()));
        assert_eq!(p("exists(query)"), Predicate::Exists("query".into()));
        assert!(parse_predicate("exists(state.a.b)").is_err());
    }

    #[test]
    fn constants() {
        assert_eq!(p("true"), Predicate::True);
        assert_eq!(p("  false "), Predicate::False);
    }

    #[test]
    fn youtube_postcondition() {
        let got = p("has_field(result.results) and is_list(result.results) and \
                     forall v in result.results: has_field(v.title) and has_field(v.url)");
        let results = Path::result().key("results");
        let expected = Predicate::And(vec![
            Predicate::HasField(results.clone()),
            Predicate::IsList(results.clone()),
            Predicate::forall(
                "v",
                results,
                Predicate::And(vec![
                    Predicate::HasField(Path::binder("v").key("title")),
                    Predicate::HasField(Path::binder("v").key("url")),
                ]),
            ),
        ]);
        assert_eq!(got, expected);
        assert_eq!(parse_predicate(&got.to_string()).unwrap(), got);
    }

    #[test]
    fn two_argument_field_form_and_symbol_connectives() {
        let a = p(
            r#"forall video in result.results: has_field(video, "title") && has_field(video, "url")"#,
        );
        let b =
            p("forall video in result.results: has_field(video.title) and has_field(video.url)");
        assert_eq!(a, b);
        assert_eq!(
            p("!exists(x) || exists(y)"),
            p("not exists(state.x) or exists(state.y)")
        );
    }

    #[test]
    fn comparisons() {
        assert_eq!(
            p(r#"state.id = "u-42""#),
            Predicate::compare(
                Path::state("id"),
                CompareOp::Eq,
                Operand::Literal(Value::text("u-42"))
            )
        );
        assert_eq!(
            p("result.temp >= -3.5e1"),
            Predicate::compare(
                Path::result().key("temp"),
                CompareOp::Ge,
                Operand::Literal(Value::Number(-35.0))
            )
        );
        assert_eq!(
            p("result == state.fs[state.cwd]"),
            Predicate::compare(
                Path::result(),
                CompareOp::Eq,
                Operand::Path(Path::state("fs").lookup(Path::state("cwd")))
            )
        );
        assert!(matches!(
            p("state.flag != null"),
            Predicate::Compare {
                op: CompareOp::Ne,
                ..
            }
        ));
    }

    #[test]
    fn precedence() {
        let got = p("exists(a) or exists(b) and not exists(c)");
        assert_eq!(
            got,
            Predicate::Or(vec![
                Predicate::Exists("a".into()),
                Predicate::And(vec![
                    Predicate::Exists("b".into()),
                    Predicate::not(Predicate::Exists("c".into()))
                ]),
            ])
        );
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match parse_predicate("exists(a) and\n  has_field(") {
            Err(ParseError::Syntax { line, column, .. }) => assert_eq!((line, column), (2, 13)),
            other => panic!("unexpected {other:?}"),
        }
        for bad in [
            "",
            "exists(",
            "and",
            "state.a",
            "state.a = ",
            "forall in result: true",
            "(true",
            "true false",
        ] {
            assert!(parse_predicate(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn binder_scope_is_static() {
        assert!(matches!(
            parse_predicate("has_field(v.title)"),
            Err(ParseError::BinderUnbound { .. })
        ));
        assert!(matches!(
            parse_predicate("(forall v in result.xs: true) and has_field(v.a)"),
            Err(ParseError::BinderUnbound { .. })
        ));
        let opts = ParseOptions {
            allow_free_binders: true,
            ..Default::default()
        };
        assert!(parse_predicate_with("has_field(v.title)", opts).is_ok());
    }

    #[test]
    fn namespace_rule_for_preconditions() {
        assert!(parse_precondition("exists(state.query)").is_ok());
        assert!(matches!(
            parse_precondition("has_field(result.x)"),
            Err(ParseError::NamespaceViolation { .. })
        ));
        assert!(matches!(
            parse_precondition("state.a = state.b[result.k]"),
            Err(ParseError::NamespaceViolation { .. })
        ));
    }

    #[test]
    fn depth_limit() {
        let deep = format!("{}true", "not ".repeat(100));
        assert_eq!(
            parse_predicate(&deep),
            Err(ParseError::TooDeep { limit: 64 })
        );
        let ok = format!("{}true", "not ".repeat(60));
        assert!(parse_predicate(&ok).is_ok());
    }
}
