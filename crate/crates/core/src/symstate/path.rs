//! Dot-separated path expressions over the state, a tool result, or a
//! quantifier binder.
//!
//! ```text
//! path    = root { "." segment | "[" path "]" }
//! root    = "state" | "result" | binder
//! segment = identifier | digits
//! ```
//!
//! A bracketed segment is an indirect lookup: the inner path is resolved and
//! its text (or integral number) is used as the key (or index).

use std::fmt;

use thiserror::Error;

use super::state::SymbolicState;
use super::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PathRoot {
    State,
    Result,
    Binder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Segment {
    Key(String),
    Index(usize),
    Lookup(Box<Path>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path {
    pub root: PathRoot,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed path at byte {offset}: {message}")]
pub struct MalformedPath {
    pub offset: usize,
    pub message: String,
}

/// Everything a path can be resolved against.
#[derive(Clone, Copy)]
pub struct PathContext<'a, 'b> {
    pub state: &'a SymbolicState,
    pub result: Option<&'a Value>,
    pub bindings: &'b [(&'b str, &'a Value)],
}

impl<'a> PathContext<'a, '_> {
    pub fn new(state: &'a SymbolicState, result: Option<&'a Value>) -> Self {
        PathContext {
            state,
            result,
            bindings: &[],
        }
    }
}

pub(crate) fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

pub(crate) fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn is_segment_char(c: char) -> bool {
    is_ident_char(c) || c == '-'
}

/// True when `key` can be written as a plain key segment.
pub fn is_plain_key(key: &str) -> bool {
    !key.is_empty() && key.chars().all(is_segment_char) && !key.chars().all(|c| c.is_ascii_digit())
}

impl Path {
    pub fn state(key: &str) -> Self {
        Path {
            root: PathRoot::State,
            segments: vec![Segment::Key(key.to_string())],
        }
    }

    pub fn result() -> Self {
        Path {
            root: PathRoot::Result,
            segments: Vec::new(),
        }
    }

    pub fn binder(name: &str) -> Self {
        Path {
            root: PathRoot::Binder(name.to_string()),
            segments: Vec::new(),
        }
    }

    pub fn key(mut self, key: &str) -> Self {
        self.segments.push(Segment::Key(key.to_string()));
        self
    }

    pub fn index(mut self, index: usize) -> Self {
        self.segments.push(Segment::Index(index));
        self
    }

    pub fn lookup(mut self, inner: Path) -> Self {
        self.segments.push(Segment::Lookup(Box::new(inner)));
        self
    }

    /// Parses a complete path expression.
    pub fn parse(text: &str) -> Result<Path, MalformedPath> {
        let (path, used) = Path::parse_prefix(text)?;
        if used != text.len() {
            return Err(MalformedPath {
                offset: used,
                message: "trailing characters".into(),
            });
        }
        Ok(path)
    }

    /// Parses the longest path at the start of `text`, returning it with the
    /// number of bytes consumed.
    pub fn parse_prefix(text: &str) -> Result<(Path, usize), MalformedPath> {
        let mut parser = PathParser { text, pos: 0 };
        let path = parser.path()?;
        Ok((path, parser.pos))
    }

    /// The state key a `state.`-rooted path starts from.
    pub fn state_key(&self) -> Option<&str> {
        match (&self.root, self.segments.first()) {
            (PathRoot::State, Some(Segment::Key(k))) => Some(k),
            _ => None,
        }
    }

    /// Visits this path and every path nested in lookup segments.
    pub fn for_each_path<'p>(&'p self, f: &mut dyn FnMut(&'p Path)) {
        f(self);
        for seg in &self.segments {
            if let Segment::Lookup(inner) = seg {
                inner.for_each_path(f);
            }
        }
    }

    pub fn resolve<'a>(&self, ctx: &PathContext<'a, '_>) -> Option<&'a Value> {
        let mut segments = self.segments.iter();
        let mut current: &'a Value = match &self.root {
            PathRoot::State => {
                let key = match segments.next()? {
                    Segment::Key(k) => k.clone(),
                    Segment::Index(i) => i.to_string(),
                    Segment::Lookup(inner) => match inner.resolve(ctx)? {
                        Value::Text(s) => s.clone(),
                        Value::Number(n) => integral_index(*n)?.to_string(),
                        _ => return None,
                    },
                };
                &ctx.state.get(&key)?.value
            }
            PathRoot::Result => ctx.result?,
            PathRoot::Binder(name) => ctx.bindings.iter().rev().find(|(n, _)| n == name)?.1,
        };
        for seg in segments {
            current = step(current, seg, ctx)?;
        }
        Some(current)
    }

    /// Resolves against a bare value standing in for `result` (state-free).
    pub fn resolve_in_value<'a>(&self, value: &'a Value) -> Option<&'a Value> {
        if self.root != PathRoot::Result {
            return None;
        }
        let mut current = value;
        for seg in &self.segments {
            current = match seg {
                Segment::Key(k) => current.as_record()?.get(k)?,
                Segment::Index(i) => index_into(current, *i)?,
                Segment::Lookup(_) => return None,
            };
        }
        Some(current)
    }
}

fn integral_index(n: f64) -> Option<usize> {
    if n >= 0.0 && n.fract() == 0.0 && n < usize::MAX as f64 {
        Some(n as usize)
    } else {
        None
    }
}

fn index_into(value: &Value, index: usize) -> Option<&Value> {
    match value {
        Value::List(items) => items.get(index),
        Value::Record(fields) => fields.get(&index.to_string()),
        _ => None,
    }
}

fn step<'a>(value: &'a Value, seg: &Segment, ctx: &PathContext<'a, '_>) -> Option<&'a Value> {
    match seg {
        Segment::Key(k) => value.as_record()?.get(k),
        Segment::Index(i) => index_into(value, *i),
        Segment::Lookup(inner) => match inner.resolve(ctx)? {
            Value::Text(s) => value.as_record()?.get(s),
            Value::Number(n) => index_into(value, integral_index(*n)?),
            _ => None,
        },
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.root {
            PathRoot::State => f.write_str("state")?,
            PathRoot::Result => f.write_str("result")?,
            PathRoot::Binder(name) => f.write_str(name)?,
        }
        for seg in &self.segments {
            match seg {
                Segment::Key(k) => write!(f, ".{k}")?,
                Segment::Index(i) => write!(f, ".{i}")?,
                Segment::Lookup(inner) => write!(f, "[{inner}]")?,
            }
        }
        Ok(())
    }
}

struct PathParser<'t> {
    text: &'t str,
    pos: usize,
}

impl PathParser<'_> {
    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, MalformedPath> {
        Err(MalformedPath {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take_while(&mut self, pred: fn(char) -> bool) -> &str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.text[start..self.pos]
    }

    fn path(&mut self) -> Result<Path, MalformedPath> {
        match self.peek() {
            Some(c) if is_ident_start(c) => {}
            _ => return self.err("expected `state`, `result`, or a binder name"),
        }
        let root = match self.take_while(is_ident_char) {
            "state" => PathRoot::State,
            "result" => PathRoot::Result,
            other => PathRoot::Binder(other.to_string()),
        };
        let mut segments = Vec::new();
        loop {
            match self.peek() {
                Some('.') => {
                    self.pos += 1;
                    let seg = self.take_while(is_segment_char);
                    if seg.is_empty() {
                        return self.err("empty path segment");
                    }
                    if seg.chars().all(|c| c.is_ascii_digit()) {
                        match seg.parse::<usize>() {
                            Ok(i) => segments.push(Segment::Index(i)),
                            Err(_) => return self.err("list index out of range"),
                        }
                    } else {
                        segments.push(Segment::Key(seg.to_string()));
                    }
                }
                Some('[') => {
                    self.pos += 1;
                    let inner = self.path()?;
                    if self.peek() != Some(']') {
                        return self.err("expected `]`");
                    }
                    self.pos += 1;
                    segments.push(Segment::Lookup(Box::new(inner)));
                }
                _ => break,
            }
        }
        if root == PathRoot::State && segments.is_empty() {
            return self.err("`state` must be followed by a key");
        }
        Ok(Path { root, segments })
    }
}

impl serde::Serialize for Path {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for Path {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Path::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_renders() {
        for text in [
            "state.topic",
            "result",
            "result.results.0.title",
            "v.url",
            "state.fs[state.cwd]",
        ] {
            assert_eq!(Path::parse(text).unwrap().to_string(), text);
        }
    }

    #[test]
    fn rejects_malformed() {
        for text in [
            "",
            "state",
            "state.",
            "state..a",
            ".a",
            "state.fs[state.cwd",
            "state.a b",
            "9x",
        ] {
            assert!(Path::parse(text).is_err(), "{text:?} should be malformed");
        }
    }

    #[test]
    fn prefix_stops_at_non_path_chars() {
        let (p, used) = Path::parse_prefix("result.x = 3").unwrap();
        assert_eq!(p, Path::result().key("x"));
        assert_eq!(used, "result.x".len());
    }

    #[test]
    fn resolves_in_bare_value() {
        let v = Value::from_json(r#"{"results":[{"title":"a"}]}"#).unwrap();
        let p = Path::parse("result.results.0.title").unwrap();
        assert_eq!(p.resolve_in_value(&v), Some(&Value::text("a")));
    }
}
