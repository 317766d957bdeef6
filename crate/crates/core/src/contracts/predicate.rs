//! Predicate AST, rendering, and two-valued evaluation.

use std::cmp::Ordering;
use std::fmt;

use crate::symstate::{is_plain_key, Path, PathContext, PathRoot, Segment, SymbolicState, Value};

/// Default bound on predicate nesting depth.
pub const DEFAULT_MAX_PREDICATE_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Literal(Value),
    Path(Path),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    True,
    False,
    /// A top-level state key is present.
    Exists(String),
    HasField(Path),
    IsList(Path),
    IsNumeric(Path),
    IsText(Path),
    IsRecord(Path),
    /// Present, not null, and not an empty text, list, or record.
    NonEmpty(Path),
    Compare {
        lhs: Path,
        op: CompareOp,
        rhs: Operand,
    },
    ForAll {
        list: Path,
        binder: String,
        body: Box<Predicate>,
    },
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn compare(lhs: Path, op: CompareOp, rhs: Operand) -> Self {
        Predicate::Compare { lhs, op, rhs }
    }

    pub fn forall(binder: &str, list: Path, body: Predicate) -> Self {
        Predicate::ForAll {
            list,
            binder: binder.to_string(),
            body: Box::new(body),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(inner: Predicate) -> Self {
        Predicate::Not(Box::new(inner))
    }

    pub fn is_atom(&self) -> bool {
        !matches!(
            self,
            Predicate::And(_) | Predicate::Or(_) | Predicate::Not(_) | Predicate::ForAll { .. }
        )
    }

    pub fn depth(&self) -> usize {
        match self {
            Predicate::And(ps) | Predicate::Or(ps) => {
                1 + ps.iter().map(Predicate::depth).max().unwrap_or(0)
            }
            Predicate::Not(inner) => 1 + inner.depth(),
            Predicate::ForAll { body, .. } => 1 + body.depth(),
            _ => 1,
        }
    }

    /// Every path mentioned anywhere in the predicate, including paths
    /// nested in lookup segments.
    pub fn paths(&self) -> Vec<&Path> {
        let mut out = Vec::new();
        self.collect_paths(&mut out);
        out
    }

    fn collect_paths<'p>(&'p self, out: &mut Vec<&'p Path>) {
        let mut push = |p: &'p Path| p.for_each_path(&mut |q| out.push(q));
        match self {
            Predicate::True | Predicate::False | Predicate::Exists(_) => {}
            Predicate::HasField(p)
            | Predicate::IsList(p)
            | Predicate::IsNumeric(p)
            | Predicate::IsText(p)
            | Predicate::IsRecord(p)
            | Predicate::NonEmpty(p) => push(p),
            Predicate::Compare { lhs, rhs, .. } => {
                push(lhs);
                if let Operand::Path(p) = rhs {
                    push(p);
                }
            }
            Predicate::ForAll { list, body, .. } => {
                push(list);
                body.collect_paths(out);
            }
            Predicate::And(ps) | Predicate::Or(ps) => ps.iter().for_each(|p| p.collect_paths(out)),
            Predicate::Not(inner) => inner.collect_paths(out),
        }
    }

    pub fn references_result(&self) -> bool {
        self.paths().iter().any(|p| p.root == PathRoot::Result)
    }

    /// Binder names used outside any enclosing `forall` that binds them.
    pub fn unbound_binders(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.find_unbound(&mut Vec::new(), &mut out);
        out
    }

    fn find_unbound(&self, scope: &mut Vec<String>, out: &mut Vec<String>) {
        let mut check = |p: &Path, scope: &Vec<String>| {
            p.for_each_path(&mut |q| {
                if let PathRoot::Binder(name) = &q.root {
                    if !scope.contains(name) && !out.contains(name) {
                        out.push(name.clone());
                    }
                }
            });
        };
        match self {
            Predicate::ForAll { list, binder, body } => {
                check(list, scope);
                scope.push(binder.clone());
                body.find_unbound(scope, out);
                scope.pop();
            }
            Predicate::And(ps) | Predicate::Or(ps) => {
                ps.iter().for_each(|p| p.find_unbound(scope, out))
            }
            Predicate::Not(inner) => inner.find_unbound(scope, out),
            Predicate::Compare { lhs, rhs, .. } => {
                check(lhs, scope);
                if let Operand::Path(p) = rhs {
                    check(p, scope);
                }
            }
            other => {
                for p in other.paths() {
                    check(p, scope);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation

pub(crate) type Bindings<'b, 'a> = Vec<(&'b str, &'a Value)>;

/// Evaluates `p` against the state, an optional tool result, and quantifier
/// bindings. Absent paths make atoms false; evaluation never fails.
pub fn eval_predicate(
    p: &Predicate,
    state: &SymbolicState,
    result: Option<&Value>,
    bindings: &[(&str, &Value)],
) -> bool {
    let mut scope: Bindings = bindings.to_vec();
    eval_inner(p, state, result, &mut scope)
}

fn resolve<'a>(
    path: &Path,
    state: &'a SymbolicState,
    result: Option<&'a Value>,
    scope: &[(&str, &'a Value)],
) -> Option<&'a Value> {
    path.resolve(&PathContext {
        state,
        result,
        bindings: scope,
    })
}

fn compare_values(lhs: &Value, op: CompareOp, rhs: &Value) -> bool {
    match op {
        CompareOp::Eq => lhs == rhs,
        CompareOp::Ne => lhs != rhs,
        _ => {
            let ord = match (lhs, rhs) {
                (Value::Number(a), Value::Number(b)) => a.partial_cmp(b),
                (Value::Text(a), Value::Text(b)) => Some(a.cmp(b)),
                _ => None,
            };
            match (op, ord) {
                (_, None) => false,
                (CompareOp::Lt, Some(o)) => o == Ordering::Less,
                (CompareOp::Le, Some(o)) => o != Ordering::Greater,
                (CompareOp::Gt, Some(o)) => o == Ordering::Greater,
                (CompareOp::Ge, Some(o)) => o != Ordering::Less,
                _ => unreachable!(),
            }
        }
    }
}

fn eval_inner<'a, 'p>(
    p: &'p Predicate,
    state: &'a SymbolicState,
    result: Option<&'a Value>,
    scope: &mut Vec<(&'p str, &'a Value)>,
) -> bool {
    let get = |path: &Path, scope: &Vec<(&'p str, &'a Value)>| resolve(path, state, result, scope);
    match p {
        Predicate::True => true,
        Predicate::False => false,
        Predicate::Exists(key) => state.contains_key(key),
        Predicate::HasField(path) => get(path, scope).is_some(),
        Predicate::IsList(path) => matches!(get(path, scope), Some(Value::List(_))),
        Predicate::IsNumeric(path) => matches!(get(path, scope), Some(Value::Number(_))),
        Predicate::IsText(path) => matches!(get(path, scope), Some(Value::Text(_))),
        Predicate::IsRecord(path) => matches!(get(path, scope), Some(Value::Record(_))),
        Predicate::NonEmpty(path) => get(path, scope).is_some_and(|v| !v.is_empty_like()),
        Predicate::Compare { lhs, op, rhs } => {
            let Some(l) = get(lhs, scope) else {
                return false;
            };
            match rhs {
                Operand::Literal(r) => compare_values(l, *op, r),
                Operand::Path(rp) => match get(rp, scope) {
                    Some(r) => compare_values(l, *op, r),
                    None => false,
                },
            }
        }
        Predicate::ForAll { list, binder, body } => {
            let Some(Value::List(items)) = get(list, scope) else {
                return false;
            };
            items.iter().all(|item| {
                scope.push((binder.as_str(), item));
                let ok = eval_inner(body, state, result, scope);
                scope.pop();
                ok
            })
        }
        Predicate::And(ps) => ps.iter().all(|q| eval_inner(q, state, result, scope)),
        Predicate::Or(ps) => ps.iter().any(|q| eval_inner(q, state, result, scope)),
        Predicate::Not(inner) => !eval_inner(inner, state, result, scope),
    }
}

/// The atom blamed for a failed evaluation, with a human-readable note.
#[derive(Debug, Clone, PartialEq)]
pub struct FailingAtom {
    pub atom: Predicate,
    pub detail: String,
}

/// Returns the first failing atom under left-to-right evaluation, or `None`
/// when `p` holds.
///
/// `And` blames its first false conjunct. `Or` blames the first disjunct's
/// failing atom. `Not` and `False` are blamed as a whole. A `forall` whose
/// list is absent or not a list is blamed as a whole; otherwise the body's
/// failing atom for the first offending element is reported.
pub fn first_failure(
    p: &Predicate,
    state: &SymbolicState,
    result: Option<&Value>,
) -> Option<FailingAtom> {
    let mut scope = Vec::new();
    failure_inner(p, state, result, &mut scope)
}

fn failure_inner<'a, 'p>(
    p: &'p Predicate,
    state: &'a SymbolicState,
    result: Option<&'a Value>,
    scope: &mut Vec<(&'p str, &'a Value)>,
) -> Option<FailingAtom> {
    match p {
        Predicate::And(ps) => ps
            .iter()
            .find_map(|q| failure_inner(q, state, result, scope)),
        Predicate::Or(ps) => {
            if ps.iter().any(|q| eval_inner(q, state, result, scope)) {
                None
            } else if let Some(first) = ps.first() {
                failure_inner(first, state, result, scope)
            } else {
                Some(FailingAtom {
                    atom: p.clone(),
                    detail: "empty disjunction".into(),
                })
            }
        }
        Predicate::ForAll { list, binder, body } => {
            let Some(Value::List(items)) = resolve(list, state, result, scope) else {
                return Some(FailingAtom {
                    atom: p.clone(),
                    detail: format!("`{list}` is not a present list"),
                });
            };
            for (i, item) in items.iter().enumerate() {
                scope.push((binder.as_str(), item));
                let found = failure_inner(body, state, result, scope);
                scope.pop();
                if let Some(mut f) = found {
                    f.detail = format!("{} (for {binder} = element {i} of `{list}`)", f.detail);
                    return Some(f);
                }
            }
            None
        }
        atom => {
            if eval_inner(atom, state, result, scope) {
                None
            } else {
                let detail = match atom.paths().first() {
                    Some(path) if resolve(path, state, result, scope).is_none() => {
                        format!("`{path}` is absent")
                    }
                    _ => format!("`{atom}` does not hold"),
                };
                Some(FailingAtom {
                    atom: atom.clone(),
                    detail,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering

fn render_literal(v: &Value, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match v {
        Value::Null => f.write_str("null"),
        Value::Bool(b) => write!(f, "{b}"),
        Value::Number(n) => write!(f, "{n}"),
        Value::Text(s) => f.write_str(&serde_json::to_string(s).expect("strings serialize")),
        other => f.write_str(&other.to_json()),
    }
}

/// Ends in an unparenthesized `forall` body that would swallow what follows.
fn is_open(p: &Predicate) -> bool {
    match p {
        Predicate::ForAll { .. } => true,
        Predicate::Not(inner) => is_open(inner),
        _ => false,
    }
}

fn render_junction(ps: &[Predicate], sep: &str, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    for (i, q) in ps.iter().enumerate() {
        if i > 0 {
            f.write_str(sep)?;
        }
        let last = i + 1 == ps.len();
        let wrap = matches!(q, Predicate::And(v) | Predicate::Or(v) if v.len() >= 2)
            || (!last && is_open(q));
        if wrap {
            write!(f, "({q})")?;
        } else {
            write!(f, "{q}")?;
        }
    }
    Ok(())
}

fn render_path_atom(name: &str, p: &Path, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    write!(f, "{name}({p})")
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::True => f.write_str("true"),
            Predicate::False => f.write_str("false"),
            Predicate::Exists(key) => write!(f, "exists(state.{key})"),
            Predicate::HasField(p) => render_path_atom("has_field", p, f),
            Predicate::IsList(p) => render_path_atom("is_list", p, f),
            Predicate::IsNumeric(p) => render_path_atom("is_numeric", p, f),
            Predicate::IsText(p) => render_path_atom("is_text", p, f),
            Predicate::IsRecord(p) => render_path_atom("is_record", p, f),
            Predicate::NonEmpty(p) => render_path_atom("non_empty", p, f),
            Predicate::Compare { lhs, op, rhs } => {
                write!(f, "{lhs} {} ", op.symbol())?;
                match rhs {
                    Operand::Literal(v) => render_literal(v, f),
                    Operand::Path(p) => write!(f, "{p}"),
                }
            }
            Predicate::ForAll { list, binder, body } => {
                write!(f, "forall {binder} in {list}: {body}")
            }
            Predicate::And(ps) if ps.is_empty() => f.write_str("true"),
            Predicate::Or(ps) if ps.is_empty() => f.write_str("false"),
            Predicate::And(ps) => render_junction(ps, " and ", f),
            Predicate::Or(ps) => render_junction(ps, " or ", f),
            Predicate::Not(inner) => {
                if matches!(inner.as_ref(), Predicate::And(v) | Predicate::Or(v) if v.len() >= 2) {
                    write!(f, "not ({inner})")
                } else {
                    write!(f, "not {inner}")
                }
            }
        }
    }
}

/// Checks that every key segment can be written back as DSL text.
pub(crate) fn path_is_renderable(p: &Path) -> bool {
    p.segments.iter().all(|s| match s {
        Segment::Key(k) => is_plain_key(k),
        Segment::Index(_) => true,
        Segment::Lookup(inner) => path_is_renderable(inner),
    })
}
