//! Text form of filters, one per line:
//!
//! ```text
//! # comment
//! and(is_message_type(Prepare), is_message_to(1)) -> drop_message
//! if count(votes).lt(2) then count(votes).incr, drop_message
//! ```

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::dsl::{Action, CmpOp, Condition, Filter};
use crate::model::ReplicaId;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

type CondCtor = Arc<dyn Fn(&[String]) -> Result<Condition, String> + Send + Sync>;
type ActionCtor = Arc<dyn Fn(&[String]) -> Result<Action, String> + Send + Sync>;

/// Named custom conditions and actions available to the parser.
#[derive(Clone, Default)]
pub struct DslRegistry {
    conditions: HashMap<String, CondCtor>,
    actions: HashMap<String, ActionCtor>,
}

impl fmt::Debug for DslRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut c: Vec<_> = self.conditions.keys().collect();
        let mut a: Vec<_> = self.actions.keys().collect();
        c.sort();
        a.sort();
        f.debug_struct("DslRegistry")
            .field("conditions", &c)
            .field("actions", &a)
            .finish()
    }
}

impl DslRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn condition(
        &mut self,
        name: &str,
        ctor: impl Fn(&[String]) -> Result<Condition, String> + Send + Sync + 'static,
    ) -> &mut Self {
        self.conditions.insert(name.to_string(), Arc::new(ctor));
        self
    }

    pub fn action(
        &mut self,
        name: &str,
        ctor: impl Fn(&[String]) -> Result<Action, String> + Send + Sync + 'static,
    ) -> &mut Self {
        self.actions.insert(name.to_string(), Arc::new(ctor));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Term {
    name: String,
    args: Option<Vec<Term>>,
    methods: Vec<(String, Option<Vec<Term>>)>,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    src: &'a str,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            chars: src.char_indices().peekable(),
            src,
        }
    }

    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|(_, c)| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.peek().map(|(_, c)| *c)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.chars.next();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<String, String> {
        self.skip_ws();
        let start = match self.chars.peek() {
            Some((i, c)) if is_ident_char(*c) => *i,
            Some((_, c)) => return Err(format!("unexpected `{c}`")),
            None => return Err("unexpected end of input".into()),
        };
        let mut end = start;
        while let Some((i, c)) = self.chars.peek().copied() {
            if !is_ident_char(c) {
                break;
            }
            end = i + c.len_utf8();
            self.chars.next();
        }
        Ok(self.src[start..end].to_string())
    }

    fn args(&mut self) -> Result<Option<Vec<Term>>, String> {
        if !self.eat('(') {
            return Ok(None);
        }
        let mut out = Vec::new();
        if self.eat(')') {
            return Ok(Some(out));
        }
        loop {
            out.push(self.term()?);
            if self.eat(')') {
                return Ok(Some(out));
            }
            if !self.eat(',') {
                return Err("expected `,` or `)`".into());
            }
        }
    }

    fn term(&mut self) -> Result<Term, String> {
        let name = self.ident()?;
        let args = self.args()?;
        let mut methods = Vec::new();
        while self.eat('.') {
            let m = self.ident()?;
            let a = self.args()?;
            methods.push((m, a));
        }
        Ok(Term {
            name,
            args,
            methods,
        })
    }

    fn at_end(&mut self) -> bool {
        self.peek().is_none()
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | ':')
}

fn atom(t: &Term) -> Result<String, String> {
    if t.args.is_some() || !t.methods.is_empty() {
        return Err(format!("expected a plain value, found `{}(...)`", t.name));
    }
    Ok(t.name.clone())
}

fn one_arg(t: &Term) -> Result<String, String> {
    match t.args.as_deref() {
        Some([a]) => atom(a),
        _ => Err(format!("`{}` takes exactly one argument", t.name)),
    }
}

fn no_args(t: &Term) -> Result<(), String> {
    match t.args.as_deref() {
        None | Some([]) => Ok(()),
        _ => Err(format!("`{}` takes no arguments", t.name)),
    }
}

fn replica(s: &str) -> Result<ReplicaId, String> {
    s.parse().map_err(|_| format!("`{s}` is not a replica id"))
}

fn condition(t: &Term, reg: &DslRegistry) -> Result<Condition, String> {
    let plain = || -> Result<(), String> {
        if t.methods.is_empty() {
            Ok(())
        } else {
            Err(format!("`{}` has no methods", t.name))
        }
    };
    match t.name.as_str() {
        "and" | "or" => {
            plain()?;
            let args = t.args.as_deref().unwrap_or_default();
            if args.len() < 2 {
                return Err(format!("`{}` needs at least two operands", t.name));
            }
            let mut it = args.iter().map(|a| condition(a, reg));
            let mut acc = it.next().expect("checked length")?;
            for c in it {
                acc = if t.name == "and" { acc.and(c?) } else { acc.or(c?) };
            }
            Ok(acc)
        }
        "not" => {
            plain()?;
            match t.args.as_deref() {
                Some([a]) => Ok(condition(a, reg)?.not()),
                _ => Err("`not` takes exactly one operand".into()),
            }
        }
        "is_event_type" => {
            plain()?;
            Ok(Condition::IsEventType(one_arg(t)?))
        }
        "is_message_type" => {
            plain()?;
            Ok(Condition::IsMessageType(one_arg(t)?))
        }
        "is_message_send" => {
            plain()?;
            no_args(t)?;
            Ok(Condition::IsMessageSend)
        }
        "is_message_receive" => {
            plain()?;
            no_args(t)?;
            Ok(Condition::IsMessageReceive)
        }
        "is_message_from" => {
            plain()?;
            Ok(Condition::IsMessageFrom(replica(&one_arg(t)?)?))
        }
        "is_message_to" => {
            plain()?;
            Ok(Condition::IsMessageTo(replica(&one_arg(t)?)?))
        }
        "count" => {
            let counter = one_arg(t)?;
            let [(m, args)] = t.methods.as_slice() else {
                return Err("expected count(c).lt|gt|leq|gte(n)".into());
            };
            let op = match m.as_str() {
                "lt" => CmpOp::Lt,
                "gt" => CmpOp::Gt,
                "leq" => CmpOp::Leq,
                "gte" | "geq" => CmpOp::Geq,
                other => return Err(format!("unknown comparison `{other}`")),
            };
            let value = match args.as_deref() {
                Some([a]) => atom(a)?
                    .parse::<i64>()
                    .map_err(|_| "comparison needs an integer".to_string())?,
                _ => return Err("comparison takes one integer".into()),
            };
            Ok(Condition::Count { counter, op, value })
        }
        "message_set" => {
            let set = one_arg(t)?;
            match t.methods.as_slice() {
                [(m, None)] if m == "contains" => Ok(Condition::SetContains(set)),
                _ => Err("expected message_set(s).contains".into()),
            }
        }
        name => {
            plain()?;
            let ctor = reg
                .conditions
                .get(name)
                .ok_or_else(|| format!("unknown condition `{name}`"))?;
            let args = t
                .args
                .as_deref()
                .unwrap_or_default()
                .iter()
                .map(atom)
                .collect::<Result<Vec<_>, _>>()?;
            ctor(&args)
        }
    }
}

fn action(t: &Term, reg: &DslRegistry) -> Result<Action, String> {
    match (t.name.as_str(), t.methods.as_slice()) {
        ("deliver_message", []) => {
            no_args(t)?;
            Ok(Action::DeliverMessage)
        }
        ("drop_message", []) => {
            no_args(t)?;
            Ok(Action::DropMessage)
        }
        ("count", [(m, None)]) if m == "incr" => Ok(Action::CountIncr(one_arg(t)?)),
        ("message_set", [(m, None)]) if m == "store" => Ok(Action::StoreInSet(one_arg(t)?)),
        ("message_set", [(m, None)]) if m == "deliver_all" => {
            Ok(Action::DeliverAllFromSet(one_arg(t)?))
        }
        (name, []) => {
            let ctor = reg
                .actions
                .get(name)
                .ok_or_else(|| format!("unknown action `{name}`"))?;
            let args = t
                .args
                .as_deref()
                .unwrap_or_default()
                .iter()
                .map(atom)
                .collect::<Result<Vec<_>, _>>()?;
            ctor(&args)
        }
        (name, _) => Err(format!("unknown action `{name}`")),
    }
}

fn parse_line(line: &str, reg: &DslRegistry) -> Result<Filter, String> {
    let (cond_src, actions_src) = if let Some(rest) = line.strip_prefix("if ") {
        rest.split_once(" then ")
            .ok_or_else(|| "expected `then`".to_string())?
    } else {
        line.split_once("->")
            .ok_or_else(|| "expected `->`".to_string())?
    };
    let mut lx = Lexer::new(cond_src);
    let cond = condition(&lx.term()?, reg)?;
    if !lx.at_end() {
        return Err("trailing input after condition".into());
    }
    let mut lx = Lexer::new(actions_src);
    let mut actions = Vec::new();
    loop {
        actions.push(action(&lx.term()?, reg)?);
        if lx.at_end() {
            break;
        }
        if !lx.eat(',') {
            return Err("expected `,` between actions".into());
        }
    }
    Ok(Filter {
        condition: cond,
        actions,
    })
}

/// Parses one filter per non-empty line; `#` starts a comment.
pub fn parse_filters(src: &str, reg: &DslRegistry) -> Result<Vec<Filter>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_line(line, reg).map_err(|message| ParseError {
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}
