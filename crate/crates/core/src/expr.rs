//! Closed-form coefficient expressions.
//!
//! Coefficients such as the coupling `kappa(x, y, xi, eta)`, the rate `a(x, xi)`
//! and custom dispersal kernels `J(z)` are given as text in run configs. This
//! module parses that text into an immutable AST and evaluates it.
//!
//! Variables follow a fixed naming scheme: `x1..xd`, `y1..yd` for slow
//! variables, `xi1..xid`, `eta1..etad` for fast variables and `z1..zd` for
//! kernel offsets. Functions are `sin cos exp log sqrt abs min max`, operators
//! are `+ - * / ^` (`^` is right-associative), and `pi` is the only named
//! constant. There is no implicit multiplication.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("variable `{0}` is not bound")]
    Unbound(String),
    #[error("domain error in `{expr}`: {message}")]
    Domain { expr: String, message: String },
}

/// Which family a variable belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    X,
    Y,
    Xi,
    Eta,
    Z,
}

impl VarKind {
    fn prefix(self) -> &'static str {
        match self {
            VarKind::X => "x",
            VarKind::Y => "y",
            VarKind::Xi => "xi",
            VarKind::Eta => "eta",
            VarKind::Z => "z",
        }
    }
}

/// A variable reference; `index` is 1-based as written in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub kind: VarKind,
    pub index: usize,
}

impl Var {
    pub fn name(&self) -> String {
        format!("{}{}", self.kind.prefix(), self.index)
    }

    fn parse(ident: &str) -> Option<Var> {
        // Longest prefixes first so that `xi1` is not read as `x` + `i1`.
        let kinds = [
            ("eta", VarKind::Eta),
            ("xi", VarKind::Xi),
            ("x", VarKind::X),
            ("y", VarKind::Y),
            ("z", VarKind::Z),
        ];
        for (prefix, kind) in kinds {
            if let Some(rest) = ident.strip_prefix(prefix) {
                if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.starts_with('0')
                {
                    return None;
                }
                let index = rest.parse().ok()?;
                return Some(Var { kind, index });
            }
        }
        None
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.prefix(), self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Pi,
    Var(Var),
    Neg(Box<Node>),
    Call(Func, Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
}

/// Source of variable values during evaluation.
pub trait Env {
    fn get(&self, var: Var) -> Option<f64>;
}

impl Env for HashMap<String, f64> {
    fn get(&self, var: Var) -> Option<f64> {
        HashMap::get(self, &var.name()).copied()
    }
}

/// Slice-backed bindings used on hot paths. `x[0]` binds `x1`, and so on.
#[derive(Debug, Clone, Copy, Default)]
pub struct Slots<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub xi: &'a [f64],
    pub eta: &'a [f64],
    pub z: &'a [f64],
}

impl Env for Slots<'_> {
    fn get(&self, var: Var) -> Option<f64> {
        let slice = match var.kind {
            VarKind::X => self.x,
            VarKind::Y => self.y,
            VarKind::Xi => self.xi,
            VarKind::Eta => self.eta,
            VarKind::Z => self.z,
        };
        slice.get(var.index - 1).copied()
    }
}

/// A parsed, immutable expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    free: BTreeSet<Var>,
    source: String,
}

impl Expression {
    pub fn parse(text: &str) -> Result<Expression, ExprError> {
        let tokens = lex(text)?;
        if tokens.len() == 1 {
            return Err(ExprError::Syntax {
                offset: 0,
                message: "empty expression".into(),
            });
        }
        let mut parser = Parser { tokens, pos: 0 };
        let root = parser.expr()?;
        let tok = parser.peek();
        if tok.kind != Tok::End {
            return Err(ExprError::Syntax {
                offset: tok.offset,
                message: format!("unexpected {}", tok.kind.describe()),
            });
        }
        let mut free = BTreeSet::new();
        collect_vars(&root, &mut free);
        Ok(Expression {
            root,
            free,
            source: text.to_string(),
        })
    }

    /// A constant expression, printed in canonical form.
    pub fn constant(value: f64) -> Expression {
        let root = Node::Const(value);
        let source = Printed(&root).to_string();
        Expression {
            root,
            free: BTreeSet::new(),
            source,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn free_vars(&self) -> &BTreeSet<Var> {
        &self.free
    }

    pub fn free_var_names(&self) -> BTreeSet<String> {
        self.free.iter().map(Var::name).collect()
    }

    pub fn uses(&self, kind: VarKind) -> bool {
        self.free.iter().any(|v| v.kind == kind)
    }

    /// Largest variable index used, 0 for closed expressions.
    pub fn max_index(&self) -> usize {
        self.free.iter().map(|v| v.index).max().unwrap_or(0)
    }

    /// Canonical fully parenthesized rendering; re-parses to an equivalent AST.
    pub fn canonical(&self) -> String {
        Printed(&self.root).to_string()
    }

    pub fn evaluate(&self, env: &impl Env) -> Result<f64, ExprError> {
        eval(&self.root, env)
    }

    pub fn evaluate_map(&self, bindings: &HashMap<String, f64>) -> Result<f64, ExprError> {
        self.evaluate(bindings)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

pub fn parse(text: &str) -> Result<Expression, ExprError> {
    Expression::parse(text)
}

fn collect_vars(node: &Node, out: &mut BTreeSet<Var>) {
    match node {
        Node::Const(_) | Node::Pi => {}
        Node::Var(v) => {
            out.insert(*v);
        }
        Node::Neg(a) | Node::Call(_, a) => collect_vars(a, out),
        Node::Binary(_, a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
    }
}

fn domain(node: &Node, message: &str) -> ExprError {
    ExprError::Domain {
        expr: Printed(node).to_string(),
        message: message.to_string(),
    }
}

fn eval(node: &Node, env: &impl Env) -> Result<f64, ExprError> {
    let value = match node {
        Node::Const(c) => *c,
        Node::Pi => std::f64::consts::PI,
        Node::Var(v) => env.get(*v).ok_or_else(|| ExprError::Unbound(v.name()))?,
        Node::Neg(a) => -eval(a, env)?,
        Node::Call(func, a) => {
            let arg = eval(a, env)?;
            match func {
                Func::Sin => arg.sin(),
                Func::Cos => arg.cos(),
                Func::Exp => arg.exp(),
                Func::Abs => arg.abs(),
                Func::Log => {
                    if arg <= 0.0 {
                        return Err(domain(node, "log of a nonpositive value"));
                    }
                    arg.ln()
                }
                Func::Sqrt => {
                    if arg < 0.0 {
                        return Err(domain(node, "sqrt of a negative value"));
                    }
                    arg.sqrt()
                }
            }
        }
        Node::Binary(op, a, b) => {
            let lhs = eval(a, env)?;
            let rhs = eval(b, env)?;
            match op {
                BinOp::Add => lhs + rhs,
                BinOp::Sub => lhs - rhs,
                BinOp::Mul => lhs * rhs,
                BinOp::Div => {
                    if rhs == 0.0 {
                        return Err(domain(node, "division by zero"));
                    }
                    lhs / rhs
                }
                BinOp::Pow => {
                    if lhs < 0.0 && rhs.fract() != 0.0 {
                        return Err(domain(node, "non-integer power of a negative base"));
                    }
                    if lhs == 0.0 && rhs < 0.0 {
                        return Err(domain(node, "negative power of zero"));
                    }
                    lhs.powf(rhs)
                }
                BinOp::Min => lhs.min(rhs),
                BinOp::Max => lhs.max(rhs),
            }
        }
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(domain(node, "non-finite result"))
    }
}

// ---------------------------------------------------------------------------
// Printing

struct Printed<'a>(&'a Node);

impl fmt::Display for Printed<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            // `{:?}` on f64 is the shortest round-tripping representation.
            Node::Const(c) => {
                if *c < 0.0 {
                    write!(f, "(-{:?})", -c)
                } else {
                    write!(f, "{:?}", c)
                }
            }
            Node::Pi => f.write_str("pi"),
            Node::Var(v) => write!(f, "{v}"),
            Node::Neg(a) => write!(f, "(-{})", Printed(a)),
            Node::Call(func, a) => write!(f, "{}({})", func.name(), Printed(a)),
            Node::Binary(op, a, b) => match op {
                BinOp::Min => write!(f, "min({}, {})", Printed(a), Printed(b)),
                BinOp::Max => write!(f, "max({}, {})", Printed(a), Printed(b)),
                _ => {
                    let sym = match op {
                        BinOp::Add => "+",
                        BinOp::Sub => "-",
                        BinOp::Mul => "*",
                        BinOp::Div => "/",
                        _ => "^",
                    };
                    write!(f, "({} {} {})", Printed(a), sym, Printed(b))
                }
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Lexing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(n) => format!("number {n}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    offset: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let lit = &text[start..i];
                let value = lit.parse::<f64>().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("malformed number `{lit}`"),
                })?;
                out.push(Token {
                    kind: Tok::Num(value),
                    offset: start,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Token {
                    kind: Tok::Ident(text[start..i].to_string()),
                    offset: start,
                });
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ExprError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        i += 1;
        out.push(Token {
            kind,
            offset: start,
        });
    }
    out.push(Token {
        kind: Tok::End,
        offset: text.len(),
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Recursive descent

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.pos].clone();
        if tok.kind != Tok::End {
            self.pos += 1;
        }
        tok
    }

    fn expect(&mut self, kind: Tok) -> Result<(), ExprError> {
        let tok = self.peek();
        if tok.kind == kind {
            self.bump();
            Ok(())
        } else {
            Err(ExprError::Syntax {
                offset: tok.offset,
                message: format!("expected {}, found {}", kind.describe(), tok.kind.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.peek().kind {
            Tok::Minus => {
                self.bump();
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Tok::Plus => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.peek().kind == Tok::Caret {
            self.bump();
            // Right associative: the exponent may itself be a power or a negation.
            let exponent = self.unary()?;
            return Ok(Node::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let tok = self.bump();
        match tok.kind {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Tok::Ident(name) => self.ident(name, tok.offset),
            other => Err(ExprError::Syntax {
                offset: tok.offset,
                message: format!("unexpected {}", other.describe()),
            }),
        }
    }

    fn ident(&mut self, name: String, offset: usize) -> Result<Node, ExprError> {
        let unary = match name.as_str() {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "sqrt" => Some(Func::Sqrt),
            "abs" => Some(Func::Abs),
            _ => None,
        };
        if let Some(func) = unary {
            self.expect(Tok::LParen)?;
            let arg = self.expr()?;
            self.expect(Tok::RParen)?;
            return Ok(Node::Call(func, Box::new(arg)));
        }
        let binary = match name.as_str() {
            "min" => Some(BinOp::Min),
            "max" => Some(BinOp::Max),
            _ => None,
        };
        if let Some(op) = binary {
            self.expect(Tok::LParen)?;
            let a = self.expr()?;
            self.expect(Tok::Comma)?;
            let b = self.expr()?;
            self.expect(Tok::RParen)?;
            return Ok(Node::Binary(op, Box::new(a), Box::new(b)));
        }
        if name == "pi" {
            return Ok(Node::Pi);
        }
        match Var::parse(&name) {
            Some(v) => Ok(Node::Var(v)),
            None => Err(ExprError::UnknownIdentifier { name, offset }),
        }
    }
}
