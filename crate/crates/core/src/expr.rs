//! Scalar-field expressions: parsing, pretty-printing and evaluation with
//! exact forward-mode first and second derivatives.
//!
//! The grammar is standard infix with precedence `^` (right-associative)
//! above unary minus above `*`,`/` above `+`,`-`. Supported functions are
//! `sin`, `cos`, `tan`, `exp`, `log` (natural), `sqrt`, `abs`. Identifiers
//! resolve against the declared coordinate and parameter name lists at parse
//! time; angles are radians.

use crate::dual::{seed_grad, seed_hess, Dual, Scalar};
use crate::{Error, Result};
use nalgebra::DMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

/// Expression tree node. Coordinates and parameters are resolved to indices
/// into the owning [`Expression`]'s name tables.
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Num(f64),
    Coord(usize),
    Param(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn contains_coord(&self) -> bool {
        match self {
            Node::Num(_) | Node::Param(_) => false,
            Node::Coord(_) => true,
            Node::Neg(a) | Node::Call(_, a) => a.contains_coord(),
            Node::Bin(_, a, b) => a.contains_coord() || b.contains_coord(),
        }
    }
}

/// A parsed scalar field over declared coordinates and parameters.
///
/// Immutable after parsing; evaluation is reentrant and thread-safe.
#[derive(Clone, Debug, PartialEq)]
pub struct Expression {
    pub root: Node,
    pub coords: Vec<String>,
    pub params: Vec<String>,
}

impl Expression {
    pub fn parse(text: &str, coords: &[String], params: &[String]) -> Result<Expression> {
        if text.trim().is_empty() {
            return Err(Error::Syntax {
                offset: 0,
                msg: "empty expression".into(),
            });
        }
        let mut p = Parser {
            bytes: text.as_bytes(),
            pos: 0,
            coords,
            params,
        };
        let root = p.parse_expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(Error::Syntax {
                offset: p.pos,
                msg: format!("unexpected `{}`", p.bytes[p.pos] as char),
            });
        }
        Ok(Expression {
            root,
            coords: coords.to_vec(),
            params: params.to_vec(),
        })
    }

    /// Evaluate over any scalar type; `q` must already have the dual shape.
    pub fn eval_scalar<T: Scalar>(&self, q: &[T], params: &[f64], proto: &T) -> Result<T> {
        if q.len() != self.coords.len() {
            return Err(Error::Dimension(format!(
                "expression has {} coordinates, point has {}",
                self.coords.len(),
                q.len()
            )));
        }
        eval_node(&self.root, q, params, proto)
    }

    pub fn eval(&self, q: &[f64], params: &[f64]) -> Result<f64> {
        let v = self.eval_scalar(q, params, &0.0)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("expression value".into()));
        }
        Ok(v)
    }

    /// Exact forward-mode gradient with respect to the coordinates.
    pub fn grad(&self, q: &[f64], params: &[f64]) -> Result<Vec<f64>> {
        let vars = seed_grad(q);
        let r = self.eval_scalar(&vars, params, &Dual::constant(&0.0, 0.0, q.len()))?;
        if !r.re.is_finite() || r.eps.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("expression gradient".into()));
        }
        Ok(r.eps)
    }

    /// Exact second-derivative matrix via nested duals, symmetrized so the
    /// result is symmetric to the bit.
    pub fn hessian(&self, q: &[f64], params: &[f64]) -> Result<DMatrix<f64>> {
        let n = q.len();
        let vars = seed_hess(q);
        let proto = Dual {
            re: Dual::constant(&0.0, 0.0, n),
            eps: vec![Dual::constant(&0.0, 0.0, n); n],
        };
        let r = self.eval_scalar(&vars, params, &proto)?;
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = r.eps[i].eps[j];
                if !v.is_finite() {
                    return Err(Error::NonFinite("expression hessian".into()));
                }
                h[(i, j)] = v;
            }
        }
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (h[(i, j)] + h[(j, i)]);
                h[(i, j)] = s;
                h[(j, i)] = s;
            }
        }
        Ok(h)
    }

    /// Precedence-aware pretty-printer; `parse(print(e))` is structurally
    /// equal to `e`.
    pub fn print(&self) -> String {
        let mut s = String::new();
        print_node(&self.root, &self.coords, &self.params, 0, &mut s);
        s
    }
}

fn eval_node<T: Scalar>(node: &Node, q: &[T], params: &[f64], proto: &T) -> Result<T> {
    Ok(match node {
        Node::Num(v) => proto.lift(*v),
        Node::Coord(i) => q[*i].clone(),
        Node::Param(i) => proto.lift(params[*i]),
        Node::Neg(a) => eval_node(a, q, params, proto)?.neg(),
        Node::Call(f, a) => {
            let x = eval_node(a, q, params, proto)?;
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Tan => x.tan(),
                Func::Exp => x.exp(),
                Func::Log => {
                    if x.value() <= 0.0 {
                        return Err(Error::Domain(format!("log of non-positive {}", x.value())));
                    }
                    x.ln()
                }
                Func::Sqrt => {
                    if x.value() < 0.0 {
                        return Err(Error::Domain(format!("sqrt of negative {}", x.value())));
                    }
                    x.sqrt()
                }
                Func::Abs => x.abs(),
            }
        }
        Node::Bin(op, a, b) => {
            let x = eval_node(a, q, params, proto)?;
            let y = eval_node(b, q, params, proto)?;
            match op {
                BinOp::Add => x.add(&y),
                BinOp::Sub => x.sub(&y),
                BinOp::Mul => x.mul(&y),
                BinOp::Div => {
                    if y.value() == 0.0 {
                        return Err(Error::Domain("division by zero".into()));
                    }
                    x.div(&y)
                }
                BinOp::Pow => {
                    // Constant integer exponents use repeated multiplication,
                    // which is exact for negative bases; anything else goes
                    // through exp(e log b) and needs a positive base.
                    let ev = y.value();
                    let is_const_int =
                        !b.contains_coord() && ev.fract() == 0.0 && ev.abs() < 1e15;
                    if is_const_int {
                        if ev < 0.0 && x.value() == 0.0 {
                            return Err(Error::Domain("zero raised to negative power".into()));
                        }
                        x.powi(ev as i64)
                    } else {
                        if x.value() <= 0.0 {
                            return Err(Error::Domain(format!(
                                "non-integer power of non-positive base {}",
                                x.value()
                            )));
                        }
                        x.powf(&y)
                    }
                }
            }
        }
    })
}

fn prec(node: &Node) -> u8 {
    match node {
        Node::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Node::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Node::Neg(_) => 3,
        Node::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

fn print_node(node: &Node, coords: &[String], params: &[String], parent: u8, out: &mut String) {
    let my = prec(node);
    let wrap = my < parent;
    if wrap {
        out.push('(');
    }
    match node {
        Node::Num(v) => out.push_str(&format!("{v}")),
        Node::Coord(i) => out.push_str(&coords[*i]),
        Node::Param(i) => out.push_str(&params[*i]),
        Node::Neg(a) => {
            out.push('-');
            print_node(a, coords, params, 3, out);
        }
        Node::Call(f, a) => {
            out.push_str(f.name());
            out.push('(');
            print_node(a, coords, params, 0, out);
            out.push(')');
        }
        Node::Bin(op, a, b) => {
            let (sym, lp, rp) = match op {
                BinOp::Add => ("+", 1, 2),
                BinOp::Sub => ("-", 1, 2),
                BinOp::Mul => ("*", 2, 3),
                BinOp::Div => ("/", 2, 3),
                BinOp::Pow => ("^", 5, 4),
            };
            print_node(a, coords, params, lp, out);
            out.push_str(sym);
            print_node(b, coords, params, rp, out);
        }
    }
    if wrap {
        out.push(')');
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    coords: &'a [String],
    params: &'a [String],
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn parse_expr(&mut self) -> Result<Node> {
        let mut lhs = self.parse_term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = Node::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = Node::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Node> {
        let mut lhs = self.parse_unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.parse_unary()?;
                    lhs = Node::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.parse_unary()?;
                    lhs = Node::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_unary(&mut self) -> Result<Node> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.parse_unary()?)));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Node> {
        let base = self.parse_atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            // Right-associative; the exponent may carry a unary minus.
            let exp = self.parse_unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Node> {
        match self.peek() {
            None => Err(Error::Syntax {
                offset: self.pos,
                msg: "unexpected end of input".into(),
            }),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.parse_expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.parse_number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.parse_ident(),
            Some(c) => Err(Error::Syntax {
                offset: self.pos,
                msg: format!("unexpected `{}`", c as char),
            }),
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Syntax {
                offset: self.pos,
                msg: format!("expected `{}`", c as char),
            })
        }
    }

    fn parse_number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_digit() || self.bytes[self.pos] == b'.')
        {
            self.pos += 1;
        }
        // Scientific notation: 1e-3, 2.5E+7
        if self.pos < self.bytes.len() && matches!(self.bytes[self.pos], b'e' | b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.bytes.len() && matches!(self.bytes[self.pos], b'+' | b'-') {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = mark; // `e` was an identifier start, not an exponent
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<f64>().map(Node::Num).map_err(|_| Error::Syntax {
            offset: start,
            msg: format!("invalid number `{text}`"),
        })
    }

    fn parse_ident(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        if self.peek() == Some(b'(') {
            let func = Func::from_name(name).ok_or_else(|| Error::UnknownIdentifier {
                name: name.to_string(),
            })?;
            self.pos += 1;
            let arg = self.parse_expr()?;
            self.expect(b')')?;
            return Ok(Node::Call(func, Box::new(arg)));
        }
        if let Some(i) = self.coords.iter().position(|c| c == name) {
            return Ok(Node::Coord(i));
        }
        if let Some(i) = self.params.iter().position(|p| p == name) {
            return Ok(Node::Param(i));
        }
        Err(Error::UnknownIdentifier {
            name: name.to_string(),
        })
    }
}
