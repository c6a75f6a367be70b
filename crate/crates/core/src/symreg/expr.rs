//! Prefix-encoded expression trees.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::SymRegError;

/// Denominators smaller than this make a division undefined.
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// Index into the expression's variable names.
    Var(usize),
    Const(f64),
}

impl Node {
    pub fn arity(&self) -> usize {
        match self {
            Node::Add | Node::Sub | Node::Mul | Node::Div => 2,
            Node::Neg => 1,
            Node::Var(_) | Node::Const(_) => 0,
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Node::Add => "+",
            Node::Sub => "-",
            Node::Mul => "*",
            Node::Div => "/",
            Node::Neg => "neg",
            _ => unreachable!("leaves have no operator symbol"),
        }
    }

    fn apply(&self, a: f64, b: f64) -> f64 {
        match self {
            Node::Add => a + b,
            Node::Sub => a - b,
            Node::Mul => a * b,
            Node::Div => {
                if b.abs() < DIV_GUARD {
                    f64::NAN
                } else {
                    a / b
                }
            }
            Node::Neg => -a,
            _ => unreachable!("leaves are not applied"),
        }
    }
}

/// End (exclusive) of the subtree starting at `start`.
pub fn subtree_end(nodes: &[Node], start: usize) -> usize {
    let mut need = 1usize;
    let mut i = start;
    while need > 0 {
        need = need - 1 + nodes[i].arity();
        i += 1;
    }
    i
}

/// Evaluates a prefix program over column-major inputs. Undefined divisions
/// yield NaN in the affected rows.
pub fn eval_nodes(nodes: &[Node], columns: &[&[f64]], n_rows: usize) -> Vec<f64> {
    let mut stack: Vec<Vec<f64>> = Vec::with_capacity(8);
    for node in nodes.iter().rev() {
        match *node {
            Node::Var(i) => stack.push(columns[i].to_vec()),
            Node::Const(c) => stack.push(vec![c; n_rows]),
            Node::Neg => {
                let top = stack.last_mut().expect("arity-correct program");
                top.iter_mut().for_each(|v| *v = -*v);
            }
            op => {
                let mut a = stack.pop().expect("arity-correct program");
                let b = stack.pop().expect("arity-correct program");
                for (x, y) in a.iter_mut().zip(&b) {
                    *x = op.apply(*x, *y);
                }
                stack.push(a);
            }
        }
    }
    stack.pop().expect("non-empty program")
}

fn eval_scalar(nodes: &[Node], values: &[f64]) -> f64 {
    let mut stack = Vec::with_capacity(8);
    for node in nodes.iter().rev() {
        match *node {
            Node::Var(i) => stack.push(values[i]),
            Node::Const(c) => stack.push(c),
            Node::Neg => {
                let a = stack.pop().expect("arity-correct program");
                stack.push(-a);
            }
            op => {
                let a = stack.pop().expect("arity-correct program");
                let b = stack.pop().expect("arity-correct program");
                stack.push(op.apply(a, b));
            }
        }
    }
    stack.pop().expect("non-empty program")
}

/// Replaces every variable-free subtree by its value (when finite).
pub fn fold_constants(nodes: &[Node]) -> Vec<Node> {
    fn go(nodes: &[Node], start: usize, out: &mut Vec<Node>) -> usize {
        let end = subtree_end(nodes, start);
        let sub = &nodes[start..end];
        if sub.len() > 1 && !sub.iter().any(|n| matches!(n, Node::Var(_))) {
            let v = eval_scalar(sub, &[]);
            if v.is_finite() {
                out.push(Node::Const(v));
                return end;
            }
        }
        out.push(nodes[start]);
        let mut child = start + 1;
        for _ in 0..nodes[start].arity() {
            child = go(nodes, child, out);
        }
        end
    }
    let mut out = Vec::with_capacity(nodes.len());
    go(nodes, 0, &mut out);
    out
}

/// An expression over named variables.
///
/// Two expressions are equal when they print to the same prefix string, so
/// unused names and the order of `names` do not matter.
#[derive(Debug, Clone)]
pub struct Expr {
    pub nodes: Vec<Node>,
    pub names: Vec<String>,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.to_prefix() == other.to_prefix()
    }
}

impl Expr {
    pub fn new(nodes: Vec<Node>, names: Vec<String>) -> Result<Self, SymRegError> {
        let expr = Expr { nodes, names };
        expr.validate()?;
        Ok(expr)
    }

    fn validate(&self) -> Result<(), SymRegError> {
        let mut need = 1usize;
        for (i, node) in self.nodes.iter().enumerate() {
            if need == 0 {
                return Err(SymRegError::Parse(format!("trailing nodes after position {i}")));
            }
            if let Node::Var(v) = node {
                if *v >= self.names.len() {
                    return Err(SymRegError::Parse(format!("variable index {v} has no name")));
                }
            }
            need = need - 1 + node.arity();
        }
        if need != 0 || self.nodes.is_empty() {
            return Err(SymRegError::Parse("incomplete expression".into()));
        }
        Ok(())
    }

    pub fn constant(c: f64) -> Self {
        Expr {
            nodes: vec![Node::Const(c)],
            names: Vec::new(),
        }
    }

    pub fn complexity(&self) -> usize {
        self.nodes.len()
    }

    pub fn constants(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Const(c) => Some(*c),
                _ => None,
            })
            .collect()
    }

    /// Evaluates on a row of named values.
    pub fn evaluate(&self, row: &BTreeMap<String, f64>) -> Result<f64, SymRegError> {
        let values = self
            .names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let used = self.nodes.iter().any(|n| *n == Node::Var(i));
                match row.get(name) {
                    Some(v) => Ok(*v),
                    None if !used => Ok(0.0),
                    None => Err(SymRegError::UnresolvedReference(name.clone())),
                }
            })
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(eval_scalar(&self.nodes, &values))
    }

    /// Evaluates with `values[i]` bound to `names[i]`.
    pub fn evaluate_values(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.names.len(), "one value per name");
        eval_scalar(&self.nodes, values)
    }

    /// Evaluates on named columns; every used name must be present.
    pub fn evaluate_columns(
        &self,
        names: &[String],
        columns: &[Vec<f64>],
    ) -> Result<Vec<f64>, SymRegError> {
        let n_rows = columns.first().map_or(1, Vec::len);
        let mut bound: Vec<&[f64]> = Vec::with_capacity(self.names.len());
        let empty = vec![0.0; n_rows];
        for (i, name) in self.names.iter().enumerate() {
            match names.iter().position(|n| n == name) {
                Some(c) => bound.push(&columns[c]),
                None if !self.nodes.contains(&Node::Var(i)) => bound.push(&empty),
                None => return Err(SymRegError::UnresolvedReference(name.clone())),
            }
        }
        Ok(eval_nodes(&self.nodes, &bound, n_rows))
    }

    /// `(op lhs rhs)` prefix form with `var:<name>` leaves.
    pub fn to_prefix(&self) -> String {
        fn go(e: &Expr, i: usize, out: &mut String) -> usize {
            match e.nodes[i] {
                Node::Var(v) => {
                    out.push_str("var:");
                    out.push_str(&e.names[v]);
                    i + 1
                }
                Node::Const(c) => {
                    out.push_str(&c.to_string());
                    i + 1
                }
                op => {
                    out.push('(');
                    out.push_str(op.symbol());
                    let mut j = i + 1;
                    for _ in 0..op.arity() {
                        out.push(' ');
                        j = go(e, j, out);
                    }
                    out.push(')');
                    j
                }
            }
        }
        let mut out = String::new();
        go(self, 0, &mut out);
        out
    }

    /// Conventional infix rendering, fully parenthesized.
    pub fn to_infix(&self) -> String {
        fn go(e: &Expr, i: usize) -> (String, usize) {
            match e.nodes[i] {
                Node::Var(v) => (e.names[v].clone(), i + 1),
                Node::Const(c) => (c.to_string(), i + 1),
                Node::Neg => {
                    let (a, j) = go(e, i + 1);
                    (format!("-({a})"), j)
                }
                op => {
                    let (a, j) = go(e, i + 1);
                    let (b, k) = go(e, j);
                    (format!("({a} {} {b})", op.symbol()), k)
                }
            }
        }
        go(self, 0).0
    }

    pub fn parse(text: &str) -> Result<Self, SymRegError> {
        let spaced = text.replace('(', " ( ").replace(')', " ) ");
        let tokens: Vec<&str> = spaced.split_whitespace().collect();
        let mut nodes = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let mut pos = 0;
        parse_node(&tokens, &mut pos, &mut nodes, &mut names)?;
        if pos != tokens.len() {
            return Err(SymRegError::Parse(format!("unexpected `{}`", tokens[pos])));
        }
        Expr::new(nodes, names)
    }
}

fn parse_node(
    tokens: &[&str],
    pos: &mut usize,
    nodes: &mut Vec<Node>,
    names: &mut Vec<String>,
) -> Result<(), SymRegError> {
    let tok = *tokens
        .get(*pos)
        .ok_or_else(|| SymRegError::Parse("unexpected end of expression".into()))?;
    *pos += 1;
    if tok == "(" {
        let op_tok = *tokens
            .get(*pos)
            .ok_or_else(|| SymRegError::Parse("missing operator".into()))?;
        *pos += 1;
        let op = match op_tok {
            "+" => Node::Add,
            "-" => Node::Sub,
            "*" => Node::Mul,
            "/" => Node::Div,
            "neg" => Node::Neg,
            other => return Err(SymRegError::Parse(format!("unknown operator `{other}`"))),
        };
        nodes.push(op);
        for _ in 0..op.arity() {
            parse_node(tokens, pos, nodes, names)?;
        }
        match tokens.get(*pos) {
            Some(&")") => {
                *pos += 1;
                Ok(())
            }
            _ => Err(SymRegError::Parse(format!("`{op_tok}` takes {} operands", op.arity()))),
        }
    } else if let Some(name) = tok.strip_prefix("var:") {
        if name.is_empty() {
            return Err(SymRegError::Parse("empty variable name".into()));
        }
        let idx = match names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                names.push(name.to_string());
                names.len() - 1
            }
        };
        nodes.push(Node::Var(idx));
        Ok(())
    } else {
        let c: f64 = tok
            .parse()
            .map_err(|_| SymRegError::Parse(format!("bad token `{tok}`")))?;
        if !c.is_finite() {
            return Err(SymRegError::Parse(format!("non-finite constant `{tok}`")));
        }
        nodes.push(Node::Const(c));
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_prefix())
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_prefix())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Expr::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Evaluates `expr` on one row of named values.
pub fn evaluate_expression(expr: &Expr, row: &BTreeMap<String, f64>) -> Result<f64, SymRegError> {
    expr.evaluate(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn constant_evaluates_everywhere() {
        let e = Expr::constant(2.5);
        assert_eq!(e.evaluate(&row(&[])).unwrap(), 2.5);
        assert_eq!(e.evaluate(&row(&[("a", 9.0)])).unwrap(), 2.5);
    }

    #[test]
    fn sum_of_two_variables() {
        let e = Expr::parse("(+ var:a var:b)").unwrap();
        assert_eq!(e.evaluate(&row(&[("a", 1.0), ("b", 2.0)])).unwrap(), 3.0);
        assert_eq!(e.complexity(), 3);
    }

    #[test]
    fn division_by_zero_is_undefined() {
        let e = Expr::parse("(/ var:a var:b)").unwrap();
        assert!(e.evaluate(&row(&[("a", 1.0), ("b", 0.0)])).unwrap().is_nan());
        assert!(e.evaluate(&row(&[("a", 1.0), ("b", 1e-13)])).unwrap().is_nan());
        assert_eq!(e.evaluate(&row(&[("a", 1.0), ("b", 4.0)])).unwrap(), 0.25);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let e = Expr::parse("(* var:a var:q)").unwrap();
        assert_eq!(
            e.evaluate(&row(&[("a", 1.0)])),
            Err(SymRegError::UnresolvedReference("q".into()))
        );
    }

    #[test]
    fn prefix_round_trip() {
        for text in [
            "(- (* -0.9 (* var:x var:y)) (neg 1.25))",
            "(/ var:a (+ var:b 0.001))",
            "var:T1",
            "3",
        ] {
            let e = Expr::parse(text).unwrap();
            assert_eq!(e.to_prefix(), text);
            assert_eq!(Expr::parse(&e.to_prefix()).unwrap(), e);
        }
        let json = serde_json::to_string(&Expr::parse("(* 2 var:x)").unwrap()).unwrap();
        assert_eq!(json, "\"(* 2 var:x)\"");
    }

    #[test]
    fn malformed_text_is_rejected() {
        for bad in ["(+ var:a)", "(% 1 2)", "(+ 1 2) 3", "", "var:", "(neg 1 2)", "inf"] {
            assert!(Expr::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn folding_collapses_variable_free_subtrees() {
        let e = Expr::parse("(+ (* 2 3) (* var:x (neg 1)))").unwrap();
        let folded = Expr::new(fold_constants(&e.nodes), e.names.clone()).unwrap();
        assert_eq!(folded.to_prefix(), "(+ 6 (* var:x -1))");
        // Undefined divisions are left in place.
        let e = Expr::parse("(/ 1 0)").unwrap();
        assert_eq!(fold_constants(&e.nodes), e.nodes);
    }

    #[test]
    fn column_evaluation_matches_rows() {
        let e = Expr::parse("(- (* var:a var:b) var:c)").unwrap();
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let cols = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![0.5, 1.0]];
        assert_eq!(e.evaluate_columns(&names, &cols).unwrap(), vec![2.5, 7.0]);
        assert_eq!(subtree_end(&e.nodes, 1), 4);
    }
}
