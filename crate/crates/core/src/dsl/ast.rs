use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Sqrt,
    Atan2,
    Cos,
    Sin,
    Exp,
    Sum,
}

impl Builtin {
    pub fn from_name(name: &str) -> Option<Builtin> {
        Some(match name {
            "sqrt" => Builtin::Sqrt,
            "atan2" => Builtin::Atan2,
            "cos" => Builtin::Cos,
            "sin" => Builtin::Sin,
            "exp" => Builtin::Exp,
            "sum" => Builtin::Sum,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Sqrt => "sqrt",
            Builtin::Atan2 => "atan2",
            Builtin::Cos => "cos",
            Builtin::Sin => "sin",
            Builtin::Exp => "exp",
            Builtin::Sum => "sum",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Atan2 => 2,
            _ => 1,
        }
    }
}

/// One subscript slot; `All` is an empty slot as in `f1[i , ]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Index {
    Expr(Expr),
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarRef {
    pub name: String,
    pub indices: Vec<Index>,
}

impl VarRef {
    pub fn scalar(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            indices: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Var(VarRef),
    Neg(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Call {
        func: Builtin,
        args: Vec<Expr>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    /// Mean and precision.
    Normal { mean: Expr, precision: Expr },
    /// Shape and rate.
    Gamma { shape: Expr, rate: Expr },
    Uniform { lo: Expr, hi: Expr },
}

impl Distribution {
    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Normal { .. } => "dnorm",
            Distribution::Gamma { .. } => "dgamma",
            Distribution::Uniform { .. } => "dunif",
        }
    }

    pub fn params(&self) -> [&Expr; 2] {
        match self {
            Distribution::Normal { mean, precision } => [mean, precision],
            Distribution::Gamma { shape, rate } => [shape, rate],
            Distribution::Uniform { lo, hi } => [lo, hi],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    For {
        var: String,
        lo: Expr,
        hi: Expr,
        body: Vec<Stmt>,
    },
    Deterministic {
        lhs: VarRef,
        expr: Expr,
    },
    Stochastic {
        lhs: VarRef,
        dist: Distribution,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelAst {
    pub statements: Vec<Stmt>,
}

impl ModelAst {
    /// Every variable name mentioned anywhere, excluding loop indices.
    pub fn referenced_names(&self) -> BTreeSet<String> {
        fn expr(e: &Expr, out: &mut BTreeSet<String>) {
            match e {
                Expr::Number(_) => {}
                Expr::Var(v) => var(v, out),
                Expr::Neg(inner) => expr(inner, out),
                Expr::Binary { lhs, rhs, .. } => {
                    expr(lhs, out);
                    expr(rhs, out);
                }
                Expr::Call { args, .. } => args.iter().for_each(|a| expr(a, out)),
            }
        }
        fn var(v: &VarRef, out: &mut BTreeSet<String>) {
            out.insert(v.name.clone());
            for i in &v.indices {
                if let Index::Expr(e) = i {
                    expr(e, out);
                }
            }
        }
        fn stmts(list: &[Stmt], out: &mut BTreeSet<String>) {
            for s in list {
                match s {
                    Stmt::For { lo, hi, body, .. } => {
                        expr(lo, out);
                        expr(hi, out);
                        stmts(body, out);
                    }
                    Stmt::Deterministic { lhs, expr: e } => {
                        var(lhs, out);
                        expr(e, out);
                    }
                    Stmt::Stochastic { lhs, dist } => {
                        var(lhs, out);
                        dist.params().into_iter().for_each(|p| expr(p, out));
                    }
                }
            }
        }
        let mut all = BTreeSet::new();
        stmts(&self.statements, &mut all);
        // Loop variables show up as references inside subscripts.
        let mut loop_vars = BTreeSet::new();
        collect_loop_vars(&self.statements, &mut loop_vars);
        all.retain(|n| !loop_vars.contains(n));
        all
    }
}

fn collect_loop_vars(list: &[Stmt], out: &mut BTreeSet<String>) {
    for s in list {
        if let Stmt::For { var, body, .. } = s {
            out.insert(var.clone());
            collect_loop_vars(body, out);
        }
    }
}

// Printing fully parenthesizes compound subexpressions so the output
// re-parses to the same tree regardless of precedence.

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(v) => write!(f, "{v:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(inner) => write!(f, "(-{inner})"),
            Expr::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::Call { func, args } => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl fmt::Display for VarRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        if self.indices.is_empty() {
            return Ok(());
        }
        f.write_str("[")?;
        for (i, idx) in self.indices.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            if let Index::Expr(e) = idx {
                write!(f, "{e}")?;
            }
        }
        f.write_str("]")
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b] = self.params();
        write!(f, "{}({a}, {b})", self.name())
    }
}

fn write_stmts(f: &mut fmt::Formatter<'_>, stmts: &[Stmt], depth: usize) -> fmt::Result {
    let pad = "  ".repeat(depth);
    for s in stmts {
        match s {
            Stmt::For { var, lo, hi, body } => {
                writeln!(f, "{pad}for ({var} in {lo} : {hi}) {{")?;
                write_stmts(f, body, depth + 1)?;
                writeln!(f, "{pad}}}")?;
            }
            Stmt::Deterministic { lhs, expr } => writeln!(f, "{pad}{lhs} <- {expr}")?,
            Stmt::Stochastic { lhs, dist } => writeln!(f, "{pad}{lhs} ~ {dist}")?,
        }
    }
    Ok(())
}

impl fmt::Display for ModelAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {{")?;
        write_stmts(f, &self.statements, 1)?;
        writeln!(f, "}}")
    }
}
