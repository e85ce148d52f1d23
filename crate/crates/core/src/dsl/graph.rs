use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;

use super::ast::{BinOp, Builtin, Distribution, Expr, Index, ModelAst, Stmt, VarRef};
use super::DslError;
use crate::density;

/// Position of a node in the compiled graph's topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// A dense data array bound by name, stored row-major; subscripts are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct DataArray {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DataArray {
    pub fn scalar(value: f64) -> Self {
        Self {
            dims: Vec::new(),
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            dims: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DslError> {
        if rows * cols != values.len() {
            return Err(DslError::DimensionMismatch(format!(
                "{rows}x{cols} matrix given {} values",
                values.len()
            )));
        }
        Ok(Self {
            dims: vec![rows, cols],
            values,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at 1-based `idx`, or `None` when out of range or of the wrong rank.
    pub fn get(&self, idx: &[usize]) -> Option<f64> {
        if idx.len() != self.dims.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in idx.iter().zip(&self.dims) {
            if i == 0 || i > d {
                return None;
            }
            flat = flat * d + (i - 1);
        }
        self.values.get(flat).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    Normal,
    Gamma,
    Uniform,
}

/// Support of a stochastic node, which fixes its unconstraining transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Real,
    Positive,
    Interval(f64, f64),
}

impl Support {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Support::Real => x.is_finite(),
            Support::Positive => x > 0.0 && x.is_finite(),
            Support::Interval(lo, hi) => x >= lo && x <= hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CExpr {
    Const(f64),
    Node(NodeId),
    Neg(Box<CExpr>),
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
    Call(Builtin, Box<CExpr>),
    Atan2(Box<CExpr>, Box<CExpr>),
    Sum(Vec<CExpr>),
}

impl CExpr {
    fn eval(&self, values: &[f64]) -> f64 {
        match self {
            CExpr::Const(v) => *v,
            CExpr::Node(id) => values[id.0],
            CExpr::Neg(e) => -e.eval(values),
            CExpr::Bin(op, a, b) => {
                let (a, b) = (a.eval(values), b.eval(values));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            CExpr::Call(f, e) => {
                let x = e.eval(values);
                match f {
                    Builtin::Sqrt => x.sqrt(),
                    Builtin::Cos => x.cos(),
                    Builtin::Sin => x.sin(),
                    Builtin::Exp => x.exp(),
                    Builtin::Sum => x,
                    Builtin::Atan2 => unreachable!("atan2 is binary"),
                }
            }
            CExpr::Atan2(y, x) => y.eval(values).atan2(x.eval(values)),
            CExpr::Sum(terms) => terms.iter().map(|t| t.eval(values)).sum(),
        }
    }

    fn visit_nodes(&self, f: &mut impl FnMut(NodeId)) {
        match self {
            CExpr::Const(_) => {}
            CExpr::Node(id) => f(*id),
            CExpr::Neg(e) | CExpr::Call(_, e) => e.visit_nodes(f),
            CExpr::Bin(_, a, b) | CExpr::Atan2(a, b) => {
                a.visit_nodes(f);
                b.visit_nodes(f);
            }
            CExpr::Sum(terms) => terms.iter().for_each(|t| t.visit_nodes(f)),
        }
    }

    fn remap(&mut self, map: &[usize]) {
        match self {
            CExpr::Const(_) => {}
            CExpr::Node(id) => id.0 = map[id.0],
            CExpr::Neg(e) | CExpr::Call(_, e) => e.remap(map),
            CExpr::Bin(_, a, b) | CExpr::Atan2(a, b) => {
                a.remap(map);
                b.remap(map);
            }
            CExpr::Sum(terms) => terms.iter_mut().for_each(|t| t.remap(map)),
        }
    }

    fn constant_value(&self) -> Option<f64> {
        let mut has_node = false;
        self.visit_nodes(&mut |_| has_node = true);
        (!has_node).then(|| self.eval(&[]))
    }
}

#[derive(Debug, Clone)]
enum Definition {
    Deterministic(CExpr),
    Stochastic {
        kind: DistKind,
        params: [CExpr; 2],
        support: Support,
        observed: Option<f64>,
    },
}

/// Public view of what a node is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    Deterministic,
    Stochastic { dist: DistKind, observed: bool },
}

#[derive(Debug, Clone)]
pub struct Node {
    name: String,
    def: Definition,
    parents: Vec<NodeId>,
    children: Vec<NodeId>,
}

impl Node {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> NodeKind {
        match &self.def {
            Definition::Deterministic(_) => NodeKind::Deterministic,
            Definition::Stochastic { kind, observed, .. } => NodeKind::Stochastic {
                dist: *kind,
                observed: observed.is_some(),
            },
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.def, Definition::Stochastic { .. })
    }

    pub fn is_observed(&self) -> bool {
        matches!(
            self.def,
            Definition::Stochastic {
                observed: Some(_),
                ..
            }
        )
    }

    pub fn observed_value(&self) -> Option<f64> {
        match self.def {
            Definition::Stochastic { observed, .. } => observed,
            Definition::Deterministic(_) => None,
        }
    }

    pub fn support(&self) -> Option<Support> {
        match self.def {
            Definition::Stochastic { support, .. } => Some(support),
            Definition::Deterministic(_) => None,
        }
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn children(&self) -> &[NodeId] {
        &self.children
    }
}

/// Nodes whose value or density changes when one unobserved node moves:
/// deterministic descendants reachable without passing through another
/// stochastic node (in evaluation order), and the stochastic nodes at the
/// end of those paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dependents {
    pub deterministic: Vec<NodeId>,
    pub stochastic: Vec<NodeId>,
}

/// A plate-expanded directed graphical model in topological order.
///
/// The graph is immutable once compiled. Evaluation works on a caller-owned
/// value vector holding one slot per node, so one graph can serve any number
/// of concurrent evaluations.
#[derive(Debug, Clone)]
pub struct CompiledGraph {
    nodes: Vec<Node>,
    constants: BTreeMap<String, f64>,
    by_name: HashMap<String, NodeId>,
    by_key: HashMap<(String, Vec<usize>), NodeId>,
    unobserved: Vec<NodeId>,
    unobserved_slot: Vec<Option<usize>>,
    dependents: Vec<Dependents>,
}

fn node_name(name: &str, idx: &[usize]) -> String {
    if idx.is_empty() {
        return name.to_string();
    }
    let parts: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
    format!("{name}[{}]", parts.join(","))
}

impl CompiledGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn constants(&self) -> &BTreeMap<String, f64> {
        &self.constants
    }

    /// Looks up a node by its display name, e.g. `loc[1,2]` or `mu`.
    /// Whitespace inside the brackets is ignored.
    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        let compact: String = name.chars().filter(|c| !c.is_whitespace()).collect();
        self.by_name.get(&compact).copied()
    }

    pub fn lookup_index(&self, name: &str, idx: &[usize]) -> Option<NodeId> {
        self.by_key.get(&(name.to_string(), idx.to_vec())).copied()
    }

    /// Unobserved stochastic nodes in topological order. Assignments passed
    /// to [`CompiledGraph::log_joint`] follow this order.
    pub fn unobserved(&self) -> &[NodeId] {
        &self.unobserved
    }

    /// Position of `id` within [`CompiledGraph::unobserved`].
    pub fn unobserved_slot(&self, id: NodeId) -> Option<usize> {
        self.unobserved_slot.get(id.0).copied().flatten()
    }

    pub fn stochastic_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_stochastic()).count()
    }

    pub fn observed_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_observed()).count()
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.parents.iter().map(move |&p| (p, NodeId(i))))
    }

    /// Dependents of an unobserved node; errors for any other node.
    pub fn dependents(&self, id: NodeId) -> Result<&Dependents, DslError> {
        match self.unobserved_slot(id) {
            Some(slot) => Ok(&self.dependents[slot]),
            None => Err(DslError::NotUnobserved(
                self.nodes
                    .get(id.0)
                    .map_or_else(|| format!("#{}", id.0), |n| n.name.clone()),
            )),
        }
    }

    /// Distribution family and evaluated parameters of a stochastic node.
    pub fn dist_params(&self, id: NodeId, values: &[f64]) -> Option<(DistKind, f64, f64)> {
        match &self.nodes[id.0].def {
            Definition::Stochastic { kind, params, .. } => {
                Some((*kind, params[0].eval(values), params[1].eval(values)))
            }
            Definition::Deterministic(_) => None,
        }
    }

    /// Log-density of a stochastic node at its slot in `values`.
    pub fn log_density(&self, id: NodeId, values: &[f64]) -> f64 {
        let Some((kind, a, b)) = self.dist_params(id, values) else {
            return 0.0;
        };
        let x = values[id.0];
        let lp = match kind {
            DistKind::Normal => density::normal_prec(x, a, b),
            DistKind::Gamma => density::gamma(x, a, b),
            DistKind::Uniform => density::uniform(x, a, b),
        };
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    /// Recomputes a deterministic node from its parents.
    pub fn evaluate(&self, id: NodeId, values: &mut [f64]) {
        if let Definition::Deterministic(expr) = &self.nodes[id.0].def {
            values[id.0] = expr.eval(values);
        }
    }

    /// A value vector with observed nodes filled in and everything else NaN.
    pub fn blank_values(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|n| n.observed_value().unwrap_or(f64::NAN))
            .collect()
    }

    /// Writes `assignment` into the unobserved slots of `values` and
    /// recomputes every deterministic node.
    pub fn fill_values(&self, assignment: &[f64], values: &mut Vec<f64>) -> Result<(), DslError> {
        if assignment.len() != self.unobserved.len() {
            let missing = self
                .unobserved
                .get(assignment.len())
                .map_or_else(|| "<extra values>".to_string(), |id| self.nodes[id.0].name.clone());
            return Err(DslError::MissingAssignment(missing));
        }
        values.clear();
        values.extend(self.nodes.iter().map(|n| n.observed_value().unwrap_or(f64::NAN)));
        for (&id, &v) in self.unobserved.iter().zip(assignment) {
            values[id.0] = v;
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Definition::Deterministic(expr) = &n.def {
                values[i] = expr.eval(values);
            }
        }
        Ok(())
    }

    /// Sum of the log-densities of all stochastic nodes for a fully
    /// evaluated value vector.
    pub fn log_joint_values(&self, values: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.is_stochastic() {
                let lp = self.log_density(NodeId(i), values);
                if lp == f64::NEG_INFINITY {
                    return lp;
                }
                total += lp;
            }
        }
        total
    }

    /// Log joint density with `assignment[k]` the value of `unobserved()[k]`.
    pub fn log_joint(&self, assignment: &[f64]) -> Result<f64, DslError> {
        let mut scratch = Vec::with_capacity(self.nodes.len());
        self.log_joint_with(assignment, &mut scratch)
    }

    /// [`CompiledGraph::log_joint`] reusing caller-owned scratch space.
    pub fn log_joint_with(&self, assignment: &[f64], scratch: &mut Vec<f64>) -> Result<f64, DslError> {
        self.fill_values(assignment, scratch)?;
        Ok(self.log_joint_values(scratch))
    }

    /// Builds an assignment vector from node names.
    pub fn assignment_from(&self, named: &HashMap<String, f64>) -> Result<Vec<f64>, DslError> {
        let by_compact: HashMap<String, f64> = named
            .iter()
            .map(|(k, &v)| (k.chars().filter(|c| !c.is_whitespace()).collect(), v))
            .collect();
        self.unobserved
            .iter()
            .map(|id| {
                let name = &self.nodes[id.0].name;
                by_compact
                    .get(name)
                    .copied()
                    .ok_or_else(|| DslError::MissingAssignment(name.clone()))
            })
            .collect()
    }

    /// Every edge points forward in the node order.
    pub fn is_topologically_sorted(&self) -> bool {
        self.edges().all(|(u, v)| u < v)
    }
}

impl fmt::Display for CompiledGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} nodes ({} deterministic, {} stochastic: {} observed, {} unobserved)",
            self.len(),
            self.len() - self.stochastic_count(),
            self.stochastic_count(),
            self.observed_count(),
            self.unobserved.len()
        )
    }
}

// ---------------------------------------------------------------------------
// Compilation

struct Pending<'a> {
    name: String,
    idx: Vec<usize>,
    stmt: PendingStmt<'a>,
    env: Vec<(String, f64)>,
}

enum PendingStmt<'a> {
    Deterministic(&'a Expr),
    Stochastic(&'a Distribution),
}

struct Ctx<'a> {
    constants: &'a HashMap<String, f64>,
    data: &'a HashMap<String, DataArray>,
    keys: HashMap<(String, Vec<usize>), usize>,
    shapes: HashMap<String, Vec<usize>>,
}

fn lookup_env(env: &[(String, f64)], name: &str) -> Option<f64> {
    env.iter().rev().find(|(n, _)| n == name).map(|&(_, v)| v)
}

// Loop bounds and subscripts: constants, loop indices and arithmetic only.
fn const_eval(
    expr: &Expr,
    env: &[(String, f64)],
    constants: &HashMap<String, f64>,
) -> Result<f64, DslError> {
    Ok(match expr {
        Expr::Number(v) => *v,
        Expr::Var(VarRef { name, indices }) if indices.is_empty() => lookup_env(env, name)
            .or_else(|| constants.get(name).copied())
            .ok_or_else(|| {
                DslError::NonInteger(format!(
                    "`{name}` is not a constant or loop index and cannot appear in a loop bound or subscript"
                ))
            })?,
        Expr::Var(v) => {
            return Err(DslError::NonInteger(format!(
                "`{v}` cannot appear in a loop bound or subscript"
            )))
        }
        Expr::Neg(e) => -const_eval(e, env, constants)?,
        Expr::Binary { op, lhs, rhs } => {
            let (a, b) = (const_eval(lhs, env, constants)?, const_eval(rhs, env, constants)?);
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
            }
        }
        Expr::Call { func, args } => {
            let vals = args
                .iter()
                .map(|a| const_eval(a, env, constants))
                .collect::<Result<Vec<_>, _>>()?;
            match func {
                Builtin::Sqrt => vals[0].sqrt(),
                Builtin::Cos => vals[0].cos(),
                Builtin::Sin => vals[0].sin(),
                Builtin::Exp => vals[0].exp(),
                Builtin::Sum => vals[0],
                Builtin::Atan2 => vals[0].atan2(vals[1]),
            }
        }
    })
}

fn as_integer(v: f64, what: &dyn fmt::Display) -> Result<i64, DslError> {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        Ok(v as i64)
    } else {
        Err(DslError::NonInteger(format!("{what} evaluates to {v}, not an integer")))
    }
}

fn subscript(expr: &Expr, env: &[(String, f64)], constants: &HashMap<String, f64>) -> Result<usize, DslError> {
    let v = as_integer(const_eval(expr, env, constants)?, expr)?;
    if v < 1 {
        return Err(DslError::DimensionMismatch(format!(
            "subscript `{expr}` evaluates to {v}; subscripts start at 1"
        )));
    }
    Ok(v as usize)
}

fn unroll<'a>(
    stmts: &'a [Stmt],
    env: &mut Vec<(String, f64)>,
    constants: &HashMap<String, f64>,
    out: &mut Vec<Pending<'a>>,
) -> Result<(), DslError> {
    for stmt in stmts {
        match stmt {
            Stmt::For { var, lo, hi, body } => {
                let lo_v = as_integer(const_eval(lo, env, constants)?, lo)?;
                let hi_v = as_integer(const_eval(hi, env, constants)?, hi)?;
                for i in lo_v..=hi_v {
                    env.push((var.clone(), i as f64));
                    unroll(body, env, constants, out)?;
                    env.pop();
                }
            }
            Stmt::Deterministic { lhs, expr } => {
                out.push(pending(lhs, PendingStmt::Deterministic(expr), env, constants)?)
            }
            Stmt::Stochastic { lhs, dist } => {
                out.push(pending(lhs, PendingStmt::Stochastic(dist), env, constants)?)
            }
        }
    }
    Ok(())
}

fn pending<'a>(
    lhs: &VarRef,
    stmt: PendingStmt<'a>,
    env: &[(String, f64)],
    constants: &HashMap<String, f64>,
) -> Result<Pending<'a>, DslError> {
    let idx = lhs
        .indices
        .iter()
        .map(|i| match i {
            Index::Expr(e) => subscript(e, env, constants),
            Index::All => Err(DslError::Invalid(format!("empty subscript on left-hand side `{lhs}`"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Pending {
        name: lhs.name.clone(),
        idx,
        stmt,
        env: env.to_vec(),
    })
}

impl Ctx<'_> {
    fn resolve(&self, expr: &Expr, env: &[(String, f64)]) -> Result<CExpr, DslError> {
        Ok(match expr {
            Expr::Number(v) => CExpr::Const(*v),
            Expr::Var(v) => self.resolve_var(v, env)?,
            Expr::Neg(e) => CExpr::Neg(Box::new(self.resolve(e, env)?)),
            Expr::Binary { op, lhs, rhs } => CExpr::Bin(
                *op,
                Box::new(self.resolve(lhs, env)?),
                Box::new(self.resolve(rhs, env)?),
            ),
            Expr::Call {
                func: Builtin::Sum,
                args,
            } => match &args[0] {
                Expr::Var(v) if self.is_slice(v) => CExpr::Sum(self.resolve_slice(v, env)?),
                other => CExpr::Sum(vec![self.resolve(other, env)?]),
            },
            Expr::Call {
                func: Builtin::Atan2,
                args,
            } => CExpr::Atan2(
                Box::new(self.resolve(&args[0], env)?),
                Box::new(self.resolve(&args[1], env)?),
            ),
            Expr::Call { func, args } => CExpr::Call(*func, Box::new(self.resolve(&args[0], env)?)),
        })
    }

    fn rank_of(&self, name: &str) -> Option<usize> {
        self.shapes
            .get(name)
            .map(Vec::len)
            .or_else(|| self.data.get(name).map(|d| d.dims.len()))
    }

    // `x[i, ]`, or a bare array name such as `x` inside `sum`.
    fn is_slice(&self, v: &VarRef) -> bool {
        v.indices.iter().any(|i| matches!(i, Index::All))
            || (v.indices.is_empty() && self.rank_of(&v.name).is_some_and(|r| r > 0))
    }

    fn extent(&self, name: &str) -> Option<Vec<usize>> {
        self.shapes
            .get(name)
            .cloned()
            .or_else(|| self.data.get(name).map(|d| d.dims.clone()))
    }

    fn resolve_slice(&self, v: &VarRef, env: &[(String, f64)]) -> Result<Vec<CExpr>, DslError> {
        let Some(extent) = self.extent(&v.name) else {
            return Err(DslError::UndefinedVariable(v.name.clone()));
        };
        let slots: Vec<Option<usize>> = if v.indices.is_empty() {
            vec![None; extent.len()]
        } else {
            if v.indices.len() != extent.len() {
                return Err(DslError::DimensionMismatch(format!(
                    "`{v}` uses {} subscripts but `{}` has {}",
                    v.indices.len(),
                    v.name,
                    extent.len()
                )));
            }
            v.indices
                .iter()
                .map(|i| match i {
                    Index::Expr(e) => subscript(e, env, self.constants).map(Some),
                    Index::All => Ok(None),
                })
                .collect::<Result<_, _>>()?
        };
        // Cartesian product over the empty slots, last slot fastest.
        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for (slot, &n) in slots.iter().zip(&extent) {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    let choices: Vec<usize> = match slot {
                        Some(i) => vec![*i],
                        None => (1..=n).collect(),
                    };
                    choices.into_iter().map(move |c| {
                        let mut p = prefix.clone();
                        p.push(c);
                        p
                    })
                })
                .collect();
        }
        combos.iter().map(|idx| self.element(&v.name, idx)).collect()
    }

    fn resolve_var(&self, v: &VarRef, env: &[(String, f64)]) -> Result<CExpr, DslError> {
        if v.indices.iter().any(|i| matches!(i, Index::All)) {
            return Err(DslError::Invalid(format!(
                "empty subscripts are only allowed directly inside sum(): `{v}`"
            )));
        }
        if v.indices.is_empty() {
            if let Some(val) = lookup_env(env, &v.name) {
                return Ok(CExpr::Const(val));
            }
            if let Some(&val) = self.constants.get(&v.name) {
                return Ok(CExpr::Const(val));
            }
        }
        let idx = v
            .indices
            .iter()
            .map(|i| match i {
                Index::Expr(e) => subscript(e, env, self.constants),
                Index::All => unreachable!(),
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.element(&v.name, &idx)
    }

    fn element(&self, name: &str, idx: &[usize]) -> Result<CExpr, DslError> {
        if let Some(shape) = self.shapes.get(name) {
            if shape.len() != idx.len() {
                return Err(DslError::DimensionMismatch(format!(
                    "`{}` used with {} subscript(s) but defined with {}",
                    name,
                    idx.len(),
                    shape.len()
                )));
            }
            return match self.keys.get(&(name.to_string(), idx.to_vec())) {
                Some(&p) => Ok(CExpr::Node(NodeId(p))),
                None => Err(DslError::UndefinedVariable(node_name(name, idx))),
            };
        }
        if let Some(arr) = self.data.get(name) {
            if arr.dims.len() != idx.len() {
                return Err(DslError::DimensionMismatch(format!(
                    "data `{}` has {} dimension(s) but is used with {} subscript(s)",
                    name,
                    arr.dims.len(),
                    idx.len()
                )));
            }
            return match arr.get(idx) {
                Some(v) if !v.is_nan() => Ok(CExpr::Const(v)),
                Some(_) => Err(DslError::Invalid(format!(
                    "data element {} is missing",
                    node_name(name, idx)
                ))),
                None => Err(DslError::DimensionMismatch(format!(
                    "{} is outside data `{name}` of shape {:?}",
                    node_name(name, idx),
                    arr.dims
                ))),
            };
        }
        if self.constants.contains_key(name) {
            return Err(DslError::DimensionMismatch(format!(
                "constant `{name}` is a scalar and cannot be subscripted"
            )));
        }
        Err(DslError::UndefinedVariable(name.to_string()))
    }
}

/// Unrolls loops, binds data and constants, and orders the resulting nodes
/// topologically.
///
/// Data arrays bound to stochastic variables make those nodes observed; the
/// array must cover the variable exactly. Data arrays with no matching
/// statement act as fixed covariates. Uniform bounds must not depend on
/// other nodes.
pub fn compile(
    ast: &ModelAst,
    constants: &HashMap<String, f64>,
    data: &HashMap<String, DataArray>,
) -> Result<CompiledGraph, DslError> {
    let mut pending = Vec::new();
    unroll(&ast.statements, &mut Vec::new(), constants, &mut pending)?;

    let mut keys = HashMap::with_capacity(pending.len());
    let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
    let mut kinds: HashMap<&str, bool> = HashMap::new();
    for (i, p) in pending.iter().enumerate() {
        if constants.contains_key(&p.name) {
            return Err(DslError::Invalid(format!(
                "`{}` is both a constant and a model variable",
                p.name
            )));
        }
        if keys.insert((p.name.clone(), p.idx.clone()), i).is_some() {
            return Err(DslError::MultiplyAssigned(node_name(&p.name, &p.idx)));
        }
        let is_stochastic = matches!(p.stmt, PendingStmt::Stochastic(_));
        if *kinds.entry(&p.name).or_insert(is_stochastic) != is_stochastic {
            return Err(DslError::Invalid(format!(
                "`{}` mixes deterministic and stochastic definitions",
                p.name
            )));
        }
        match shapes.get_mut(&p.name) {
            None => {
                shapes.insert(p.name.clone(), p.idx.clone());
            }
            Some(shape) if shape.len() != p.idx.len() => {
                return Err(DslError::DimensionMismatch(format!(
                    "`{}` defined with both {} and {} subscripts",
                    p.name,
                    shape.len(),
                    p.idx.len()
                )))
            }
            Some(shape) => {
                for (s, &i) in shape.iter_mut().zip(&p.idx) {
                    *s = (*s).max(i);
                }
            }
        }
    }

    let referenced = ast.referenced_names();
    for (name, arr) in data {
        if arr.values.len() != arr.dims.iter().product::<usize>() {
            return Err(DslError::DimensionMismatch(format!(
                "data `{name}` has {} values for shape {:?}",
                arr.values.len(),
                arr.dims
            )));
        }
        match kinds.get(name.as_str()) {
            Some(false) => {
                return Err(DslError::Invalid(format!(
                    "data bound to deterministic variable `{name}`"
                )))
            }
            Some(true) => {
                let shape = &shapes[name];
                let defined = pending.iter().filter(|p| &p.name == name).count();
                if shape != &arr.dims || defined != arr.values.len() {
                    return Err(DslError::DimensionMismatch(format!(
                        "data `{name}` has shape {:?} but the model defines {defined} element(s) with extent {:?}",
                        arr.dims, shape
                    )));
                }
            }
            None if !referenced.contains(name) => {
                return Err(DslError::Invalid(format!(
                    "data variable `{name}` is not used by the model"
                )))
            }
            None => {}
        }
    }

    let ctx = Ctx {
        constants,
        data,
        keys,
        shapes,
    };

    let mut defs = Vec::with_capacity(pending.len());
    for p in &pending {
        let def = match p.stmt {
            PendingStmt::Deterministic(expr) => Definition::Deterministic(ctx.resolve(expr, &p.env)?),
            PendingStmt::Stochastic(dist) => {
                let [a, b] = dist.params();
                let params = [ctx.resolve(a, &p.env)?, ctx.resolve(b, &p.env)?];
                let (kind, support) = match dist {
                    Distribution::Normal { .. } => (DistKind::Normal, Support::Real),
                    Distribution::Gamma { .. } => (DistKind::Gamma, Support::Positive),
                    Distribution::Uniform { .. } => {
                        let (Some(lo), Some(hi)) = (params[0].constant_value(), params[1].constant_value())
                        else {
                            return Err(DslError::Invalid(format!(
                                "bounds of dunif for `{}` must not depend on other nodes",
                                node_name(&p.name, &p.idx)
                            )));
                        };
                        if !(lo < hi) {
                            return Err(DslError::Invalid(format!(
                                "dunif({lo}, {hi}) for `{}` has an empty support",
                                node_name(&p.name, &p.idx)
                            )));
                        }
                        (DistKind::Uniform, Support::Interval(lo, hi))
                    }
                };
                let observed = match data.get(&p.name) {
                    Some(arr) => match arr.get(&p.idx) {
                        Some(v) if !v.is_nan() => Some(v),
                        _ => {
                            return Err(DslError::Invalid(format!(
                                "data element {} is missing",
                                node_name(&p.name, &p.idx)
                            )))
                        }
                    },
                    None => None,
                };
                Definition::Stochastic {
                    kind,
                    params,
                    support,
                    observed,
                }
            }
        };
        defs.push(def);
    }

    // Parents in creation order.
    let parents: Vec<Vec<usize>> = defs
        .iter()
        .map(|d| {
            let mut ps = Vec::new();
            let mut add = |id: NodeId| ps.push(id.0);
            match d {
                Definition::Deterministic(e) => e.visit_nodes(&mut add),
                Definition::Stochastic { params, .. } => params.iter().for_each(|e| e.visit_nodes(&mut add)),
            }
            ps.sort_unstable();
            ps.dedup();
            ps
        })
        .collect();

    // Kahn's algorithm, always taking the earliest-created ready node.
    let n = defs.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for (v, ps) in parents.iter().enumerate() {
        indegree[v] = ps.len();
        for &u in ps {
            children[u].push(v);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(u)) = ready.pop() {
        order.push(u);
        for &v in &children[u] {
            indegree[v] -= 1;
            if indegree[v] == 0 {
                ready.push(Reverse(v));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&v| indegree[v] > 0).unwrap();
        return Err(DslError::Cycle(node_name(&pending[stuck].name, &pending[stuck].idx)));
    }

    let mut new_id = vec![0usize; n];
    for (pos, &old) in order.iter().enumerate() {
        new_id[old] = pos;
    }
    let mut defs: Vec<Option<Definition>> = defs.into_iter().map(Some).collect();
    let mut nodes = Vec::with_capacity(n);
    for &old in &order {
        let mut def = defs[old].take().unwrap();
        match &mut def {
            Definition::Deterministic(e) => e.remap(&new_id),
            Definition::Stochastic { params, .. } => params.iter_mut().for_each(|e| e.remap(&new_id)),
        }
        let mut ps: Vec<NodeId> = parents[old].iter().map(|&p| NodeId(new_id[p])).collect();
        ps.sort_unstable();
        let mut cs: Vec<NodeId> = children[old].iter().map(|&c| NodeId(new_id[c])).collect();
        cs.sort_unstable();
        nodes.push(Node {
            name: node_name(&pending[old].name, &pending[old].idx),
            def,
            parents: ps,
            children: cs,
        });
    }

    let by_key = ctx
        .keys
        .into_iter()
        .map(|(k, old)| (k, NodeId(new_id[old])))
        .collect();
    let by_name = nodes
        .iter()
        .enumerate()
        .map(|(i, node)| (node.name.clone(), NodeId(i)))
        .collect();

    let unobserved: Vec<NodeId> = (0..n)
        .filter(|&i| nodes[i].is_stochastic() && !nodes[i].is_observed())
        .map(NodeId)
        .collect();
    let mut unobserved_slot = vec![None; n];
    for (slot, id) in unobserved.iter().enumerate() {
        unobserved_slot[id.0] = Some(slot);
    }
    let dependents = unobserved.iter().map(|&id| collect_dependents(&nodes, id)).collect();

    let graph = CompiledGraph {
        nodes,
        constants: constants.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        by_name,
        by_key,
        unobserved,
        unobserved_slot,
        dependents,
    };
    if !graph.is_topologically_sorted() {
        return Err(DslError::Invalid("internal error: node order is not topological".into()));
    }
    Ok(graph)
}

fn collect_dependents(nodes: &[Node], root: NodeId) -> Dependents {
    let mut seen = HashSet::new();
    let mut stack: Vec<NodeId> = nodes[root.0].children.clone();
    let mut out = Dependents::default();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        if nodes[id.0].is_stochastic() {
            out.stochastic.push(id);
        } else {
            out.deterministic.push(id);
            stack.extend(nodes[id.0].children.iter().copied());
        }
    }
    out.deterministic.sort_unstable();
    out.stochastic.sort_unstable();
    out
}
