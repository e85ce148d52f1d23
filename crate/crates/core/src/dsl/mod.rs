//! Front end and graph compiler for a BUGS-style modelling language.
//!
//! The accepted language covers nested `for` loops, deterministic (`<-`) and
//! stochastic (`~`) statements, 1-D and 2-D subscripts, row slices inside
//! `sum`, the builtins `sqrt`, `atan2`, `cos`, `sin`, `exp` and `sum`, and the
//! distributions `dnorm` (mean, precision), `dgamma` (shape, rate) and
//! `dunif` (lower, upper).
//!
//! ```
//! use std::collections::HashMap;
//! use darkmatter::dsl::{self, DataArray};
//!
//! let graph = dsl::compile_source(
//!     "model { y ~ dnorm(0, 1) }",
//!     &HashMap::new(),
//!     &HashMap::from([("y".to_string(), DataArray::scalar(0.0))]),
//! )
//! .unwrap();
//! let lp = graph.log_joint(&[]).unwrap();
//! assert!((lp + 0.918_938_533).abs() < 1e-9);
//! ```

pub mod ast;
mod graph;
pub mod lexer;
pub mod parser;

use std::collections::HashMap;

use thiserror::Error;

pub use ast::ModelAst;
pub use graph::{
    compile, CompiledGraph, DataArray, DistKind, Node, NodeId, NodeKind, Support, Dependents,
};
pub use lexer::{tokenize, Position, Token, TokenKind};
pub use parser::parse;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("{pos}: lexical error: {message}")]
    Lex { pos: Position, message: String },
    #[error("{pos}: syntax error: {message}")]
    Syntax { pos: Position, message: String },
    #[error("{pos}: unknown distribution `{name}`")]
    UnknownDistribution { pos: Position, name: String },
    #[error("{pos}: unknown function `{name}`")]
    UnknownFunction { pos: Position, name: String },
    #[error("{pos}: `{name}` takes {expected} argument(s), found {found}")]
    Arity {
        pos: Position,
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("undefined variable `{0}`")]
    UndefinedVariable(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cyclic dependency involving `{0}`")]
    Cycle(String),
    #[error("`{0}` is assigned more than once")]
    MultiplyAssigned(String),
    #[error("invalid loop bound or index: {0}")]
    NonInteger(String),
    #[error("{0}")]
    Invalid(String),
    #[error("no value assigned to unobserved node `{0}`")]
    MissingAssignment(String),
    #[error("`{0}` is not an unobserved stochastic node")]
    NotUnobserved(String),
}

/// Tokenizes, parses and compiles in one step.
pub fn compile_source(
    source: &str,
    constants: &HashMap<String, f64>,
    data: &HashMap<String, DataArray>,
) -> Result<CompiledGraph, DslError> {
    let ast = parse(&tokenize(source)?)?;
    compile(&ast, constants, data)
}
