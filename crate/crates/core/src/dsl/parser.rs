use super::ast::{BinOp, Builtin, Distribution, Expr, Index, ModelAst, Stmt, VarRef};
use super::lexer::{Position, Token, TokenKind};
use super::DslError;

/// Parses a token stream into a model AST.
///
/// Precedence, loosest first: `+ -`, then `* /`, then unary minus; calls and
/// subscripts bind tightest. All binary operators are left-associative.
pub fn parse(tokens: &[Token]) -> Result<ModelAst, DslError> {
    let mut p = Parser { tokens, at: 0 };
    p.expect(&TokenKind::Model, "`model`")?;
    p.expect(&TokenKind::LBrace, "`{`")?;
    let statements = p.block()?;
    if let Some(tok) = p.peek() {
        return Err(p.unexpected(tok, "end of input"));
    }
    Ok(ModelAst { statements })
}

struct Parser<'t> {
    tokens: &'t [Token],
    at: usize,
}

impl<'t> Parser<'t> {
    fn peek(&self) -> Option<&'t Token> {
        self.tokens.get(self.at)
    }

    fn peek_kind(&self) -> Option<&'t TokenKind> {
        self.peek().map(|t| &t.kind)
    }

    fn advance(&mut self) -> Option<&'t Token> {
        let tok = self.tokens.get(self.at);
        self.at += 1;
        tok
    }

    fn end_pos(&self) -> Position {
        self.tokens.last().map_or(Position { line: 1, column: 1 }, |t| Position {
            line: t.pos.line,
            column: t.pos.column + t.text.chars().count(),
        })
    }

    fn unexpected(&self, tok: &Token, expected: &str) -> DslError {
        DslError::Syntax {
            pos: tok.pos,
            message: format!("{expected} expected, found {}", tok.describe()),
        }
    }

    fn eof(&self, expected: &str) -> DslError {
        DslError::Syntax {
            pos: self.end_pos(),
            message: format!("{expected} expected, found end of input"),
        }
    }

    fn expect(&mut self, kind: &TokenKind, what: &str) -> Result<&'t Token, DslError> {
        match self.peek() {
            Some(t) if &t.kind == kind => {
                self.at += 1;
                Ok(t)
            }
            Some(t) => Err(self.unexpected(t, what)),
            None => Err(self.eof(what)),
        }
    }

    fn ident(&mut self) -> Result<&'t Token, DslError> {
        self.expect(&TokenKind::Ident, "identifier")
    }

    // Statements up to and including the closing `}`.
    fn block(&mut self) -> Result<Vec<Stmt>, DslError> {
        let mut stmts = Vec::new();
        loop {
            match self.peek_kind() {
                None => return Err(self.eof("`}`")),
                Some(TokenKind::RBrace) => {
                    self.at += 1;
                    return Ok(stmts);
                }
                Some(TokenKind::Semicolon) => self.at += 1,
                Some(_) => stmts.push(self.statement()?),
            }
        }
    }

    fn statement(&mut self) -> Result<Stmt, DslError> {
        if self.peek_kind() == Some(&TokenKind::For) {
            self.at += 1;
            self.expect(&TokenKind::LParen, "`(`")?;
            let var = self.ident()?.text.clone();
            self.expect(&TokenKind::In, "`in`")?;
            let lo = self.expr()?;
            self.expect(&TokenKind::Colon, "`:`")?;
            let hi = self.expr()?;
            self.expect(&TokenKind::RParen, "`)`")?;
            self.expect(&TokenKind::LBrace, "`{`")?;
            let body = self.block()?;
            return Ok(Stmt::For { var, lo, hi, body });
        }

        let name = self.ident()?;
        let lhs = self.var_ref(name.text.clone(), false)?;
        match self.advance() {
            Some(Token {
                kind: TokenKind::LeftArrow,
                ..
            }) => Ok(Stmt::Deterministic {
                lhs,
                expr: self.expr()?,
            }),
            Some(Token {
                kind: TokenKind::Tilde,
                ..
            }) => Ok(Stmt::Stochastic {
                lhs,
                dist: self.distribution()?,
            }),
            Some(t) => Err(self.unexpected(t, "`<-` or `~`")),
            None => Err(self.eof("`<-` or `~`")),
        }
    }

    fn distribution(&mut self) -> Result<Distribution, DslError> {
        let name = self.ident()?;
        self.expect(&TokenKind::LParen, "`(`")?;
        let args = self.args()?;
        if !matches!(name.text.as_str(), "dnorm" | "dgamma" | "dunif") {
            return Err(DslError::UnknownDistribution {
                pos: name.pos,
                name: name.text.clone(),
            });
        }
        let found = args.len();
        let Ok([a, b]) = <[Expr; 2]>::try_from(args) else {
            return Err(DslError::Arity {
                pos: name.pos,
                name: name.text.clone(),
                expected: 2,
                found,
            });
        };
        Ok(match name.text.as_str() {
            "dnorm" => Distribution::Normal {
                mean: a,
                precision: b,
            },
            "dgamma" => Distribution::Gamma { shape: a, rate: b },
            _ => Distribution::Uniform { lo: a, hi: b },
        })
    }

    // Comma-separated expressions after `(`, consuming the closing `)`.
    fn args(&mut self) -> Result<Vec<Expr>, DslError> {
        let mut args = Vec::new();
        if self.peek_kind() == Some(&TokenKind::RParen) {
            self.at += 1;
            return Ok(args);
        }
        loop {
            args.push(self.expr()?);
            match self.advance() {
                Some(Token {
                    kind: TokenKind::Comma,
                    ..
                }) => continue,
                Some(Token {
                    kind: TokenKind::RParen,
                    ..
                }) => return Ok(args),
                Some(t) => return Err(self.unexpected(t, "`,` or `)`")),
                None => return Err(self.eof("`)`")),
            }
        }
    }

    fn var_ref(&mut self, name: String, allow_slices: bool) -> Result<VarRef, DslError> {
        let mut indices = Vec::new();
        if self.peek_kind() != Some(&TokenKind::LBracket) {
            return Ok(VarRef { name, indices });
        }
        self.at += 1;
        loop {
            match self.peek() {
                Some(t) if matches!(t.kind, TokenKind::Comma | TokenKind::RBracket) => {
                    if !allow_slices {
                        return Err(self.unexpected(t, "index expression"));
                    }
                    indices.push(Index::All);
                }
                _ => indices.push(Index::Expr(self.expr()?)),
            }
            match self.advance() {
                Some(Token {
                    kind: TokenKind::Comma,
                    ..
                }) => continue,
                Some(Token {
                    kind: TokenKind::RBracket,
                    ..
                }) => return Ok(VarRef { name, indices }),
                Some(t) => return Err(self.unexpected(t, "`,` or `]`")),
                None => return Err(self.eof("`]`")),
            }
        }
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek_kind() {
                Some(TokenKind::Plus) => BinOp::Add,
                Some(TokenKind::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.at += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn term(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek_kind() {
                Some(TokenKind::Star) => BinOp::Mul,
                Some(TokenKind::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.at += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn unary(&mut self) -> Result<Expr, DslError> {
        if self.peek_kind() == Some(&TokenKind::Minus) {
            self.at += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, DslError> {
        let Some(tok) = self.advance() else {
            return Err(self.eof("expression"));
        };
        match &tok.kind {
            TokenKind::Number(v) => Ok(Expr::Number(*v)),
            TokenKind::LParen => {
                let inner = self.expr()?;
                self.expect(&TokenKind::RParen, "`)`")?;
                Ok(inner)
            }
            TokenKind::Ident if self.peek_kind() == Some(&TokenKind::LParen) => {
                let func = Builtin::from_name(&tok.text).ok_or_else(|| DslError::UnknownFunction {
                    pos: tok.pos,
                    name: tok.text.clone(),
                })?;
                self.at += 1;
                let args = if func == Builtin::Sum {
                    self.sum_args()?
                } else {
                    self.args()?
                };
                if args.len() != func.arity() {
                    return Err(DslError::Arity {
                        pos: tok.pos,
                        name: tok.text.clone(),
                        expected: func.arity(),
                        found: args.len(),
                    });
                }
                Ok(Expr::Call { func, args })
            }
            TokenKind::Ident => Ok(Expr::Var(self.var_ref(tok.text.clone(), false)?)),
            _ => Err(DslError::Syntax {
                pos: tok.pos,
                message: format!("expression expected, found {}", tok.describe()),
            }),
        }
    }

    // `sum` is the one place where empty subscript slots are allowed.
    fn sum_args(&mut self) -> Result<Vec<Expr>, DslError> {
        let is_bare_ref = matches!(
            (self.tokens.get(self.at), self.tokens.get(self.at + 1)),
            (Some(Token { kind: TokenKind::Ident, .. }), Some(Token { kind: TokenKind::LBracket, .. }))
        );
        if !is_bare_ref {
            return self.args();
        }
        let start = self.at;
        let name = self.ident()?.text.clone();
        let var = self.var_ref(name, true)?;
        if self.peek_kind() == Some(&TokenKind::RParen) {
            self.at += 1;
            return Ok(vec![Expr::Var(var)]);
        }
        // Something like `sum(x[1] * 2)`: reparse as an ordinary expression.
        self.at = start;
        self.args()
    }
}
