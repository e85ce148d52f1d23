use std::fmt;

use super::DslError;

/// 1-based line/column of the first character of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Position {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Ident,
    Number(f64),
    Model,
    For,
    In,
    Tilde,
    LeftArrow,
    Comma,
    Colon,
    Semicolon,
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Plus,
    Minus,
    Star,
    Slash,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub pos: Position,
}

impl Token {
    pub fn describe(&self) -> String {
        match self.kind {
            TokenKind::Ident => format!("identifier `{}`", self.text),
            TokenKind::Number(_) => format!("number `{}`", self.text),
            _ => format!("`{}`", self.text),
        }
    }
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    line: usize,
    column: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&mut self) -> Option<char> {
        self.chars.peek().map(|&(_, c)| c)
    }

    fn offset(&mut self, len: usize) -> usize {
        self.chars.peek().map_or(len, |&(i, _)| i)
    }

    fn bump(&mut self) -> Option<char> {
        let (_, c) = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn pos(&self) -> Position {
        Position {
            line: self.line,
            column: self.column,
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

/// Splits model source into tokens, dropping whitespace and `#` comments.
pub fn tokenize(source: &str) -> Result<Vec<Token>, DslError> {
    let mut cur = Cursor {
        chars: source.char_indices().peekable(),
        line: 1,
        column: 1,
    };
    let mut tokens = Vec::new();

    while let Some(c) = cur.peek() {
        if c.is_whitespace() {
            cur.bump();
            continue;
        }
        if c == '#' {
            while cur.peek().is_some_and(|c| c != '\n') {
                cur.bump();
            }
            continue;
        }

        let pos = cur.pos();
        let start = cur.offset(source.len());

        let kind = if is_ident_start(c) {
            while cur.peek().is_some_and(is_ident_continue) {
                cur.bump();
            }
            match &source[start..cur.offset(source.len())] {
                "model" => TokenKind::Model,
                "for" => TokenKind::For,
                "in" => TokenKind::In,
                _ => TokenKind::Ident,
            }
        } else if c.is_ascii_digit() || c == '.' {
            lex_number(&mut cur, source, start)?
        } else {
            cur.bump();
            match c {
                '~' => TokenKind::Tilde,
                '<' => {
                    if cur.peek() == Some('-') {
                        cur.bump();
                        TokenKind::LeftArrow
                    } else {
                        return Err(DslError::Lex {
                            pos,
                            message: "expected `<-`".into(),
                        });
                    }
                }
                ',' => TokenKind::Comma,
                ':' => TokenKind::Colon,
                ';' => TokenKind::Semicolon,
                '(' => TokenKind::LParen,
                ')' => TokenKind::RParen,
                '{' => TokenKind::LBrace,
                '}' => TokenKind::RBrace,
                '[' => TokenKind::LBracket,
                ']' => TokenKind::RBracket,
                '+' => TokenKind::Plus,
                '-' => TokenKind::Minus,
                '*' => TokenKind::Star,
                '/' => TokenKind::Slash,
                other => {
                    return Err(DslError::Lex {
                        pos,
                        message: format!("unexpected character `{other}`"),
                    })
                }
            }
        };
        let end = cur.offset(source.len());
        tokens.push(Token {
            kind,
            text: source[start..end].to_string(),
            pos,
        });
    }
    Ok(tokens)
}

// digits [. digits] [(e|E) [+|-] digits], or . digits [...]; a number running
// straight into a letter, underscore or second dot is malformed.
fn lex_number(cur: &mut Cursor<'_>, source: &str, start: usize) -> Result<TokenKind, DslError> {
    let malformed = |pos: Position| DslError::Lex {
        pos,
        message: "malformed number".into(),
    };
    let mut digits = 0;
    while cur.peek().is_some_and(|c| c.is_ascii_digit()) {
        cur.bump();
        digits += 1;
    }
    if cur.peek() == Some('.') {
        cur.bump();
        while cur.peek().is_some_and(|c| c.is_ascii_digit()) {
            cur.bump();
            digits += 1;
        }
    }
    if digits == 0 {
        return Err(malformed(cur.pos()));
    }
    if matches!(cur.peek(), Some('e' | 'E')) {
        let exp_pos = cur.pos();
        cur.bump();
        if matches!(cur.peek(), Some('+' | '-')) {
            cur.bump();
        }
        let mut exp_digits = 0;
        while cur.peek().is_some_and(|c| c.is_ascii_digit()) {
            cur.bump();
            exp_digits += 1;
        }
        if exp_digits == 0 {
            return Err(malformed(exp_pos));
        }
    }
    if cur.peek().is_some_and(is_ident_continue) {
        return Err(malformed(cur.pos()));
    }
    let text = &source[start..cur.offset(source.len())];
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(TokenKind::Number(v)),
        _ => Err(malformed(cur.pos())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<TokenKind> {
        tokenize(src).unwrap().into_iter().map(|t| t.kind).collect()
    }

    fn lex_err_at(src: &str) -> Position {
        match tokenize(src) {
            Err(DslError::Lex { pos, .. }) => pos,
            other => panic!("expected lexical error, got {other:?}"),
        }
    }

    #[test]
    fn model_brace() {
        assert_eq!(kinds("model{"), vec![TokenKind::Model, TokenKind::LBrace]);
    }

    #[test]
    fn stochastic_statement() {
        let toks = tokenize("e1[i] ~ dnorm(mu1[i], 0.05)").unwrap();
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(
            texts,
            ["e1", "[", "i", "]", "~", "dnorm", "(", "mu1", "[", "i", "]", ",", "0.05", ")"]
        );
        assert_eq!(toks.last().unwrap().kind, TokenKind::RParen);
        assert_eq!(toks[12].kind, TokenKind::Number(0.05));
        assert_eq!(toks[5].pos, Position { line: 1, column: 9 });
    }

    #[test]
    fn malformed_numbers() {
        assert_eq!(lex_err_at("0.00x1"), Position { line: 1, column: 5 });
        assert_eq!(lex_err_at("x <- 1.2.3"), Position { line: 1, column: 9 });
        assert_eq!(lex_err_at("2e+"), Position { line: 1, column: 2 });
        assert_eq!(lex_err_at("\n  ."), Position { line: 2, column: 4 });
    }

    #[test]
    fn invalid_characters() {
        assert_eq!(lex_err_at("model { x ^ 2 }"), Position { line: 1, column: 11 });
        assert_eq!(lex_err_at("a < b"), Position { line: 1, column: 3 });
    }

    #[test]
    fn comments_and_numbers() {
        let k = kinds("# header\nx <- 1e-3 # trailing\n  + .5 ; 20");
        assert_eq!(
            k,
            vec![
                TokenKind::Ident,
                TokenKind::LeftArrow,
                TokenKind::Number(1e-3),
                TokenKind::Plus,
                TokenKind::Number(0.5),
                TokenKind::Semicolon,
                TokenKind::Number(20.0),
            ]
        );
        let toks = tokenize("# c\n  for").unwrap();
        assert_eq!(toks[0].pos, Position { line: 2, column: 3 });
    }

    #[test]
    fn dotted_identifiers_and_keywords() {
        let toks = tokenize("for in model x.y_2").unwrap();
        assert_eq!(toks[0].kind, TokenKind::For);
        assert_eq!(toks[1].kind, TokenKind::In);
        assert_eq!(toks[2].kind, TokenKind::Model);
        assert_eq!(toks[3].text, "x.y_2");
    }
}
