//! Tokenizer for the DP query dialect.

use std::fmt;

use super::SyntaxError;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Ident(String),
    Number(f64),
    LeftParen,
    RightParen,
    LeftBrace,
    RightBrace,
    Comma,
    Semicolon,
    Equals,
    At,
    Star,
    Eof,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Ident(s) => write!(f, "{s}"),
            TokenKind::Number(n) => write!(f, "{n}"),
            TokenKind::LeftParen => f.write_str("("),
            TokenKind::RightParen => f.write_str(")"),
            TokenKind::LeftBrace => f.write_str("{"),
            TokenKind::RightBrace => f.write_str("}"),
            TokenKind::Comma => f.write_str(","),
            TokenKind::Semicolon => f.write_str(";"),
            TokenKind::Equals => f.write_str("="),
            TokenKind::At => f.write_str("@"),
            TokenKind::Star => f.write_str("*"),
            TokenKind::Eof => f.write_str("end of input"),
        }
    }
}

/// 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub span: Span,
}

impl Token {
    /// Case-insensitive keyword match for identifier tokens.
    pub fn is_keyword(&self, keyword: &str) -> bool {
        matches!(&self.kind, TokenKind::Ident(s) if s.eq_ignore_ascii_case(keyword))
    }
}

pub fn tokenize(source: &str) -> Result<Vec<Token>, SyntaxError> {
    let mut tokens = Vec::new();
    let mut chars = source.chars().peekable();
    let mut line: u32 = 1;
    let mut col: u32 = 1;

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else if c.is_some() {
                col += 1;
            }
            c
        }};
    }

    while let Some(&c) = chars.peek() {
        let span = Span { line, col };
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump!();
            }
            '-' => {
                // `--` starts a comment running to end of line; a lone `-`
                // has no meaning in this dialect.
                bump!();
                if chars.peek() == Some(&'-') {
                    while let Some(&n) = chars.peek() {
                        if n == '\n' {
                            break;
                        }
                        bump!();
                    }
                } else {
                    return Err(SyntaxError::new(span, "-", "a `--` comment"));
                }
            }
            '(' | ')' | '{' | '}' | ',' | ';' | '=' | '@' | '*' => {
                bump!();
                let kind = match c {
                    '(' => TokenKind::LeftParen,
                    ')' => TokenKind::RightParen,
                    '{' => TokenKind::LeftBrace,
                    '}' => TokenKind::RightBrace,
                    ',' => TokenKind::Comma,
                    ';' => TokenKind::Semicolon,
                    '=' => TokenKind::Equals,
                    '@' => TokenKind::At,
                    _ => TokenKind::Star,
                };
                tokens.push(Token { kind, span });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut ident = String::new();
                while let Some(&n) = chars.peek() {
                    if n.is_ascii_alphanumeric() || n == '_' {
                        ident.push(n);
                        bump!();
                    } else {
                        break;
                    }
                }
                tokens.push(Token { kind: TokenKind::Ident(ident), span });
            }
            c if c.is_ascii_digit() => {
                let mut literal = String::new();
                while let Some(&n) = chars.peek() {
                    if n.is_ascii_digit() {
                        literal.push(n);
                        bump!();
                    } else {
                        break;
                    }
                }
                if chars.peek() == Some(&'.') {
                    literal.push('.');
                    bump!();
                    let mut any = false;
                    while let Some(&n) = chars.peek() {
                        if n.is_ascii_digit() {
                            literal.push(n);
                            bump!();
                            any = true;
                        } else {
                            break;
                        }
                    }
                    if !any {
                        return Err(SyntaxError::new(span, &literal, "digits after decimal point"));
                    }
                }
                if matches!(chars.peek(), Some('e') | Some('E')) {
                    literal.push('e');
                    bump!();
                    if matches!(chars.peek(), Some('+') | Some('-')) {
                        literal.push(bump!().unwrap());
                    }
                    let mut any = false;
                    while let Some(&n) = chars.peek() {
                        if n.is_ascii_digit() {
                            literal.push(n);
                            bump!();
                            any = true;
                        } else {
                            break;
                        }
                    }
                    if !any {
                        return Err(SyntaxError::new(span, &literal, "digits in exponent"));
                    }
                }
                let value: f64 = literal
                    .parse()
                    .map_err(|_| SyntaxError::new(span, &literal, "a numeric literal"))?;
                tokens.push(Token { kind: TokenKind::Number(value), span });
            }
            other => {
                return Err(SyntaxError::new(span, &other.to_string(), "a query token"));
            }
        }
    }
    tokens.push(Token { kind: TokenKind::Eof, span: Span { line, col } });
    Ok(tokens)
}
