//! Recursive-descent parser for the DP query dialect.
//!
//! Grammar (keywords case-insensitive, `--` comments ignored):
//!
//! ```text
//! query  := SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS '(' option,* ')'
//!           item (',' item)* ','?  FROM ident  GROUP BY ident (',' ident)* ';'? EOF
//! option := ident '=' number
//! item   := ident
//!         | SUM '(' ident ')' hints? (AS ident)?
//!         | COUNT '(' '*' ')' hints? (AS ident)?
//! hints  := '@' '{' ident '=' number (',' ident '=' number)* '}'
//! ```
//!
//! Anything outside this shape (WHERE, JOIN, expressions) is rejected;
//! client-side selection happens before upload, not here.

use super::ast::{AggFunc, Aggregate, Query, SelectItem};
use super::token::{tokenize, Token, TokenKind};
use super::SyntaxError;

pub fn parse(source: &str) -> Result<Query, SyntaxError> {
    let tokens = tokenize(source)?;
    Parser { tokens, pos: 0 }.query()
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn advance(&mut self) -> Token {
        let token = self.peek().clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        token
    }

    fn error(&self, token: &Token, expected: &str) -> SyntaxError {
        SyntaxError::new(token.span, &token.kind.to_string(), expected)
    }

    fn expect_keyword(&mut self, keyword: &str) -> Result<Token, SyntaxError> {
        if self.peek().is_keyword(keyword) {
            Ok(self.advance())
        } else {
            Err(self.error(self.peek(), keyword))
        }
    }

    fn expect_kind(&mut self, kind: &TokenKind, expected: &str) -> Result<Token, SyntaxError> {
        if &self.peek().kind == kind {
            Ok(self.advance())
        } else {
            Err(self.error(self.peek(), expected))
        }
    }

    fn expect_ident(&mut self, expected: &str) -> Result<String, SyntaxError> {
        match &self.peek().kind {
            TokenKind::Ident(_) => {
                let token = self.advance();
                match token.kind {
                    TokenKind::Ident(name) => Ok(name),
                    _ => unreachable!(),
                }
            }
            _ => Err(self.error(self.peek(), expected)),
        }
    }

    fn expect_number(&mut self, expected: &str) -> Result<f64, SyntaxError> {
        match self.peek().kind {
            TokenKind::Number(value) => {
                self.advance();
                Ok(value)
            }
            _ => Err(self.error(self.peek(), expected)),
        }
    }

    fn query(&mut self) -> Result<Query, SyntaxError> {
        let select = self.expect_keyword("SELECT")?;
        // The DP options clause is mandatory; its absence is reported at the
        // SELECT keyword, which is where the statement stops being a DP query.
        if !self.peek().is_keyword("WITH") {
            return Err(SyntaxError::new(
                select.span,
                "SELECT",
                "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS",
            ));
        }
        self.advance();
        self.expect_keyword("DIFFERENTIAL_PRIVACY")?;
        self.expect_keyword("OPTIONS")?;
        self.expect_kind(&TokenKind::LeftParen, "(")?;
        let options = self.option_list()?;

        let mut items = vec![self.select_item()?];
        while self.peek().kind == TokenKind::Comma {
            self.advance();
            // A trailing comma directly before FROM is accepted.
            if self.peek().is_keyword("FROM") {
                break;
            }
            items.push(self.select_item()?);
        }

        self.expect_keyword("FROM")?;
        let source_table = self.expect_ident("a source table name")?;
        self.expect_keyword("GROUP")?;
        self.expect_keyword("BY")?;
        let mut group_by = vec![self.expect_ident("a GROUP BY column")?];
        while self.peek().kind == TokenKind::Comma {
            self.advance();
            group_by.push(self.expect_ident("a GROUP BY column")?);
        }
        if self.peek().kind == TokenKind::Semicolon {
            self.advance();
        }
        self.expect_kind(&TokenKind::Eof, "end of query")?;
        Ok(Query { options, items, source_table, group_by })
    }

    fn option_list(&mut self) -> Result<Vec<(String, f64)>, SyntaxError> {
        let mut options = Vec::new();
        loop {
            let name = self.expect_ident("an option name")?;
            self.expect_kind(&TokenKind::Equals, "=")?;
            let value = self.expect_number("an option value")?;
            options.push((name, value));
            match self.peek().kind {
                TokenKind::Comma => {
                    self.advance();
                }
                TokenKind::RightParen => {
                    self.advance();
                    return Ok(options);
                }
                _ => return Err(self.error(self.peek(), ", or )")),
            }
        }
    }

    fn select_item(&mut self) -> Result<SelectItem, SyntaxError> {
        if self.peek().is_keyword("SUM") || self.peek().is_keyword("COUNT") {
            return Ok(SelectItem::Aggregate(self.aggregate()?));
        }
        let name = self.expect_ident("a column name or aggregate")?;
        Ok(SelectItem::Column(name))
    }

    fn aggregate(&mut self) -> Result<Aggregate, SyntaxError> {
        let func = if self.peek().is_keyword("SUM") { AggFunc::Sum } else { AggFunc::Count };
        self.advance();
        self.expect_kind(&TokenKind::LeftParen, "(")?;
        let input = match func {
            AggFunc::Sum => Some(self.expect_ident("a column name")?),
            AggFunc::Count => {
                self.expect_kind(&TokenKind::Star, "*")?;
                None
            }
        };
        self.expect_kind(&TokenKind::RightParen, ")")?;

        let mut hints = Vec::new();
        if self.peek().kind == TokenKind::At {
            self.advance();
            self.expect_kind(&TokenKind::LeftBrace, "{")?;
            loop {
                let name = self.expect_ident("a hint name")?;
                self.expect_kind(&TokenKind::Equals, "=")?;
                let value = self.expect_number("a hint value")?;
                hints.push((name, value));
                match self.peek().kind {
                    TokenKind::Comma => {
                        self.advance();
                    }
                    TokenKind::RightBrace => {
                        self.advance();
                        break;
                    }
                    _ => return Err(self.error(self.peek(), ", or }")),
                }
            }
        }

        let alias = if self.peek().is_keyword("AS") {
            self.advance();
            Some(self.expect_ident("an output name")?)
        } else {
            None
        };
        Ok(Aggregate { func, input, hints, alias })
    }
}
