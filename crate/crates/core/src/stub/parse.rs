//! Tokenizer and recursive-descent parser for the stub runner's Python subset.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Int(i64),
    Float(f64),
    Str(String),
    Name(String),
    Op(&'static str),
    Newline,
    Indent,
    Dedent,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntaxError {
    pub line: usize,
    pub detail: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SyntaxError: {} (line {})", self.detail, self.line)
    }
}

fn err<T>(line: usize, detail: impl Into<String>) -> Result<T, SyntaxError> {
    Err(SyntaxError {
        line,
        detail: detail.into(),
    })
}

// Longest operators first so that `**` wins over `*`.
const OPS: &[&str] = &[
    "**=", "//=", "==", "!=", "<=", ">=", "**", "//", "+=", "-=", "*=", "/=", "%=", "->", "+", "-",
    "*", "/", "%", "<", ">", "=", "(", ")", "[", "]", ",", ":", ".",
];

pub fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, SyntaxError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut indents = vec![0usize];
    let mut depth = 0usize;
    let mut line = 1usize;
    let mut i = 0usize;
    let mut at_line_start = true;

    while i < chars.len() {
        if at_line_start && depth == 0 {
            let mut width = 0;
            let mut j = i;
            while j < chars.len() && (chars[j] == ' ' || chars[j] == '\t') {
                width += if chars[j] == '\t' { 8 - width % 8 } else { 1 };
                j += 1;
            }
            // Blank and comment-only lines do not affect indentation.
            if j >= chars.len() || chars[j] == '\n' || chars[j] == '#' || chars[j] == '\r' {
                while j < chars.len() && chars[j] != '\n' {
                    j += 1;
                }
                i = j + 1;
                line += 1;
                continue;
            }
            let current = *indents.last().expect("indent stack never empty");
            if width > current {
                indents.push(width);
                out.push((Tok::Indent, line));
            } else {
                while width < *indents.last().expect("indent stack never empty") {
                    indents.pop();
                    out.push((Tok::Dedent, line));
                }
                if width != *indents.last().expect("indent stack never empty") {
                    return err(line, "unindent does not match any outer indentation level");
                }
            }
            i = j;
            at_line_start = false;
        }

        let c = chars[i];
        match c {
            '\n' => {
                if depth == 0 {
                    out.push((Tok::Newline, line));
                    at_line_start = true;
                }
                line += 1;
                i += 1;
            }
            ' ' | '\t' | '\r' => i += 1,
            '\\' if chars.get(i + 1) == Some(&'\n') => {
                i += 2;
                line += 1;
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '"' | '\'' => {
                let (s, next, lines) = lex_string(&chars, i, line)?;
                out.push((Tok::Str(s), line));
                line += lines;
                i = next;
            }
            c if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '.' || chars[i] == '_') {
                    if (chars[i] == 'e' || chars[i] == 'E') && matches!(chars.get(i + 1), Some('+') | Some('-')) {
                        i += 1;
                    }
                    i += 1;
                }
                let text: String = chars[start..i].iter().filter(|c| **c != '_').collect();
                if let Ok(v) = text.parse::<i64>() {
                    out.push((Tok::Int(v), line));
                } else if let Ok(v) = text.parse::<f64>() {
                    out.push((Tok::Float(v), line));
                } else {
                    return err(line, format!("invalid number literal {text:?}"));
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                // String prefixes such as r"..." are not supported beyond plain r/b.
                if (word == "r" || word == "b") && matches!(chars.get(i), Some('"') | Some('\'')) {
                    let (s, next, lines) = lex_string(&chars, i, line)?;
                    out.push((Tok::Str(s), line));
                    line += lines;
                    i = next;
                } else {
                    out.push((Tok::Name(word), line));
                }
            }
            _ => {
                let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
                let Some(op) = OPS.iter().find(|op| rest.starts_with(**op)) else {
                    return err(line, format!("invalid character {c:?}"));
                };
                match *op {
                    "(" | "[" => depth += 1,
                    ")" | "]" => {
                        if depth == 0 {
                            return err(line, format!("unmatched {op:?}"));
                        }
                        depth -= 1;
                    }
                    _ => {}
                }
                out.push((Tok::Op(op), line));
                i += op.chars().count();
            }
        }
    }
    if depth != 0 {
        return err(line, "unexpected EOF: unclosed bracket");
    }
    if !matches!(out.last(), None | Some((Tok::Newline, _)) | Some((Tok::Dedent, _))) {
        out.push((Tok::Newline, line));
    }
    while indents.len() > 1 {
        indents.pop();
        out.push((Tok::Dedent, line));
    }
    out.push((Tok::Eof, line));
    Ok(out)
}

fn lex_string(chars: &[char], start: usize, line: usize) -> Result<(String, usize, usize), SyntaxError> {
    let quote = chars[start];
    let triple = chars.get(start + 1) == Some(&quote) && chars.get(start + 2) == Some(&quote);
    let mut i = start + if triple { 3 } else { 1 };
    let mut s = String::new();
    let mut lines = 0;
    loop {
        let Some(&c) = chars.get(i) else {
            return err(line, "unterminated string literal");
        };
        if triple {
            if c == quote && chars.get(i + 1) == Some(&quote) && chars.get(i + 2) == Some(&quote) {
                return Ok((s, i + 3, lines));
            }
        } else if c == quote {
            return Ok((s, i + 1, lines));
        } else if c == '\n' {
            return err(line, "unterminated string literal");
        }
        if c == '\\' {
            let Some(&next) = chars.get(i + 1) else {
                return err(line, "unterminated string literal");
            };
            s.push(match next {
                'n' => '\n',
                't' => '\t',
                'r' => '\r',
                '0' => '\0',
                other => other,
            });
            if next == '\n' {
                lines += 1;
            }
            i += 2;
            continue;
        }
        if c == '\n' {
            lines += 1;
        }
        s.push(c);
        i += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    FloorDiv,
    Mod,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
    NotIn,
    Is,
    IsNot,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    None,
    Name(String),
    List(Vec<Expr>),
    Tuple(Vec<Expr>),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Cmp(Box<Expr>, Vec<(CmpOp, Expr)>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    IfElse(Box<Expr>, Box<Expr>, Box<Expr>),
    Call(Box<Expr>, Vec<Expr>),
    Attr(Box<Expr>, String),
    Index(Box<Expr>, Box<Expr>),
    Slice(Box<Expr>, Option<Box<Expr>>, Option<Box<Expr>>, Option<Box<Expr>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Name(String),
    Index(Expr, Expr),
    Unpack(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuncDef {
    pub name: String,
    pub params: Vec<(String, Option<Expr>)>,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Def(std::rc::Rc<FuncDef>),
    Return(Option<Expr>),
    Pass,
    Break,
    Continue,
    Import,
    Assign(Target, Option<BinOp>, Expr),
    If(Vec<(Expr, Vec<Stmt>)>, Vec<Stmt>),
    While(Expr, Vec<Stmt>),
    For(Target, Expr, Vec<Stmt>),
    Assert(Expr, Option<Expr>),
    Expr(Expr),
}

pub fn parse_program(src: &str) -> Result<Vec<Stmt>, SyntaxError> {
    let toks = tokenize(src)?;
    let mut p = Parser { toks, pos: 0 };
    let mut body = Vec::new();
    while !p.at(&Tok::Eof) {
        if p.eat(&Tok::Newline) {
            continue;
        }
        if p.at(&Tok::Indent) {
            return err(p.line(), "unexpected indent");
        }
        body.push(p.statement()?);
    }
    Ok(body)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, offset: usize) -> &Tok {
        &self.toks[(self.pos + offset).min(self.toks.len() - 1)].0
    }

    fn line(&self) -> usize {
        self.toks[self.pos].1
    }

    fn at(&self, t: &Tok) -> bool {
        self.peek() == t
    }

    fn at_op(&self, op: &str) -> bool {
        matches!(self.peek(), Tok::Op(o) if *o == op)
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Name(n) if n == kw)
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.at(t) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if self.at_op(op) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), SyntaxError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            err(self.line(), format!("expected {op:?}, found {}", describe(self.peek())))
        }
    }

    fn name(&mut self) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Name(n) if !is_keyword(&n) => {
                self.bump();
                Ok(n)
            }
            other => err(self.line(), format!("expected identifier, found {}", describe(&other))),
        }
    }

    fn end_of_statement(&mut self) -> Result<(), SyntaxError> {
        if self.eat(&Tok::Newline) || self.at(&Tok::Eof) || self.at(&Tok::Dedent) {
            Ok(())
        } else {
            err(self.line(), format!("invalid syntax near {}", describe(self.peek())))
        }
    }

    fn block(&mut self) -> Result<Vec<Stmt>, SyntaxError> {
        self.expect_op(":")?;
        if self.eat(&Tok::Newline) {
            if !self.eat(&Tok::Indent) {
                return err(self.line(), "expected an indented block");
            }
            let mut body = Vec::new();
            while !self.eat(&Tok::Dedent) {
                if self.at(&Tok::Eof) {
                    break;
                }
                if self.eat(&Tok::Newline) {
                    continue;
                }
                body.push(self.statement()?);
            }
            Ok(body)
        } else {
            Ok(vec![self.simple_statement()?])
        }
    }

    fn statement(&mut self) -> Result<Stmt, SyntaxError> {
        if self.eat_kw("def") {
            let name = self.name()?;
            self.expect_op("(")?;
            let mut params = Vec::new();
            while !self.eat_op(")") {
                let p = self.name()?;
                if self.eat_op(":") {
                    self.expression()?;
                }
                let default = if self.eat_op("=") { Some(self.expression()?) } else { None };
                params.push((p, default));
                if !self.eat_op(",") {
                    self.expect_op(")")?;
                    break;
                }
            }
            if self.eat_op("->") {
                self.expression()?;
            }
            let body = self.block()?;
            return Ok(Stmt::Def(std::rc::Rc::new(FuncDef { name, params, body })));
        }
        if self.eat_kw("if") {
            let mut branches = vec![(self.expression()?, self.block()?)];
            let mut orelse = Vec::new();
            loop {
                if self.eat_kw("elif") {
                    branches.push((self.expression()?, self.block()?));
                } else if self.eat_kw("else") {
                    orelse = self.block()?;
                    break;
                } else {
                    break;
                }
            }
            return Ok(Stmt::If(branches, orelse));
        }
        if self.eat_kw("while") {
            let cond = self.expression()?;
            return Ok(Stmt::While(cond, self.block()?));
        }
        if self.eat_kw("for") {
            let target = self.for_target()?;
            if !self.eat_kw("in") {
                return err(self.line(), "expected 'in'");
            }
            let iter = self.expression_list()?;
            return Ok(Stmt::For(target, iter, self.block()?));
        }
        self.simple_statement()
    }

    fn for_target(&mut self) -> Result<Target, SyntaxError> {
        let first = self.name()?;
        if !self.at_op(",") {
            return Ok(Target::Name(first));
        }
        let mut names = vec![first];
        while self.eat_op(",") {
            names.push(self.name()?);
        }
        Ok(Target::Unpack(names))
    }

    fn simple_statement(&mut self) -> Result<Stmt, SyntaxError> {
        let stmt = if self.eat_kw("return") {
            if matches!(self.peek(), Tok::Newline | Tok::Eof | Tok::Dedent) {
                Stmt::Return(None)
            } else {
                Stmt::Return(Some(self.expression_list()?))
            }
        } else if self.eat_kw("pass") {
            Stmt::Pass
        } else if self.eat_kw("break") {
            Stmt::Break
        } else if self.eat_kw("continue") {
            Stmt::Continue
        } else if self.at_kw("import") || self.at_kw("from") {
            while !matches!(self.peek(), Tok::Newline | Tok::Eof | Tok::Dedent) {
                self.bump();
            }
            Stmt::Import
        } else if self.eat_kw("assert") {
            let cond = self.expression()?;
            let msg = if self.eat_op(",") { Some(self.expression()?) } else { None };
            Stmt::Assert(cond, msg)
        } else {
            let lhs = self.expression_list()?;
            let aug = [
                ("+=", BinOp::Add),
                ("-=", BinOp::Sub),
                ("*=", BinOp::Mul),
                ("/=", BinOp::Div),
                ("//=", BinOp::FloorDiv),
                ("%=", BinOp::Mod),
                ("**=", BinOp::Pow),
            ];
            if self.eat_op("=") {
                let target = to_target(lhs, self.line())?;
                let value = self.expression_list()?;
                Stmt::Assign(target, None, value)
            } else if let Some((_, op)) = aug.iter().find(|(s, _)| self.at_op(s)) {
                self.bump();
                let target = to_target(lhs, self.line())?;
                let value = self.expression()?;
                Stmt::Assign(target, Some(*op), value)
            } else {
                Stmt::Expr(lhs)
            }
        };
        self.end_of_statement()?;
        Ok(stmt)
    }

    /// `a, b` without parentheses builds a tuple.
    fn expression_list(&mut self) -> Result<Expr, SyntaxError> {
        let first = self.expression()?;
        if !self.at_op(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_op(",") {
            if matches!(self.peek(), Tok::Newline | Tok::Eof) || self.at_op("=") || self.at_op(")") {
                break;
            }
            items.push(self.expression()?);
        }
        Ok(Expr::Tuple(items))
    }

    fn expression(&mut self) -> Result<Expr, SyntaxError> {
        let body = self.or_expr()?;
        if self.at_kw("if") && !matches!(self.peek_at(1), Tok::Newline) {
            self.bump();
            let cond = self.or_expr()?;
            if !self.eat_kw("else") {
                return err(self.line(), "expected 'else' in conditional expression");
            }
            let orelse = self.expression()?;
            return Ok(Expr::IfElse(Box::new(cond), Box::new(body), Box::new(orelse)));
        }
        Ok(body)
    }

    fn or_expr(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.and_expr()?;
        while self.eat_kw("or") {
            lhs = Expr::Or(Box::new(lhs), Box::new(self.and_expr()?));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.not_expr()?;
        while self.eat_kw("and") {
            lhs = Expr::And(Box::new(lhs), Box::new(self.not_expr()?));
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr, SyntaxError> {
        if self.eat_kw("not") {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, SyntaxError> {
        let first = self.arith()?;
        let mut rest = Vec::new();
        loop {
            let op = if self.eat_op("==") {
                CmpOp::Eq
            } else if self.eat_op("!=") {
                CmpOp::Ne
            } else if self.eat_op("<=") {
                CmpOp::Le
            } else if self.eat_op(">=") {
                CmpOp::Ge
            } else if self.eat_op("<") {
                CmpOp::Lt
            } else if self.eat_op(">") {
                CmpOp::Gt
            } else if self.eat_kw("in") {
                CmpOp::In
            } else if self.at_kw("not") && matches!(self.peek_at(1), Tok::Name(n) if n == "in") {
                self.bump();
                self.bump();
                CmpOp::NotIn
            } else if self.eat_kw("is") {
                if self.eat_kw("not") {
                    CmpOp::IsNot
                } else {
                    CmpOp::Is
                }
            } else {
                break;
            };
            rest.push((op, self.arith()?));
        }
        if rest.is_empty() {
            Ok(first)
        } else {
            Ok(Expr::Cmp(Box::new(first), rest))
        }
    }

    fn arith(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat_op("+") {
                BinOp::Add
            } else if self.eat_op("-") {
                BinOp::Sub
            } else {
                break;
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat_op("*") {
                BinOp::Mul
            } else if self.eat_op("//") {
                BinOp::FloorDiv
            } else if self.eat_op("/") {
                BinOp::Div
            } else if self.eat_op("%") {
                BinOp::Mod
            } else {
                break;
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, SyntaxError> {
        if self.eat_op("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op("+") {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, SyntaxError> {
        let base = self.postfix()?;
        if self.eat_op("**") {
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn postfix(&mut self) -> Result<Expr, SyntaxError> {
        let mut e = self.atom()?;
        loop {
            if self.eat_op("(") {
                let mut args = Vec::new();
                while !self.eat_op(")") {
                    args.push(self.expression()?);
                    if !self.eat_op(",") {
                        self.expect_op(")")?;
                        break;
                    }
                }
                e = Expr::Call(Box::new(e), args);
            } else if self.eat_op("[") {
                e = self.subscript(e)?;
            } else if self.eat_op(".") {
                let attr = self.name()?;
                e = Expr::Attr(Box::new(e), attr);
            } else {
                return Ok(e);
            }
        }
    }

    fn subscript(&mut self, target: Expr) -> Result<Expr, SyntaxError> {
        let start = if self.at_op(":") { None } else { Some(Box::new(self.expression()?)) };
        if self.eat_op("]") {
            let Some(index) = start else {
                return err(self.line(), "empty subscript");
            };
            return Ok(Expr::Index(Box::new(target), index));
        }
        self.expect_op(":")?;
        let stop = if self.at_op(":") || self.at_op("]") { None } else { Some(Box::new(self.expression()?)) };
        let step = if self.eat_op(":") && !self.at_op("]") { Some(Box::new(self.expression()?)) } else { None };
        self.expect_op("]")?;
        Ok(Expr::Slice(Box::new(target), start, stop, step))
    }

    fn atom(&mut self) -> Result<Expr, SyntaxError> {
        let line = self.line();
        match self.bump() {
            Tok::Int(v) => Ok(Expr::Int(v)),
            Tok::Float(v) => Ok(Expr::Float(v)),
            Tok::Str(mut s) => {
                // Adjacent literals concatenate.
                while let Tok::Str(next) = self.peek().clone() {
                    self.bump();
                    s.push_str(&next);
                }
                Ok(Expr::Str(s))
            }
            Tok::Name(n) => match n.as_str() {
                "True" => Ok(Expr::Bool(true)),
                "False" => Ok(Expr::Bool(false)),
                "None" => Ok(Expr::None),
                kw if is_keyword(kw) => err(line, format!("invalid syntax at keyword {kw:?}")),
                _ => Ok(Expr::Name(n)),
            },
            Tok::Op("(") => {
                if self.eat_op(")") {
                    return Ok(Expr::Tuple(Vec::new()));
                }
                let first = self.expression()?;
                if self.eat_op(")") {
                    return Ok(first);
                }
                let mut items = vec![first];
                while self.eat_op(",") {
                    if self.at_op(")") {
                        break;
                    }
                    items.push(self.expression()?);
                }
                self.expect_op(")")?;
                Ok(Expr::Tuple(items))
            }
            Tok::Op("[") => {
                let mut items = Vec::new();
                while !self.eat_op("]") {
                    items.push(self.expression()?);
                    if !self.eat_op(",") {
                        self.expect_op("]")?;
                        break;
                    }
                }
                Ok(Expr::List(items))
            }
            other => err(line, format!("invalid syntax at {}", describe(&other))),
        }
    }
}

fn to_target(e: Expr, line: usize) -> Result<Target, SyntaxError> {
    match e {
        Expr::Name(n) => Ok(Target::Name(n)),
        Expr::Index(base, idx) => Ok(Target::Index(*base, *idx)),
        Expr::Tuple(items) => items
            .into_iter()
            .map(|i| match i {
                Expr::Name(n) => Ok(n),
                _ => err(line, "cannot assign to expression"),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Target::Unpack),
        _ => err(line, "cannot assign to expression"),
    }
}

fn is_keyword(word: &str) -> bool {
    matches!(
        word,
        "def" | "return" | "if" | "elif" | "else" | "while" | "for" | "in" | "not" | "and" | "or"
            | "pass" | "break" | "continue" | "assert" | "import" | "from" | "is" | "lambda"
            | "class" | "try" | "except" | "finally" | "with" | "yield" | "raise" | "global"
            | "del" | "as"
    )
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Int(v) => format!("{v}"),
        Tok::Float(v) => format!("{v}"),
        Tok::Str(_) => "string literal".into(),
        Tok::Name(n) => format!("{n:?}"),
        Tok::Op(o) => format!("{o:?}"),
        Tok::Newline => "end of line".into(),
        Tok::Indent => "indent".into(),
        Tok::Dedent => "dedent".into(),
        Tok::Eof => "end of input".into(),
    }
}
