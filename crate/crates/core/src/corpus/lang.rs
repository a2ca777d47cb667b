//! Lexer, AST and recursive-descent parser for the toy C dialect.
//!
//! Grammar (informal):
//!
//! ```text
//! function := type IDENT '(' params? ')' block
//! type     := 'int' | 'void'
//! param    := 'int' IDENT | 'int' '*' IDENT | 'int' IDENT '[' ']'
//! stmt     := 'int' IDENT ('=' expr)? ';'
//!           | lvalue ('=' | '+=' | '-=' | '*=') expr ';'
//!           | lvalue ('++' | '--') ';'
//!           | 'if' '(' expr ')' body ('else' body)?
//!           | 'while' '(' expr ')' body
//!           | 'for' '(' simple? ';' expr? ';' simple? ')' body
//!           | 'return' expr? ';'
//!           | block
//! expr     := additive (cmp additive)?
//! additive := term (('+' | '-') term)*
//! term     := atom (('*' | '/') atom)*
//! atom     := INT | IDENT | IDENT '[' expr ']' | '(' expr ')'
//! ```
//!
//! Everything else that looks like C (calls, `%`, logical operators, unary
//! minus, `break`, other types, ...) is rejected as an unsupported construct.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Punct(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: Pos,
}

const PUNCTS: &[&str] = &[
    "++", "--", "+=", "-=", "*=", "/=", "%=", "<=", ">=", "==", "!=", "&&", "||", "->", "<<", ">>",
    "(", ")", "{", "}", "[", "]", ";", ",", "+", "-", "*", "/", "%", "<", ">", "=", "!", "&", "|",
    "^", "~", "?", ":", ".",
];

const UNSUPPORTED_KEYWORDS: &[&str] = &[
    "do", "switch", "case", "break", "continue", "goto", "char", "float", "double", "long",
    "short", "unsigned", "signed", "struct", "union", "enum", "typedef", "static", "const",
    "sizeof",
];

fn lex(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                pos,
            });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            col += i - start;
            let text: String = chars[start..i].iter().collect();
            let value = text.parse::<i64>().map_err(|_| Error::Syntax {
                line: pos.line,
                col: pos.col,
                msg: format!("integer literal `{text}` out of range"),
            })?;
            out.push(Token {
                tok: Tok::Int(value),
                pos,
            });
            continue;
        }
        let matched = PUNCTS.iter().find(|p| {
            let pc: Vec<char> = p.chars().collect();
            chars[i..].starts_with(&pc)
        });
        match matched {
            Some(p) => {
                i += p.len();
                col += p.len();
                out.push(Token {
                    tok: Tok::Punct(p),
                    pos,
                });
            }
            None => {
                return Err(Error::Syntax {
                    line,
                    col,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        pos: Pos { line, col },
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Type {
    Int,
    IntPtr,
    Void,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    pub ty: Type,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl BinOp {
    pub fn is_comparison(self) -> bool {
        !matches!(self, BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Lit(i64),
    Var(String, Pos),
    Index(String, Box<Expr>, Pos),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LValue {
    Var(String),
    Index(String, Expr),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Decl {
        name: String,
        init: Option<Expr>,
    },
    Assign {
        target: LValue,
        op: Option<BinOp>,
        value: Expr,
        pos: Pos,
    },
    If {
        cond: Expr,
        then_body: Vec<Stmt>,
        else_body: Option<Vec<Stmt>>,
    },
    While {
        cond: Expr,
        body: Vec<Stmt>,
    },
    For {
        init: Option<Box<Stmt>>,
        cond: Option<Expr>,
        step: Option<Box<Stmt>>,
        body: Vec<Stmt>,
    },
    Return(Option<Expr>, Pos),
    Block(Vec<Stmt>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub ret: Type,
    pub name: String,
    pub params: Vec<Param>,
    pub body: Vec<Stmt>,
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
}

fn unsupported<T>(pos: Pos, what: impl Into<String>) -> Result<T> {
    Err(Error::Unsupported {
        line: pos.line,
        col: pos.col,
        what: what.into(),
    })
}

fn syntax<T>(pos: Pos, msg: impl Into<String>) -> Result<T> {
    Err(Error::Syntax {
        line: pos.line,
        col: pos.col,
        msg: msg.into(),
    })
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].tok
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].pos
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> Result<()> {
        if self.eat_punct(p) {
            return Ok(());
        }
        self.reject_unsupported()?;
        syntax(self.pos(), format!("expected `{p}`, found {}", describe(self.peek())))
    }

    fn expect_ident(&mut self) -> Result<String> {
        match self.peek().clone() {
            Tok::Ident(s) if !is_reserved(&s) => {
                self.bump();
                Ok(s)
            }
            Tok::Ident(s) if UNSUPPORTED_KEYWORDS.contains(&s.as_str()) => {
                unsupported(self.pos(), format!("keyword `{s}`"))
            }
            other => syntax(self.pos(), format!("expected identifier, found {}", describe(&other))),
        }
    }

    /// Turns tokens that are valid C but outside the toy subset into explicit errors.
    fn reject_unsupported(&self) -> Result<()> {
        let pos = self.pos();
        match self.peek() {
            Tok::Punct(p) if ["%", "%=", "/=", "&&", "||", "!", "&", "|", "^", "~", "?", "<<", ">>", "->", "."].contains(p) => {
                unsupported(pos, format!("operator `{p}`"))
            }
            Tok::Ident(s) if UNSUPPORTED_KEYWORDS.contains(&s.as_str()) => {
                unsupported(pos, format!("keyword `{s}`"))
            }
            _ => Ok(()),
        }
    }

    fn parse_type(&mut self) -> Result<Type> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Ident(s) if s == "int" => {
                self.bump();
                Ok(Type::Int)
            }
            Tok::Ident(s) if s == "void" => {
                self.bump();
                Ok(Type::Void)
            }
            Tok::Ident(s) if UNSUPPORTED_KEYWORDS.contains(&s.as_str()) => {
                unsupported(pos, format!("type `{s}`"))
            }
            other => syntax(pos, format!("expected type, found {}", describe(&other))),
        }
    }

    fn parse_function(&mut self) -> Result<Function> {
        let ret = self.parse_type()?;
        let name = self.expect_ident()?;
        self.expect_punct("(")?;
        let mut params = Vec::new();
        if !self.is_punct(")") {
            loop {
                let pos = self.pos();
                if self.parse_type()? != Type::Int {
                    return syntax(pos, "parameters must be `int`, `int *` or `int []`");
                }
                let mut ty = Type::Int;
                if self.eat_punct("*") {
                    ty = Type::IntPtr;
                }
                let pname = self.expect_ident()?;
                if self.eat_punct("[") {
                    self.expect_punct("]")?;
                    ty = Type::IntPtr;
                }
                params.push(Param { name: pname, ty });
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        let body = self.parse_block()?;
        if *self.peek() != Tok::Eof {
            return syntax(self.pos(), "trailing input after function body");
        }
        Ok(Function {
            ret,
            name,
            params,
            body,
        })
    }

    fn parse_block(&mut self) -> Result<Vec<Stmt>> {
        self.expect_punct("{")?;
        let mut stmts = Vec::new();
        while !self.is_punct("}") {
            if *self.peek() == Tok::Eof {
                return syntax(self.pos(), "unexpected end of input, expected `}`");
            }
            stmts.push(self.parse_stmt()?);
        }
        self.bump();
        Ok(stmts)
    }

    fn parse_body(&mut self) -> Result<Vec<Stmt>> {
        if self.is_punct("{") {
            self.parse_block()
        } else {
            Ok(vec![self.parse_stmt()?])
        }
    }

    fn parse_stmt(&mut self) -> Result<Stmt> {
        let pos = self.pos();
        self.reject_unsupported()?;
        if self.is_punct("{") {
            return Ok(Stmt::Block(self.parse_block()?));
        }
        if self.is_kw("if") {
            self.bump();
            self.expect_punct("(")?;
            let cond = self.parse_expr()?;
            self.expect_punct(")")?;
            let then_body = self.parse_body()?;
            let else_body = if self.is_kw("else") {
                self.bump();
                Some(self.parse_body()?)
            } else {
                None
            };
            return Ok(Stmt::If {
                cond,
                then_body,
                else_body,
            });
        }
        if self.is_kw("while") {
            self.bump();
            self.expect_punct("(")?;
            let cond = self.parse_expr()?;
            self.expect_punct(")")?;
            let body = self.parse_body()?;
            return Ok(Stmt::While { cond, body });
        }
        if self.is_kw("for") {
            self.bump();
            self.expect_punct("(")?;
            let init = if self.is_punct(";") {
                None
            } else {
                Some(Box::new(self.parse_simple()?))
            };
            self.expect_punct(";")?;
            let cond = if self.is_punct(";") {
                None
            } else {
                Some(self.parse_expr()?)
            };
            self.expect_punct(";")?;
            let step = if self.is_punct(")") {
                None
            } else {
                Some(Box::new(self.parse_simple()?))
            };
            self.expect_punct(")")?;
            let body = self.parse_body()?;
            return Ok(Stmt::For {
                init,
                cond,
                step,
                body,
            });
        }
        if self.is_kw("return") {
            self.bump();
            let value = if self.is_punct(";") {
                None
            } else {
                Some(self.parse_expr()?)
            };
            self.expect_punct(";")?;
            return Ok(Stmt::Return(value, pos));
        }
        if self.is_kw("else") {
            return syntax(pos, "`else` without `if`");
        }
        let stmt = self.parse_simple()?;
        self.expect_punct(";")?;
        Ok(stmt)
    }

    /// Declarations, assignments and increments (no trailing `;`).
    fn parse_simple(&mut self) -> Result<Stmt> {
        let pos = self.pos();
        self.reject_unsupported()?;
        if self.is_kw("int") {
            self.bump();
            if self.is_punct("*") {
                return unsupported(self.pos(), "local pointer declaration");
            }
            let name = self.expect_ident()?;
            if self.is_punct("[") {
                return unsupported(self.pos(), "local array declaration");
            }
            let init = if self.eat_punct("=") {
                Some(self.parse_expr()?)
            } else {
                None
            };
            if self.is_punct(",") {
                return unsupported(self.pos(), "multiple declarators");
            }
            return Ok(Stmt::Decl { name, init });
        }
        if self.is_kw("void") {
            return unsupported(pos, "local of type `void`");
        }
        if self.is_punct("++") || self.is_punct("--") {
            return unsupported(pos, "prefix increment");
        }
        if self.is_punct("*") {
            return unsupported(pos, "pointer dereference");
        }
        let name = self.expect_ident()?;
        if self.is_punct("(") {
            return unsupported(self.pos(), format!("call to `{name}`"));
        }
        let target = if self.eat_punct("[") {
            let idx = self.parse_expr()?;
            self.expect_punct("]")?;
            LValue::Index(name, idx)
        } else {
            LValue::Var(name)
        };
        let op_pos = self.pos();
        let (op, value) = match self.peek().clone() {
            Tok::Punct("=") => {
                self.bump();
                (None, self.parse_expr()?)
            }
            Tok::Punct("+=") => {
                self.bump();
                (Some(BinOp::Add), self.parse_expr()?)
            }
            Tok::Punct("-=") => {
                self.bump();
                (Some(BinOp::Sub), self.parse_expr()?)
            }
            Tok::Punct("*=") => {
                self.bump();
                (Some(BinOp::Mul), self.parse_expr()?)
            }
            Tok::Punct("++") => {
                self.bump();
                (Some(BinOp::Add), Expr::Lit(1))
            }
            Tok::Punct("--") => {
                self.bump();
                (Some(BinOp::Sub), Expr::Lit(1))
            }
            other => {
                self.reject_unsupported()?;
                return syntax(op_pos, format!("expected assignment, found {}", describe(&other)));
            }
        };
        Ok(Stmt::Assign {
            target,
            op,
            value,
            pos: op_pos,
        })
    }

    fn parse_expr(&mut self) -> Result<Expr> {
        let lhs = self.parse_additive()?;
        let op = match self.peek() {
            Tok::Punct("<") => BinOp::Lt,
            Tok::Punct("<=") => BinOp::Le,
            Tok::Punct(">") => BinOp::Gt,
            Tok::Punct(">=") => BinOp::Ge,
            Tok::Punct("==") => BinOp::Eq,
            Tok::Punct("!=") => BinOp::Ne,
            _ => {
                self.reject_unsupported()?;
                return Ok(lhs);
            }
        };
        self.bump();
        let rhs = self.parse_additive()?;
        if matches!(self.peek(), Tok::Punct("<" | "<=" | ">" | ">=" | "==" | "!=")) {
            return unsupported(self.pos(), "chained comparison");
        }
        self.reject_unsupported()?;
        Ok(Expr::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn parse_additive(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_term()?;
        loop {
            let op = match self.peek() {
                Tok::Punct("+") => BinOp::Add,
                Tok::Punct("-") => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.parse_term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn parse_term(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_atom()?;
        loop {
            let op = match self.peek() {
                Tok::Punct("*") => BinOp::Mul,
                Tok::Punct("/") => BinOp::Div,
                Tok::Punct("%") => return unsupported(self.pos(), "operator `%`"),
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.parse_atom()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn parse_atom(&mut self) -> Result<Expr> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Lit(v))
            }
            Tok::Punct("(") => {
                self.bump();
                let e = self.parse_expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Punct("-") => unsupported(pos, "unary minus"),
            Tok::Punct("*") => unsupported(pos, "pointer dereference"),
            Tok::Punct(p) if ["!", "~", "&", "++", "--"].contains(&p) => {
                unsupported(pos, format!("unary operator `{p}`"))
            }
            Tok::Ident(_) => {
                let name = self.expect_ident()?;
                if self.is_punct("(") {
                    return unsupported(pos, format!("call to `{name}`"));
                }
                if self.eat_punct("[") {
                    let idx = self.parse_expr()?;
                    self.expect_punct("]")?;
                    return Ok(Expr::Index(name, Box::new(idx), pos));
                }
                Ok(Expr::Var(name, pos))
            }
            other => syntax(pos, format!("expected expression, found {}", describe(&other))),
        }
    }
}

fn is_reserved(s: &str) -> bool {
    matches!(s, "int" | "void" | "if" | "else" | "while" | "for" | "return")
        || UNSUPPORTED_KEYWORDS.contains(&s)
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Int(v) => format!("`{v}`"),
        Tok::Punct(p) => format!("`{p}`"),
        Tok::Eof => "end of input".to_string(),
    }
}

/// Parses exactly one function definition.
pub fn parse_function(src: &str) -> Result<Function> {
    let toks = lex(src)?;
    let mut p = Parser { toks, at: 0 };
    p.parse_function()
}
