//! Deterministic lowering of toy-C functions to a linear, SSA-form IR.
//!
//! The output is modelled on unoptimised-but-promoted LLVM IR: scalars live in
//! virtual registers `%0, %1, ...`, parameters keep their source names
//! (`%a`), loops and conditionals join through `phi`, and array accesses go
//! through explicit address arithmetic followed by `load`/`store`.  Integer
//! literals are always materialised into a register first (`%k = add 7, 0`).
//! The function symbol is replaced by `@TESTFUN0`.
//!
//! Only ten opcodes are ever emitted: `add sub mul sdiv icmp br phi ret load store`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::lang::{parse_function, BinOp, Expr, Function, LValue, Pos, Stmt, Type};
use crate::error::{Error, Result};

/// Symbol every lowered function is renamed to.
pub const STRIPPED_SYMBOL: &str = "@TESTFUN0";

/// The closed opcode set of the IR.
pub const OPCODES: [&str; 10] = [
    "add", "sub", "mul", "sdiv", "icmp", "br", "phi", "ret", "load", "store",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Operand {
    Reg(u32),
    Param(String),
    Imm(i64),
}

impl std::fmt::Display for Operand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "%{r}"),
            Operand::Param(p) => write!(f, "%{p}"),
            Operand::Imm(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone)]
enum Inst {
    Arith {
        dst: u32,
        op: &'static str,
        lhs: Operand,
        rhs: Operand,
    },
    Icmp {
        dst: u32,
        pred: &'static str,
        lhs: Operand,
        rhs: Operand,
    },
    CondBr {
        cond: Operand,
        then_label: String,
        else_label: String,
    },
    Br {
        target: String,
    },
    Phi {
        dst: u32,
        incoming: Vec<(Operand, String)>,
    },
    Ret(Option<Operand>),
    Load {
        dst: u32,
        addr: Operand,
    },
    Store {
        value: Operand,
        addr: Operand,
    },
}

impl std::fmt::Display for Inst {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Inst::Arith { dst, op, lhs, rhs } => write!(f, "%{dst} = {op} {lhs}, {rhs}"),
            Inst::Icmp {
                dst,
                pred,
                lhs,
                rhs,
            } => write!(f, "%{dst} = icmp {pred} {lhs}, {rhs}"),
            Inst::CondBr {
                cond,
                then_label,
                else_label,
            } => write!(f, "br {cond}, label %{then_label}, label %{else_label}"),
            Inst::Br { target } => write!(f, "br label %{target}"),
            Inst::Phi { dst, incoming } => {
                write!(f, "%{dst} = phi ")?;
                for (i, (v, l)) in incoming.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "[{v}, %{l}]")?;
                }
                Ok(())
            }
            Inst::Ret(Some(v)) => write!(f, "ret {v}"),
            Inst::Ret(None) => write!(f, "ret void"),
            Inst::Load { dst, addr } => write!(f, "%{dst} = load {addr}"),
            Inst::Store { value, addr } => write!(f, "store {value}, {addr}"),
        }
    }
}

#[derive(Debug)]
struct Block {
    label: String,
    insts: Vec<Inst>,
    terminated: bool,
}

#[derive(Debug, Clone)]
struct Var {
    name: String,
    value: Operand,
    is_ptr: bool,
}

/// Scoped variable environment; inner scopes shadow outer ones.
#[derive(Debug, Clone, Default)]
struct Env {
    vars: Vec<Var>,
    scopes: Vec<usize>,
}

impl Env {
    fn push_scope(&mut self) {
        self.scopes.push(self.vars.len());
    }

    fn pop_scope(&mut self) {
        let mark = self.scopes.pop().expect("scope underflow");
        self.vars.truncate(mark);
    }

    fn lookup(&self, name: &str) -> Option<usize> {
        self.vars.iter().rposition(|v| v.name == name)
    }
}

struct Lowerer {
    next_reg: u32,
    next_label: u32,
    blocks: Vec<Block>,
    cur: usize,
    env: Env,
    ret: Type,
}

fn err_unsupported<T>(pos: Pos, what: impl Into<String>) -> Result<T> {
    Err(Error::Unsupported {
        line: pos.line,
        col: pos.col,
        what: what.into(),
    })
}

fn err_semantic<T>(pos: Pos, msg: impl Into<String>) -> Result<T> {
    Err(Error::Syntax {
        line: pos.line,
        col: pos.col,
        msg: msg.into(),
    })
}

/// Names of variables assigned (as scalars) anywhere inside `stmts`.
fn assigned_vars(stmts: &[Stmt], out: &mut BTreeSet<String>) {
    for s in stmts {
        match s {
            Stmt::Assign {
                target: LValue::Var(n),
                ..
            } => {
                out.insert(n.clone());
            }
            Stmt::If {
                then_body,
                else_body,
                ..
            } => {
                assigned_vars(then_body, out);
                if let Some(e) = else_body {
                    assigned_vars(e, out);
                }
            }
            Stmt::While { body, .. } => assigned_vars(body, out),
            Stmt::For {
                init, step, body, ..
            } => {
                if let Some(i) = init {
                    assigned_vars(std::slice::from_ref(i.as_ref()), out);
                }
                if let Some(st) = step {
                    assigned_vars(std::slice::from_ref(st.as_ref()), out);
                }
                assigned_vars(body, out);
            }
            Stmt::Block(b) => assigned_vars(b, out),
            _ => {}
        }
    }
}

impl Lowerer {
    fn fresh_reg(&mut self) -> u32 {
        let r = self.next_reg;
        self.next_reg += 1;
        r
    }

    fn fresh_label(&mut self) -> String {
        self.next_label += 1;
        format!("bb{}", self.next_label)
    }

    fn label(&self) -> String {
        self.blocks[self.cur].label.clone()
    }

    fn emit(&mut self, inst: Inst) {
        let block = &mut self.blocks[self.cur];
        debug_assert!(!block.terminated, "emission into terminated block");
        if matches!(inst, Inst::Br { .. } | Inst::CondBr { .. } | Inst::Ret(_)) {
            block.terminated = true;
        }
        block.insts.push(inst);
    }

    fn start_block(&mut self, label: String) {
        self.blocks.push(Block {
            label,
            insts: Vec::new(),
            terminated: false,
        });
        self.cur = self.blocks.len() - 1;
    }

    fn terminated(&self) -> bool {
        self.blocks[self.cur].terminated
    }

    fn materialize(&mut self, v: i64) -> Operand {
        let dst = self.fresh_reg();
        self.emit(Inst::Arith {
            dst,
            op: "add",
            lhs: Operand::Imm(v),
            rhs: Operand::Imm(0),
        });
        Operand::Reg(dst)
    }

    fn read_var(&self, name: &str, pos: Pos) -> Result<&Var> {
        match self.env.lookup(name) {
            Some(i) => Ok(&self.env.vars[i]),
            None => err_semantic(pos, format!("use of undeclared variable `{name}`")),
        }
    }

    fn address(&mut self, base: &str, idx: &Expr, pos: Pos) -> Result<Operand> {
        let var = self.read_var(base, pos)?.clone();
        if !var.is_ptr {
            return err_semantic(pos, format!("`{base}` is not an array"));
        }
        let offset = self.expr(idx)?;
        let dst = self.fresh_reg();
        self.emit(Inst::Arith {
            dst,
            op: "add",
            lhs: var.value,
            rhs: offset,
        });
        Ok(Operand::Reg(dst))
    }

    fn expr(&mut self, e: &Expr) -> Result<Operand> {
        match e {
            Expr::Lit(v) => Ok(self.materialize(*v)),
            Expr::Var(name, pos) => {
                let v = self.read_var(name, *pos)?;
                if v.is_ptr {
                    return err_unsupported(*pos, format!("array `{name}` used as a scalar"));
                }
                Ok(v.value.clone())
            }
            Expr::Index(base, idx, pos) => {
                let addr = self.address(base, idx, *pos)?;
                let dst = self.fresh_reg();
                self.emit(Inst::Load { dst, addr });
                Ok(Operand::Reg(dst))
            }
            Expr::Bin(op, lhs, rhs) => {
                let l = self.expr(lhs)?;
                let r = self.expr(rhs)?;
                let dst = self.fresh_reg();
                let inst = match op {
                    BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => Inst::Arith {
                        dst,
                        op: match op {
                            BinOp::Add => "add",
                            BinOp::Sub => "sub",
                            BinOp::Mul => "mul",
                            _ => "sdiv",
                        },
                        lhs: l,
                        rhs: r,
                    },
                    cmp => Inst::Icmp {
                        dst,
                        pred: match cmp {
                            BinOp::Lt => "slt",
                            BinOp::Le => "sle",
                            BinOp::Gt => "sgt",
                            BinOp::Ge => "sge",
                            BinOp::Eq => "eq",
                            _ => "ne",
                        },
                        lhs: l,
                        rhs: r,
                    },
                };
                self.emit(inst);
                Ok(Operand::Reg(dst))
            }
        }
    }

    fn stmts(&mut self, stmts: &[Stmt]) -> Result<()> {
        for s in stmts {
            if self.terminated() {
                return err_unsupported(stmt_pos(s), "unreachable code after return");
            }
            self.stmt(s)?;
        }
        Ok(())
    }

    fn scoped(&mut self, stmts: &[Stmt]) -> Result<()> {
        self.env.push_scope();
        let r = self.stmts(stmts);
        self.env.pop_scope();
        r
    }

    fn stmt(&mut self, s: &Stmt) -> Result<()> {
        match s {
            Stmt::Decl { name, init } => {
                let value = match init {
                    Some(e) => self.expr(e)?,
                    None => self.materialize(0),
                };
                self.env.vars.push(Var {
                    name: name.clone(),
                    value,
                    is_ptr: false,
                });
                Ok(())
            }
            Stmt::Assign {
                target,
                op,
                value,
                pos,
            } => {
                let rhs_expr = match (op, target) {
                    (None, _) => value.clone(),
                    (Some(op), LValue::Var(n)) => Expr::Bin(
                        *op,
                        Box::new(Expr::Var(n.clone(), *pos)),
                        Box::new(value.clone()),
                    ),
                    (Some(op), LValue::Index(n, idx)) => Expr::Bin(
                        *op,
                        Box::new(Expr::Index(n.clone(), Box::new(idx.clone()), *pos)),
                        Box::new(value.clone()),
                    ),
                };
                match target {
                    LValue::Var(n) => {
                        let slot = match self.env.lookup(n) {
                            Some(i) => i,
                            None => {
                                return err_semantic(*pos, format!("assignment to undeclared `{n}`"))
                            }
                        };
                        if self.env.vars[slot].is_ptr {
                            return err_unsupported(*pos, format!("reassignment of array `{n}`"));
                        }
                        let v = self.expr(&rhs_expr)?;
                        self.env.vars[slot].value = v;
                    }
                    LValue::Index(n, idx) => {
                        let v = self.expr(&rhs_expr)?;
                        let addr = self.address(n, idx, *pos)?;
                        self.emit(Inst::Store { value: v, addr });
                    }
                }
                Ok(())
            }
            Stmt::Return(value, pos) => {
                match (self.ret, value) {
                    (Type::Void, Some(_)) => {
                        return err_semantic(*pos, "void function returns a value")
                    }
                    (Type::Int, None) => return err_semantic(*pos, "missing return value"),
                    _ => {}
                }
                let v = match value {
                    Some(e) => Some(self.expr(e)?),
                    None => None,
                };
                self.emit(Inst::Ret(v));
                Ok(())
            }
            Stmt::Block(b) => self.scoped(b),
            Stmt::If {
                cond,
                then_body,
                else_body,
            } => self.lower_if(cond, then_body, else_body.as_deref()),
            Stmt::While { cond, body } => self.lower_loop(Some(cond), body, None),
            Stmt::For {
                init,
                cond,
                step,
                body,
            } => {
                self.env.push_scope();
                let r = (|| {
                    if let Some(i) = init {
                        self.stmt(i)?;
                    }
                    self.lower_loop(cond.as_ref(), body, step.as_deref())
                })();
                self.env.pop_scope();
                r
            }
        }
    }

    fn cond_operand(&mut self, cond: &Expr) -> Result<Operand> {
        match cond {
            Expr::Bin(op, _, _) if op.is_comparison() => self.expr(cond),
            other => {
                // Non-comparison conditions test against zero.
                let v = self.expr(other)?;
                let zero = self.materialize(0);
                let dst = self.fresh_reg();
                self.emit(Inst::Icmp {
                    dst,
                    pred: "ne",
                    lhs: v,
                    rhs: zero,
                });
                Ok(Operand::Reg(dst))
            }
        }
    }

    fn lower_if(&mut self, cond: &Expr, then_body: &[Stmt], else_body: Option<&[Stmt]>) -> Result<()> {
        let c = self.cond_operand(cond)?;
        let then_label = self.fresh_label();
        let else_label = else_body.map(|_| self.fresh_label());
        let join_label = self.fresh_label();
        let origin = self.label();
        self.emit(Inst::CondBr {
            cond: c,
            then_label: then_label.clone(),
            else_label: else_label.clone().unwrap_or_else(|| join_label.clone()),
        });
        let before = self.env.clone();

        self.start_block(then_label);
        self.scoped(then_body)?;
        let then_out = (!self.terminated()).then(|| (self.env.clone(), self.label()));
        if then_out.is_some() {
            self.emit(Inst::Br {
                target: join_label.clone(),
            });
        }

        self.env = before.clone();
        let else_out = match (else_body, else_label) {
            (Some(body), Some(label)) => {
                self.start_block(label);
                self.scoped(body)?;
                let out = (!self.terminated()).then(|| (self.env.clone(), self.label()));
                if out.is_some() {
                    self.emit(Inst::Br {
                        target: join_label.clone(),
                    });
                }
                out
            }
            _ => Some((before.clone(), origin)),
        };

        let incoming: Vec<(Env, String)> = then_out.into_iter().chain(else_out).collect();
        if incoming.is_empty() {
            // Both arms returned; the current block stays terminated.
            self.env = before;
            return Ok(());
        }
        self.start_block(join_label);
        let mut env = before;
        for slot in 0..env.vars.len() {
            let first = &incoming[0].0.vars[slot].value;
            if incoming.iter().all(|(e, _)| &e.vars[slot].value == first) {
                env.vars[slot].value = first.clone();
                continue;
            }
            let dst = self.fresh_reg();
            let phi = Inst::Phi {
                dst,
                incoming: incoming
                    .iter()
                    .map(|(e, l)| (e.vars[slot].value.clone(), l.clone()))
                    .collect(),
            };
            self.emit(phi);
            env.vars[slot].value = Operand::Reg(dst);
        }
        self.env = env;
        Ok(())
    }

    fn lower_loop(&mut self, cond: Option<&Expr>, body: &[Stmt], step: Option<&Stmt>) -> Result<()> {
        let header = self.fresh_label();
        let body_label = self.fresh_label();
        let exit = self.fresh_label();
        let preheader = self.label();
        self.emit(Inst::Br {
            target: header.clone(),
        });

        let mut assigned = BTreeSet::new();
        assigned_vars(body, &mut assigned);
        if let Some(st) = step {
            assigned_vars(std::slice::from_ref(st), &mut assigned);
        }

        self.start_block(header.clone());
        let header_block = self.cur;
        let mut phis: Vec<(usize, u32, Operand)> = Vec::new();
        for slot in 0..self.env.vars.len() {
            let var = &self.env.vars[slot];
            if var.is_ptr || !assigned.contains(&var.name) {
                continue;
            }
            // Only the innermost binding of a name is reachable from the body.
            if self.env.lookup(&var.name) != Some(slot) {
                continue;
            }
            let entry_value = var.value.clone();
            let dst = self.fresh_reg();
            self.emit(Inst::Phi {
                dst,
                incoming: vec![(entry_value.clone(), preheader.clone())],
            });
            phis.push((slot, dst, entry_value));
            self.env.vars[slot].value = Operand::Reg(dst);
        }
        let header_env = self.env.clone();
        match cond {
            Some(c) => {
                let cv = self.cond_operand(c)?;
                self.emit(Inst::CondBr {
                    cond: cv,
                    then_label: body_label.clone(),
                    else_label: exit.clone(),
                });
            }
            None => {
                return err_unsupported(
                    Pos { line: 0, col: 0 },
                    "loop without condition",
                )
            }
        }

        self.start_block(body_label);
        self.scoped(body)?;
        if let Some(st) = step {
            if self.terminated() {
                return err_unsupported(stmt_pos(st), "loop body always returns");
            }
            self.stmt(st)?;
        }
        if self.terminated() {
            return err_unsupported(stmt_pos(&body[0]), "loop body always returns");
        }
        let latch = self.label();
        let latch_env = self.env.clone();
        self.emit(Inst::Br {
            target: header.clone(),
        });

        // Patch back-edge operands into the header phis.
        let mut phi_idx = 0;
        for inst in self.blocks[header_block].insts.iter_mut() {
            if let Inst::Phi { incoming, .. } = inst {
                let (slot, _, _) = phis[phi_idx];
                incoming.push((latch_env.vars[slot].value.clone(), latch.clone()));
                phi_idx += 1;
            }
        }

        self.start_block(exit);
        self.env = header_env;
        Ok(())
    }
}

fn stmt_pos(s: &Stmt) -> Pos {
    match s {
        Stmt::Assign { pos, .. } | Stmt::Return(_, pos) => *pos,
        _ => Pos { line: 0, col: 0 },
    }
}

fn type_name(t: Type) -> &'static str {
    match t {
        Type::Int => "int",
        Type::IntPtr => "int*",
        Type::Void => "void",
    }
}

/// Lowers an already-parsed function.
pub fn lower_function(func: &Function) -> Result<String> {
    let mut lw = Lowerer {
        next_reg: 0,
        next_label: 0,
        blocks: Vec::new(),
        cur: 0,
        env: Env::default(),
        ret: func.ret,
    };
    let mut seen = BTreeSet::new();
    for p in &func.params {
        if !seen.insert(p.name.as_str()) {
            return err_semantic(Pos { line: 1, col: 1 }, format!("duplicate parameter `{}`", p.name));
        }
        lw.env.vars.push(Var {
            name: p.name.clone(),
            value: Operand::Param(p.name.clone()),
            is_ptr: p.ty == Type::IntPtr,
        });
    }
    lw.start_block("entry".to_string());
    lw.env.push_scope();
    lw.stmts(&func.body)?;
    if !lw.terminated() {
        match func.ret {
            Type::Void => lw.emit(Inst::Ret(None)),
            _ => return err_semantic(Pos { line: 0, col: 0 }, "control reaches end of non-void function"),
        }
    }

    let mut out = String::new();
    let params: Vec<String> = func
        .params
        .iter()
        .map(|p| format!("{} %{}", type_name(p.ty), p.name))
        .collect();
    let _ = writeln!(
        out,
        "define {} {}({}) {{",
        type_name(func.ret),
        STRIPPED_SYMBOL,
        params.join(", ")
    );
    for b in &lw.blocks {
        let _ = writeln!(out, "{}:", b.label);
        for i in &b.insts {
            let _ = writeln!(out, "  {i}");
        }
    }
    out.push_str("}\n");
    Ok(out)
}

/// Parses and lowers one toy-C function to IR text.
pub fn lower_to_ir(source_text: &str) -> Result<String> {
    lower_function(&parse_function(source_text)?)
}

/// Instruction lines of an IR listing (header, labels and braces excluded).
pub fn ir_instructions(ir: &str) -> Vec<&str> {
    ir.lines()
        .filter(|l| l.starts_with("  "))
        .map(str::trim)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_then_return() {
        let ir = lower_to_ir("int f(int a,int b){int x=a+b;return x;}").unwrap();
        let golden = "define int @TESTFUN0(int %a, int %b) {\nentry:\n  %0 = add %a, %b\n  ret %0\n}\n";
        assert_eq!(ir, golden);
        let insts = ir_instructions(&ir);
        assert_eq!(insts.first(), Some(&"%0 = add %a, %b"));
        assert_eq!(insts.last(), Some(&"ret %0"));
    }

    #[test]
    fn constant_return_is_two_instructions() {
        let ir = lower_to_ir("int f(){return 0;}").unwrap();
        assert_eq!(ir_instructions(&ir), vec!["%0 = add 0, 0", "ret %0"]);
    }

    #[test]
    fn function_name_is_stripped() {
        let ir = lower_to_ir("int quicksort_helper(int a){return a;}").unwrap();
        assert!(ir.lines().next().unwrap().contains("@TESTFUN0"));
        assert!(!ir.contains("quicksort_helper"));
    }

    #[test]
    fn while_loop_golden() {
        // Hand-traced: header phis for s and i, body increments both.
        let src = "int f(int *a, int n){int s = 0; int i = 0; while (i < n) { s = s + a[i]; i = i + 1; } return s;}";
        let ir = lower_to_ir(src).unwrap();
        let golden = "\
define int @TESTFUN0(int* %a, int %n) {
entry:
  %0 = add 0, 0
  %1 = add 0, 0
  br label %bb1
bb1:
  %2 = phi [%0, %entry], [%7, %bb2]
  %3 = phi [%1, %entry], [%9, %bb2]
  %4 = icmp slt %3, %n
  br %4, label %bb2, label %bb3
bb2:
  %5 = add %a, %3
  %6 = load %5
  %7 = add %2, %6
  %8 = add 1, 0
  %9 = add %3, %8
  br label %bb1
bb3:
  ret %2
}
";
        assert_eq!(ir, golden);
    }

    #[test]
    fn if_else_joins_with_phi() {
        let src = "int f(int x, int y){ if (x > y) x = x - y; else y = y - x; return x + y; }";
        let ir = lower_to_ir(src).unwrap();
        let golden = "\
define int @TESTFUN0(int %x, int %y) {
entry:
  %0 = icmp sgt %x, %y
  br %0, label %bb1, label %bb2
bb1:
  %1 = sub %x, %y
  br label %bb3
bb2:
  %2 = sub %y, %x
  br label %bb3
bb3:
  %3 = phi [%1, %bb1], [%x, %bb2]
  %4 = phi [%y, %bb1], [%2, %bb2]
  %5 = add %3, %4
  ret %5
}
";
        assert_eq!(ir, golden);
    }

    #[test]
    fn early_return_in_branch() {
        let src = "int f(int x, int y){ if (x > y) return x - y; return y - x; }";
        let ir = lower_to_ir(src).unwrap();
        assert_eq!(ir.matches("ret ").count(), 2);
        assert!(!ir.contains("phi"));
    }

    #[test]
    fn store_goes_through_address() {
        let ir = lower_to_ir("void f(int a[], int v){ a[2] = v; }").unwrap();
        assert_eq!(
            ir_instructions(&ir),
            vec!["%0 = add 2, 0", "%1 = add %a, %0", "store %v, %1", "ret void"]
        );
    }

    #[test]
    fn only_known_opcodes() {
        let src = "void sort(int a[], int n){ for (int i = 0; i < n; i++) { for (int j = 0; j + 1 < n - i; j++) { if (a[j] > a[j + 1]) { int t = a[j]; a[j] = a[j + 1]; a[j + 1] = t; } } } }";
        let ir = lower_to_ir(src).unwrap();
        for inst in ir_instructions(&ir) {
            let op = match inst.split_once(" = ") {
                Some((_, rhs)) => rhs.split_whitespace().next().unwrap(),
                None => inst.split_whitespace().next().unwrap(),
            };
            assert!(OPCODES.contains(&op), "{inst}");
        }
    }

    #[test]
    fn missing_return_is_rejected() {
        assert!(lower_to_ir("int f(int a){ a = a + 1; }").is_err());
        assert!(lower_to_ir("int f(int a){ return b; }").is_err());
    }

    #[test]
    fn unreachable_code_is_unsupported() {
        let err = lower_to_ir("int f(int a){ return a; a = 1; }").unwrap_err();
        assert!(matches!(err, Error::Unsupported { .. }));
    }
}
