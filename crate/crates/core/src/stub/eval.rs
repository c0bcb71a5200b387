//! Tree-walking evaluator for the stub runner's Python subset.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::time::{Duration, Instant};

use super::parse::{BinOp, CmpOp, Expr, FuncDef, Stmt, Target};

const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone)]
pub enum Value {
    None,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Rc<RefCell<Vec<Value>>>),
    Tuple(Rc<Vec<Value>>),
    Func(Rc<FuncDef>),
    Builtin(&'static str),
    Method(Box<Value>, String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Raised {
    Exception { kind: String, message: String },
    Timeout,
}

impl Raised {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Raised::Exception {
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    pub fn is_assertion(&self) -> bool {
        matches!(self, Raised::Exception { kind, .. } if kind == "AssertionError")
    }

    pub fn render(&self) -> String {
        match self {
            Raised::Exception { kind, message } if message.is_empty() => kind.clone(),
            Raised::Exception { kind, message } => format!("{kind}: {message}"),
            Raised::Timeout => "Timeout".to_string(),
        }
    }
}

enum Flow {
    Normal,
    Return(Value),
    Break,
    Continue,
}

type Eval<T> = Result<T, Raised>;

const BUILTINS: &[&str] = &[
    "len", "abs", "range", "repr", "str", "int", "float", "bool", "min", "max", "sum", "print",
    "sleep", "list", "sorted", "reversed", "isinstance", "round",
];

pub struct Interpreter {
    pub globals: HashMap<String, Value>,
    deadline: Instant,
    pub stdout: String,
    depth: usize,
}

impl Interpreter {
    pub fn new(deadline: Instant) -> Self {
        Self {
            globals: HashMap::new(),
            deadline,
            stdout: String::new(),
            depth: 0,
        }
    }

    fn check_deadline(&self) -> Eval<()> {
        if Instant::now() >= self.deadline {
            Err(Raised::Timeout)
        } else {
            Ok(())
        }
    }

    pub fn run_module(&mut self, body: &[Stmt]) -> Eval<()> {
        let mut scope = None;
        match self.exec_block(body, &mut scope)? {
            Flow::Normal => Ok(()),
            Flow::Return(_) => Err(Raised::new("SyntaxError", "'return' outside function")),
            Flow::Break | Flow::Continue => Err(Raised::new("SyntaxError", "loop control outside loop")),
        }
    }

    fn exec_block(&mut self, body: &[Stmt], scope: &mut Option<HashMap<String, Value>>) -> Eval<Flow> {
        for stmt in body {
            match self.exec(stmt, scope)? {
                Flow::Normal => {}
                other => return Ok(other),
            }
        }
        Ok(Flow::Normal)
    }

    fn exec(&mut self, stmt: &Stmt, scope: &mut Option<HashMap<String, Value>>) -> Eval<Flow> {
        match stmt {
            Stmt::Def(f) => {
                self.assign_name(&f.name, Value::Func(f.clone()), scope);
                Ok(Flow::Normal)
            }
            Stmt::Return(e) => Ok(Flow::Return(match e {
                Some(e) => self.eval(e, scope)?,
                None => Value::None,
            })),
            Stmt::Pass | Stmt::Import => Ok(Flow::Normal),
            Stmt::Break => Ok(Flow::Break),
            Stmt::Continue => Ok(Flow::Continue),
            Stmt::Expr(e) => {
                self.eval(e, scope)?;
                Ok(Flow::Normal)
            }
            Stmt::Assert(cond, msg) => {
                if truthy(&self.eval(cond, scope)?) {
                    Ok(Flow::Normal)
                } else {
                    let message = match msg {
                        Some(m) => to_str(&self.eval(m, scope)?),
                        None => String::new(),
                    };
                    Err(Raised::new("AssertionError", message))
                }
            }
            Stmt::Assign(target, op, value) => {
                let mut v = self.eval(value, scope)?;
                if let Some(op) = op {
                    let current = match target {
                        Target::Name(n) => self.lookup(n, scope)?,
                        Target::Index(base, idx) => {
                            let b = self.eval(base, scope)?;
                            let i = self.eval(idx, scope)?;
                            index(&b, &i)?
                        }
                        Target::Unpack(_) => return Err(Raised::new("SyntaxError", "illegal augmented assignment")),
                    };
                    v = binop(*op, &current, &v)?;
                }
                self.assign(target, v, scope)?;
                Ok(Flow::Normal)
            }
            Stmt::If(branches, orelse) => {
                for (cond, body) in branches {
                    if truthy(&self.eval(cond, scope)?) {
                        return self.exec_block(body, scope);
                    }
                }
                self.exec_block(orelse, scope)
            }
            Stmt::While(cond, body) => {
                loop {
                    self.check_deadline()?;
                    if !truthy(&self.eval(cond, scope)?) {
                        return Ok(Flow::Normal);
                    }
                    match self.exec_block(body, scope)? {
                        Flow::Break => return Ok(Flow::Normal),
                        Flow::Return(v) => return Ok(Flow::Return(v)),
                        Flow::Normal | Flow::Continue => {}
                    }
                }
            }
            Stmt::For(target, iter, body) => {
                let items = iterate(&self.eval(iter, scope)?)?;
                for item in items {
                    self.check_deadline()?;
                    self.assign(target, item, scope)?;
                    match self.exec_block(body, scope)? {
                        Flow::Break => break,
                        Flow::Return(v) => return Ok(Flow::Return(v)),
                        Flow::Normal | Flow::Continue => {}
                    }
                }
                Ok(Flow::Normal)
            }
        }
    }

    fn assign_name(&mut self, name: &str, v: Value, scope: &mut Option<HashMap<String, Value>>) {
        match scope {
            Some(locals) => {
                locals.insert(name.to_string(), v);
            }
            None => {
                self.globals.insert(name.to_string(), v);
            }
        }
    }

    fn assign(&mut self, target: &Target, v: Value, scope: &mut Option<HashMap<String, Value>>) -> Eval<()> {
        match target {
            Target::Name(n) => {
                self.assign_name(n, v, scope);
                Ok(())
            }
            Target::Unpack(names) => {
                let items = iterate(&v)?;
                if items.len() != names.len() {
                    return Err(Raised::new(
                        "ValueError",
                        format!("expected {} values to unpack, got {}", names.len(), items.len()),
                    ));
                }
                for (n, item) in names.iter().zip(items) {
                    self.assign_name(n, item, scope);
                }
                Ok(())
            }
            Target::Index(base, idx) => {
                let b = self.eval(base, scope)?;
                let i = self.eval(idx, scope)?;
                let Value::List(list) = b else {
                    return Err(Raised::new("TypeError", format!("'{}' object does not support item assignment", type_name(&b))));
                };
                let mut list = list.borrow_mut();
                let pos = normalize_index(&i, list.len())?;
                list[pos] = v;
                Ok(())
            }
        }
    }

    fn lookup(&self, name: &str, scope: &Option<HashMap<String, Value>>) -> Eval<Value> {
        if let Some(v) = scope.as_ref().and_then(|l| l.get(name)) {
            return Ok(v.clone());
        }
        if let Some(v) = self.globals.get(name) {
            return Ok(v.clone());
        }
        if let Some(b) = BUILTINS.iter().find(|b| **b == name) {
            return Ok(Value::Builtin(b));
        }
        Err(Raised::new("NameError", format!("name '{name}' is not defined")))
    }

    pub fn eval(&mut self, e: &Expr, scope: &mut Option<HashMap<String, Value>>) -> Eval<Value> {
        Ok(match e {
            Expr::Int(v) => Value::Int(*v),
            Expr::Float(v) => Value::Float(*v),
            Expr::Str(s) => Value::Str(s.clone()),
            Expr::Bool(b) => Value::Bool(*b),
            Expr::None => Value::None,
            Expr::Name(n) => self.lookup(n, scope)?,
            Expr::List(items) => {
                let vals = items.iter().map(|i| self.eval(i, scope)).collect::<Eval<Vec<_>>>()?;
                Value::List(Rc::new(RefCell::new(vals)))
            }
            Expr::Tuple(items) => {
                let vals = items.iter().map(|i| self.eval(i, scope)).collect::<Eval<Vec<_>>>()?;
                Value::Tuple(Rc::new(vals))
            }
            Expr::Neg(inner) => match self.eval(inner, scope)? {
                Value::Int(v) => Value::Int(v.checked_neg().ok_or_else(overflow)?),
                Value::Bool(b) => Value::Int(-(b as i64)),
                Value::Float(v) => Value::Float(-v),
                other => return Err(Raised::new("TypeError", format!("bad operand type for unary -: '{}'", type_name(&other)))),
            },
            Expr::Not(inner) => Value::Bool(!truthy(&self.eval(inner, scope)?)),
            Expr::Bin(op, l, r) => {
                let l = self.eval(l, scope)?;
                let r = self.eval(r, scope)?;
                binop(*op, &l, &r)?
            }
            Expr::Cmp(first, rest) => {
                let mut lhs = self.eval(first, scope)?;
                for (op, rhs) in rest {
                    let rhs = self.eval(rhs, scope)?;
                    if !compare(*op, &lhs, &rhs)? {
                        return Ok(Value::Bool(false));
                    }
                    lhs = rhs;
                }
                Value::Bool(true)
            }
            Expr::And(l, r) => {
                let l = self.eval(l, scope)?;
                if !truthy(&l) {
                    l
                } else {
                    self.eval(r, scope)?
                }
            }
            Expr::Or(l, r) => {
                let l = self.eval(l, scope)?;
                if truthy(&l) {
                    l
                } else {
                    self.eval(r, scope)?
                }
            }
            Expr::IfElse(cond, body, orelse) => {
                if truthy(&self.eval(cond, scope)?) {
                    self.eval(body, scope)?
                } else {
                    self.eval(orelse, scope)?
                }
            }
            Expr::Attr(base, attr) => {
                let b = self.eval(base, scope)?;
                Value::Method(Box::new(b), attr.clone())
            }
            Expr::Index(base, idx) => {
                let b = self.eval(base, scope)?;
                let i = self.eval(idx, scope)?;
                index(&b, &i)?
            }
            Expr::Slice(base, start, stop, step) => {
                let b = self.eval(base, scope)?;
                let mut bound = |e: &Option<Box<Expr>>| -> Eval<Option<i64>> {
                    match e {
                        None => Ok(None),
                        Some(e) => match self.eval(e, scope)? {
                            Value::Int(v) => Ok(Some(v)),
                            Value::None => Ok(None),
                            other => Err(Raised::new("TypeError", format!("slice indices must be integers, not {}", type_name(&other)))),
                        },
                    }
                };
                let (start, stop, step) = (bound(start)?, bound(stop)?, bound(step)?);
                slice(&b, start, stop, step)?
            }
            Expr::Call(func, args) => {
                let f = self.eval(func, scope)?;
                let args = args.iter().map(|a| self.eval(a, scope)).collect::<Eval<Vec<_>>>()?;
                self.call(&f, args)?
            }
        })
    }

    fn call(&mut self, f: &Value, args: Vec<Value>) -> Eval<Value> {
        self.check_deadline()?;
        match f {
            Value::Func(def) => {
                if self.depth >= MAX_DEPTH {
                    return Err(Raised::new("RecursionError", "maximum recursion depth exceeded"));
                }
                if args.len() > def.params.len() {
                    return Err(Raised::new(
                        "TypeError",
                        format!("{}() takes {} positional arguments but {} were given", def.name, def.params.len(), args.len()),
                    ));
                }
                let mut locals = HashMap::new();
                let n_args = args.len();
                for (i, arg) in args.into_iter().enumerate() {
                    locals.insert(def.params[i].0.clone(), arg);
                }
                for (name, default) in &def.params[n_args..] {
                    let Some(default) = default else {
                        return Err(Raised::new("TypeError", format!("{}() missing required positional argument: '{name}'", def.name)));
                    };
                    let v = self.eval(default, &mut None)?;
                    locals.insert(name.clone(), v);
                }
                self.depth += 1;
                let mut scope = Some(locals);
                let result = self.exec_block(&def.body, &mut scope);
                self.depth -= 1;
                match result? {
                    Flow::Return(v) => Ok(v),
                    _ => Ok(Value::None),
                }
            }
            Value::Builtin(name) => self.builtin(name, args),
            Value::Method(recv, name) => method(recv, name, args),
            other => Err(Raised::new("TypeError", format!("'{}' object is not callable", type_name(other)))),
        }
    }

    fn builtin(&mut self, name: &str, args: Vec<Value>) -> Eval<Value> {
        let arity = |n: usize| -> Eval<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(Raised::new("TypeError", format!("{name}() takes exactly {n} argument(s) ({} given)", args.len())))
            }
        };
        match name {
            "print" => {
                let line = args.iter().map(to_str).collect::<Vec<_>>().join(" ");
                self.stdout.push_str(&line);
                self.stdout.push('\n');
                Ok(Value::None)
            }
            "sleep" => {
                arity(1)?;
                let secs = as_f64(&args[0])?;
                let wanted = Duration::from_secs_f64(secs.max(0.0));
                let now = Instant::now();
                if now + wanted > self.deadline {
                    std::thread::sleep(self.deadline.saturating_duration_since(now));
                    return Err(Raised::Timeout);
                }
                std::thread::sleep(wanted);
                Ok(Value::None)
            }
            "len" => {
                arity(1)?;
                Ok(Value::Int(iterate(&args[0])?.len() as i64))
            }
            "abs" => {
                arity(1)?;
                match &args[0] {
                    Value::Int(v) => Ok(Value::Int(v.checked_abs().ok_or_else(overflow)?)),
                    Value::Float(v) => Ok(Value::Float(v.abs())),
                    Value::Bool(b) => Ok(Value::Int(*b as i64)),
                    other => Err(Raised::new("TypeError", format!("bad operand type for abs(): '{}'", type_name(other)))),
                }
            }
            "range" => {
                let ints = args.iter().map(as_int).collect::<Eval<Vec<_>>>()?;
                let (start, stop, step) = match ints.as_slice() {
                    [stop] => (0, *stop, 1),
                    [start, stop] => (*start, *stop, 1),
                    [start, stop, step] => (*start, *stop, *step),
                    _ => return Err(Raised::new("TypeError", "range expected 1 to 3 arguments")),
                };
                if step == 0 {
                    return Err(Raised::new("ValueError", "range() arg 3 must not be zero"));
                }
                let mut out = Vec::new();
                let mut i = start;
                while (step > 0 && i < stop) || (step < 0 && i > stop) {
                    if out.len() % 1024 == 0 {
                        self.check_deadline()?;
                    }
                    out.push(Value::Int(i));
                    i += step;
                }
                Ok(list(out))
            }
            "repr" => {
                arity(1)?;
                Ok(Value::Str(repr(&args[0])))
            }
            "str" => {
                arity(1)?;
                Ok(Value::Str(to_str(&args[0])))
            }
            "int" => {
                arity(1)?;
                match &args[0] {
                    Value::Int(v) => Ok(Value::Int(*v)),
                    Value::Bool(b) => Ok(Value::Int(*b as i64)),
                    Value::Float(v) => Ok(Value::Int(v.trunc() as i64)),
                    Value::Str(s) => s
                        .trim()
                        .parse::<i64>()
                        .map(Value::Int)
                        .map_err(|_| Raised::new("ValueError", format!("invalid literal for int() with base 10: {}", repr(&args[0])))),
                    other => Err(Raised::new("TypeError", format!("int() argument must be a string or a number, not '{}'", type_name(other)))),
                }
            }
            "float" => {
                arity(1)?;
                match &args[0] {
                    Value::Str(s) => s
                        .trim()
                        .parse::<f64>()
                        .map(Value::Float)
                        .map_err(|_| Raised::new("ValueError", format!("could not convert string to float: {}", repr(&args[0])))),
                    other => Ok(Value::Float(as_f64(other)?)),
                }
            }
            "bool" => {
                arity(1)?;
                Ok(Value::Bool(truthy(&args[0])))
            }
            "list" => {
                arity(1)?;
                Ok(list(iterate(&args[0])?))
            }
            "reversed" => {
                arity(1)?;
                let mut items = iterate(&args[0])?;
                items.reverse();
                Ok(list(items))
            }
            "sorted" => {
                arity(1)?;
                let mut items = iterate(&args[0])?;
                sort_values(&mut items)?;
                Ok(list(items))
            }
            "sum" => {
                arity(1)?;
                iterate(&args[0])?.iter().try_fold(Value::Int(0), |acc, v| binop(BinOp::Add, &acc, v))
            }
            "min" | "max" => {
                let items = if args.len() == 1 { iterate(&args[0])? } else { args };
                let mut iter = items.into_iter();
                let Some(mut best) = iter.next() else {
                    return Err(Raised::new("ValueError", format!("{name}() arg is an empty sequence")));
                };
                for v in iter {
                    let better = if name == "min" { compare(CmpOp::Lt, &v, &best)? } else { compare(CmpOp::Gt, &v, &best)? };
                    if better {
                        best = v;
                    }
                }
                Ok(best)
            }
            "round" => {
                let x = as_f64(args.first().ok_or_else(|| Raised::new("TypeError", "round() missing argument"))?)?;
                match args.get(1) {
                    None => Ok(Value::Int(round_half_even(x) as i64)),
                    Some(d) => {
                        let scale = 10f64.powi(as_int(d)? as i32);
                        Ok(Value::Float(round_half_even(x * scale) / scale))
                    }
                }
            }
            "isinstance" => Err(Raised::new("NotImplementedError", "isinstance is not supported by the stub runner")),
            _ => Err(Raised::new("NameError", format!("name '{name}' is not defined"))),
        }
    }
}

fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 {
        2.0 * (x / 2.0).round()
    } else {
        r
    }
}

fn method(recv: &Value, name: &str, args: Vec<Value>) -> Eval<Value> {
    match (recv, name) {
        (Value::List(l), "append") if args.len() == 1 => {
            l.borrow_mut().push(args.into_iter().next().expect("len checked"));
            Ok(Value::None)
        }
        (Value::List(l), "pop") => {
            let mut l = l.borrow_mut();
            let pos = match args.first() {
                Some(i) => normalize_index(i, l.len())?,
                None if !l.is_empty() => l.len() - 1,
                None => return Err(Raised::new("IndexError", "pop from empty list")),
            };
            Ok(l.remove(pos))
        }
        (Value::Str(s), "upper") => Ok(Value::Str(s.to_uppercase())),
        (Value::Str(s), "lower") => Ok(Value::Str(s.to_lowercase())),
        (Value::Str(s), "strip") => Ok(Value::Str(s.trim().to_string())),
        (Value::Str(s), "split") => {
            let parts: Vec<Value> = match args.first() {
                Some(Value::Str(sep)) => s.split(sep.as_str()).map(|p| Value::Str(p.to_string())).collect(),
                _ => s.split_whitespace().map(|p| Value::Str(p.to_string())).collect(),
            };
            Ok(list(parts))
        }
        (Value::Str(sep), "join") if args.len() == 1 => {
            let parts = iterate(&args[0])?
                .iter()
                .map(|v| match v {
                    Value::Str(s) => Ok(s.clone()),
                    other => Err(Raised::new("TypeError", format!("sequence item: expected str instance, {} found", type_name(other)))),
                })
                .collect::<Eval<Vec<_>>>()?;
            Ok(Value::Str(parts.join(sep)))
        }
        (Value::Str(s), "startswith") if args.len() == 1 => Ok(Value::Bool(s.starts_with(&to_str(&args[0])))),
        (Value::Str(s), "endswith") if args.len() == 1 => Ok(Value::Bool(s.ends_with(&to_str(&args[0])))),
        (Value::Str(s), "replace") if args.len() == 2 => Ok(Value::Str(s.replace(&to_str(&args[0]), &to_str(&args[1])))),
        (Value::Str(s), "isdigit") => Ok(Value::Bool(!s.is_empty() && s.chars().all(|c| c.is_ascii_digit()))),
        _ => Err(Raised::new("AttributeError", format!("'{}' object has no attribute '{name}'", type_name(recv)))),
    }
}

fn list(items: Vec<Value>) -> Value {
    Value::List(Rc::new(RefCell::new(items)))
}

fn overflow() -> Raised {
    Raised::new("OverflowError", "integer overflow")
}

pub fn type_name(v: &Value) -> &'static str {
    match v {
        Value::None => "NoneType",
        Value::Bool(_) => "bool",
        Value::Int(_) => "int",
        Value::Float(_) => "float",
        Value::Str(_) => "str",
        Value::List(_) => "list",
        Value::Tuple(_) => "tuple",
        Value::Func(_) => "function",
        Value::Builtin(_) => "builtin_function_or_method",
        Value::Method(..) => "method",
    }
}

pub fn truthy(v: &Value) -> bool {
    match v {
        Value::None => false,
        Value::Bool(b) => *b,
        Value::Int(i) => *i != 0,
        Value::Float(f) => *f != 0.0,
        Value::Str(s) => !s.is_empty(),
        Value::List(l) => !l.borrow().is_empty(),
        Value::Tuple(t) => !t.is_empty(),
        _ => true,
    }
}

fn as_int(v: &Value) -> Eval<i64> {
    match v {
        Value::Int(i) => Ok(*i),
        Value::Bool(b) => Ok(*b as i64),
        other => Err(Raised::new("TypeError", format!("'{}' object cannot be interpreted as an integer", type_name(other)))),
    }
}

fn as_f64(v: &Value) -> Eval<f64> {
    match v {
        Value::Int(i) => Ok(*i as f64),
        Value::Bool(b) => Ok(*b as i64 as f64),
        Value::Float(f) => Ok(*f),
        other => Err(Raised::new("TypeError", format!("must be real number, not {}", type_name(other)))),
    }
}

fn is_number(v: &Value) -> bool {
    matches!(v, Value::Int(_) | Value::Float(_) | Value::Bool(_))
}

fn iterate(v: &Value) -> Eval<Vec<Value>> {
    match v {
        Value::List(l) => Ok(l.borrow().clone()),
        Value::Tuple(t) => Ok(t.as_ref().clone()),
        Value::Str(s) => Ok(s.chars().map(|c| Value::Str(c.to_string())).collect()),
        other => Err(Raised::new("TypeError", format!("'{}' object is not iterable", type_name(other)))),
    }
}

fn normalize_index(i: &Value, len: usize) -> Eval<usize> {
    let i = as_int(i)?;
    let pos = if i < 0 { i + len as i64 } else { i };
    if pos < 0 || pos >= len as i64 {
        Err(Raised::new("IndexError", "index out of range"))
    } else {
        Ok(pos as usize)
    }
}

fn index(b: &Value, i: &Value) -> Eval<Value> {
    match b {
        Value::Str(s) => {
            let chars: Vec<char> = s.chars().collect();
            let pos = normalize_index(i, chars.len()).map_err(|_| Raised::new("IndexError", "string index out of range"))?;
            Ok(Value::Str(chars[pos].to_string()))
        }
        Value::List(l) => {
            let l = l.borrow();
            let pos = normalize_index(i, l.len()).map_err(|_| Raised::new("IndexError", "list index out of range"))?;
            Ok(l[pos].clone())
        }
        Value::Tuple(t) => {
            let pos = normalize_index(i, t.len()).map_err(|_| Raised::new("IndexError", "tuple index out of range"))?;
            Ok(t[pos].clone())
        }
        other => Err(Raised::new("TypeError", format!("'{}' object is not subscriptable", type_name(other)))),
    }
}

fn slice(b: &Value, start: Option<i64>, stop: Option<i64>, step: Option<i64>) -> Eval<Value> {
    let items = match b {
        Value::Str(_) | Value::List(_) | Value::Tuple(_) => iterate(b)?,
        other => return Err(Raised::new("TypeError", format!("'{}' object is not subscriptable", type_name(other)))),
    };
    let len = items.len() as i64;
    let step = step.unwrap_or(1);
    if step == 0 {
        return Err(Raised::new("ValueError", "slice step cannot be zero"));
    }
    let clamp = |v: i64, lo: i64, hi: i64| v.max(lo).min(hi);
    let resolve = |v: i64| if v < 0 { v + len } else { v };
    let picked: Vec<Value> = if step > 0 {
        let s = clamp(start.map_or(0, resolve), 0, len);
        let e = clamp(stop.map_or(len, resolve), 0, len);
        (s..e).step_by(step as usize).map(|i| items[i as usize].clone()).collect()
    } else {
        let s = clamp(start.map_or(len - 1, resolve), -1, len - 1);
        let e = clamp(stop.map_or(-1, resolve), -1, len - 1);
        let mut out = Vec::new();
        let mut i = s;
        while i > e {
            out.push(items[i as usize].clone());
            i += step;
        }
        out
    };
    Ok(match b {
        Value::Str(_) => Value::Str(picked.iter().map(to_str).collect()),
        Value::Tuple(_) => Value::Tuple(Rc::new(picked)),
        _ => list(picked),
    })
}

fn binop(op: BinOp, l: &Value, r: &Value) -> Eval<Value> {
    use Value::*;
    let unsupported = || {
        Raised::new(
            "TypeError",
            format!("unsupported operand type(s) for {}: '{}' and '{}'", op_symbol(op), type_name(l), type_name(r)),
        )
    };
    match (op, l, r) {
        (BinOp::Add, Str(a), Str(b)) => return Ok(Str(format!("{a}{b}"))),
        (BinOp::Add, List(a), List(b)) => {
            let mut items = a.borrow().clone();
            items.extend(b.borrow().iter().cloned());
            return Ok(list(items));
        }
        (BinOp::Add, Tuple(a), Tuple(b)) => {
            let mut items = a.as_ref().clone();
            items.extend(b.iter().cloned());
            return Ok(Tuple(Rc::new(items)));
        }
        (BinOp::Mul, Str(s), n) | (BinOp::Mul, n, Str(s)) if matches!(n, Int(_) | Bool(_)) => {
            return Ok(Str(s.repeat(as_int(n)?.max(0) as usize)));
        }
        (BinOp::Mul, List(a), n) | (BinOp::Mul, n, List(a)) if matches!(n, Int(_) | Bool(_)) => {
            let items = a.borrow();
            let times = as_int(n)?.max(0) as usize;
            return Ok(list(items.iter().cloned().cycle().take(items.len() * times).collect()));
        }
        (BinOp::Mod, Str(_), _) => return Err(Raised::new("TypeError", "%-formatting is not supported by the stub runner")),
        _ => {}
    }
    if !is_number(l) || !is_number(r) {
        return Err(unsupported());
    }
    let both_int = !matches!(l, Float(_)) && !matches!(r, Float(_));
    if both_int {
        let (a, b) = (as_int(l)?, as_int(r)?);
        let zero = || Raised::new("ZeroDivisionError", if op == BinOp::Mod { "integer modulo by zero" } else { "integer division or modulo by zero" });
        return Ok(match op {
            BinOp::Add => Int(a.checked_add(b).ok_or_else(overflow)?),
            BinOp::Sub => Int(a.checked_sub(b).ok_or_else(overflow)?),
            BinOp::Mul => Int(a.checked_mul(b).ok_or_else(overflow)?),
            BinOp::Div => {
                if b == 0 {
                    return Err(Raised::new("ZeroDivisionError", "division by zero"));
                }
                Float(a as f64 / b as f64)
            }
            BinOp::FloorDiv => {
                if b == 0 {
                    return Err(zero());
                }
                Int(a.div_euclid(b) - if b < 0 && a.rem_euclid(b) != 0 { 1 } else { 0 })
            }
            BinOp::Mod => {
                if b == 0 {
                    return Err(zero());
                }
                let m = a % b;
                Int(if m != 0 && ((m < 0) != (b < 0)) { m + b } else { m })
            }
            BinOp::Pow => {
                if b < 0 {
                    Float((a as f64).powf(b as f64))
                } else {
                    Int(a.checked_pow(u32::try_from(b).map_err(|_| overflow())?).ok_or_else(overflow)?)
                }
            }
        });
    }
    let (a, b) = (as_f64(l)?, as_f64(r)?);
    Ok(Float(match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return Err(Raised::new("ZeroDivisionError", "float division by zero"));
            }
            a / b
        }
        BinOp::FloorDiv => {
            if b == 0.0 {
                return Err(Raised::new("ZeroDivisionError", "float floor division by zero"));
            }
            (a / b).floor()
        }
        BinOp::Mod => {
            if b == 0.0 {
                return Err(Raised::new("ZeroDivisionError", "float modulo"));
            }
            a - b * (a / b).floor()
        }
        BinOp::Pow => a.powf(b),
    }))
}

fn op_symbol(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "*",
        BinOp::Div => "/",
        BinOp::FloorDiv => "//",
        BinOp::Mod => "%",
        BinOp::Pow => "** or pow()",
    }
}

pub fn equals(l: &Value, r: &Value) -> bool {
    use Value::*;
    match (l, r) {
        (None, None) => true,
        (Str(a), Str(b)) => a == b,
        (List(a), List(b)) => {
            let (a, b) = (a.borrow(), b.borrow());
            a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| equals(x, y))
        }
        (Tuple(a), Tuple(b)) => a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| equals(x, y)),
        (Func(a), Func(b)) => Rc::ptr_eq(a, b),
        (a, b) if is_number(a) && is_number(b) => match (a, b) {
            (Float(_), _) | (_, Float(_)) => as_f64(a).ok() == as_f64(b).ok(),
            _ => as_int(a).ok() == as_int(b).ok(),
        },
        _ => false,
    }
}

fn ordering(l: &Value, r: &Value) -> Eval<std::cmp::Ordering> {
    use Value::*;
    match (l, r) {
        (a, b) if is_number(a) && is_number(b) => as_f64(a)?
            .partial_cmp(&as_f64(b)?)
            .ok_or_else(|| Raised::new("ValueError", "cannot order NaN")),
        (Str(a), Str(b)) => Ok(a.cmp(b)),
        (List(_), List(_)) | (Tuple(_), Tuple(_)) => {
            let (a, b) = (iterate(l)?, iterate(r)?);
            for (x, y) in a.iter().zip(b.iter()) {
                let o = ordering(x, y)?;
                if o != std::cmp::Ordering::Equal {
                    return Ok(o);
                }
            }
            Ok(a.len().cmp(&b.len()))
        }
        _ => Err(Raised::new(
            "TypeError",
            format!("'<' not supported between instances of '{}' and '{}'", type_name(l), type_name(r)),
        )),
    }
}

fn sort_values(items: &mut [Value]) -> Eval<()> {
    let mut failure = Option::None;
    items.sort_by(|a, b| match ordering(a, b) {
        Ok(o) => o,
        Err(e) => {
            failure.get_or_insert(e);
            std::cmp::Ordering::Equal
        }
    });
    failure.map_or(Ok(()), Err)
}

fn compare(op: CmpOp, l: &Value, r: &Value) -> Eval<bool> {
    use std::cmp::Ordering::*;
    Ok(match op {
        CmpOp::Eq => equals(l, r),
        CmpOp::Ne => !equals(l, r),
        CmpOp::Is => matches!((l, r), (Value::None, Value::None)) || (matches!((l, r), (Value::Bool(_), Value::Bool(_))) && equals(l, r)),
        CmpOp::IsNot => !compare(CmpOp::Is, l, r)?,
        CmpOp::Lt => ordering(l, r)? == Less,
        CmpOp::Le => ordering(l, r)? != Greater,
        CmpOp::Gt => ordering(l, r)? == Greater,
        CmpOp::Ge => ordering(l, r)? != Less,
        CmpOp::In | CmpOp::NotIn => {
            let found = match r {
                Value::Str(hay) => match l {
                    Value::Str(needle) => hay.contains(needle.as_str()),
                    other => {
                        return Err(Raised::new("TypeError", format!("'in <string>' requires string as left operand, not {}", type_name(other))))
                    }
                },
                other => iterate(other)?.iter().any(|v| equals(l, v)),
            };
            found == (op == CmpOp::In)
        }
    })
}

pub fn to_str(v: &Value) -> String {
    match v {
        Value::Str(s) => s.clone(),
        other => repr(other),
    }
}

/// Python-compatible `repr` for the supported value types.
pub fn repr(v: &Value) -> String {
    match v {
        Value::None => "None".into(),
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) => float_repr(*f),
        Value::Str(s) => {
            let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
            let mut out = String::from(quote);
            for c in s.chars() {
                match c {
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    '\r' => out.push_str("\\r"),
                    c if c == quote => {
                        out.push('\\');
                        out.push(c);
                    }
                    c => out.push(c),
                }
            }
            out.push(quote);
            out
        }
        Value::List(l) => format!("[{}]", l.borrow().iter().map(repr).collect::<Vec<_>>().join(", ")),
        Value::Tuple(t) if t.len() == 1 => format!("({},)", repr(&t[0])),
        Value::Tuple(t) => format!("({})", t.iter().map(repr).collect::<Vec<_>>().join(", ")),
        Value::Func(f) => format!("<function {}>", f.name),
        Value::Builtin(b) => format!("<built-in function {b}>"),
        Value::Method(_, m) => format!("<method {m}>"),
    }
}

fn float_repr(f: f64) -> String {
    if f.is_nan() {
        return "nan".into();
    }
    if f.is_infinite() {
        return if f > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if f == f.trunc() && f.abs() < 1e16 {
        return format!("{f:.1}");
    }
    let s = format!("{f}");
    if f.abs() >= 1e16 || (f != 0.0 && f.abs() < 1e-4) {
        let e = format!("{f:e}");
        // Rust prints 1e20 as "1e20"; Python uses "1e+20".
        return match e.split_once('e') {
            Some((m, exp)) if !exp.starts_with('-') => format!("{m}e+{exp:0>2}"),
            Some((m, exp)) => format!("{m}e-{:0>2}", &exp[1..]),
            None => e,
        };
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stub::parse::parse_program;

    fn run(src: &str, expr: &str) -> Result<String, Raised> {
        let prog = parse_program(src).unwrap();
        let mut it = Interpreter::new(Instant::now() + Duration::from_secs(5));
        it.run_module(&prog)?;
        let e = parse_program(expr).unwrap();
        let Stmt::Expr(e) = &e[0] else { panic!("not an expression") };
        it.eval(e, &mut None).map(|v| repr(&v))
    }

    #[test]
    fn arithmetic_follows_python() {
        assert_eq!(run("", "7 // -2").unwrap(), "-4");
        assert_eq!(run("", "-7 % 3").unwrap(), "2");
        assert_eq!(run("", "7 / 2").unwrap(), "3.5");
        assert_eq!(run("", "2 ** 10").unwrap(), "1024");
        assert_eq!(run("", "1 + 2.0").unwrap(), "3.0");
        assert_eq!(run("", "True + 1").unwrap(), "2");
    }

    #[test]
    fn functions_loops_and_lists() {
        let src = "def fact(n):\n    if n <= 1:\n        return 1\n    return n * fact(n - 1)\n\ndef evens(n):\n    out = []\n    for i in range(n):\n        if i % 2 == 0:\n            out.append(i)\n    return out\n";
        assert_eq!(run(src, "fact(5)").unwrap(), "120");
        assert_eq!(run(src, "evens(7)").unwrap(), "[0, 2, 4, 6]");
        assert_eq!(run(src, "evens(7)[::-1]").unwrap(), "[6, 4, 2, 0]");
    }

    #[test]
    fn strings_and_repr() {
        assert_eq!(run("", "'abc'[::-1]").unwrap(), "'cba'");
        assert_eq!(run("", "repr(\"it's\")").unwrap(), "'\"it\\'s\"'");
        assert_eq!(run("", "' '.join(['a', 'b'])").unwrap(), "'a b'");
        assert_eq!(run("", "(1,)").unwrap(), "(1,)");
        assert_eq!(run("", "1e20").unwrap(), "1e+20");
    }

    #[test]
    fn errors_carry_python_names() {
        let e = run("def f(x):\n    return 1 / 0", "f(1)").unwrap_err();
        assert_eq!(e.render(), "ZeroDivisionError: division by zero");
        assert_eq!(run("", "g(1)").unwrap_err().render(), "NameError: name 'g' is not defined");
    }

    #[test]
    fn infinite_loop_hits_deadline() {
        let prog = parse_program("def f():\n    while True:\n        pass").unwrap();
        let mut it = Interpreter::new(Instant::now() + Duration::from_millis(50));
        it.run_module(&prog).unwrap();
        let call = parse_program("f()").unwrap();
        let Stmt::Expr(e) = &call[0] else { unreachable!() };
        assert_eq!(it.eval(e, &mut None).unwrap_err(), Raised::Timeout);
    }
}
