//! Runtime values. Tuples live behind shared references so that
//! `set_tuple_element` is observable through every alias.

use std::cell::{Cell, RefCell};
use std::cmp::Ordering;
use std::rc::Rc;

use num_bigint::BigInt;
use num_traits::ToPrimitive;

use crate::sterm::Term;

#[derive(Debug, Clone, PartialEq)]
pub struct Bits {
    pub bytes: Vec<u8>,
    pub bits: usize,
}

impl Bits {
    pub fn new() -> Self {
        Bits {
            bytes: Vec::new(),
            bits: 0,
        }
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn push_bit(&mut self, b: bool) {
        if self.bits.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if b {
            self.bytes[self.bits / 8] |= 0x80 >> (self.bits % 8);
        }
        self.bits += 1;
    }

    /// Appends the low `size` bits of `v`, most significant first.
    pub fn push_int(&mut self, v: &BigInt, size: usize) {
        for i in (0..size).rev() {
            self.push_bit(v.bit(i as u64));
        }
    }

    pub fn push_bits(&mut self, other: &Bits, count: usize) {
        for i in 0..count {
            self.push_bit(other.bit(i));
        }
    }
}

impl Default for Bits {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug)]
pub struct MatchState {
    pub bin: Rc<Bits>,
    pub pos: Cell<usize>,
}

pub type TupleRef = Rc<RefCell<Vec<Value>>>;

#[derive(Debug, Clone)]
pub enum Value {
    Atom(Rc<str>),
    Int(BigInt),
    Float(f64),
    Nil,
    Cons(Rc<(Value, Value)>),
    Tuple(TupleRef),
    Binary(Rc<Bits>),
    Pid(u32),
    MatchCtx(Rc<MatchState>),
    CatchTag(u32),
}

impl Value {
    pub fn atom(a: &str) -> Value {
        Value::Atom(Rc::from(a))
    }

    pub fn boolean(b: bool) -> Value {
        Value::atom(if b { "true" } else { "false" })
    }

    pub fn int<I: Into<BigInt>>(i: I) -> Value {
        Value::Int(i.into())
    }

    pub fn tuple(items: Vec<Value>) -> Value {
        Value::Tuple(Rc::new(RefCell::new(items)))
    }

    pub fn list(items: Vec<Value>) -> Value {
        items
            .into_iter()
            .rev()
            .fold(Value::Nil, |tail, h| Value::Cons(Rc::new((h, tail))))
    }

    pub fn as_atom(&self) -> Option<&str> {
        match self {
            Value::Atom(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<&BigInt> {
        match self {
            Value::Int(i) => Some(i),
            _ => None,
        }
    }

    pub fn as_usize(&self) -> Option<usize> {
        self.as_int().and_then(|i| i.to_usize())
    }

    pub fn is_true(&self) -> bool {
        self.as_atom() == Some("true")
    }

    pub fn from_term(t: &Term) -> Value {
        match t {
            Term::Atom(a) => Value::atom(a),
            Term::Int(i) => Value::Int(i.clone()),
            Term::Float(f) => Value::Float(*f),
            Term::Bin { bytes, bits } => Value::Binary(Rc::new(Bits {
                bytes: bytes.clone(),
                bits: *bits,
            })),
            Term::Tuple(items) => Value::tuple(items.iter().map(Value::from_term).collect()),
            Term::List(items) => Value::list(items.iter().map(Value::from_term).collect()),
            Term::Improper(items, tail) => items
                .iter()
                .rev()
                .fold(Value::from_term(tail), |acc, h| Value::Cons(Rc::new((Value::from_term(h), acc)))),
        }
    }

    pub fn to_term(&self) -> Term {
        match self {
            Value::Atom(a) => Term::Atom(a.to_string()),
            Value::Int(i) => Term::Int(i.clone()),
            Value::Float(f) => Term::Float(*f),
            Value::Nil => Term::nil(),
            Value::Cons(_) => {
                let mut items = Vec::new();
                let mut cur = self.clone();
                loop {
                    match cur {
                        Value::Cons(c) => {
                            items.push(c.0.to_term());
                            cur = c.1.clone();
                        }
                        Value::Nil => return Term::List(items),
                        other => return Term::Improper(items, Box::new(other.to_term())),
                    }
                }
            }
            Value::Tuple(t) => Term::Tuple(t.borrow().iter().map(Value::to_term).collect()),
            Value::Binary(b) => Term::Bin {
                bytes: b.bytes.clone(),
                bits: b.bits,
            },
            Value::Pid(n) => Term::Tuple(vec![Term::atom("$pid"), Term::int(*n)]),
            Value::MatchCtx(_) => Term::atom("#MatchState"),
            Value::CatchTag(l) => Term::Tuple(vec![Term::atom("$catch"), Term::int(*l)]),
        }
    }

    fn type_rank(&self) -> u8 {
        match self {
            Value::Int(_) | Value::Float(_) => 0,
            Value::Atom(_) => 1,
            Value::CatchTag(_) | Value::MatchCtx(_) => 2,
            Value::Pid(_) => 3,
            Value::Tuple(_) => 4,
            Value::Nil => 5,
            Value::Cons(_) => 6,
            Value::Binary(_) => 7,
        }
    }
}

/// `=:=`
pub fn exact_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x == y,
        (Value::Float(x), Value::Float(y)) => x == y,
        _ if a.type_rank() != b.type_rank() => false,
        (Value::Int(_), _) | (Value::Float(_), _) => false,
        _ => compare(a, b) == Ordering::Equal,
    }
}

fn num_f64(v: &Value) -> f64 {
    match v {
        Value::Int(i) => i.to_f64().unwrap_or(f64::NAN),
        Value::Float(f) => *f,
        _ => f64::NAN,
    }
}

/// Erlang term order; numbers compare by value.
pub fn compare(a: &Value, b: &Value) -> Ordering {
    let (ra, rb) = (a.type_rank(), b.type_rank());
    if ra != rb {
        return ra.cmp(&rb);
    }
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x.cmp(y),
        (Value::Int(_) | Value::Float(_), _) => {
            num_f64(a).partial_cmp(&num_f64(b)).unwrap_or(Ordering::Equal)
        }
        (Value::Atom(x), Value::Atom(y)) => x.cmp(y),
        (Value::Pid(x), Value::Pid(y)) => x.cmp(y),
        (Value::CatchTag(x), Value::CatchTag(y)) => x.cmp(y),
        (Value::Tuple(x), Value::Tuple(y)) => {
            if Rc::ptr_eq(x, y) {
                return Ordering::Equal;
            }
            let (x, y) = (x.borrow(), y.borrow());
            x.len().cmp(&y.len()).then_with(|| {
                x.iter()
                    .zip(y.iter())
                    .map(|(p, q)| compare(p, q))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
        }
        (Value::Nil, Value::Nil) => Ordering::Equal,
        (Value::Cons(x), Value::Cons(y)) => compare(&x.0, &y.0).then_with(|| compare(&x.1, &y.1)),
        (Value::Binary(x), Value::Binary(y)) => x.bytes.cmp(&y.bytes).then(x.bits.cmp(&y.bits)),
        (Value::MatchCtx(x), Value::MatchCtx(y)) => {
            (Rc::as_ptr(x) as usize).cmp(&(Rc::as_ptr(y) as usize))
        }
        _ => Ordering::Equal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sterm::parse_term;

    #[test]
    fn term_round_trip() {
        for text in ["{a,[1,2|b],<<1,2:3>>,-7,2.5}", "[]", "\"abc\"", "{}"] {
            let t = parse_term(text).unwrap();
            assert_eq!(Value::from_term(&t).to_term(), t);
        }
    }

    #[test]
    fn ordering_and_equality() {
        assert!(!exact_eq(&Value::int(1), &Value::Float(1.0)));
        assert_eq!(compare(&Value::int(1), &Value::Float(1.0)), Ordering::Equal);
        assert_eq!(compare(&Value::int(5), &Value::atom("a")), Ordering::Less);
        let t = Value::from_term(&parse_term("{a,b}").unwrap());
        let u = Value::from_term(&parse_term("{a,b}").unwrap());
        assert!(exact_eq(&t, &u));
    }
}
