//! Built-in functions available to emulated code.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{Signed, ToPrimitive, Zero};

use super::machine::Machine;
use super::value::{compare, exact_eq, Value};
use super::Fault;

fn int(v: &Value) -> Result<&BigInt, Fault> {
    v.as_int().ok_or(Fault::Badarith)
}

fn float(v: &Value) -> Result<f64, Fault> {
    match v {
        Value::Int(i) => i.to_f64().ok_or(Fault::Badarith),
        Value::Float(f) => Ok(*f),
        _ => Err(Fault::Badarith),
    }
}

fn arith(name: &str, a: &Value, b: &Value) -> Result<Value, Fault> {
    if let (Value::Int(x), Value::Int(y)) = (a, b) {
        return Ok(Value::Int(match name {
            "+" => x + y,
            "-" => x - y,
            "*" => x * y,
            "div" | "rem" if y.is_zero() => return Err(Fault::Badarith),
            "div" => x / y,
            "rem" => x % y,
            "band" => x & y,
            "bor" => x | y,
            "bxor" => x ^ y,
            "bsl" | "bsr" => {
                let s = y.to_i64().filter(|s| s.abs() < 1 << 20).ok_or(Fault::Badarith)?;
                let s = if name == "bsr" { -s } else { s };
                if s >= 0 {
                    x << s as usize
                } else {
                    x.div_floor(&(BigInt::from(1) << (-s) as usize))
                }
            }
            _ => return float_arith(name, a, b),
        }));
    }
    float_arith(name, a, b)
}

fn float_arith(name: &str, a: &Value, b: &Value) -> Result<Value, Fault> {
    let (x, y) = (float(a)?, float(b)?);
    let r = match name {
        "+" => x + y,
        "-" => x - y,
        "*" => x * y,
        "/" if y == 0.0 => return Err(Fault::Badarith),
        "/" => x / y,
        _ => return Err(Fault::Badarith),
    };
    if r.is_finite() {
        Ok(Value::Float(r))
    } else {
        Err(Fault::Badarith)
    }
}

fn index(v: &Value) -> Result<usize, Fault> {
    v.as_usize().filter(|i| *i >= 1).ok_or(Fault::Badarg)
}

fn boolean(v: &Value) -> Result<bool, Fault> {
    match v.as_atom() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        _ => Err(Fault::Badarg),
    }
}

fn list_items(v: &Value) -> Result<Vec<Value>, Fault> {
    let mut out = Vec::new();
    let mut cur = v.clone();
    loop {
        match cur {
            Value::Nil => return Ok(out),
            Value::Cons(c) => {
                out.push(c.0.clone());
                cur = c.1.clone();
            }
            _ => return Err(Fault::Badarg),
        }
    }
}

pub fn send(m: &mut Machine, to: Value, msg: Value) -> Result<(), Fault> {
    match to {
        Value::Pid(0) => {
            m.mailbox.push_back(msg);
            m.costs.messages_sent += 1;
            Ok(())
        }
        Value::Pid(_) => Ok(()),
        _ => Err(Fault::Badarg),
    }
}

/// Runs `module:name(args)`. Unknown functions raise `undef`.
pub fn call(m: &mut Machine, module: &str, name: &str, args: Vec<Value>) -> Result<Value, Fault> {
    let undef = || Fault::Undef(format!("{module}:{name}/{}", args.len()));
    if module != "erlang" {
        return Err(undef());
    }
    let v = match (name, args.as_slice()) {
        ("+" | "-" | "*" | "div" | "rem" | "band" | "bor" | "bxor" | "bsl" | "bsr" | "/", [a, b]) => arith(name, a, b)?,
        ("-", [a]) => match a {
            Value::Int(i) => Value::Int(-i),
            Value::Float(f) => Value::Float(-f),
            _ => return Err(Fault::Badarith),
        },
        ("bnot", [a]) => Value::Int(!int(a)?.clone()),
        ("abs", [a]) => match a {
            Value::Int(i) => Value::Int(i.abs()),
            Value::Float(f) => Value::Float(f.abs()),
            _ => return Err(Fault::Badarg),
        },
        ("=:=", [a, b]) => Value::boolean(exact_eq(a, b)),
        ("=/=", [a, b]) => Value::boolean(!exact_eq(a, b)),
        ("==", [a, b]) => Value::boolean(compare(a, b).is_eq()),
        ("/=", [a, b]) => Value::boolean(compare(a, b).is_ne()),
        ("<", [a, b]) => Value::boolean(compare(a, b).is_lt()),
        (">", [a, b]) => Value::boolean(compare(a, b).is_gt()),
        ("=<", [a, b]) => Value::boolean(compare(a, b).is_le()),
        (">=", [a, b]) => Value::boolean(compare(a, b).is_ge()),
        ("not", [a]) => Value::boolean(!boolean(a)?),
        ("and", [a, b]) => Value::boolean(boolean(a)? & boolean(b)?),
        ("or", [a, b]) => Value::boolean(boolean(a)? | boolean(b)?),
        ("xor", [a, b]) => Value::boolean(boolean(a)? ^ boolean(b)?),
        ("self", []) => Value::Pid(0),
        ("unique_integer", [] | [_]) => Value::Int(m.next_unique()),
        ("element", [i, t]) => match t {
            Value::Tuple(t) => t.borrow().get(index(i)? - 1).cloned().ok_or(Fault::Badarg)?,
            _ => return Err(Fault::Badarg),
        },
        ("setelement", [i, t, v]) => match t {
            Value::Tuple(t) => {
                let i = index(i)?;
                let mut copy = t.borrow().clone();
                if i > copy.len() {
                    return Err(Fault::Badarg);
                }
                m.costs.heap_words_copied += copy.len() as u64;
                copy[i - 1] = v.clone();
                Value::tuple(copy)
            }
            _ => return Err(Fault::Badarg),
        },
        ("tuple_size", [Value::Tuple(t)]) => Value::int(t.borrow().len()),
        ("make_tuple", [n, v]) => {
            let n = n.as_usize().filter(|n| *n < 1 << 24).ok_or(Fault::Badarg)?;
            Value::tuple(vec![v.clone(); n])
        }
        ("tuple_to_list", [Value::Tuple(t)]) => Value::list(t.borrow().clone()),
        ("list_to_tuple", [l]) => Value::tuple(list_items(l)?),
        ("length", [l]) => Value::int(list_items(l)?.len()),
        ("hd", [Value::Cons(c)]) => c.0.clone(),
        ("tl", [Value::Cons(c)]) => c.1.clone(),
        ("byte_size", [Value::Binary(b)]) => Value::int(b.bits.div_ceil(8)),
        ("bit_size", [Value::Binary(b)]) => Value::int(b.bits),
        ("is_integer", [a]) => Value::boolean(matches!(a, Value::Int(_))),
        ("is_atom", [a]) => Value::boolean(matches!(a, Value::Atom(_))),
        ("is_tuple", [a]) => Value::boolean(matches!(a, Value::Tuple(_))),
        ("is_list", [a]) => Value::boolean(matches!(a, Value::Nil | Value::Cons(_))),
        ("display", [v]) => {
            m.output.push(v.to_term());
            Value::atom("true")
        }
        ("send" | "!", [to, msg]) => {
            send(m, to.clone(), msg.clone())?;
            msg.clone()
        }
        ("process_info", [Value::Pid(_), item]) => match item.as_atom() {
            Some("reductions") => Value::tuple(vec![Value::atom("reductions"), Value::int(m.costs.reductions)]),
            Some("message_queue_len") => {
                Value::tuple(vec![Value::atom("message_queue_len"), Value::int(m.residue())])
            }
            _ => return Err(Fault::Badarg),
        },
        ("bump_reductions", [n]) => {
            let n = n.as_int().and_then(|n| n.to_u64()).ok_or(Fault::Badarg)?;
            m.bump_reductions(n);
            Value::atom("true")
        }
        ("get_module_info", [_]) => Value::Nil,
        ("get_module_info", [_, _]) => Value::Nil,
        ("error", [r]) => {
            return Err(Fault::Raised {
                class: "error".into(),
                reason: r.to_term(),
            })
        }
        ("throw", [r]) => {
            return Err(Fault::Raised {
                class: "throw".into(),
                reason: r.to_term(),
            })
        }
        ("exit", [r]) => {
            return Err(Fault::Raised {
                class: "exit".into(),
                reason: r.to_term(),
            })
        }
        (
            "tuple_size" | "hd" | "tl" | "byte_size" | "bit_size" | "tuple_to_list" | "process_info",
            _,
        ) => return Err(Fault::Badarg),
        _ => return Err(undef()),
    };
    Ok(v)
}
