//! Algorithm-family templates for the synthetic corpus.
//!
//! Each family renders a toy-C function whose identifiers, literals, loop
//! forms and independent-statement order are perturbed by a caller-supplied
//! PRNG. The first 28 families are hand-written classics; the remainder are
//! generated from reduce/map/filter combinations so that at least 104 distinct
//! families exist.

use std::sync::LazyLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::comment::{Arity, CommentParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Named {
    SumArray,
    MaxArray,
    ReverseArray,
    BubbleSort,
    Fibonacci,
    Gcd,
    DotProduct,
    CountEqual,
    Factorial,
    Power,
    LinearSearch,
    MinArray,
    Triangular,
    ArrayFill,
    PrefixSum,
    CollatzSteps,
    IntSqrt,
    CountPositive,
    Average,
    Clamp,
    ArrayCopy,
    IsSorted,
    Identity,
    AbsDiff,
    MaxOfTwo,
    Square,
    SumRange,
    ArrayScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Product,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFn {
    Identity,
    Square,
    Double,
    AddConst,
    TimesConst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    None,
    Gt,
    Lt,
    Ne,
    Ge,
    Le,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FamilyKind {
    Named(Named),
    Reduce {
        reduce: Reduce,
        map: MapFn,
        filter: Filter,
    },
    Count {
        filter: Filter,
    },
}

#[derive(Debug, Clone)]
pub struct FamilyTemplate {
    pub label: String,
    /// Candidate function names; the chosen one becomes the name-recovery label.
    pub func_names: Vec<String>,
    pub kind: FamilyKind,
}

const NAMED: &[(Named, &str, &[&str])] = &[
    (Named::SumArray, "sum_array", &["sum_array", "array_sum", "total"]),
    (Named::MaxArray, "max_array", &["max_array", "find_max", "largest"]),
    (Named::ReverseArray, "reverse_array", &["reverse_array", "reverse", "flip"]),
    (Named::BubbleSort, "bubble_sort", &["bubble_sort", "sort_array", "bsort"]),
    (Named::Fibonacci, "fibonacci", &["fibonacci", "fib", "nth_fib"]),
    (Named::Gcd, "gcd", &["gcd", "greatest_common_divisor", "euclid"]),
    (Named::DotProduct, "dot_product", &["dot_product", "dot", "inner_product"]),
    (Named::CountEqual, "count_equal", &["count_equal", "count_occurrences", "count_matches"]),
    (Named::Factorial, "factorial", &["factorial", "fact", "compute_factorial"]),
    (Named::Power, "power", &["power", "ipow", "raise"]),
    (Named::LinearSearch, "linear_search", &["linear_search", "find_index", "index_of"]),
    (Named::MinArray, "min_array", &["min_array", "find_min", "smallest"]),
    (Named::Triangular, "triangular", &["triangular", "sum_to_n", "tri_number"]),
    (Named::ArrayFill, "array_fill", &["array_fill", "fill", "set_all"]),
    (Named::PrefixSum, "prefix_sum", &["prefix_sum", "running_sum", "cumsum"]),
    (Named::CollatzSteps, "collatz_steps", &["collatz_steps", "collatz", "hailstone_len"]),
    (Named::IntSqrt, "int_sqrt", &["int_sqrt", "isqrt", "floor_sqrt"]),
    (Named::CountPositive, "count_positive", &["count_positive", "num_positive", "positives"]),
    (Named::Average, "average", &["average", "mean", "array_mean"]),
    (Named::Clamp, "clamp", &["clamp", "bound", "limit"]),
    (Named::ArrayCopy, "array_copy", &["array_copy", "copy", "memcopy"]),
    (Named::IsSorted, "is_sorted", &["is_sorted", "sorted_check", "ascending"]),
    (Named::Identity, "identity", &["identity", "id", "passthrough"]),
    (Named::AbsDiff, "abs_diff", &["abs_diff", "distance", "absdiff"]),
    (Named::MaxOfTwo, "max_of_two", &["max_of_two", "max2", "larger"]),
    (Named::Square, "square", &["square", "sqr", "squared"]),
    (Named::SumRange, "sum_range", &["sum_range", "range_sum", "sum_between"]),
    (Named::ArrayScale, "array_scale", &["array_scale", "scale", "multiply_all"]),
];

fn reduce_name(r: Reduce) -> &'static str {
    match r {
        Reduce::Sum => "sum",
        Reduce::Product => "product",
        Reduce::Max => "max",
        Reduce::Min => "min",
    }
}

fn map_name(m: MapFn) -> &'static str {
    match m {
        MapFn::Identity => "identity",
        MapFn::Square => "square",
        MapFn::Double => "double",
        MapFn::AddConst => "plus",
        MapFn::TimesConst => "times",
    }
}

fn filter_name(f: Filter) -> &'static str {
    match f {
        Filter::None => "all",
        Filter::Gt => "gt",
        Filter::Lt => "lt",
        Filter::Ne => "ne",
        Filter::Ge => "ge",
        Filter::Le => "le",
    }
}

/// All family templates in canonical order.
pub static TEMPLATES: LazyLock<Vec<FamilyTemplate>> = LazyLock::new(|| {
    let mut out: Vec<FamilyTemplate> = NAMED
        .iter()
        .map(|(kind, label, names)| FamilyTemplate {
            label: label.to_string(),
            func_names: names.iter().map(|s| s.to_string()).collect(),
            kind: FamilyKind::Named(*kind),
        })
        .collect();
    for filter in [Filter::None, Filter::Gt, Filter::Lt, Filter::Ne] {
        for reduce in [Reduce::Sum, Reduce::Product, Reduce::Max, Reduce::Min] {
            for map in [
                MapFn::Identity,
                MapFn::Square,
                MapFn::Double,
                MapFn::AddConst,
                MapFn::TimesConst,
            ] {
                // Covered by sum_array / max_array / min_array.
                if filter == Filter::None
                    && map == MapFn::Identity
                    && reduce != Reduce::Product
                {
                    continue;
                }
                let label = format!("{}_{}_{}", reduce_name(reduce), map_name(map), filter_name(filter));
                out.push(FamilyTemplate {
                    func_names: vec![label.clone(), format!("calc_{label}")],
                    label,
                    kind: FamilyKind::Reduce {
                        reduce,
                        map,
                        filter,
                    },
                });
            }
        }
    }
    for filter in [Filter::Gt, Filter::Lt, Filter::Ne, Filter::Ge, Filter::Le] {
        let label = format!("count_{}", filter_name(filter));
        out.push(FamilyTemplate {
            func_names: vec![label.clone(), format!("num_{}", filter_name(filter))],
            label,
            kind: FamilyKind::Count { filter },
        });
    }
    out
});

pub fn family_index(label: &str) -> Option<usize> {
    TEMPLATES.iter().position(|t| t.label == label)
}

/// Identifier choices for one rendered program; all distinct.
#[derive(Debug, Clone)]
struct Names {
    arr: String,
    arr2: String,
    n: String,
    i: String,
    j: String,
    acc: String,
    k: String,
    x: String,
    y: String,
    t: String,
    v: String,
    lo: String,
    hi: String,
}

const ARR_POOL: &[&str] = &["a", "arr", "xs", "data", "buf", "nums", "vals", "v"];
const ARR2_POOL: &[&str] = &["b", "ys", "other", "src", "rhs", "w"];
const N_POOL: &[&str] = &["n", "len", "size", "count", "m", "length"];
const I_POOL: &[&str] = &["i", "idx", "p", "pos"];
const J_POOL: &[&str] = &["j", "q", "jj", "inner"];
const ACC_POOL: &[&str] = &["s", "acc", "res", "result", "total", "r"];
const K_POOL: &[&str] = &["k", "key", "target", "needle", "val"];
const X_POOL: &[&str] = &["x", "u", "num", "first", "lhs"];
const Y_POOL: &[&str] = &["y", "z", "second", "e", "other_val"];
const T_POOL: &[&str] = &["t", "tmp", "swap", "hold"];
const V_POOL: &[&str] = &["cur", "elem", "item", "c", "w0"];
const LO_POOL: &[&str] = &["lo", "low", "start", "from"];
const HI_POOL: &[&str] = &["hi", "high", "end", "upto"];

impl Names {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut used: Vec<&'static str> = Vec::new();
        let mut pick = |pool: &'static [&'static str], rng: &mut ChaCha8Rng| -> String {
            let free: Vec<&'static str> = pool.iter().copied().filter(|s| !used.contains(s)).collect();
            let s = *free.choose(rng).expect("identifier pool exhausted");
            used.push(s);
            s.to_string()
        };
        Names {
            arr: pick(ARR_POOL, rng),
            arr2: pick(ARR2_POOL, rng),
            n: pick(N_POOL, rng),
            i: pick(I_POOL, rng),
            j: pick(J_POOL, rng),
            acc: pick(ACC_POOL, rng),
            k: pick(K_POOL, rng),
            x: pick(X_POOL, rng),
            y: pick(Y_POOL, rng),
            t: pick(T_POOL, rng),
            v: pick(V_POOL, rng),
            lo: pick(LO_POOL, rng),
            hi: pick(HI_POOL, rng),
        }
    }
}

fn indent(lines: Vec<String>) -> Vec<String> {
    lines.into_iter().map(|l| format!("    {l}")).collect()
}

fn array_param(rng: &mut ChaCha8Rng, name: &str) -> String {
    if rng.random_bool(0.5) {
        format!("int {name}[]")
    } else {
        format!("int *{name}")
    }
}

/// `var = var + 1` in one of several spellings.
fn increment(rng: &mut ChaCha8Rng, var: &str) -> String {
    match rng.random_range(0..3) {
        0 => format!("{var}++;"),
        1 => format!("{var} += 1;"),
        _ => format!("{var} = {var} + 1;"),
    }
}

fn accumulate(rng: &mut ChaCha8Rng, acc: &str, op: char, value: &str) -> String {
    if rng.random_bool(0.5) {
        format!("{acc} {op}= {value};")
    } else {
        format!("{acc} = {acc} {op} {value};")
    }
}

fn compare(rng: &mut ChaCha8Rng, lhs: &str, op: &str, rhs: &str) -> String {
    if rng.random_bool(0.5) {
        return format!("{lhs} {op} {rhs}");
    }
    let flipped = match op {
        "<" => ">",
        "<=" => ">=",
        ">" => "<",
        ">=" => "<=",
        other => other,
    };
    format!("{rhs} {flipped} {lhs}")
}

/// Counting loop `for var in start.. while var CMP bound`, as `for` or `while`.
fn counted_loop(
    rng: &mut ChaCha8Rng,
    var: &str,
    start: &str,
    cmp: &str,
    bound: &str,
    body: Vec<String>,
) -> Vec<String> {
    let cond = compare(rng, var, cmp, bound);
    let mut out = Vec::new();
    if rng.random_bool(0.5) {
        let step = match rng.random_range(0..3) {
            0 => format!("{var}++"),
            1 => format!("{var} += 1"),
            _ => format!("{var} = {var} + 1"),
        };
        out.push(format!("for (int {var} = {start}; {cond}; {step}) {{"));
        out.extend(indent(body));
    } else {
        out.push(format!("int {var} = {start};"));
        out.push(format!("while ({cond}) {{"));
        out.extend(indent(body));
        out.push(format!("    {}", increment(rng, var)));
    }
    out.push("}".to_string());
    out
}

fn if_block(cond: String, body: Vec<String>) -> Vec<String> {
    let mut out = vec![format!("if ({cond}) {{")];
    out.extend(indent(body));
    out.push("}".to_string());
    out
}

fn maybe_shuffle(rng: &mut ChaCha8Rng, mut lines: Vec<String>) -> Vec<String> {
    lines.shuffle(rng);
    lines
}

struct Rendered {
    ret: &'static str,
    params: Vec<String>,
    body: Vec<String>,
    comment: CommentParams,
}

fn render_named(kind: Named, rng: &mut ChaCha8Rng, nm: &Names) -> Rendered {
    let Names {
        arr,
        arr2,
        n,
        i,
        j,
        acc,
        k,
        x,
        y,
        t,
        v: _,
        lo,
        hi,
    } = nm;
    let arr_p = array_param(rng, arr);
    let arr2_p = array_param(rng, arr2);
    let nary = || CommentParams::new(Arity::Nary).slot("arr", arr.as_str()).slot("n", n.as_str());
    match kind {
        Named::SumArray | Named::Average => {
            let mut body = vec![format!("int {acc} = 0;")];
            let step = accumulate(rng, acc, '+', &format!("{arr}[{i}]"));
            body.extend(counted_loop(rng, i, "0", "<", n, vec![step]));
            body.push(if kind == Named::Average {
                format!("return {acc} / {n};")
            } else {
                format!("return {acc};")
            });
            Rendered { ret: "int", params: vec![arr_p, format!("int {n}")], body, comment: nary() }
        }
        Named::MaxArray | Named::MinArray => {
            let op = if kind == Named::MaxArray { ">" } else { "<" };
            let mut body = vec![format!("int {acc} = {arr}[0];")];
            let upd = if_block(compare(rng, &format!("{arr}[{i}]"), op, acc), vec![format!("{acc} = {arr}[{i}];")]);
            body.extend(counted_loop(rng, i, "1", "<", n, upd));
            body.push(format!("return {acc};"));
            Rendered { ret: "int", params: vec![arr_p, format!("int {n}")], body, comment: nary() }
        }
        Named::ReverseArray => {
            let mut body = maybe_shuffle(rng, vec![format!("int {i} = 0;"), format!("int {j} = {n} - 1;")]);
            body.push(format!("while ({}) {{", compare(rng, i, "<", j)));
            body.extend(indent(vec![
                format!("int {t} = {arr}[{i}];"),
                format!("{arr}[{i}] = {arr}[{j}];"),
                format!("{arr}[{j}] = {t};"),
                increment(rng, i),
                if rng.random_bool(0.5) { format!("{j}--;") } else { format!("{j} = {j} - 1;") },
            ]));
            body.push("}".to_string());
            Rendered { ret: "void", params: vec![arr_p, format!("int {n}")], body, comment: nary() }
        }
        Named::BubbleSort => {
            let swap = vec![
                format!("int {t} = {arr}[{j}];"),
                format!("{arr}[{j}] = {arr}[{j} + 1];"),
                format!("{arr}[{j} + 1] = {t};"),
            ];
            let inner_if = if_block(compare(rng, &format!("{arr}[{j}]"), ">", &format!("{arr}[{j} + 1]")), swap);
            let bound = if rng.random_bool(0.5) { format!("{n} - 1 - {i}") } else { format!("{n} - {i} - 1") };
            let inner = counted_loop(rng, j, "0", "<", &bound, inner_if);
            let body = counted_loop(rng, i, "0", "<", n, inner);
            Rendered { ret: "void", params: vec![arr_p, format!("int {n}")], body, comment: nary() }
        }
        Named::Fibonacci => {
            let mut body = maybe_shuffle(rng, vec![format!("int {x} = 0;"), format!("int {y} = 1;")]);
            body.extend(counted_loop(
                rng,
                i,
                "0",
                "<",
                n,
                vec![format!("int {t} = {x} + {y};"), format!("{x} = {y};"), format!("{y} = {t};")],
            ));
            body.push(format!("return {x};"));
            Rendered {
                ret: "int",
                params: vec![format!("int {n}")],
                body,
                comment: CommentParams::new(Arity::Unary).slot("n", n.as_str()),
            }
        }
        Named::Gcd => {
            let (sx, sy) = if rng.random_bool(0.5) {
                (format!("{x} -= {y};"), format!("{y} -= {x};"))
            } else {
                (format!("{x} = {x} - {y};"), format!("{y} = {y} - {x};"))
            };
            let mut body = vec![format!("while ({x} != {y}) {{")];
            body.extend(indent(vec![
                format!("if ({}) {{", compare(rng, x, ">", y)),
                format!("    {sx}"),
                "} else {".to_string(),
                format!("    {sy}"),
                "}".to_string(),
            ]));
            body.push("}".to_string());
            body.push(format!("return {x};"));
            Rendered {
                ret: "int",
                params: vec![format!("int {x}"), format!("int {y}")],
                body,
                comment: CommentParams::new(Arity::Binary).slot("x", x.as_str()).slot("y", y.as_str()),
            }
        }
        Named::DotProduct => {
            let mut body = vec![format!("int {acc} = 0;")];
            let step = accumulate(rng, acc, '+', &format!("{arr}[{i}] * {arr2}[{i}]"));
            body.extend(counted_loop(rng, i, "0", "<", n, vec![step]));
            body.push(format!("return {acc};"));
            Rendered {
                ret: "int",
                params: vec![arr_p, arr2_p, format!("int {n}")],
                body,
                comment: nary().slot("arr2", arr2.as_str()),
            }
        }
        Named::CountEqual | Named::CountPositive => {
            let target = if kind == Named::CountEqual { k.to_string() } else { "0".to_string() };
            let op = if kind == Named::CountEqual { "==" } else { ">" };
            let mut body = vec![format!("int {acc} = 0;")];
            let upd = if_block(compare(rng, &format!("{arr}[{i}]"), op, &target), vec![increment(rng, acc)]);
            body.extend(counted_loop(rng, i, "0", "<", n, upd));
            body.push(format!("return {acc};"));
            let mut params = vec![arr_p, format!("int {n}")];
            if kind == Named::CountEqual {
                params.push(format!("int {k}"));
            }
            Rendered { ret: "int", params, body, comment: nary().slot("k", k.as_str()) }
        }
        Named::Factorial => {
            let mut body = vec![format!("int {acc} = 1;")];
            let step = accumulate(rng, acc, '*', i);
            body.extend(counted_loop(rng, i, "2", "<=", n, vec![step]));
            body.push(format!("return {acc};"));
            Rendered {
                ret: "int",
                params: vec![format!("int {n}")],
                body,
                comment: CommentParams::new(Arity::Unary).slot("n", n.as_str()),
            }
        }
        Named::Power => {
            let mut body = vec![format!("int {acc} = 1;")];
            if rng.random_bool(0.5) {
                body.push(format!("while ({}) {{", compare(rng, y, ">", "0")));
                let step = accumulate(rng, acc, '*', x);
                body.extend(indent(vec![step, format!("{y} = {y} - 1;")]));
                body.push("}".to_string());
            } else {
                let step = accumulate(rng, acc, '*', x);
                body.extend(counted_loop(rng, i, "0", "<", y, vec![step]));
            }
            body.push(format!("return {acc};"));
            Rendered {
                ret: "int",
                params: vec![format!("int {x}"), format!("int {y}")],
                body,
                comment: CommentParams::new(Arity::Binary).slot("x", x.as_str()).slot("y", y.as_str()),
            }
        }
        Named::LinearSearch => {
            let hit = if_block(compare(rng, &format!("{arr}[{i}]"), "==", k), vec![format!("return {i};")]);
            let mut body = counted_loop(rng, i, "0", "<", n, hit);
            body.push("return 0 - 1;".to_string());
            Rendered {
                ret: "int",
                params: vec![arr_p, format!("int {n}"), format!("int {k}")],
                body,
                comment: nary().slot("k", k.as_str()),
            }
        }
        Named::Triangular | Named::SumRange => {
            let (start, bound, params, comment) = if kind == Named::Triangular {
                (
                    "1".to_string(),
                    n.to_string(),
                    vec![format!("int {n}")],
                    CommentParams::new(Arity::Unary).slot("n", n.as_str()),
                )
            } else {
                (
                    lo.to_string(),
                    hi.to_string(),
                    vec![format!("int {lo}"), format!("int {hi}")],
                    CommentParams::new(Arity::Binary).slot("lo", lo.as_str()).slot("hi", hi.as_str()),
                )
            };
            let mut body = vec![format!("int {acc} = 0;")];
            let step = accumulate(rng, acc, '+', i);
            body.extend(counted_loop(rng, i, &start, "<=", &bound, vec![step]));
            body.push(format!("return {acc};"));
            Rendered { ret: "int", params, body, comment }
        }
        Named::ArrayFill | Named::ArrayScale => {
            let stmt = if kind == Named::ArrayFill {
                format!("{arr}[{i}] = {k};")
            } else if rng.random_bool(0.5) {
                format!("{arr}[{i}] *= {k};")
            } else {
                format!("{arr}[{i}] = {arr}[{i}] * {k};")
            };
            let body = counted_loop(rng, i, "0", "<", n, vec![stmt]);
            Rendered {
                ret: "void",
                params: vec![arr_p, format!("int {n}"), format!("int {k}")],
                body,
                comment: nary().slot("k", k.as_str()),
            }
        }
        Named::PrefixSum => {
            let stmt = if rng.random_bool(0.5) {
                format!("{arr}[{i}] += {arr}[{i} - 1];")
            } else {
                format!("{arr}[{i}] = {arr}[{i}] + {arr}[{i} - 1];")
            };
            let body = counted_loop(rng, i, "1", "<", n, vec![stmt]);
            Rendered { ret: "void", params: vec![arr_p, format!("int {n}")], body, comment: nary() }
        }
        Named::CollatzSteps => {
            let mut body = vec![format!("int {acc} = 0;"), format!("while ({n} != 1) {{")];
            body.extend(indent(vec![
                format!("int {t} = {n} / 2;"),
                format!("if ({t} * 2 == {n}) {{"),
                format!("    {n} = {t};"),
                "} else {".to_string(),
                format!("    {n} = 3 * {n} + 1;"),
                "}".to_string(),
                increment(rng, acc),
            ]));
            body.push("}".to_string());
            body.push(format!("return {acc};"));
            Rendered {
                ret: "int",
                params: vec![format!("int {n}")],
                body,
                comment: CommentParams::new(Arity::Unary).slot("n", n.as_str()),
            }
        }
        Named::IntSqrt => {
            let body = vec![
                format!("int {acc} = 0;"),
                format!("while (({acc} + 1) * ({acc} + 1) <= {n}) {{"),
                format!("    {}", increment(rng, acc)),
                "}".to_string(),
                format!("return {acc};"),
            ];
            Rendered {
                ret: "int",
                params: vec![format!("int {n}")],
                body,
                comment: CommentParams::new(Arity::Unary).slot("n", n.as_str()),
            }
        }
        Named::Clamp => {
            let mut body = if_block(compare(rng, x, "<", lo), vec![format!("return {lo};")]);
            body.extend(if_block(compare(rng, x, ">", hi), vec![format!("return {hi};")]));
            body.push(format!("return {x};"));
            Rendered {
                ret: "int",
                params: vec![format!("int {x}"), format!("int {lo}"), format!("int {hi}")],
                body,
                comment: CommentParams::new(Arity::Ternary)
                    .slot("x", x.as_str())
                    .slot("lo", lo.as_str())
                    .slot("hi", hi.as_str()),
            }
        }
        Named::ArrayCopy => {
            let body = counted_loop(rng, i, "0", "<", n, vec![format!("{arr}[{i}] = {arr2}[{i}];")]);
            Rendered {
                ret: "void",
                params: vec![arr_p, arr2_p, format!("int {n}")],
                body,
                comment: nary().slot("arr2", arr2.as_str()),
            }
        }
        Named::IsSorted => {
            let bad = if_block(
                compare(rng, &format!("{arr}[{i} - 1]"), ">", &format!("{arr}[{i}]")),
                vec!["return 0;".to_string()],
            );
            let mut body = counted_loop(rng, i, "1", "<", n, bad);
            body.push("return 1;".to_string());
            Rendered { ret: "int", params: vec![arr_p, format!("int {n}")], body, comment: nary() }
        }
        Named::Identity => {
            let body = if rng.random_bool(0.5) {
                vec![format!("return {x};")]
            } else {
                vec![format!("int {acc} = {x};"), format!("return {acc};")]
            };
            Rendered {
                ret: "int",
                params: vec![format!("int {x}")],
                body,
                comment: CommentParams::new(Arity::Unary).slot("x", x.as_str()),
            }
        }
        Named::AbsDiff | Named::MaxOfTwo => {
            let (a, b) = if kind == Named::AbsDiff {
                (format!("return {x} - {y};"), format!("return {y} - {x};"))
            } else {
                (format!("return {x};"), format!("return {y};"))
            };
            let mut body = if_block(compare(rng, x, ">", y), vec![a]);
            body.push(b);
            Rendered {
                ret: "int",
                params: vec![format!("int {x}"), format!("int {y}")],
                body,
                comment: CommentParams::new(Arity::Binary).slot("x", x.as_str()).slot("y", y.as_str()),
            }
        }
        Named::Square => Rendered {
            ret: "int",
            params: vec![format!("int {x}")],
            body: vec![format!("return {x} * {x};")],
            comment: CommentParams::new(Arity::Unary).slot("x", x.as_str()),
        },
    }
}

fn filter_op(f: Filter) -> Option<&'static str> {
    match f {
        Filter::None => None,
        Filter::Gt => Some(">"),
        Filter::Lt => Some("<"),
        Filter::Ne => Some("!="),
        Filter::Ge => Some(">="),
        Filter::Le => Some("<="),
    }
}

fn render_reduce(reduce: Reduce, map: MapFn, filter: Filter, rng: &mut ChaCha8Rng, nm: &Names) -> Rendered {
    let Names { arr, n, i, acc, v, .. } = nm;
    let elem = format!("{arr}[{i}]");
    let c: i64 = rng.random_range(2..10);
    let k: i64 = rng.random_range(0..50);
    let mapped = match map {
        MapFn::Identity => elem.clone(),
        MapFn::Square => format!("{elem} * {elem}"),
        MapFn::Double => {
            if rng.random_bool(0.5) {
                format!("{elem} + {elem}")
            } else {
                format!("2 * {elem}")
            }
        }
        MapFn::AddConst => format!("{elem} + {c}"),
        MapFn::TimesConst => format!("{elem} * {c}"),
    };
    let mut inner = vec![format!("int {v} = {mapped};")];
    match reduce {
        Reduce::Sum => inner.push(accumulate(rng, acc, '+', v)),
        Reduce::Product => inner.push(accumulate(rng, acc, '*', v)),
        Reduce::Max => inner.extend(if_block(compare(rng, v, ">", acc), vec![format!("{acc} = {v};")])),
        Reduce::Min => inner.extend(if_block(compare(rng, v, "<", acc), vec![format!("{acc} = {v};")])),
    }
    if let Some(op) = filter_op(filter) {
        inner = if_block(compare(rng, &elem, op, &k.to_string()), inner);
    }
    let init = match reduce {
        Reduce::Sum => "0",
        Reduce::Product => "1",
        Reduce::Max => "0 - 1000000",
        Reduce::Min => "1000000",
    };
    let mut body = vec![format!("int {acc} = {init};")];
    body.extend(counted_loop(rng, i, "0", "<", n, inner));
    body.push(format!("return {acc};"));
    Rendered {
        ret: "int",
        params: vec![array_param(rng, arr), format!("int {n}")],
        body,
        comment: CommentParams::new(Arity::Nary)
            .slot("arr", arr.as_str())
            .slot("n", n.as_str())
            .slot("c", c.to_string())
            .slot("k", k.to_string()),
    }
}

fn render_count(filter: Filter, rng: &mut ChaCha8Rng, nm: &Names) -> Rendered {
    let Names { arr, n, i, acc, .. } = nm;
    let k: i64 = rng.random_range(0..50);
    let op = filter_op(filter).unwrap_or("!=");
    let upd = if_block(compare(rng, &format!("{arr}[{i}]"), op, &k.to_string()), vec![increment(rng, acc)]);
    let mut body = vec![format!("int {acc} = 0;")];
    body.extend(counted_loop(rng, i, "0", "<", n, upd));
    body.push(format!("return {acc};"));
    Rendered {
        ret: "int",
        params: vec![array_param(rng, arr), format!("int {n}")],
        body,
        comment: CommentParams::new(Arity::Nary)
            .slot("arr", arr.as_str())
            .slot("n", n.as_str())
            .slot("k", k.to_string()),
    }
}

/// One rendered program: source text, chosen function name and comment parameters.
pub struct Sample {
    pub source: String,
    pub func_name: String,
    pub comment: CommentParams,
}

pub fn render(template: &FamilyTemplate, rng: &mut ChaCha8Rng) -> Sample {
    let names = Names::draw(rng);
    let func_name = template.func_names.choose(rng).expect("empty name pool").clone();
    let mut r = match &template.kind {
        FamilyKind::Named(k) => render_named(*k, rng, &names),
        FamilyKind::Reduce { reduce, map, filter } => render_reduce(*reduce, *map, *filter, rng, &names),
        FamilyKind::Count { filter } => render_count(*filter, rng, &names),
    };
    r.comment.variant = rng.random_range(0..2);
    let mut source = format!("{} {}({}) {{\n", r.ret, func_name, r.params.join(", "));
    for line in indent(r.body) {
        source.push_str(&line);
        source.push('\n');
    }
    source.push_str("}\n");
    Sample {
        source,
        func_name,
        comment: r.comment,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::lower::lower_to_ir;
    use rand::SeedableRng;

    #[test]
    fn at_least_104_distinct_families() {
        assert!(TEMPLATES.len() >= 104, "{}", TEMPLATES.len());
        let mut labels: Vec<&str> = TEMPLATES.iter().map(|t| t.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), TEMPLATES.len());
    }

    #[test]
    fn every_family_lowers_under_many_seeds() {
        for t in TEMPLATES.iter() {
            for seed in 0..24u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = render(t, &mut rng);
                if let Err(e) = lower_to_ir(&s.source) {
                    panic!("{} seed {seed}: {e}\n{}", t.label, s.source);
                }
            }
        }
    }
}
