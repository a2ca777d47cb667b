use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::templates::{family_index, FamilyKind, Filter, MapFn, Reduce, TEMPLATES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    Unary,
    Binary,
    Ternary,
    Nary,
}

/// Slot bindings and phrasing choice for one comment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentParams {
    pub arity: Arity,
    /// Index into the family's phrasing bank; wraps around.
    pub variant: usize,
    pub slots: BTreeMap<String, String>,
}

impl CommentParams {
    pub fn new(arity: Arity) -> Self {
        Self {
            arity,
            variant: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn with_variant(mut self, variant: usize) -> Self {
        self.variant = variant;
        self
    }

    pub fn slot(mut self, key: &str, value: impl Into<String>) -> Self {
        self.slots.insert(key.to_string(), value.into());
        self
    }
}

fn named_bank(label: &str) -> &'static [&'static str] {
    match label {
        "sum_array" => &[
            "computes the sum of the elements of an integer array",
            "adds up the first {n} elements of {arr}",
        ],
        "max_array" => &[
            "finds the largest element of an integer array",
            "returns the maximum value among the {n} entries of {arr}",
        ],
        "reverse_array" => &[
            "reverses the order of the elements of an integer array in place",
            "flips {arr} so that its first and last elements swap",
        ],
        "bubble_sort" => &[
            "sorts an integer array in ascending order by repeatedly swapping adjacent elements",
            "bubble sorts the {n} elements of {arr}",
        ],
        "fibonacci" => &[
            "computes the n-th fibonacci number iteratively",
            "returns fibonacci number {n}",
        ],
        "gcd" => &[
            "computes the greatest common divisor of two integers by repeated subtraction",
            "returns the gcd of {x} and {y}",
        ],
        "dot_product" => &[
            "computes the dot product of two integer arrays",
            "multiplies {arr} and {arr2} elementwise and sums the products",
        ],
        "count_equal" => &[
            "counts how many elements of an integer array equal a given value",
            "returns the number of occurrences of {k} in {arr}",
        ],
        "factorial" => &[
            "computes the factorial of a non-negative integer",
            "returns the product of the integers from 2 to {n}",
        ],
        "power" => &[
            "raises an integer to a non-negative integer power",
            "computes {x} to the power {y}",
        ],
        "linear_search" => &[
            "returns the index of the first occurrence of a value in an integer array or minus one",
            "searches {arr} for {k} and returns its position",
        ],
        "min_array" => &[
            "finds the smallest element of an integer array",
            "returns the minimum value among the {n} entries of {arr}",
        ],
        "triangular" => &[
            "computes the sum of the integers from 1 to n",
            "returns the triangular number of {n}",
        ],
        "array_fill" => &[
            "sets every element of an integer array to a given value",
            "fills {arr} with {k}",
        ],
        "prefix_sum" => &[
            "replaces each element of an integer array by the running sum up to it",
            "turns {arr} into its prefix sums in place",
        ],
        "collatz_steps" => &[
            "counts the steps for a number to reach one under the collatz rule",
            "returns the collatz sequence length of {n}",
        ],
        "int_sqrt" => &[
            "computes the integer square root of a non-negative integer",
            "returns the largest integer whose square is at most {n}",
        ],
        "count_positive" => &[
            "counts the positive elements of an integer array",
            "returns how many entries of {arr} are above zero",
        ],
        "average" => &[
            "computes the integer average of the elements of an array",
            "returns the mean of the {n} values in {arr}",
        ],
        "clamp" => &[
            "clamps an integer to lie within a closed range",
            "limits {x} to the interval from {lo} to {hi}",
        ],
        "array_copy" => &[
            "copies the elements of one integer array into another",
            "copies {n} elements from {arr2} to {arr}",
        ],
        "is_sorted" => &[
            "checks whether an integer array is sorted in ascending order",
            "returns one if {arr} is non-decreasing and zero otherwise",
        ],
        "identity" => &["returns its argument unchanged", "returns {x} as is"],
        "abs_diff" => &[
            "computes the absolute difference of two integers",
            "returns the distance between {x} and {y}",
        ],
        "max_of_two" => &[
            "returns the larger of two integers",
            "picks the maximum of {x} and {y}",
        ],
        "square" => &["computes the square of an integer", "returns {x} times itself"],
        "sum_range" => &[
            "computes the sum of all integers in a closed range",
            "adds the integers from {lo} to {hi}",
        ],
        "array_scale" => &[
            "multiplies every element of an integer array by a constant factor",
            "scales {arr} in place by {k}",
        ],
        _ => &[],
    }
}

fn reduce_phrase(r: Reduce) -> &'static str {
    match r {
        Reduce::Sum => "the sum",
        Reduce::Product => "the product",
        Reduce::Max => "the largest",
        Reduce::Min => "the smallest",
    }
}

fn map_phrase(m: MapFn) -> &'static str {
    match m {
        MapFn::Identity => "the elements",
        MapFn::Square => "the squares of the elements",
        MapFn::Double => "twice the elements",
        MapFn::AddConst => "the elements plus {c}",
        MapFn::TimesConst => "the elements times {c}",
    }
}

fn filter_phrase(f: Filter) -> &'static str {
    match f {
        Filter::None => "",
        Filter::Gt => " that are greater than {k}",
        Filter::Lt => " that are less than {k}",
        Filter::Ne => " that differ from {k}",
        Filter::Ge => " that are at least {k}",
        Filter::Le => " that are at most {k}",
    }
}

fn fill(template: &str, params: &CommentParams, family: &str) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::config(format!("malformed comment template for `{family}`")))?;
        let key = &rest[open + 1..close];
        match params.slots.get(key) {
            Some(v) => out.push_str(v),
            None => {
                return Err(Error::config(format!(
                    "comment template for `{family}` needs slot `{key}`"
                )))
            }
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders the one-sentence summary for a program of the given family.
pub fn render_comment(family_label: &str, params: &CommentParams) -> Result<String> {
    let idx = family_index(family_label)
        .ok_or_else(|| Error::config(format!("unknown family `{family_label}`")))?;
    let template = match &TEMPLATES[idx].kind {
        FamilyKind::Named(_) => {
            let bank = named_bank(family_label);
            bank[params.variant % bank.len()].to_string()
        }
        FamilyKind::Reduce { reduce, map, filter } => {
            if params.variant.is_multiple_of(2) {
                format!(
                    "computes {} of {} of an integer array{}",
                    reduce_phrase(*reduce),
                    map_phrase(*map),
                    filter_phrase(*filter)
                )
            } else {
                format!(
                    "returns {} of {} in {{arr}}{}",
                    reduce_phrase(*reduce),
                    map_phrase(*map),
                    filter_phrase(*filter)
                )
            }
        }
        FamilyKind::Count { filter } => {
            if params.variant.is_multiple_of(2) {
                format!("counts the elements of an integer array{}", filter_phrase(*filter))
            } else {
                format!("returns how many entries of {{arr}}{}", filter_phrase(*filter))
            }
        }
    };
    fill(&template, params, family_label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_array_canonical_sentence() {
        let c = render_comment("sum_array", &CommentParams::new(Arity::Nary)).unwrap();
        assert_eq!(c, "computes the sum of the elements of an integer array");
    }

    #[test]
    fn identity_canonical_sentence() {
        let c = render_comment("identity", &CommentParams::new(Arity::Unary)).unwrap();
        assert_eq!(c, "returns its argument unchanged");
    }

    #[test]
    fn slots_are_filled() {
        let p = CommentParams::new(Arity::Nary)
            .with_variant(1)
            .slot("n", "len")
            .slot("arr", "xs");
        assert_eq!(
            render_comment("sum_array", &p).unwrap(),
            "adds up the first len elements of xs"
        );
    }

    #[test]
    fn missing_slot_is_config_error() {
        let p = CommentParams::new(Arity::Nary).with_variant(1);
        assert!(matches!(render_comment("sum_array", &p), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_family_is_config_error() {
        let err = render_comment("no_such_family", &CommentParams::new(Arity::Unary)).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn every_named_family_has_a_bank() {
        for t in TEMPLATES.iter() {
            if let FamilyKind::Named(_) = t.kind {
                assert_eq!(named_bank(&t.label).len(), 2, "{}", t.label);
            }
        }
    }

    #[test]
    fn combinatorial_sentence() {
        let p = CommentParams::new(Arity::Nary).slot("k", "7");
        assert_eq!(
            render_comment("sum_square_gt", &p).unwrap(),
            "computes the sum of the squares of the elements of an integer array that are greater than 7"
        );
    }
}
