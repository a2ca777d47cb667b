//! Aligned (source, IR, comment) program triplets: generation, persistence and splitting.

pub mod comment;
pub mod lang;
pub mod lower;
pub mod templates;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use comment::{render_comment, Arity, CommentParams};
pub use lower::{ir_instructions, lower_to_ir, OPCODES, STRIPPED_SYMBOL};

use crate::error::{Error, Result};
use crate::textcodec::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramTriplet {
    pub id: String,
    pub source_text: String,
    pub binary_text: String,
    pub comment_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub func_name_label: Option<String>,
}

impl ProgramTriplet {
    pub fn text(&self, modality: crate::textcodec::Modality) -> &str {
        use crate::textcodec::Modality;
        match modality {
            Modality::Source => &self.source_text,
            Modality::Binary => &self.binary_text,
            Modality::Comment => &self.comment_text,
        }
    }
}

/// Number of family templates the generator knows.
pub fn available_families() -> usize {
    templates::TEMPLATES.len()
}

pub fn family_labels(families: usize) -> Vec<String> {
    templates::TEMPLATES
        .iter()
        .take(families)
        .map(|t| t.label.clone())
        .collect()
}

fn item_seed(seed: u64, family: usize, item: usize) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = seed
        .wrapping_add((family as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((item as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `families * per_family` triplets; a pure function of its arguments.
pub fn generate_corpus(seed: u64, families: usize, per_family: usize) -> Result<Vec<ProgramTriplet>> {
    let available = available_families();
    if families > available {
        return Err(Error::config(format!(
            "requested {families} families but the generator only has {available} templates"
        )));
    }
    let coords: Vec<(usize, usize)> = (0..families)
        .flat_map(|f| (0..per_family).map(move |i| (f, i)))
        .collect();
    coords
        .into_par_iter()
        .map(|(f, i)| {
            let template = &templates::TEMPLATES[f];
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, f, i));
            let sample = templates::render(template, &mut rng);
            let binary_text = lower_to_ir(&sample.source)?;
            let comment_text = render_comment(&template.label, &sample.comment)?;
            Ok(ProgramTriplet {
                id: format!("{}-{:05}", template.label, i),
                source_text: sample.source,
                binary_text,
                comment_text,
                family_label: Some(template.label.clone()),
                func_name_label: Some(sample.func_name),
            })
        })
        .collect()
}

/// Hex SHA-256 over the canonical JSONL serialisation.
pub fn corpus_digest(triplets: &[ProgramTriplet]) -> String {
    let mut h = Sha256::new();
    for t in triplets {
        h.update(serde_json::to_string(t).expect("triplet serialises").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Checks that every triplet's IR is exactly the lowering of its source.
pub fn verify_alignment(triplets: &[ProgramTriplet]) -> Result<()> {
    for t in triplets {
        let ir = lower_to_ir(&t.source_text)?;
        if ir != t.binary_text {
            return Err(Error::Validation(format!(
                "triplet `{}`: binary_text is not the lowering of source_text",
                t.id
            )));
        }
    }
    Ok(())
}

pub fn save_jsonl(triplets: &[ProgramTriplet], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn required_str(obj: &serde_json::Map<String, serde_json::Value>, key: &str, line: usize) -> Result<String> {
    match obj.get(key) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::Schema {
            line,
            msg: format!("key `{key}` must be a string"),
        }),
        None => Err(Error::Schema {
            line,
            msg: format!("missing key `{key}`"),
        }),
    }
}

fn optional_str(obj: &serde_json::Map<String, serde_json::Value>, key: &str, line: usize) -> Result<Option<String>> {
    match obj.get(key) {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::Schema {
            line,
            msg: format!("key `{key}` must be a string"),
        }),
    }
}

/// Loads triplets from JSONL. Line numbers in errors are 1-based; blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<ProgramTriplet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            msg: format!("malformed JSON: {e}"),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Schema {
            line: line_no,
            msg: "expected a JSON object".into(),
        })?;
        let t = ProgramTriplet {
            id: required_str(obj, "id", line_no)?,
            source_text: required_str(obj, "source_text", line_no)?,
            binary_text: required_str(obj, "binary_text", line_no)?,
            comment_text: required_str(obj, "comment_text", line_no)?,
            family_label: optional_str(obj, "family_label", line_no)?,
            func_name_label: optional_str(obj, "func_name_label", line_no)?,
        };
        for (key, text) in [
            ("source_text", &t.source_text),
            ("binary_text", &t.binary_text),
            ("comment_text", &t.comment_text),
        ] {
            if text.trim().is_empty() {
                return Err(Error::Validation(format!("line {line_no}: `{key}` is empty")));
            }
        }
        if !seen.insert(t.id.clone()) {
            return Err(Error::Validation(format!("line {line_no}: duplicate id `{}`", t.id)));
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Whole families go to exactly one split (functionality task).
    ByLabel,
    /// Examples are split within each label; splits share the label set (name recovery).
    ById,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub train: Vec<ProgramTriplet>,
    pub dev: Vec<ProgramTriplet>,
    pub test: Vec<ProgramTriplet>,
}

impl CorpusSplits {
    pub fn named(&self) -> [(&'static str, &[ProgramTriplet]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

/// Largest-remainder apportionment of `total` items over `ratios`.
fn apportion(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn validate_ratios(ratios: &[f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::config("split ratios must be finite and non-negative"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios sum to {sum}, expected 1")));
    }
    Ok(())
}

pub fn split_corpus(
    triplets: &[ProgramTriplet],
    ratios: [f64; 3],
    seed: u64,
    mode: SplitMode,
) -> Result<CorpusSplits> {
    validate_ratios(&ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: BTreeMap<String, Vec<&ProgramTriplet>> = BTreeMap::new();
    for t in triplets {
        let label = t.family_label.clone().ok_or_else(|| {
            Error::Validation(format!("triplet `{}` has no family_label", t.id))
        })?;
        by_label.entry(label).or_default().push(t);
    }
    let mut splits = CorpusSplits::default();
    match mode {
        SplitMode::ByLabel => {
            let mut labels: Vec<String> = by_label.keys().cloned().collect();
            let counts = apportion(labels.len(), &ratios);
            for (k, (&c, r)) in counts.iter().zip(&ratios).enumerate() {
                if *r > 0.0 && c == 0 {
                    return Err(Error::config(format!(
                        "{} families cannot populate split {k} with ratio {r}",
                        labels.len()
                    )));
                }
            }
            labels.shuffle(&mut rng);
            let mut it = labels.into_iter();
            let buckets = [&mut splits.train, &mut splits.dev, &mut splits.test];
            for (bucket, count) in buckets.into_iter().zip(counts) {
                let mut chosen: Vec<String> = it.by_ref().take(count).collect();
                chosen.sort();
                for l in chosen {
                    bucket.extend(by_label[&l].iter().map(|t| (*t).clone()));
                }
            }
        }
        SplitMode::ById => {
            for members in by_label.values() {
                let mut members = members.clone();
                members.shuffle(&mut rng);
                let counts = apportion(members.len(), &ratios);
                let mut it = members.into_iter();
                splits.train.extend(it.by_ref().take(counts[0]).cloned());
                splits.dev.extend(it.by_ref().take(counts[1]).cloned());
                splits.test.extend(it.take(counts[2]).cloned());
            }
        }
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub p50: usize,
    pub p90: usize,
}

impl LengthStats {
    /// Nearest-rank percentiles over token counts.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        if lengths.is_empty() {
            return Self {
                mean: 0.0,
                p50: 0,
                p90: 0,
            };
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let rank = |p: f64| {
            let r = (p * sorted.len() as f64).ceil() as usize;
            sorted[r.clamp(1, sorted.len()) - 1]
        };
        Self {
            mean: sorted.iter().sum::<usize>() as f64 / sorted.len() as f64,
            p50: rank(0.5),
            p90: rank(0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityLengths {
    pub source: LengthStats,
    pub binary: LengthStats,
    pub comment: LengthStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub split_name: String,
    pub triplet_count: usize,
    pub family_count: usize,
    pub name_count: usize,
    pub length_stats: ModalityLengths,
}

impl CorpusManifest {
    pub fn build(split_name: &str, triplets: &[ProgramTriplet]) -> Self {
        let families: BTreeSet<&str> = triplets.iter().filter_map(|t| t.family_label.as_deref()).collect();
        let names: BTreeSet<&str> = triplets.iter().filter_map(|t| t.func_name_label.as_deref()).collect();
        let lens = |f: fn(&ProgramTriplet) -> &str| -> LengthStats {
            let l: Vec<usize> = triplets.iter().map(|t| tokenize(f(t)).len()).collect();
            LengthStats::from_lengths(&l)
        };
        Self {
            split_name: split_name.to_string(),
            triplet_count: triplets.len(),
            family_count: families.len(),
            name_count: names.len(),
            length_stats: ModalityLengths {
                source: lens(|t| &t.source_text),
                binary: lens(|t| &t.binary_text),
                comment: lens(|t| &t.comment_text),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_counts_and_determinism() {
        let a = generate_corpus(7, 8, 16).unwrap();
        let b = generate_corpus(7, 8, 16).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(corpus_digest(&a), corpus_digest(&b));
        let c = generate_corpus(8, 8, 16).unwrap();
        assert_ne!(corpus_digest(&a), corpus_digest(&c));
    }

    #[test]
    fn zero_per_family_is_empty() {
        assert!(generate_corpus(7, 8, 0).unwrap().is_empty());
    }

    #[test]
    fn too_many_families_names_the_limit() {
        let err = generate_corpus(1, available_families() + 1, 1).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains(&available_families().to_string()));
    }

    #[test]
    fn generated_triplets_are_aligned_and_stripped() {
        let corpus = generate_corpus(3, 12, 6).unwrap();
        verify_alignment(&corpus).unwrap();
        for t in &corpus {
            assert!(t.binary_text.contains(STRIPPED_SYMBOL));
            let name = t.func_name_label.as_deref().unwrap();
            assert!(!t.binary_text.contains(&format!("@{name}")));
        }
    }

    #[test]
    fn apportion_matches_arithmetic() {
        assert_eq!(apportion(8, &[0.5, 0.25, 0.25]), [4, 2, 2]);
        assert_eq!(apportion(104, &[64.0 / 104.0, 16.0 / 104.0, 24.0 / 104.0]), [64, 16, 24]);
        assert_eq!(apportion(10, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).iter().sum::<usize>(), 10);
    }

    #[test]
    fn label_split_is_disjoint() {
        let corpus = generate_corpus(7, 8, 4).unwrap();
        let s = split_corpus(&corpus, [0.5, 0.25, 0.25], 11, SplitMode::ByLabel).unwrap();
        let fam = |v: &[ProgramTriplet]| -> BTreeSet<String> {
            v.iter().map(|t| t.family_label.clone().unwrap()).collect()
        };
        let (a, b, c) = (fam(&s.train), fam(&s.dev), fam(&s.test));
        assert_eq!((a.len(), b.len(), c.len()), (4, 2, 2));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        let again = split_corpus(&corpus, [0.5, 0.25, 0.25], 11, SplitMode::ByLabel).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn id_split_shares_labels() {
        let corpus = generate_corpus(7, 4, 20).unwrap();
        let s = split_corpus(&corpus, [0.6, 0.2, 0.2], 1, SplitMode::ById).unwrap();
        assert_eq!(s.train.len() + s.dev.len() + s.test.len(), 80);
        let labels = |v: &[ProgramTriplet]| -> BTreeSet<String> {
            v.iter().map(|t| t.family_label.clone().unwrap()).collect()
        };
        assert_eq!(labels(&s.train), labels(&s.test));
        let ids: BTreeSet<&str> = s.train.iter().chain(&s.dev).chain(&s.test).map(|t| t.id.as_str()).collect();
        assert_eq!(ids.len(), 80);
    }

    #[test]
    fn split_needs_enough_families() {
        let corpus = generate_corpus(7, 2, 4).unwrap();
        assert!(split_corpus(&corpus, [0.5, 0.25, 0.25], 0, SplitMode::ByLabel).is_err());
        assert!(split_corpus(&corpus, [0.5, 0.25, 0.2], 0, SplitMode::ByLabel).unwrap_err().is_config());
    }

    #[test]
    fn percentiles_are_ordered() {
        let s = LengthStats::from_lengths(&[5, 1, 9, 3, 7, 2, 8, 4, 6, 10]);
        assert_eq!((s.p50, s.p90), (5, 9));
        assert!((s.mean - 5.5).abs() < 1e-12);
    }
}
