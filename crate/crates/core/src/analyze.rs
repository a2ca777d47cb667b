//! Embedding export, 2-D projection and cluster statistics for inspecting
//! what a binary encoder has learned.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::ProgramTriplet;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::textcodec::{Modality, TokenSequence, Vocab};
use crate::trainer::embed_all;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub family_label: Option<String>,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub model_tag: String,
    pub corpus_tag: String,
    pub rows: Vec<EmbeddingRow>,
}

/// Projects the binary text of every triplet.
pub fn dump_embeddings(
    encoder: &EncoderParams,
    vocab: &Vocab,
    split: &[ProgramTriplet],
    model_tag: &str,
    corpus_tag: &str,
) -> Result<EmbeddingDump> {
    let mut seen = BTreeSet::new();
    if let Some(dup) = split.iter().find(|t| !seen.insert(t.id.as_str())) {
        return Err(Error::Validation(format!("duplicate id `{}` in split", dup.id)));
    }
    let seqs: Vec<TokenSequence> = split
        .iter()
        .map(|t| vocab.encode(&t.binary_text, Modality::Binary, encoder.config.block_size))
        .collect();
    let m = if seqs.is_empty() {
        Array2::zeros((0, encoder.config.d))
    } else {
        embed_all(encoder, &seqs, 64)?
    };
    let rows = split
        .iter()
        .zip(m.rows())
        .map(|(t, v)| EmbeddingRow {
            id: t.id.clone(),
            family_label: t.family_label.clone(),
            vector: v.to_vec(),
        })
        .collect();
    Ok(EmbeddingDump {
        model_tag: model_tag.to_string(),
        corpus_tag: corpus_tag.to_string(),
        rows,
    })
}

impl EmbeddingDump {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.vector.len())
    }

    pub fn matrix(&self) -> Array2<f64> {
        let d = self.dim();
        let mut m = Array2::zeros((self.rows.len(), d));
        for (i, r) in self.rows.iter().enumerate() {
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&r.vector[..]));
        }
        m
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.rows
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| Error::Validation(format!("id `{id}` is not in the dump")))
    }

    /// `id,label,v0..v{d-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim()).map(|k| format!("v{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.family_label.clone().unwrap_or_default()];
            rec.extend(r.vector.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, model_tag: &str, corpus_tag: &str) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let vector = rec
                .iter()
                .skip(2)
                .map(|s| {
                    s.parse::<f64>().map_err(|e| Error::Schema {
                        line: line + 2,
                        msg: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let label = &rec[1];
            rows.push(EmbeddingRow {
                id: rec[0].to_string(),
                family_label: (!label.is_empty()).then(|| label.to_string()),
                vector,
            });
        }
        Ok(Self {
            model_tag: model_tag.into(),
            corpus_tag: corpus_tag.into(),
            rows,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedRow {
    pub id: String,
    pub label: Option<String>,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub rows: Vec<ProjectedRow>,
    /// Variance along the two components, non-increasing.
    pub component_variance: [f64; 2],
    pub total_variance: f64,
    /// Set when every vector is identical; coordinates are then zero.
    pub degenerate: bool,
}

impl Projection {
    pub fn retained_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            0.0
        } else {
            (self.component_variance[0] + self.component_variance[1]) / self.total_variance
        }
    }

    /// `id,label,x,y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["id", "label", "x", "y"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.label.clone().unwrap_or_default(),
                r.x.to_string(),
                r.y.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Principal component projection onto the top two components.
pub fn project_2d(dump: &EmbeddingDump) -> Result<Projection> {
    let n = dump.rows.len();
    if n < 3 {
        return Err(Error::Validation(format!("projection needs at least 3 rows, got {n}")));
    }
    let d = dump.dim();
    if dump.rows.iter().any(|r| r.vector.len() != d) {
        return Err(Error::shape("embedding rows have different lengths"));
    }
    let x = dump.matrix();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let total_variance: f64 = cov.diag().sum();
    let labelled = |coords: &dyn Fn(usize) -> (f64, f64)| -> Vec<ProjectedRow> {
        dump.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let (x, y) = coords(i);
                ProjectedRow {
                    id: r.id.clone(),
                    label: r.family_label.clone(),
                    x,
                    y,
                }
            })
            .collect()
    };
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if total_variance <= 1e-24 * scale * scale {
        return Ok(Projection {
            rows: labelled(&|_| (0.0, 0.0)),
            component_variance: [0.0, 0.0],
            total_variance: 0.0,
            degenerate: true,
        });
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps = Array2::<f64>::zeros((d, 2));
    let mut variance = [0.0; 2];
    for (k, &c) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(c);
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            comps[[i, k]] = sign * v[i];
        }
        variance[k] = eig.eigenvalues[c].max(0.0);
    }
    let coords = centered.dot(&comps);
    Ok(Projection {
        rows: labelled(&|i| (coords[[i, 0]], coords[[i, 1]])),
        component_variance: variance,
        total_variance,
        degenerate: false,
    })
}

fn cosine_distances(m: &Array2<f64>) -> Array2<f64> {
    let norms: Vec<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let g = m.dot(&m.t());
    Array2::from_shape_fn(g.dim(), |(i, j)| {
        if i == j {
            0.0
        } else {
            let den = norms[i] * norms[j];
            if den == 0.0 {
                1.0
            } else {
                1.0 - g[[i, j]] / den
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub within_family_cosine: f64,
    pub across_family_cosine: f64,
    /// Mean silhouette over all rows, with cosine distance.
    pub silhouette: f64,
    pub silhouette_by_family: BTreeMap<String, f64>,
}

pub fn cluster_stats(dump: &EmbeddingDump) -> Result<ClusterStats> {
    let labels: Vec<&str> = dump
        .rows
        .iter()
        .map(|r| {
            r.family_label
                .as_deref()
                .ok_or_else(|| Error::Validation(format!("row `{}` has no family label", r.id)))
        })
        .collect::<Result<_>>()?;
    let families: BTreeSet<&str> = labels.iter().copied().collect();
    if families.len() < 2 {
        return Err(Error::Validation("cluster statistics need at least two families".into()));
    }
    let dist = cosine_distances(&dump.matrix());
    let n = labels.len();
    let (mut within, mut wn, mut across, mut an) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                within += 1.0 - dist[[i, j]];
                wn += 1;
            } else {
                across += 1.0 - dist[[i, j]];
                an += 1;
            }
        }
    }
    let mut per_family: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..n {
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if i != j {
                let e = sums.entry(labels[j]).or_default();
                e.0 += dist[[i, j]];
                e.1 += 1;
            }
        }
        let s = match sums.get(labels[i]) {
            None => 0.0,
            Some(&(sa, ca)) => {
                let a = sa / ca as f64;
                let b = sums
                    .iter()
                    .filter(|(l, _)| **l != labels[i])
                    .map(|(_, &(s, c))| s / c as f64)
                    .fold(f64::INFINITY, f64::min);
                let m = a.max(b);
                if m == 0.0 {
                    0.0
                } else {
                    (b - a) / m
                }
            }
        };
        per_family.entry(labels[i].to_string()).or_default().push(s);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all: Vec<f64> = per_family.values().flatten().copied().collect();
    Ok(ClusterStats {
        within_family_cosine: if wn == 0 { 0.0 } else { within / wn as f64 },
        across_family_cosine: across / an as f64,
        silhouette: mean(&all),
        silhouette_by_family: per_family.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub id_a: String,
    pub id_b: String,
    pub cosine_distance: f64,
    /// Share of distinct row pairs in the dump that are strictly closer, in percent.
    pub percentile: f64,
}

pub fn pair_distance_report(dump: &EmbeddingDump, id_a: &str, id_b: &str) -> Result<PairReport> {
    let a = dump.position(id_a)?;
    let b = dump.position(id_b)?;
    let dist = cosine_distances(&dump.matrix());
    let d = dist[[a, b]];
    let n = dump.rows.len();
    let (mut closer, mut total) = (0usize, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            total += 1;
            if dist[[i, j]] < d {
                closer += 1;
            }
        }
    }
    Ok(PairReport {
        id_a: id_a.into(),
        id_b: id_b.into(),
        cosine_distance: d,
        percentile: if total == 0 { 0.0 } else { 100.0 * closer as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dump_of(vectors: Vec<Vec<f64>>, labels: &[&str]) -> EmbeddingDump {
        EmbeddingDump {
            model_tag: "m".into(),
            corpus_tag: "c".into(),
            rows: vectors
                .into_iter()
                .enumerate()
                .map(|(i, v)| EmbeddingRow {
                    id: format!("r{i}"),
                    family_label: Some(labels[i % labels.len()].to_string()),
                    vector: v,
                })
                .collect(),
        }
    }

    #[test]
    fn planar_data_keeps_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (u, v) = (
            [0.6, 0.0, 0.8, 0.0, 0.0],
            [0.0, 1.0 / 2f64.sqrt(), 0.0, -1.0 / 2f64.sqrt(), 0.0],
        );
        let pts: Vec<(f64, f64)> = (0..12).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0))).collect();
        let vecs = pts
            .iter()
            .map(|&(a, b)| (0..5).map(|k| 1.0 + a * u[k] + b * v[k]).collect())
            .collect();
        let p = project_2d(&dump_of(vecs, &["x"])).unwrap();
        assert!(!p.degenerate);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let orig = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                let (a, b) = (&p.rows[i], &p.rows[j]);
                let proj = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                assert!((orig - proj).abs() < 1e-6);
            }
        }
        assert!((p.retained_ratio() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn variance_order_and_retained_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vecs: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|k| rng.random_range(-1.0..1.0) * (k + 1) as f64).collect())
            .collect();
        let dump = dump_of(vecs, &["x"]);
        let p = project_2d(&dump).unwrap();
        assert!(p.component_variance[0] >= p.component_variance[1]);
        let xs: Vec<f64> = p.rows.iter().map(|r| r.x).collect();
        let ys: Vec<f64> = p.rows.iter().map(|r| r.y).collect();
        let var = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>() / (v.len() - 1) as f64;
        assert!((var(&xs) - p.component_variance[0]).abs() < 1e-9);
        assert!((var(&ys) - p.component_variance[1]).abs() < 1e-9);
        let m = dump.matrix();
        let c = &m - &m.mean_axis(ndarray::Axis(0)).unwrap();
        let total = c.iter().map(|a| a * a).sum::<f64>() / 19.0;
        assert!((p.total_variance - total).abs() < 1e-9);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let p = project_2d(&dump_of(vec![vec![0.5, -0.5]; 4], &["x"])).unwrap();
        assert!(p.degenerate);
        assert!(p.rows.iter().all(|r| r.x == 0.0 && r.y == 0.0));
        assert!(project_2d(&dump_of(vec![vec![1.0]; 2], &["x"])).is_err());
    }

    #[test]
    fn separated_families_cluster() {
        let vecs = vec![
            vec![1.0, 0.1],
            vec![0.0, 1.0],
            vec![1.0, -0.1],
            vec![0.1, 1.0],
        ];
        let s = cluster_stats(&dump_of(vecs, &["a", "b"])).unwrap();
        assert!(s.within_family_cosine > s.across_family_cosine);
        assert!(s.silhouette > 0.5);
        assert_eq!(s.silhouette_by_family.len(), 2);
    }

    #[test]
    fn pair_report_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vecs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let d = dump_of(vecs, &["a", "b"]);
        let same = pair_distance_report(&d, "r2", "r2").unwrap();
        assert_eq!(same.cosine_distance, 0.0);
        let ab = pair_distance_report(&d, "r1", "r5").unwrap();
        let ba = pair_distance_report(&d, "r5", "r1").unwrap();
        assert_eq!(ab.cosine_distance, ba.cosine_distance);
        assert_eq!(ab.percentile, ba.percentile);
        assert!(pair_distance_report(&d, "r1", "zz").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = dump_of(vec![vec![0.1, 1.0 / 3.0], vec![-2.0, 5e-300]], &["a,b", "c"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        d.write_csv(&p).unwrap();
        assert_eq!(EmbeddingDump::read_csv(&p, "m", "c").unwrap(), d);
    }
}
