//! From raw records to latent vectors: split, vocabulary, factorization of
//! the training matrix, and projection of stream records onto its basis.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::LatentDataset;
use crate::nnmf::{nnls_project, nnmf_fit, Basis, NnlsOptions, NnmfOptions};
use crate::records::{temporal_split, FeatureVocabulary, RawRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareOptions {
    /// Calendar years moved into the stream.
    pub t0: u32,
    pub h: usize,
    pub nnmf: NnmfOptions,
    pub nnls: NnlsOptions,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            t0: 2,
            h: 10,
            nnmf: NnmfOptions::default(),
            nnls: NnlsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub t0_years: u32,
    /// Last training year.
    pub t0_year: Option<i32>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// One embedded record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub x: Vec<f64>,
}

impl LatentRow {
    pub fn vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x)
    }
}

pub fn write_latent<W: Write>(mut w: W, rows: &[LatentRow]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_latent<R: BufRead>(reader: R) -> Result<Vec<LatentRow>> {
    let mut out: Vec<LatentRow> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: LatentRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(first) = out.first() {
            if first.x.len() != row.x.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {} coordinates, found {}", first.x.len(), row.x.len()),
                });
            }
        }
        if row.x.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parse {
                line: i + 1,
                message: "latent coordinates must be finite and non-negative".into(),
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Everything needed to classify the stream of one name reference.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocabulary: FeatureVocabulary,
    pub basis: Basis,
    pub manifest: SplitManifest,
    pub train: Vec<LatentRow>,
    pub test: Vec<LatentRow>,
}

/// Maps raw records into the latent space of a fitted basis.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub vocabulary: FeatureVocabulary,
    pub basis: Basis,
    pub nnls: NnlsOptions,
}

impl Embedder {
    pub fn embed(&self, record: &RawRecord) -> Result<DVector<f64>> {
        let x = DVector::from_vec(self.vocabulary.featurize(record).to_dense());
        Ok(nnls_project(&x, &self.basis, &self.nnls)?.into_inner())
    }
}

/// Splits by year, builds the vocabulary from training records, factorizes
/// the training matrix, and projects the stream records. Training records
/// must carry a label.
pub fn prepare(records: &[RawRecord], opts: &PrepareOptions) -> Result<Prepared> {
    let split = temporal_split(records, opts.t0)?;
    if split.train.is_empty() {
        return Err(Error::invalid("temporal split left no training records"));
    }
    if let Some(r) = split.train.iter().find(|r| r.true_label.is_none()) {
        return Err(Error::invalid(format!("training record `{}` has no label", r.id)));
    }
    let vocabulary = FeatureVocabulary::build(&split.train)?;
    let d = vocabulary.len();
    let n = split.train.len();
    let mut x = DMatrix::zeros(n, d);
    for (i, r) in split.train.iter().enumerate() {
        for &b in &vocabulary.featurize(r).bits {
            x[(i, b)] = 1.0;
        }
    }
    let fit = nnmf_fit(&x, opts.h, &opts.nnmf)?;
    let train = split
        .train
        .iter()
        .enumerate()
        .map(|(i, r)| LatentRow {
            id: r.id.clone(),
            label: r.true_label.clone(),
            x: fit.coefficients.row(i).iter().copied().collect(),
        })
        .collect();
    let embedder = Embedder {
        vocabulary,
        basis: fit.basis,
        nnls: opts.nnls,
    };
    let test = split
        .test
        .iter()
        .map(|r| {
            Ok(LatentRow {
                id: r.id.clone(),
                label: r.true_label.clone(),
                x: embedder.embed(r)?.as_slice().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = SplitManifest {
        t0_years: opts.t0,
        t0_year: split.t0,
        train_ids: split.train.iter().map(|r| r.id.clone()).collect(),
        test_ids: split.test.iter().map(|r| r.id.clone()).collect(),
    };
    Ok(Prepared {
        vocabulary: embedder.vocabulary,
        basis: embedder.basis,
        manifest,
        train,
        test,
    })
}

/// Training and stream rows as an evaluation dataset; every stream row needs
/// a label.
pub fn latent_dataset(train: &[LatentRow], test: &[LatentRow]) -> Result<LatentDataset> {
    let label = |r: &LatentRow| {
        r.label
            .clone()
            .ok_or_else(|| Error::invalid(format!("record `{}` has no label", r.id)))
    };
    Ok(LatentDataset {
        train_x: train.iter().map(LatentRow::vector).collect(),
        train_labels: train.iter().map(label).collect::<Result<_>>()?,
        test_ids: test.iter().map(|r| r.id.clone()).collect(),
        test_x: test.iter().map(LatentRow::vector).collect(),
        test_labels: test.iter().map(label).collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, year: i32, who: &str, coauthors: &[&str], title: &str) -> RawRecord {
        RawRecord {
            id: id.into(),
            name_ref: "Wei Wang".into(),
            year,
            coauthors: coauthors.iter().map(|s| s.to_string()).collect(),
            title: title.into(),
            venue: if who == "A" { "SIGMOD".into() } else { "CVPR".into() },
            true_label: Some(who.into()),
        }
    }

    fn corpus() -> Vec<RawRecord> {
        vec![
            rec("1", 2001, "A", &["Jiawei Han"], "mining frequent patterns"),
            rec("2", 2002, "A", &["Jiawei Han", "Jian Pei"], "sequential pattern mining"),
            rec("3", 2002, "B", &["Li Fei-Fei"], "object recognition"),
            rec("4", 2003, "B", &["Li Fei-Fei", "Pietro Perona"], "scene recognition"),
            rec("5", 2004, "A", &["Jian Pei"], "pattern mining streams"),
            rec("6", 2005, "B", &["Pietro Perona"], "recognition of objects"),
        ]
    }

    #[test]
    fn prepare_splits_and_embeds() {
        let opts = PrepareOptions {
            t0: 2,
            h: 2,
            ..Default::default()
        };
        let p = prepare(&corpus(), &opts).unwrap();
        assert_eq!(p.manifest.train_ids, vec!["1", "2", "3", "4"]);
        assert_eq!(p.manifest.test_ids, vec!["5", "6"]);
        assert_eq!(p.manifest.t0_year, Some(2003));
        assert_eq!(p.basis.rank(), 2);
        assert!(p
            .train
            .iter()
            .chain(&p.test)
            .all(|r| r.x.len() == 2 && r.x.iter().all(|v| *v >= 0.0)));
        let again = prepare(&corpus(), &opts).unwrap();
        assert_eq!(p.train, again.train);
        assert_eq!(p.test, again.test);
    }

    #[test]
    fn unlabeled_training_record_rejected() {
        let mut c = corpus();
        c[0].true_label = None;
        assert!(prepare(
            &c,
            &PrepareOptions {
                h: 2,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn latent_rows_round_trip() {
        let rows = vec![
            LatentRow {
                id: "a".into(),
                label: Some("A".into()),
                x: vec![0.1, 1.0 / 3.0],
            },
            LatentRow {
                id: "b".into(),
                label: None,
                x: vec![0.0, 2.5e-17],
            },
        ];
        let mut buf = Vec::new();
        write_latent(&mut buf, &rows).unwrap();
        assert_eq!(read_latent(buf.as_slice()).unwrap(), rows);
        assert!(read_latent(&b"{\"id\":\"a\",\"x\":[-1.0]}\n"[..]).is_err());
    }
}
