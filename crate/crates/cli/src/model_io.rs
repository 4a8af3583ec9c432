//! JSON model files. Matrices are stored as arrays of rows.

use std::path::Path;

use attnprobe_core::{AttentionParams, Model, MultiHeadParams, TransformerParams};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::generate::GenSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    pub score_matrix: Vec<Vec<f64>>,
    pub value_vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelFile {
    Attention {
        d: usize,
        score_matrix: Vec<Vec<f64>>,
        value_vector: Vec<f64>,
    },
    Transformer {
        d: usize,
        m: usize,
        score_matrix: Vec<Vec<f64>>,
        hidden_matrix: Vec<Vec<f64>>,
        output_vector: Vec<f64>,
    },
    Multihead {
        d: usize,
        heads: Vec<HeadFile>,
    },
}

/// A model file together with the generator settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(flatten)]
    pub model: ModelFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenSpec>,
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn rows_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> CliResult<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Invalid(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(values: &[f64], len: usize, name: &str) -> CliResult<DVector<f64>> {
    if values.len() != len {
        return Err(CliError::Invalid(format!("{name} must have length {len}")));
    }
    Ok(DVector::from_column_slice(values))
}

fn head_file(p: &AttentionParams) -> HeadFile {
    HeadFile {
        score_matrix: matrix_rows(&p.score_matrix),
        value_vector: p.value_vector.iter().copied().collect(),
    }
}

fn head_params(h: &HeadFile, d: usize) -> CliResult<AttentionParams> {
    Ok(AttentionParams::new(
        rows_matrix(&h.score_matrix, d, d, "score_matrix")?,
        vector(&h.value_vector, d, "value_vector")?,
    )?)
}

impl ModelFile {
    pub fn from_model(model: &Model) -> Self {
        match model {
            Model::Attention(p) => {
                let HeadFile {
                    score_matrix,
                    value_vector,
                } = head_file(p);
                ModelFile::Attention {
                    d: p.dim(),
                    score_matrix,
                    value_vector,
                }
            }
            Model::Transformer(p) => ModelFile::Transformer {
                d: p.dim(),
                m: p.hidden_width(),
                score_matrix: matrix_rows(&p.score_matrix),
                hidden_matrix: matrix_rows(&p.hidden_matrix),
                output_vector: p.output_vector.iter().copied().collect(),
            },
            Model::MultiHead(p) => ModelFile::Multihead {
                d: p.dim(),
                heads: p.heads.iter().map(head_file).collect(),
            },
        }
    }

    pub fn to_model(&self) -> CliResult<Model> {
        let model = match self {
            ModelFile::Attention {
                d,
                score_matrix,
                value_vector,
            } => Model::Attention(head_params(
                &HeadFile {
                    score_matrix: score_matrix.clone(),
                    value_vector: value_vector.clone(),
                },
                *d,
            )?),
            ModelFile::Transformer {
                d,
                m,
                score_matrix,
                hidden_matrix,
                output_vector,
            } => Model::Transformer(TransformerParams::new(
                rows_matrix(score_matrix, *d, *d, "score_matrix")?,
                rows_matrix(hidden_matrix, *d, *m, "hidden_matrix")?,
                vector(output_vector, *m, "output_vector")?,
            )?),
            ModelFile::Multihead { d, heads } => Model::MultiHead(MultiHeadParams::new(
                heads
                    .iter()
                    .map(|h| head_params(h, *d))
                    .collect::<CliResult<Vec<_>>>()?,
            )?),
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn to_json(doc: &ModelDocument) -> String {
    let mut text = serde_json::to_string_pretty(doc).expect("model documents serialize");
    text.push('\n');
    text
}

pub fn write_model(path: &Path, doc: &ModelDocument) -> CliResult<()> {
    std::fs::write(path, to_json(doc)).map_err(|e| CliError::io(path, e))
}

pub fn read_model(path: &Path) -> CliResult<(ModelDocument, Model)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let doc: ModelDocument = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let model = doc.model.to_model()?;
    Ok((doc, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_round_trip_is_bit_exact() {
        let w = DMatrix::from_row_slice(2, 2, &[0.1, -1.0 / 3.0, 2.0f64.sqrt(), 1e-300]);
        let v = DVector::from_vec(vec![std::f64::consts::PI, -0.0]);
        let model = Model::Attention(AttentionParams::new(w, v).unwrap());
        let doc = ModelDocument {
            model: ModelFile::from_model(&model),
            generator: None,
        };
        let back: ModelDocument = serde_json::from_str(&to_json(&doc)).unwrap();
        assert_eq!(back, doc);
        let m = back.model.to_model().unwrap();
        match (&m, &model) {
            (Model::Attention(a), Model::Attention(b)) => {
                for (x, y) in a.score_matrix.iter().zip(b.score_matrix.iter()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn random_floats_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let w = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() * 100.0 - 50.0);
            let v = DVector::from_fn(3, |_, _| f64::from_bits(rng.random_range(0..0x7fe0_0000_0000_0000)));
            let model = Model::Attention(AttentionParams::new(w, v).unwrap());
            let doc = ModelDocument {
                model: ModelFile::from_model(&model),
                generator: None,
            };
            let back: ModelDocument = serde_json::from_str(&to_json(&doc)).unwrap();
            assert_eq!(back.model.to_model().unwrap(), model);
        }
    }

    #[test]
    fn rows_are_row_major() {
        let json = r#"{"kind":"attention","d":2,"score_matrix":[[1,2],[3,4]],"value_vector":[1,0]}"#;
        let doc: ModelDocument = serde_json::from_str(json).unwrap();
        let Model::Attention(p) = doc.model.to_model().unwrap() else {
            unreachable!()
        };
        assert_eq!(p.score_matrix[(0, 1)], 2.0);
        assert_eq!(p.score_matrix[(1, 0)], 3.0);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let json = r#"{"kind":"attention","d":2,"score_matrix":[[1,2]],"value_vector":[1,0]}"#;
        let doc: ModelDocument = serde_json::from_str(json).unwrap();
        assert!(doc.model.to_model().is_err());
    }

    #[test]
    fn transformer_and_multihead_round_trip() {
        let t = Model::Transformer(
            TransformerParams::new(
                DMatrix::identity(2, 2),
                DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]),
                DVector::from_vec(vec![1.0, 2.0, 3.0]),
            )
            .unwrap(),
        );
        assert_eq!(ModelFile::from_model(&t).to_model().unwrap(), t);
        let h = AttentionParams::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let mh = Model::MultiHead(MultiHeadParams::new(vec![h.clone(), h]).unwrap());
        assert_eq!(ModelFile::from_model(&mh).to_model().unwrap(), mh);
    }
}
