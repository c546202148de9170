//! Embedding providers for the diversity report.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use webr_core::analysis::{EmbeddingVector, HashingEmbedder};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no embedding for {0:?}")]
    Missing(String),
    #[error("embedding request failed: {0}")]
    Http(String),
}

pub trait Embedder {
    /// Embeds `(id, text)` items, returning vectors in input order.
    fn embed(&self, items: &[(String, String)]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

impl Embedder for HashingEmbedder {
    fn embed(&self, items: &[(String, String)]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(items.iter().map(|(id, text)| HashingEmbedder::embed(self, id, text)).collect())
    }
}

/// Precomputed vectors, one `{"id": ..., "vector": [...]}` object per line.
pub struct FileEmbeddings {
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct VectorLine {
    id: String,
    vector: Vec<f64>,
}

impl FileEmbeddings {
    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let io = |source| EmbedError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut vectors = HashMap::new();
        for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let v: VectorLine = serde_json::from_str(&line).map_err(|e| EmbedError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            vectors.insert(v.id, v.vector);
        }
        Ok(Self { vectors })
    }
}

impl Embedder for FileEmbeddings {
    fn embed(&self, items: &[(String, String)]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        items
            .iter()
            .map(|(id, _)| {
                self.vectors
                    .get(id)
                    .map(|v| EmbeddingVector {
                        source_id: id.clone(),
                        values: v.clone(),
                    })
                    .ok_or_else(|| EmbedError::Missing(id.clone()))
            })
            .collect()
    }
}

/// OpenAI-style `POST {base}/embeddings`.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    batch: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    index: usize,
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            batch: 256,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, items: &[(String, String)]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.batch) {
            let body = EmbedRequest {
                model: &self.model,
                input: chunk.iter().map(|(_, t)| t.as_str()).collect(),
            };
            let mut req = self.agent.post(&self.url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req.send_json(&body).map_err(|e| EmbedError::Http(e.to_string()))?;
            let mut parsed: EmbedResponse = resp
                .body_mut()
                .read_json()
                .map_err(|e| EmbedError::Http(e.to_string()))?;
            if parsed.data.len() != chunk.len() {
                return Err(EmbedError::Http(format!(
                    "expected {} embeddings, got {}",
                    chunk.len(),
                    parsed.data.len()
                )));
            }
            parsed.data.sort_by_key(|d| d.index);
            for ((id, _), d) in chunk.iter().zip(parsed.data) {
                out.push(EmbeddingVector {
                    source_id: id.clone(),
                    values: d.embedding,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_embeddings_lookup() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","vector":[1.0,0.0]}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","vector":[0.0,1.0]}}"#).unwrap();
        let e = FileEmbeddings::load(f.path()).unwrap();
        let v = e
            .embed(&[("b".into(), String::new()), ("a".into(), String::new())])
            .unwrap();
        assert_eq!(v[0].values, vec![0.0, 1.0]);
        assert!(matches!(
            e.embed(&[("zz".into(), String::new())]),
            Err(EmbedError::Missing(_))
        ));
    }
}
