//! In-context image selection: random sampling (RS) and similarity-based
//! image-to-image retrieval (SIIR) over precomputed embeddings.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{read_tensor_file, write_atomic, write_tensor_file, Tensor};

pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalMethod {
    #[serde(rename = "RS")]
    Rs,
    #[serde(rename = "SIIR")]
    Siir,
}

/// Row-per-item embedding matrix with its id list.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IdSidecar {
    ids: Vec<String>,
    #[serde(default)]
    normalized: bool,
}

impl EmbeddingTable {
    /// `normalized` is a claim checked against the rows, not a request.
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if ids.len() * dim != data.len() {
            return Err(Error::data(format!(
                "embedding matrix holds {} values, expected {} ids x {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate embedding id `{id}`")));
            }
        }
        let table = Self {
            ids,
            index,
            dim,
            data,
            normalized,
        };
        if normalized {
            for (i, id) in table.ids.iter().enumerate() {
                let norm = l2_norm(table.row(i));
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::data(format!(
                        "embedding `{id}` flagged normalized but has norm {norm}"
                    )));
                }
            }
        }
        Ok(table)
    }

    pub fn from_tensor(ids: Vec<String>, tensor: &Tensor, normalized: bool) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 2 || shape[0] as usize != ids.len() {
            return Err(Error::data(format!(
                "embedding tensor shape {shape:?} does not match {} ids",
                ids.len()
            )));
        }
        Self::new(ids, shape[1] as usize, tensor.data().to_vec(), normalized)
    }

    pub fn load(tensor_path: &Path, ids_path: &Path) -> Result<Self> {
        let tensor = read_tensor_file(tensor_path)?;
        let text = std::fs::read_to_string(ids_path).map_err(|e| Error::io(ids_path, e))?;
        let sidecar: IdSidecar = serde_json::from_str(&text).map_err(|e| Error::json(ids_path, e))?;
        Self::from_tensor(sidecar.ids, &tensor, sidecar.normalized)
    }

    pub fn save(&self, tensor_path: &Path, ids_path: &Path) -> Result<()> {
        let tensor = Tensor::from_f32(vec![self.ids.len() as u64, self.dim as u64], self.data.clone())?;
        write_tensor_file(&tensor, tensor_path)?;
        let sidecar = IdSidecar {
            ids: self.ids.clone(),
            normalized: self.normalized,
        };
        write_atomic(ids_path, serde_json::to_string_pretty(&sidecar).expect("sidecar").as_bytes())
    }

    /// Copy with every row scaled to unit length. Zero rows are rejected.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(self.dim.max(1)).enumerate() {
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::domain(format!("embedding `{}` is the zero vector", self.ids[i])));
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
        Self::new(self.ids.clone(), self.dim, data, true)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// `dot(a, b) / (|a| |b|)`, accumulated in f64.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub method: RetrievalMethod,
    pub items: Vec<ScoredItem>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|it| it.id.as_str()).collect()
    }
}

/// Top-`k` most similar items to `query_id`, the query itself excluded.
/// Sorted by descending cosine; ties go to the lexicographically smaller id.
pub fn siir_retrieve(query_id: &str, table: &EmbeddingTable, k: usize) -> Result<RetrievalResult> {
    let q = table
        .position(query_id)
        .ok_or_else(|| Error::data(format!("query `{query_id}` not in embedding table")))?;
    if k > table.len().saturating_sub(1) {
        return Err(Error::domain(format!(
            "k = {k} exceeds the {} available corpus items",
            table.len().saturating_sub(1)
        )));
    }
    let query = table.row(q);
    let mut scored = Vec::with_capacity(table.len() - 1);
    for (i, id) in table.ids().iter().enumerate() {
        if i != q {
            scored.push((cosine_similarity(query, table.row(i))?, id.as_str()));
        }
    }
    let by_rank = |a: &(f64, &str), b: &(f64, &str)| {
        b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    Ok(RetrievalResult {
        query_id: query_id.to_owned(),
        method: RetrievalMethod::Siir,
        items: scored
            .into_iter()
            .map(|(score, id)| ScoredItem { id: id.to_owned(), score })
            .collect(),
    })
}

/// Generator used for every random draw in the toolkit: ChaCha20 keyed with
/// the seed's 8 little-endian bytes followed by 24 zero bytes.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// Uniform sample of `k` distinct ids without replacement, `exclude` removed.
///
/// Partial Fisher-Yates over the candidates in input order: for step
/// `i = 0..k`, draw `j` uniformly from `[i, n)` as a u64 and swap positions
/// `i` and `j`. Results are reproducible from `seed` alone.
pub fn rs_sample(ids: &[String], k: usize, seed: u64, exclude: &str) -> Result<RetrievalResult> {
    let mut pool: Vec<&String> = ids.iter().filter(|id| id.as_str() != exclude).collect();
    if k > pool.len() {
        return Err(Error::domain(format!(
            "k = {k} exceeds the {} available corpus items",
            pool.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let n = pool.len() as u64;
    for i in 0..k {
        let j = rng.gen_range(i as u64..n) as usize;
        pool.swap(i, j);
    }
    Ok(RetrievalResult {
        query_id: exclude.to_owned(),
        method: RetrievalMethod::Rs,
        items: pool[..k]
            .iter()
            .map(|id| ScoredItem {
                id: (*id).clone(),
                score: 0.0,
            })
            .collect(),
    })
}
