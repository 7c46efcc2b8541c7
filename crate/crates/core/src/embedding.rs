//! Text embeddings behind pluggable providers and a content-hash cache.
//!
//! Vectors are L2-normalized when they enter the pipeline, so cosine
//! similarity downstream reduces to a dot product and rescaling a model's
//! embedding never changes a similarity entry.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::norm;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Wraps raw values; rejects empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Embedding("empty embedding vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Embedding(format!("non-finite entry at index {i}")));
        }
        Ok(EmbeddingVector(values))
    }

    /// Wraps and L2-normalizes; a zero vector is rejected.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let v = Self::new(values)?;
        let n = norm(&v.0);
        if n == 0.0 {
            return Err(Error::Embedding("cannot normalize a zero vector".into()));
        }
        Ok(EmbeddingVector(v.0.into_iter().map(|x| x / n).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Concatenates equal-dimension parts in order.
pub fn concat_features(parts: &[&EmbeddingVector]) -> Result<EmbeddingVector> {
    let Some(first) = parts.first() else {
        return Err(Error::invalid("concat_features needs at least one part"));
    };
    let d = first.dim();
    if let Some(bad) = parts.iter().position(|p| p.dim() != d) {
        return Err(Error::invalid(format!(
            "part {bad} has dim {}, expected {d}",
            parts[bad].dim()
        )));
    }
    let mut out = Vec::with_capacity(d * parts.len());
    for p in parts {
        out.extend_from_slice(p.values());
    }
    EmbeddingVector::new(out)
}

/// Collapses whitespace runs and trims.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hex SHA-256 of the normalized text; the key of precomputed files.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(normalize_text(text).as_bytes()))
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the provider and its settings in cache keys.
    fn fingerprint(&self) -> String;

    fn dim(&self) -> usize;

    /// Embeds already-normalized, non-empty texts. Output order matches input.
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;

    /// Largest number of concurrent `embed_texts` calls the provider accepts.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Texts per `embed_texts` call during batch embedding.
    fn batch_size(&self) -> usize {
        64
    }
}

/// Deterministic offline provider: feature hashing over whitespace tokens.
///
/// Each lowercased token seeds its own Gaussian vector; a text embeds to the
/// normalized sum of its token vectors. Identical texts always map to the
/// same vector and texts sharing tokens land close together, which gives
/// synthetic corpora graded similarity structure.
#[derive(Debug, Clone)]
pub struct StubProvider {
    dim: usize,
    seed: u64,
}

impl StubProvider {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("stub embedding dim must be positive"));
        }
        Ok(StubProvider { dim, seed })
    }

    fn token_vector(&self, token: &str, out: &mut [f64]) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        for v in out.iter_mut() {
            *v += Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
}

impl EmbeddingProvider for StubProvider {
    fn fingerprint(&self) -> String {
        format!("stub:dim={}:seed={}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dim];
                for token in t.split_whitespace() {
                    self.token_vector(&token.to_lowercase(), &mut v);
                }
                v
            })
            .collect())
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct PrecomputedRecord {
    text_hash: String,
    vector: Vec<f64>,
}

/// Looks vectors up by text hash in a line-delimited file.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    source: String,
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PrecomputedRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            match dim {
                None => dim = Some(rec.vector.len()),
                Some(d) if d != rec.vector.len() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("vector has dim {}, expected {d}", rec.vector.len()),
                    })
                }
                _ => {}
            }
            vectors.insert(rec.text_hash, rec.vector);
        }
        Ok(PrecomputedProvider {
            source: path.display().to_string(),
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn from_map(source: impl Into<String>, vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        if vectors.values().any(|v| v.len() != dim) {
            return Err(Error::invalid("precomputed vectors disagree on dim"));
        }
        Ok(PrecomputedProvider {
            source: source.into(),
            dim,
            vectors,
        })
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn fingerprint(&self) -> String {
        format!("precomputed:{}", self.source)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                let h = text_hash(t);
                self.vectors
                    .get(&h)
                    .cloned()
                    .ok_or(Error::MissingEmbedding(h))
            })
            .collect()
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    pub dim: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_timeout_secs() -> u64 {
    30
}
fn default_retries() -> usize {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_batch() -> usize {
    32
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Remote embedding service: `POST {"texts": [...]}` → `{"vectors": [...]}`.
pub struct HttpProvider {
    config: HttpProviderConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::invalid(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(HttpProvider {
            config,
            token,
            agent,
        })
    }

    fn post_once(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req
            .send_json(EmbedRequest { texts })
            .map_err(|e| Error::Http(e.to_string()))?;
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Http(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(Error::Http(format!(
                "service returned {} vectors for {} texts",
                body.vectors.len(),
                texts.len()
            )));
        }
        Ok(body.vectors)
    }
}

impl EmbeddingProvider for HttpProvider {
    fn fingerprint(&self) -> String {
        format!("http:{}:dim={}", self.config.endpoint, self.config.dim)
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut last = None;
        for attempt in 0..=self.config.retries {
            match self.post_once(texts) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("embedding request attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                    if attempt < self.config.retries {
                        std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Http("no attempt made".into())))
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }

    fn batch_size(&self) -> usize {
        self.config.batch_size.max(1)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    vector: Vec<f64>,
}

/// Provider plus a `(fingerprint, text hash)`-keyed cache that any number of
/// readers can share; inserts take the write lock.
pub struct Embedder {
    provider: Box<dyn EmbeddingProvider>,
    fingerprint: String,
    cache: RwLock<HashMap<String, EmbeddingVector>>,
    cache_path: Option<PathBuf>,
    misses: AtomicUsize,
}

impl Embedder {
    pub fn new(provider: Box<dyn EmbeddingProvider>) -> Self {
        let fingerprint = provider.fingerprint();
        Embedder {
            provider,
            fingerprint,
            cache: RwLock::new(HashMap::new()),
            cache_path: None,
            misses: AtomicUsize::new(0),
        }
    }

    pub fn stub(dim: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(Box::new(StubProvider::new(dim, seed)?)))
    }

    /// Attaches a persistent cache file, loading any entries it holds.
    pub fn with_cache_file(mut self, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut cache = self.cache.write().expect("cache lock poisoned");
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)?;
                cache.insert(rec.key, EmbeddingVector::new(rec.vector)?);
            }
        }
        self.cache_path = Some(path);
        Ok(self)
    }

    /// Writes the cache to its file, sorted by key.
    pub fn persist(&self) -> Result<()> {
        let Some(path) = &self.cache_path else {
            return Ok(());
        };
        let cache = self.cache.read().expect("cache lock poisoned");
        let mut keys: Vec<&String> = cache.keys().collect();
        keys.sort();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for k in keys {
            let rec = CacheRecord {
                key: k.clone(),
                vector: cache[k].values().to_vec(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Number of texts that went to the provider so far.
    pub fn provider_calls(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn key(&self, normalized: &str) -> String {
        format!("{}|{}", self.fingerprint, text_hash(normalized))
    }

    fn cached(&self, key: &str) -> Option<EmbeddingVector> {
        self.cache
            .read()
            .expect("cache lock poisoned")
            .get(key)
            .cloned()
    }

    fn admit(&self, raw: Vec<f64>) -> Result<EmbeddingVector> {
        if raw.len() != self.dim() {
            return Err(Error::Embedding(format!(
                "provider returned dim {}, expected {}",
                raw.len(),
                self.dim()
            )));
        }
        EmbeddingVector::normalized(raw)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let normalized = normalize_text(text);
        if normalized.is_empty() {
            return Err(Error::Embedding("cannot embed empty text".into()));
        }
        let key = self.key(&normalized);
        if let Some(v) = self.cached(&key) {
            return Ok(v);
        }
        let raw = self
            .provider
            .embed_texts(&[normalized.as_str()])?
            .pop()
            .ok_or_else(|| Error::Embedding("provider returned no vector".into()))?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = self.admit(raw)?;
        self.cache
            .write()
            .expect("cache lock poisoned")
            .insert(key, v.clone());
        Ok(v)
    }

    /// Order-preserving batch embedding. Uncached texts go to the provider
    /// in chunks, at most `max_in_flight` chunks at a time.
    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let normalized: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();
        let empty: Vec<usize> = normalized
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_empty())
            .map(|(i, _)| i)
            .collect();
        if !empty.is_empty() {
            return Err(Error::Batch {
                indices: empty,
                message: "empty text".into(),
            });
        }

        let keys: Vec<String> = normalized.iter().map(|t| self.key(t)).collect();
        let mut pending: Vec<usize> = Vec::new();
        let mut seen = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            if self.cached(k).is_none() && !seen.contains_key(k) {
                seen.insert(k.clone(), i);
                pending.push(i);
            }
        }

        let chunks: Vec<&[usize]> = pending.chunks(self.provider.batch_size()).collect();
        let next = AtomicUsize::new(0);
        let failures: Mutex<Vec<(usize, String)>> = Mutex::new(Vec::new());
        let workers = self.provider.max_in_flight().min(chunks.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let c = next.fetch_add(1, Ordering::SeqCst);
                    let Some(chunk) = chunks.get(c) else { break };
                    let batch: Vec<&str> = chunk.iter().map(|&i| normalized[i].as_str()).collect();
                    let result = self
                        .provider
                        .embed_texts(&batch)
                        .and_then(|vs| vs.into_iter().map(|v| self.admit(v)).collect::<Result<Vec<_>>>());
                    match result {
                        Ok(vs) => {
                            self.misses.fetch_add(vs.len(), Ordering::Relaxed);
                            let mut cache = self.cache.write().expect("cache lock poisoned");
                            for (&i, v) in chunk.iter().zip(vs) {
                                cache.insert(keys[i].clone(), v);
                            }
                        }
                        Err(e) => {
                            let mut f = failures.lock().expect("failure lock poisoned");
                            f.extend(chunk.iter().map(|&i| (i, e.to_string())));
                        }
                    }
                });
            }
        });

        let failures = failures.into_inner().expect("failure lock poisoned");
        if !failures.is_empty() {
            let failed_keys: Vec<&String> = failures.iter().map(|(i, _)| &keys[*i]).collect();
            let mut indices: Vec<usize> = keys
                .iter()
                .enumerate()
                .filter(|(_, k)| failed_keys.contains(k))
                .map(|(i, _)| i)
                .collect();
            indices.sort_unstable();
            return Err(Error::Batch {
                indices,
                message: failures[0].1.clone(),
            });
        }

        keys.iter()
            .map(|k| {
                self.cached(k)
                    .ok_or_else(|| Error::Embedding("cache entry vanished".into()))
            })
            .collect()
    }
}
