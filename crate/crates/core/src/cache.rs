//! Memoized text embeddings keyed by normalized text and the text-encoder
//! parameter fingerprint.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{classify, Temperature};
use crate::encoders::EncoderParams;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{normalize, tokenize, Vocab};

/// 64-bit key over `(normalized text, fingerprint)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey(pub u64);

impl CacheKey {
    pub fn new(normalized: &str, fingerprint: u64) -> Self {
        let mut h = Sha256::new();
        h.update(normalized.as_bytes());
        h.update([0u8]);
        h.update(fingerprint.to_le_bytes());
        let d = h.finalize();
        CacheKey(u64::from_le_bytes(d[..8].try_into().expect("32-byte digest")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub bytes_resident: u64,
}

/// Frozen text encoder: parameters, vocabulary and their fingerprint.
#[derive(Debug, Clone)]
pub struct TextEncoder<'a> {
    params: &'a EncoderParams,
    vocab: &'a Vocab,
    fingerprint: u64,
}

impl<'a> TextEncoder<'a> {
    pub fn new(params: &'a EncoderParams, vocab: &'a Vocab) -> Self {
        TextEncoder { params, vocab, fingerprint: params.store.fingerprint_prefix("text.") }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn params(&self) -> &EncoderParams {
        self.params
    }

    /// Encodes without touching any cache.
    pub fn encode(&self, text: &str) -> Result<Tensor> {
        self.params.embed_text(&tokenize(text, self.vocab))
    }
}

struct Entry {
    text: String,
    value: Arc<Tensor>,
    last_used: AtomicU64,
}

fn entry_bytes(text: &str, t: &Tensor) -> u64 {
    (text.len() + t.numel() * std::mem::size_of::<f64>()) as u64
}

/// Thread-safe embedding cache; unbounded unless a capacity is given.
pub struct SemanticCache {
    fingerprint: AtomicU64,
    capacity: Option<usize>,
    map: RwLock<HashMap<CacheKey, Entry>>,
    clock: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
    bytes: AtomicU64,
}

impl SemanticCache {
    pub fn new(fingerprint: u64, capacity: Option<usize>) -> Result<Self> {
        if capacity == Some(0) {
            return contract("cache capacity must be positive");
        }
        Ok(SemanticCache {
            fingerprint: AtomicU64::new(fingerprint),
            capacity,
            map: RwLock::new(HashMap::new()),
            clock: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
        })
    }

    pub fn for_encoder(enc: &TextEncoder<'_>, capacity: Option<usize>) -> Result<Self> {
        Self::new(enc.fingerprint(), capacity)
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint.load(Ordering::Acquire)
    }

    /// Drops every entry and adopts a new parameter fingerprint.
    pub fn rebind(&self, fingerprint: u64) {
        self.clear();
        self.fingerprint.store(fingerprint, Ordering::Release);
    }

    pub fn clear(&self) {
        let mut map = self.map.write().expect("cache lock poisoned");
        map.clear();
        self.bytes.store(0, Ordering::Relaxed);
    }

    pub fn reset_stats(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
        self.evictions.store(0, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            bytes_resident: self.bytes.load(Ordering::Relaxed),
        }
    }

    fn lookup(&self, key: CacheKey, text: &str) -> Option<Arc<Tensor>> {
        let map = self.map.read().expect("cache lock poisoned");
        let e = map.get(&key).filter(|e| e.text == text)?;
        e.last_used.store(self.clock.fetch_add(1, Ordering::Relaxed), Ordering::Relaxed);
        Some(Arc::clone(&e.value))
    }

    /// Publishes `value` unless a concurrent miss already did; returns the stored value.
    fn publish(&self, key: CacheKey, text: String, value: Tensor) -> Arc<Tensor> {
        let mut map = self.map.write().expect("cache lock poisoned");
        if let Some(e) = map.get(&key).filter(|e| e.text == text) {
            return Arc::clone(&e.value);
        }
        if let Some(cap) = self.capacity {
            while map.len() >= cap {
                let victim = map
                    .iter()
                    .min_by_key(|(_, e)| e.last_used.load(Ordering::Relaxed))
                    .map(|(k, _)| *k)
                    .expect("non-empty map");
                if let Some(old) = map.remove(&victim) {
                    self.bytes.fetch_sub(entry_bytes(&old.text, &old.value), Ordering::Relaxed);
                    self.evictions.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        let bytes = entry_bytes(&text, &value);
        let value = Arc::new(value);
        let tick = self.clock.fetch_add(1, Ordering::Relaxed);
        if let Some(old) = map.insert(key, Entry { text, value: Arc::clone(&value), last_used: AtomicU64::new(tick) }) {
            // Hash collision with a different text: the newer entry replaces it.
            self.bytes.fetch_sub(entry_bytes(&old.text, &old.value), Ordering::Relaxed);
        }
        self.bytes.fetch_add(bytes, Ordering::Relaxed);
        value
    }
}

/// Returns the cached embedding of `text`, encoding and storing it on a miss.
pub fn get_or_encode(text: &str, enc: &TextEncoder<'_>, cache: &SemanticCache) -> Result<Arc<Tensor>> {
    let found = cache.fingerprint();
    if found != enc.fingerprint() {
        return Err(Error::StaleCache { expected: enc.fingerprint(), found });
    }
    let norm = normalize(text);
    let key = CacheKey::new(&norm, found);
    if let Some(v) = cache.lookup(key, &norm) {
        cache.hits.fetch_add(1, Ordering::Relaxed);
        return Ok(v);
    }
    cache.misses.fetch_add(1, Ordering::Relaxed);
    // Encoding happens outside any lock; duplicate misses converge in publish.
    let value = enc.encode(&norm)?;
    Ok(cache.publish(key, norm, value))
}

/// Class probabilities for one image, with text embeddings drawn from `cache`
/// when given and encoded afresh otherwise.
pub fn classify_image(
    image: &Tensor,
    class_texts: &[String],
    enc: &TextEncoder<'_>,
    cache: Option<&SemanticCache>,
    temperature: Temperature,
) -> Result<Vec<f64>> {
    if class_texts.is_empty() {
        return contract("classification needs at least one class text");
    }
    let fv = enc.params().embed_image(image)?;
    let d = fv.numel();
    let mut rows = Vec::with_capacity(class_texts.len() * d);
    for t in class_texts {
        match cache {
            Some(c) => rows.extend_from_slice(get_or_encode(t, enc, c)?.data()),
            None => rows.extend_from_slice(enc.encode(t)?.data()),
        }
    }
    classify(&fv, &Tensor::new(vec![class_texts.len(), d], rows)?, temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheBenchReport {
    pub cold_ips: f64,
    pub warm_ips: f64,
    pub speedup: f64,
    pub hits: u64,
    pub misses: u64,
    pub cold_hit_ratio: f64,
    pub warm_hit_ratio: f64,
}

fn ratio(hits: u64, misses: u64) -> f64 {
    if hits + misses == 0 {
        0.0
    } else {
        hits as f64 / (hits + misses) as f64
    }
}

/// Images-per-second of cache-backed classification, cold versus warm.
///
/// The cold pass clears the cache before every image, which is what a
/// pipeline without the cache pays. `repeats` warm passes then run over
/// the populated cache.
pub fn bench_cache(
    texts: &[String],
    images: &[Tensor],
    repeats: usize,
    enc: &TextEncoder<'_>,
    temperature: Temperature,
) -> Result<CacheBenchReport> {
    if texts.is_empty() || images.is_empty() || repeats == 0 {
        return contract("cache benchmark needs texts, images and at least one repeat");
    }
    let cache = SemanticCache::for_encoder(enc, None)?;
    let start = Instant::now();
    for im in images {
        cache.clear();
        classify_image(im, texts, enc, Some(&cache), temperature)?;
    }
    let cold_secs = start.elapsed().as_secs_f64();
    let cold = cache.stats();

    let start = Instant::now();
    for _ in 0..repeats {
        for im in images {
            classify_image(im, texts, enc, Some(&cache), temperature)?;
        }
    }
    let warm_secs = start.elapsed().as_secs_f64();
    let total = cache.stats();
    let (wh, wm) = (total.hits - cold.hits, total.misses - cold.misses);
    let cold_ips = images.len() as f64 / cold_secs.max(f64::MIN_POSITIVE);
    let warm_ips = (images.len() * repeats) as f64 / warm_secs.max(f64::MIN_POSITIVE);
    Ok(CacheBenchReport {
        cold_ips,
        warm_ips,
        speedup: warm_ips / cold_ips,
        hits: total.hits,
        misses: total.misses,
        cold_hit_ratio: ratio(cold.hits, cold.misses),
        warm_hit_ratio: ratio(wh, wm),
    })
}
