//! Per-layer key/value caches and the memory accounting behind the hybrid
//! layout's cache savings.
//!
//! Sliding-window layers keep a ring buffer of the last `W` positions; global
//! layers keep everything. Keys are stored after RoPE (absolute positions) so
//! gathering never re-rotates.

use std::fmt;

use thiserror::Error;

use crate::config::{build_layout, ModelConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("non-contiguous position: expected {expected}, got {got}")]
    NonContiguous { expected: usize, got: usize },
    #[error("query position {query} precedes newest cached position {newest}")]
    QueryBeforeNewest { query: usize, newest: usize },
    #[error("global cache must start at position 0, got {0}")]
    GlobalStart(usize),
    #[error("entry width mismatch: expected key {key}/value {value}")]
    Width { key: usize, value: usize },
}

/// One cached token: flat key (`kv_heads × head_dim_qk`) and value
/// (`kv_heads × head_dim_v`) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// Fixed-capacity ring buffer for a sliding-window layer.
///
/// The first append may start at any position (draft heads begin past 0);
/// after that positions must be consecutive.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowKvCache {
    capacity: usize,
    slots: Vec<KvEntry>,
    next_write: usize,
}

impl WindowKvCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be at least 1");
        Self {
            capacity,
            slots: Vec::with_capacity(capacity),
            next_write: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn newest_position(&self) -> Option<usize> {
        let n = self.slots.len();
        if n == 0 {
            return None;
        }
        let idx = if n < self.capacity {
            n - 1
        } else {
            (self.next_write + n - 1) % n
        };
        Some(self.slots[idx].position)
    }

    /// Stored entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &KvEntry> {
        let n = self.slots.len();
        let start = if n < self.capacity { 0 } else { self.next_write };
        (0..n).map(move |i| &self.slots[(start + i) % n])
    }

    pub fn positions(&self) -> Vec<usize> {
        self.iter().map(|e| e.position).collect()
    }

    pub fn append(&mut self, entry: KvEntry) -> Result<(), CacheError> {
        if let Some(newest) = self.newest_position() {
            if entry.position != newest + 1 {
                return Err(CacheError::NonContiguous {
                    expected: newest + 1,
                    got: entry.position,
                });
            }
        }
        if self.slots.len() < self.capacity {
            self.slots.push(entry);
            self.next_write = self.slots.len() % self.capacity;
        } else {
            self.slots[self.next_write] = entry;
            self.next_write = (self.next_write + 1) % self.capacity;
        }
        Ok(())
    }

    /// Entries inside the window of `query_position`, ascending by position.
    pub fn gather(&self, query_position: usize) -> Result<Vec<&KvEntry>, CacheError> {
        if let Some(newest) = self.newest_position() {
            if query_position < newest {
                return Err(CacheError::QueryBeforeNewest {
                    query: query_position,
                    newest,
                });
            }
        }
        let range = crate::attention::swa_window(query_position, self.capacity);
        Ok(self.iter().filter(|e| range.contains(&e.position)).collect())
    }
}

/// Append-only cache for a global-attention layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalKvCache {
    entries: Vec<KvEntry>,
}

impl GlobalKvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest_position(&self) -> Option<usize> {
        self.entries.last().map(|e| e.position)
    }

    pub fn append(&mut self, entry: KvEntry) -> Result<(), CacheError> {
        let expected = self.entries.len();
        if entry.position != expected {
            return Err(if expected == 0 {
                CacheError::GlobalStart(entry.position)
            } else {
                CacheError::NonContiguous {
                    expected,
                    got: entry.position,
                }
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn gather(&self, query_position: usize) -> Result<Vec<&KvEntry>, CacheError> {
        if let Some(newest) = self.newest_position() {
            if query_position < newest {
                return Err(CacheError::QueryBeforeNewest {
                    query: query_position,
                    newest,
                });
            }
        }
        Ok(self.entries.iter().collect())
    }

    /// Drops every entry at or after `position`.
    pub fn truncate(&mut self, position: usize) {
        self.entries.truncate(position);
    }
}

/// Cache attached to one layer, chosen by the layer's attention kind.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Window(WindowKvCache),
    Global(GlobalKvCache),
}

impl LayerCache {
    pub fn append(&mut self, entry: KvEntry) -> Result<(), CacheError> {
        match self {
            LayerCache::Window(c) => c.append(entry),
            LayerCache::Global(c) => c.append(entry),
        }
    }

    pub fn gather(&self, query_position: usize) -> Result<Vec<&KvEntry>, CacheError> {
        match self {
            LayerCache::Window(c) => c.gather(query_position),
            LayerCache::Global(c) => c.gather(query_position),
        }
    }

    pub fn newest_position(&self) -> Option<usize> {
        match self {
            LayerCache::Window(c) => c.newest_position(),
            LayerCache::Global(c) => c.newest_position(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LayerCache::Window(c) => c.len(),
            LayerCache::Global(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-kind breakdown of the cache footprint at one sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct KindUsage {
    pub layers: usize,
    pub entries_per_layer: usize,
    pub kv_heads: usize,
    pub bytes: u128,
}

/// Cache footprint of the hybrid layout versus an all-global baseline.
///
/// Two baselines are reported. The layer-normalized one gives every layer the
/// same per-token width (limit `num_layers / global_layers`). The byte-exact one keeps each layer's
/// real kv-head count (limit is larger because SWA layers carry 8 kv heads
/// against 4 in global layers).
#[derive(Debug, Clone, PartialEq)]
pub struct CacheReport {
    pub seq_len: usize,
    pub window: usize,
    pub bytes_per_scalar: usize,
    pub swa: KindUsage,
    pub ga: KindUsage,
    pub hybrid_bytes: u128,
    pub baseline_bytes: u128,
    /// `baseline_bytes / hybrid_bytes` at this sequence length.
    pub byte_exact_ratio: f64,
    /// `L → ∞` limit of `byte_exact_ratio`.
    pub byte_exact_limit: f64,
    /// Equal-width ratio `num_layers·L / (GA·L + SWA·min(L, W))`.
    pub layer_normalized_ratio: f64,
    /// `num_layers / GA` limit of `layer_normalized_ratio`.
    pub layer_normalized_limit: f64,
}

impl fmt::Display for CacheReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<(&str, String)> = vec![
            ("seq_len", self.seq_len.to_string()),
            ("window", self.window.to_string()),
            ("bytes_per_scalar", self.bytes_per_scalar.to_string()),
            ("swa_layers", self.swa.layers.to_string()),
            ("swa_entries_per_layer", self.swa.entries_per_layer.to_string()),
            ("swa_kv_heads", self.swa.kv_heads.to_string()),
            ("swa_bytes", self.swa.bytes.to_string()),
            ("ga_layers", self.ga.layers.to_string()),
            ("ga_entries_per_layer", self.ga.entries_per_layer.to_string()),
            ("ga_kv_heads", self.ga.kv_heads.to_string()),
            ("ga_bytes", self.ga.bytes.to_string()),
            ("hybrid_bytes", self.hybrid_bytes.to_string()),
            ("baseline_bytes", self.baseline_bytes.to_string()),
            ("byte_exact_ratio", format!("{:.6}", self.byte_exact_ratio)),
            ("byte_exact_limit", format!("{:.6}", self.byte_exact_limit)),
            ("layer_normalized_ratio", format!("{:.6}", self.layer_normalized_ratio)),
            ("layer_normalized_limit", format!("{:.6}", self.layer_normalized_limit)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<width$} = {v}")?;
        }
        Ok(())
    }
}

/// Cache bytes for the config's layout at sequence length `seq_len`.
pub fn memory_report(config: &ModelConfig, seq_len: usize, bytes_per_scalar: usize) -> CacheReport {
    assert!(seq_len >= 1, "seq_len must be at least 1");
    let layout = build_layout(config);
    let ga_layers = layout.iter().filter(|k| k.is_global()).count();
    let swa_layers = layout.len() - ga_layers;
    let width = (config.head_dim_qk + config.head_dim_v) as u128 * bytes_per_scalar as u128;
    let swa_entries = seq_len.min(config.window);
    let swa = KindUsage {
        layers: swa_layers,
        entries_per_layer: swa_entries,
        kv_heads: config.swa_kv_heads,
        bytes: swa_layers as u128 * swa_entries as u128 * config.swa_kv_heads as u128 * width,
    };
    let ga = KindUsage {
        layers: ga_layers,
        entries_per_layer: seq_len,
        kv_heads: config.ga_kv_heads,
        bytes: ga_layers as u128 * seq_len as u128 * config.ga_kv_heads as u128 * width,
    };
    let hybrid_bytes = swa.bytes + ga.bytes;
    let baseline_bytes = seq_len as u128
        * width
        * (swa_layers as u128 * config.swa_kv_heads as u128
            + ga_layers as u128 * config.ga_kv_heads as u128);
    let ga_width = (ga_layers * config.ga_kv_heads) as f64;
    let swa_width = (swa_layers * config.swa_kv_heads) as f64;
    let num_layers = layout.len() as f64;
    let l = seq_len as f64;
    CacheReport {
        seq_len,
        window: config.window,
        bytes_per_scalar,
        byte_exact_ratio: baseline_bytes as f64 / hybrid_bytes as f64,
        byte_exact_limit: (ga_width + swa_width) / ga_width,
        layer_normalized_ratio: num_layers * l
            / (ga_layers as f64 * l + swa_layers as f64 * swa_entries as f64),
        layer_normalized_limit: num_layers / ga_layers as f64,
        swa,
        ga,
        hybrid_bytes,
        baseline_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(p: usize) -> KvEntry {
        KvEntry {
            position: p,
            key: vec![p as f64],
            value: vec![-(p as f64)],
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut c = WindowKvCache::new(4);
        for p in 0..6 {
            c.append(entry(p)).unwrap();
        }
        assert_eq!(c.positions(), vec![2, 3, 4, 5]);
        let got: Vec<usize> = c.gather(5).unwrap().iter().map(|e| e.position).collect();
        assert_eq!(got, vec![2, 3, 4, 5]);
        // A future query sees only the overlap with its own window.
        let got: Vec<usize> = c.gather(7).unwrap().iter().map(|e| e.position).collect();
        assert_eq!(got, vec![4, 5]);
    }

    #[test]
    fn ring_under_capacity() {
        let mut c = WindowKvCache::new(4);
        for p in 0..4 {
            c.append(entry(p)).unwrap();
        }
        assert_eq!(c.positions(), vec![0, 1, 2, 3]);
        assert_eq!(c.len(), 4);
    }

    #[test]
    fn non_contiguous_rejected() {
        let mut c = WindowKvCache::new(4);
        for p in 0..6 {
            c.append(entry(p)).unwrap();
        }
        assert_eq!(
            c.append(entry(7)),
            Err(CacheError::NonContiguous { expected: 6, got: 7 })
        );
        let mut g = GlobalKvCache::new();
        assert_eq!(g.append(entry(1)), Err(CacheError::GlobalStart(1)));
        g.append(entry(0)).unwrap();
        assert!(g.append(entry(2)).is_err());
    }

    #[test]
    fn global_gather_and_errors() {
        let mut g = GlobalKvCache::new();
        for p in 0..6 {
            g.append(entry(p)).unwrap();
        }
        let got: Vec<usize> = g.gather(5).unwrap().iter().map(|e| e.position).collect();
        assert_eq!(got, (0..6).collect::<Vec<_>>());
        assert!(matches!(g.gather(3), Err(CacheError::QueryBeforeNewest { .. })));
        g.truncate(3);
        assert_eq!(g.newest_position(), Some(2));
    }

    #[test]
    fn window_may_start_late() {
        let mut c = WindowKvCache::new(3);
        c.append(entry(5)).unwrap();
        c.append(entry(6)).unwrap();
        assert_eq!(c.positions(), vec![5, 6]);
    }

    #[test]
    fn report_equal_window_is_unity() {
        let mut cfg = ModelConfig::paper();
        cfg.ga_kv_heads = cfg.swa_kv_heads;
        let r = memory_report(&cfg, cfg.window, 2);
        assert_eq!(r.layer_normalized_ratio, 1.0);
        assert_eq!(r.byte_exact_ratio, 1.0);
    }

    #[test]
    fn report_tiny_arithmetic() {
        // tiny: 12 layers, 3 global, 9 sliding, W = 8
        let cfg = ModelConfig::tiny();
        let r = memory_report(&cfg, 1024, 2);
        let expected = (12.0 * 1024.0) / (3.0 * 1024.0 + 9.0 * 8.0);
        assert!((r.layer_normalized_ratio - expected).abs() < 1e-12);
        assert_eq!(r.hybrid_bytes, r.swa.bytes + r.ga.bytes);
        assert_eq!(r.swa.bytes, 9 * 8 * 2 * 40 * 2);
        assert_eq!(r.ga.bytes, 3 * 1024 * 40 * 2);
    }

    proptest! {
        #[test]
        fn ring_positions_stay_contiguous(cap in 1usize..12, start in 0usize..20, n in 0usize..60) {
            let mut c = WindowKvCache::new(cap);
            for p in start..start + n {
                c.append(entry(p)).unwrap();
                let ps = c.positions();
                let seen = p - start + 1;
                prop_assert_eq!(ps.len(), seen.min(cap));
                prop_assert_eq!(*ps.last().unwrap(), p);
                prop_assert!(ps.windows(2).all(|w| w[1] == w[0] + 1));
            }
        }

        #[test]
        fn report_monotone_in_length(l in 1usize..5000) {
            let cfg = ModelConfig::paper();
            let a = memory_report(&cfg, l, 2);
            let b = memory_report(&cfg, l + 1, 2);
            prop_assert!(b.hybrid_bytes >= a.hybrid_bytes);
            prop_assert!(b.baseline_bytes >= a.baseline_bytes);
            prop_assert!(b.layer_normalized_ratio >= a.layer_normalized_ratio);
            prop_assert!(b.byte_exact_ratio >= a.byte_exact_ratio);
            prop_assert!(b.layer_normalized_ratio <= a.layer_normalized_limit);
        }
    }
}
