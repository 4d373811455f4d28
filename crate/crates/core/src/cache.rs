//! Decay-based hotness for clusters kept in the fast tier between batches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ivf::ClusterId;
use crate::tiered::TieredStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotnessParams {
    pub h_init: f64,
    pub h_inc: f64,
    /// Divisor applied every round; must exceed 1.
    pub decay: f64,
    /// Share of fast-tier capacity that cached clusters may keep after a batch.
    pub cache_fraction: f64,
}

impl Default for HotnessParams {
    fn default() -> Self {
        HotnessParams { h_init: 1.0, h_inc: 1.0, decay: 2.0, cache_fraction: 0.5 }
    }
}

/// One round of the hotness law: `h / d`, plus `h_inc` when used.
#[inline]
pub fn next_hotness(h: f64, used: bool, decay: f64, h_inc: f64) -> f64 {
    if used {
        h / decay + h_inc
    } else {
        h / decay
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HotnessTable {
    params: HotnessParams,
    hot: BTreeMap<ClusterId, f64>,
}

impl HotnessTable {
    pub fn new(params: HotnessParams) -> Self {
        HotnessTable { params, hot: BTreeMap::new() }
    }

    pub fn params(&self) -> &HotnessParams {
        &self.params
    }

    pub fn get(&self, c: ClusterId) -> Option<f64> {
        self.hot.get(&c).copied()
    }

    pub fn len(&self) -> usize {
        self.hot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hot.is_empty()
    }

    /// A newly resident cluster starts at `h_init`; a re-fetch resets it.
    pub fn on_fetch(&mut self, c: ClusterId) {
        self.hot.insert(c, self.params.h_init);
    }

    pub fn forget(&mut self, c: ClusterId) {
        self.hot.remove(&c);
    }

    pub fn clear(&mut self) {
        self.hot.clear();
    }

    pub fn end_of_round(&mut self, used: &BTreeSet<ClusterId>) {
        let HotnessParams { decay, h_inc, .. } = self.params;
        for (c, h) in self.hot.iter_mut() {
            *h = next_hotness(*h, used.contains(c), decay, h_inc);
        }
    }

    /// `(cluster, hotness)` in ascending cluster order.
    pub fn snapshot(&self) -> Vec<(ClusterId, f64)> {
        self.hot.iter().map(|(&c, &h)| (c, h)).collect()
    }

    pub fn cache_limit_bytes(&self, capacity_bytes: u64) -> u64 {
        (self.params.cache_fraction * capacity_bytes as f64).floor() as u64
    }

    /// Turns the batch's prefetched clusters into cached ones, then evicts the
    /// coldest (ties by ascending id) until the cache fits its fraction.
    pub fn evict_to_fraction(&mut self, store: &mut TieredStore) -> Vec<ClusterId> {
        store.demote_prefetched();
        let limit = self.cache_limit_bytes(store.capacity_bytes());
        let mut evicted = Vec::new();
        if store.used_bytes() <= limit {
            return evicted;
        }
        let mut order: Vec<(f64, ClusterId)> = store
            .iter()
            .map(|(c, _)| (self.hot.get(&c).copied().unwrap_or(0.0), c))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, c) in order {
            if store.used_bytes() <= limit {
                break;
            }
            store.remove(c);
            self.hot.remove(&c);
            evicted.push(c);
        }
        evicted
    }
}
