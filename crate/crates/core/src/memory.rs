//! Episodic buffer: embedding keys mapped to the best return observed from
//! each remembered state, plus desirability bookkeeping.
//!
//! Keys are compared in normalized space `y = (x - mu) / sigma`, with
//! per-dimension statistics refreshed every [`STATS_INTERVAL`] inserts and on
//! every re-keying. A record is "matched" when its normalized key lies
//! strictly closer than `delta` to the query.
//!
//! Eviction is least-recently-recalled: every record carries a
//! `last_recalled` stamp from a monotone clock, set at insertion and bumped on
//! every matched access.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::env::Trajectory;
use crate::error::{check_len, Error, Result};

/// Inserts between statistic refreshes.
pub const STATS_INTERVAL: usize = 1000;
const SIGMA_FLOOR: f64 = 1e-6;
/// Largest number of grid cells probed before a linear scan is cheaper.
const MAX_PROBE_CELLS: usize = 729;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodicRecord {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Best discounted return observed from this state.
    pub h: f64,
    pub state: Vec<f64>,
    /// Normalized episode timestep the state was observed at.
    pub t: f64,
    pub xi: bool,
    pub n_call: u64,
    pub n_xi: u64,
    pub last_recalled: u64,
    /// Insertion order; breaks nearest-neighbour ties.
    pub id: u64,
}

/// Fields returned by a successful recall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub h: f64,
    pub xi: bool,
    pub n_call: u64,
    pub n_xi: u64,
    pub distance: f64,
}

impl From<(&EpisodicRecord, f64)> for Recall {
    fn from((r, distance): (&EpisodicRecord, f64)) -> Self {
        Recall {
            h: r.h,
            xi: r.xi,
            n_call: r.n_call,
            n_xi: r.n_xi,
            distance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DeltaPolicy {
    Fixed(f64),
    /// Coverage rule evaluated with `sigma_y = 1` at the buffer capacity.
    Auto,
}

impl DeltaPolicy {
    pub fn resolve(self, capacity: usize, embed_dim: usize) -> f64 {
        match self {
            DeltaPolicy::Fixed(d) => d,
            DeltaPolicy::Auto => compute_delta(capacity, embed_dim, 1.0),
        }
    }
}

impl std::str::FromStr for DeltaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(DeltaPolicy::Auto);
        }
        match s.parse::<f64>() {
            Ok(d) if d > 0.0 && d.is_finite() => Ok(DeltaPolicy::Fixed(d)),
            _ => Err(Error::InvalidConfig(format!("delta must be `auto` or a positive number, got `{s}`"))),
        }
    }
}

/// Largest threshold whose `3 sigma` hypercube, split into `capacity` cells,
/// still covers the normalized key distribution: `(6 sigma_y)^k / M`.
pub fn compute_delta(capacity: usize, embed_dim: usize, sigma_y: f64) -> f64 {
    (6.0 * sigma_y).powi(embed_dim as i32) / capacity as f64
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Uniform hash grid over normalized keys.
#[derive(Clone, Debug, Default)]
struct GridIndex {
    cell: f64,
    buckets: HashMap<u64, Vec<usize>>,
}

impl GridIndex {
    fn coords(&self, y: &[f64]) -> Vec<i64> {
        y.iter().map(|v| (v / self.cell).floor() as i64).collect()
    }

    fn hash(coords: &[i64]) -> u64 {
        coords.iter().fold(0x9E37_79B9_7F4A_7C15u64, |h, &c| {
            let mut z = h ^ (c as u64).wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        })
    }

    fn key(&self, y: &[f64]) -> u64 {
        Self::hash(&self.coords(y))
    }

    fn insert(&mut self, y: &[f64], slot: usize) {
        self.buckets.entry(self.key(y)).or_default().push(slot);
    }

    fn remove(&mut self, y: &[f64], slot: usize) {
        let key = self.key(y);
        if let Some(bucket) = self.buckets.get_mut(&key) {
            if let Some(pos) = bucket.iter().position(|&s| s == slot) {
                bucket.swap_remove(pos);
            }
            if bucket.is_empty() {
                self.buckets.remove(&key);
            }
        }
    }

    fn relabel(&mut self, y: &[f64], from: usize, to: usize) {
        if let Some(bucket) = self.buckets.get_mut(&self.key(y)) {
            if let Some(s) = bucket.iter_mut().find(|s| **s == from) {
                *s = to;
            }
        }
    }

    /// Calls `visit` for every slot in cells within `radius` cells of `y`.
    fn for_each_near(&self, y: &[f64], radius: i64, mut visit: impl FnMut(usize)) {
        let center = self.coords(y);
        let k = center.len();
        let mut offset = vec![-radius; k];
        let mut probe = vec![0i64; k];
        loop {
            for i in 0..k {
                probe[i] = center[i] + offset[i];
            }
            if let Some(bucket) = self.buckets.get(&Self::hash(&probe)) {
                bucket.iter().copied().for_each(&mut visit);
            }
            let mut i = 0;
            loop {
                if i == k {
                    return;
                }
                offset[i] += 1;
                if offset[i] <= radius {
                    break;
                }
                offset[i] = -radius;
                i += 1;
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    capacity: usize,
    embed_dim: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    clock: u64,
    next_id: u64,
    inserts_since_stats: usize,
    index_cell: f64,
    records: Vec<EpisodicRecord>,
}

/// Bounded key-value store of episodic memories.
#[derive(Clone, Debug)]
pub struct EpisodicBuffer {
    records: Vec<EpisodicRecord>,
    capacity: usize,
    embed_dim: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    clock: u64,
    next_id: u64,
    inserts_since_stats: usize,
    lru: BTreeMap<u64, usize>,
    index: GridIndex,
}

impl EpisodicBuffer {
    /// `index_cell` sets the grid resolution of the lookup index; the
    /// matching threshold in use is a good choice.
    pub fn new(capacity: usize, embed_dim: usize, index_cell: f64) -> Result<Self> {
        if capacity == 0 || embed_dim == 0 {
            return Err(Error::InvalidConfig("buffer capacity and key size must be positive".into()));
        }
        if !(index_cell > 0.0 && index_cell.is_finite()) {
            return Err(Error::InvalidConfig("index cell size must be positive".into()));
        }
        Ok(Self {
            records: Vec::new(),
            capacity,
            embed_dim,
            mean: vec![0.0; embed_dim],
            std: vec![1.0; embed_dim],
            clock: 0,
            next_id: 0,
            inserts_since_stats: 0,
            lru: BTreeMap::new(),
            index: GridIndex {
                cell: index_cell,
                buckets: HashMap::new(),
            },
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn records(&self) -> &[EpisodicRecord] {
        &self.records
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Overrides the normalization statistics and re-normalizes every key.
    pub fn set_stats(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        check_len("buffer mean", self.embed_dim, mean.len())?;
        check_len("buffer std", self.embed_dim, std.len())?;
        self.mean = mean;
        self.std = std.into_iter().map(|s| s.max(SIGMA_FLOOR)).collect();
        self.renormalize();
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    /// Exact nearest neighbour of `y` by linear scan: `(slot, distance)`.
    pub fn nearest_neighbor(&self, y: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (slot, r) in self.records.iter().enumerate() {
            let d = squared_distance(&r.y, y);
            best = match best {
                Some((b, bd)) if bd < d || (bd == d && self.records[b].id < r.id) => Some((b, bd)),
                _ => Some((slot, d)),
            };
        }
        best.map(|(slot, d)| (slot, d.sqrt()))
    }

    /// Nearest neighbour of `y` if it lies strictly within `delta`.
    ///
    /// Equivalent to filtering [`Self::nearest_neighbor`] by distance, but
    /// probes only the grid cells that can hold a match.
    pub fn nearest_within(&self, y: &[f64], delta: f64) -> Option<(usize, f64)> {
        let radius = (delta / self.index.cell).ceil().max(1.0);
        let cells = (2.0 * radius + 1.0).powi(self.embed_dim as i32);
        if !cells.is_finite() || cells > MAX_PROBE_CELLS as f64 || cells >= self.records.len() as f64 {
            return self.nearest_neighbor(y).filter(|&(_, d)| d < delta);
        }
        let limit = delta * delta;
        let mut best: Option<(usize, f64)> = None;
        self.index.for_each_near(y, radius as i64, |slot| {
            let r = &self.records[slot];
            let d = squared_distance(&r.y, y);
            if d >= limit {
                return;
            }
            best = match best {
                Some((b, bd)) if bd < d || (bd == d && self.records[b].id < r.id) => Some((b, bd)),
                _ => Some((slot, d)),
            };
        });
        best.map(|(slot, d)| (slot, d.sqrt()))
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn touch(&mut self, slot: usize) {
        let stamp = self.tick();
        let r = &mut self.records[slot];
        self.lru.remove(&r.last_recalled);
        r.last_recalled = stamp;
        self.lru.insert(stamp, slot);
    }

    fn insert(&mut self, x: Vec<f64>, state: Vec<f64>, t: f64, h: f64, xi: bool) {
        let y = self.normalize(&x);
        let stamp = self.tick();
        let slot = self.records.len();
        self.index.insert(&y, slot);
        self.lru.insert(stamp, slot);
        self.records.push(EpisodicRecord {
            x,
            y,
            h,
            state,
            t,
            xi,
            n_call: 1,
            n_xi: u64::from(xi),
            last_recalled: stamp,
            id: self.next_id,
        });
        self.next_id += 1;
        self.evict_if_full();
        self.inserts_since_stats += 1;
        if self.inserts_since_stats >= STATS_INTERVAL {
            self.refresh_stats();
        }
    }

    /// Drops least-recently-recalled records until the buffer fits its capacity.
    pub fn evict_if_full(&mut self) {
        while self.records.len() > self.capacity {
            let (_, slot) = self.lru.pop_first().expect("lru tracks every record");
            self.remove_slot(slot);
        }
    }

    fn remove_slot(&mut self, slot: usize) {
        let last = self.records.len() - 1;
        self.index.remove(&self.records[slot].y, slot);
        if slot != last {
            let moved = &self.records[last];
            self.index.relabel(&moved.y, last, slot);
            self.lru.insert(moved.last_recalled, slot);
        }
        self.records.swap_remove(slot);
    }

    /// Classic episodic-control update: raise the matched record's return to
    /// `max(H, R)`, or insert a new undesirable record.
    pub fn ec_update(&mut self, x: &[f64], state: &[f64], t: f64, ret: f64, delta: f64) -> Result<()> {
        check_len("memory key", self.embed_dim, x.len())?;
        if !ret.is_finite() {
            return Err(Error::NonFinite("episodic return"));
        }
        let y = self.normalize(x);
        match self.nearest_within(&y, delta) {
            Some((slot, _)) => {
                self.touch(slot);
                let r = &mut self.records[slot];
                r.n_call += 1;
                r.h = r.h.max(ret);
            }
            None => self.insert(x.to_vec(), state.to_vec(), t, ret, false),
        }
        Ok(())
    }

    /// Writes an episode into memory, newest state first, tracking the
    /// discounted return-to-go.
    ///
    /// Matched records count the visit (and a desirable visit when the episode
    /// was desirable). An undesirable record matched by a desirable episode
    /// becomes desirable and is moved onto the new key, state and return;
    /// otherwise the stored return is raised to the running maximum.
    pub fn construct_from_trajectory(
        &mut self,
        trajectory: &Trajectory,
        desirable: bool,
        delta: f64,
        gamma: f64,
        embedder: &Embedder,
    ) -> Result<()> {
        let n = trajectory.len();
        if n == 0 {
            return Ok(());
        }
        let states = Array2::from_shape_fn((n, embedder.state_dim()), |(i, j)| trajectory.states[i][j]);
        let times: Vec<f64> = (0..n).map(|i| trajectory.time_feature(i)).collect();
        let keys = embedder.embed_batch(states.view(), &times)?;
        let mut ret = 0.0;
        for i in (0..n).rev() {
            ret = trajectory.transitions[i].reward + gamma * ret;
            let x = keys.row(i).to_vec();
            let y = self.normalize(&x);
            match self.nearest_within(&y, delta) {
                Some((slot, _)) => {
                    self.touch(slot);
                    let old_y = self.records[slot].y.clone();
                    let r = &mut self.records[slot];
                    r.n_call += 1;
                    if desirable {
                        r.n_xi += 1;
                    }
                    if !r.xi && desirable {
                        r.xi = true;
                        r.x = x;
                        r.y = y;
                        r.state = trajectory.states[i].clone();
                        r.t = times[i];
                        r.h = ret;
                        let new_y = r.y.clone();
                        self.index.remove(&old_y, slot);
                        self.index.insert(&new_y, slot);
                    } else if r.h < ret {
                        r.h = ret;
                    }
                }
                None => self.insert(x, trajectory.states[i].clone(), times[i], ret, desirable),
            }
        }
        Ok(())
    }

    /// Looks up the memory matched by key `x`, refreshing its recency stamp.
    pub fn recall_key(&mut self, x: &[f64], delta: f64) -> Option<Recall> {
        let y = self.normalize(x);
        let (slot, d) = self.nearest_within(&y, delta)?;
        self.touch(slot);
        Some(Recall::from((&self.records[slot], d)))
    }

    /// Embeds `state` at normalized time `t` and recalls its memory.
    pub fn recall(&mut self, state: &[f64], t: f64, embedder: &Embedder, delta: f64) -> Result<Option<Recall>> {
        let x = embedder.embed(state, t)?;
        Ok(self.recall_key(&x, delta))
    }

    /// Recomputes every key with `embedder`, then the statistics and the
    /// normalized keys.
    pub fn rekey_all(&mut self, embedder: &Embedder) -> Result<()> {
        check_len("embedder output", self.embed_dim, embedder.embed_dim())?;
        if !self.records.is_empty() {
            let states = Array2::from_shape_fn((self.records.len(), embedder.state_dim()), |(i, j)| {
                self.records[i].state[j]
            });
            let times: Vec<f64> = self.records.iter().map(|r| r.t).collect();
            let keys = embedder.embed_batch(states.view(), &times)?;
            for (r, key) in self.records.iter_mut().zip(keys.outer_iter()) {
                r.x = key.to_vec();
            }
        }
        self.refresh_stats();
        Ok(())
    }

    /// Population mean and standard deviation of the raw keys, followed by
    /// re-normalization.
    pub fn refresh_stats(&mut self) {
        self.inserts_since_stats = 0;
        if self.records.is_empty() {
            return;
        }
        let n = self.records.len() as f64;
        for d in 0..self.embed_dim {
            let mean = self.records.iter().map(|r| r.x[d]).sum::<f64>() / n;
            let var = self.records.iter().map(|r| (r.x[d] - mean).powi(2)).sum::<f64>() / n;
            self.mean[d] = mean;
            self.std[d] = var.sqrt().max(SIGMA_FLOOR);
        }
        self.renormalize();
    }

    fn renormalize(&mut self) {
        for i in 0..self.records.len() {
            let y = self.normalize(&self.records[i].x);
            self.records[i].y = y;
        }
        self.rebuild_index();
    }

    fn rebuild_index(&mut self) {
        self.index.buckets.clear();
        for (slot, r) in self.records.iter().enumerate() {
            self.index.insert(&r.y, slot);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let snapshot = Snapshot {
            capacity: self.capacity,
            embed_dim: self.embed_dim,
            mean: self.mean.clone(),
            std: self.std.clone(),
            clock: self.clock,
            next_id: self.next_id,
            inserts_since_stats: self.inserts_since_stats,
            index_cell: self.index.cell,
            records: self.records.clone(),
        };
        bincode::serialize_into(BufWriter::new(File::create(path)?), &snapshot)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let snap: Snapshot = bincode::deserialize_from(BufReader::new(File::open(path)?))?;
        let mut buffer = Self::new(snap.capacity, snap.embed_dim, snap.index_cell)?;
        buffer.mean = snap.mean;
        buffer.std = snap.std;
        buffer.clock = snap.clock;
        buffer.next_id = snap.next_id;
        buffer.inserts_since_stats = snap.inserts_since_stats;
        buffer.records = snap.records;
        buffer.lru = buffer
            .records
            .iter()
            .enumerate()
            .map(|(slot, r)| (r.last_recalled, slot))
            .collect();
        buffer.rebuild_index();
        Ok(buffer)
    }
}
