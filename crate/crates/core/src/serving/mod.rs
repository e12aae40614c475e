//! Nearline serving simulator: minute-bucketed ingestion, incremental
//! inference on cached attention state, and U2I lookups that never wait on
//! inference.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Event;
use crate::generator::{generate, GenConfig, GenerationResult, PromptState};
use crate::index::{PrefixIndex, U2iIndex};
use crate::seqmodel::model::{GenRecModel, InputRow};
use crate::seqmodel::transformer::KvCache;
use crate::tokenizer::{ItemEmbeddings, SidTable, Task};
use crate::{ItemId, UserId};

pub fn minute_of(timestamp: u64) -> u64 {
    timestamp / 60
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    /// `(user, minute)` → events in arrival order.
    pub buckets: BTreeMap<(UserId, u64), Vec<Event>>,
    /// Events whose timestamp went backwards for their user.
    pub rejected: usize,
}

impl Ingested {
    /// Buckets of one user in minute order.
    pub fn user_buckets(&self, user: UserId) -> impl Iterator<Item = (u64, &Vec<Event>)> {
        self.buckets.range((user, 0)..=(user, u64::MAX)).map(|(&(_, m), v)| (m, v))
    }

    pub fn users(&self) -> Vec<UserId> {
        let mut u: Vec<UserId> = self.buckets.keys().map(|k| k.0).collect();
        u.dedup();
        u
    }
}

/// Groups a replay stream by `(user, floor(timestamp / 60))`.
pub fn ingest<I: IntoIterator<Item = Event>>(events: I) -> Ingested {
    let mut out = Ingested::default();
    let mut last: HashMap<UserId, u64> = HashMap::new();
    for e in events {
        if last.get(&e.user).is_some_and(|&t| e.timestamp < t) {
            out.rejected += 1;
            continue;
        }
        last.insert(e.user, e.timestamp);
        out.buckets.entry((e.user, minute_of(e.timestamp))).or_default().push(e);
    }
    if out.rejected > 0 {
        log::warn!("rejected {} out-of-order events", out.rejected);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServingConfig {
    /// Most recent items kept in the prompt.
    pub history_window: usize,
    pub task: Task,
    pub gen: GenConfig,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            history_window: 50,
            task: Task::JustForYou,
            gen: GenConfig::default(),
        }
    }
}

/// Shared read-only inference inputs.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub model: &'a GenRecModel,
    pub items: &'a ItemEmbeddings,
    pub sids: &'a SidTable,
    pub index: &'a PrefixIndex,
}

#[derive(Clone, Debug)]
pub struct UserSession {
    pub user: UserId,
    pub profile: [u8; 3],
    pub history: VecDeque<ItemId>,
    /// Materialized context rows (BOS, profile, history).
    pub rows: Vec<InputRow>,
    pub cache: KvCache,
    pub last_minute: Option<u64>,
    pub last_result: Option<GenerationResult>,
    pub rebuilds: usize,
}

impl UserSession {
    pub fn new(engine: &Engine, user: UserId, profile: [u8; 3], history: &[ItemId], config: &ServingConfig) -> Result<Self> {
        let need = longest_prompt(engine.model, config.history_window);
        let max = engine.model.config.transformer.max_len;
        if need > max {
            return Err(Error::SequenceTooLong { len: need, max });
        }
        let start = history.len().saturating_sub(config.history_window);
        let mut s = Self {
            user,
            profile,
            history: history[start..].iter().copied().collect(),
            rows: Vec::new(),
            cache: engine.model.new_cache(),
            last_minute: None,
            last_result: None,
            rebuilds: 0,
        };
        s.rebuild(engine)?;
        s.rebuilds = 0;
        Ok(s)
    }

    /// Recomputes rows and cache from the current history.
    fn rebuild(&mut self, engine: &Engine) -> Result<()> {
        let hist: Vec<ItemId> = self.history.iter().copied().collect();
        self.rows = engine.model.context_rows(engine.sids, self.profile, &hist)?;
        self.cache = engine.model.new_cache();
        engine.model.extend(engine.items, &self.rows, &mut self.cache)?;
        self.rebuilds += 1;
        Ok(())
    }

    pub fn is_consistent(&self) -> bool {
        self.cache.len() == self.rows.len()
    }

    /// Appends `new_events`, then runs full generation on the updated state.
    /// History beyond the window evicts the oldest items and rebuilds the
    /// cache from the truncated history.
    pub fn incremental_infer(&mut self, engine: &Engine, new_events: &[Event], config: &ServingConfig) -> Result<GenerationResult> {
        if !self.is_consistent() {
            log::warn!("user {}: cache holds {} positions for {} rows; rebuilding", self.user, self.cache.len(), self.rows.len());
            self.rebuild(engine)?;
        }
        if new_events.is_empty() {
            if let Some(r) = &self.last_result {
                return Ok(r.clone());
            }
        }
        let mut appended = Vec::new();
        for e in new_events {
            if e.user != self.user {
                return Err(Error::invalid(format!("event for user {} sent to session {}", e.user, self.user)));
            }
            self.history.push_back(e.item);
            appended.extend(engine.model.history_rows(engine.sids, e.item)?);
        }
        if self.history.len() > config.history_window {
            while self.history.len() > config.history_window {
                self.history.pop_front();
            }
            self.rebuild(engine)?;
        } else if !appended.is_empty() {
            engine.model.extend(engine.items, &appended, &mut self.cache)?;
            self.rows.extend(appended);
        }
        if let Some(e) = new_events.last() {
            self.last_minute = Some(minute_of(e.timestamp));
        }
        let result = infer_from_cache(engine, &self.cache, config)?;
        self.last_result = Some(result.clone());
        Ok(result)
    }
}

/// Positions used by a full window: profile, history, instruction, prefix, QUERY.
pub fn longest_prompt(model: &GenRecModel, window: usize) -> usize {
    let l = model.prefix_len();
    4 + window * (l + 1) + 2 + l + 1
}

fn infer_from_cache(engine: &Engine, context: &KvCache, config: &ServingConfig) -> Result<GenerationResult> {
    let instruction = engine.model.instruction_rows(config.task, None)?;
    let state = PromptState::extend(engine.model, engine.items, context, &instruction)?;
    generate(engine.model, engine.items, engine.index, &state, &config.gen)
}

/// Generation from scratch on `history` (truncated to the window).
pub fn cold_infer(engine: &Engine, profile: [u8; 3], history: &[ItemId], config: &ServingConfig) -> Result<GenerationResult> {
    let start = history.len().saturating_sub(config.history_window);
    let mut rows = engine.model.context_rows(engine.sids, profile, &history[start..])?;
    rows.extend(engine.model.instruction_rows(config.task, None)?);
    let state = PromptState::from_rows(engine.model, engine.items, &rows)?;
    generate(engine.model, engine.items, engine.index, &state, &config.gen)
}

fn to_u2i(result: &GenerationResult) -> Vec<(ItemId, f64)> {
    result.items.iter().map(|s| (s.item, s.prob)).collect()
}

/// Latest U2I snapshot for `user`; empty for unknown users.
pub fn serve(u2i: &U2iIndex, user: UserId) -> Vec<(ItemId, f64)> {
    u2i.get(user).map(|e| e.items.clone()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Replay only buckets in the first `minutes` minutes of the stream.
    pub minutes: Option<u64>,
    pub shards: usize,
    pub serving: ServingConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            minutes: None,
            shards: 1,
            serving: ServingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub events: usize,
    pub rejected: usize,
    pub buckets: usize,
    pub inferences: usize,
    pub users: usize,
    pub rebuilds: usize,
    pub lookups: usize,
    /// 99th-percentile lookup latency (µs) with inference running and idle.
    pub p99_busy_us: f64,
    pub p99_idle_us: f64,
}

/// Per-user starting point of a replay.
#[derive(Clone, Debug, PartialEq)]
pub struct UserStart {
    pub profile: [u8; 3],
    pub history: Vec<ItemId>,
}

fn p99(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    xs[((xs.len() as f64 * 0.99).ceil() as usize).clamp(1, xs.len()) - 1]
}

fn lookup_lane(u2i: &U2iIndex, users: &[UserId], stop: &AtomicBool, min_lookups: usize) -> Vec<f64> {
    let mut lat = Vec::new();
    let mut i = 0usize;
    while (!stop.load(Ordering::Acquire) || lat.len() < min_lookups) && !users.is_empty() {
        let u = users[i % users.len()];
        let t = Instant::now();
        let r = serve(u2i, u);
        lat.push(t.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(r);
        i += 1;
        if lat.len() % 64 == 0 {
            std::thread::yield_now();
        }
    }
    lat
}

/// Two-lane replay: shard workers drain each user's minute buckets in order
/// (users are independent, so shards run in parallel) and publish results to
/// `u2i`; a serve lane answers lookups concurrently from snapshots.
pub fn simulate(
    engine: &Engine,
    starts: &HashMap<UserId, UserStart>,
    events: &[Event],
    config: &SimConfig,
    u2i: &U2iIndex,
) -> Result<SimReport> {
    if config.shards == 0 {
        return Err(Error::invalid("need at least one shard"));
    }
    let ingested = ingest(events.iter().copied());
    let first_minute = ingested.buckets.keys().map(|k| k.1).min().unwrap_or(0);
    let in_window = |m: u64| config.minutes.is_none_or(|n| m < first_minute + n);
    let users = ingested.users();
    let mut report = SimReport {
        events: events.len(),
        rejected: ingested.rejected,
        buckets: ingested.buckets.keys().filter(|k| in_window(k.1)).count(),
        users: users.len(),
        ..SimReport::default()
    };
    let stop = AtomicBool::new(false);
    let shard_results: Vec<Result<(usize, usize)>> = std::thread::scope(|scope| {
        let lane = scope.spawn(|| lookup_lane(u2i, &users, &stop, 1000));
        let workers: Vec<_> = (0..config.shards)
            .map(|shard| {
                let ingested = &ingested;
                let users = &users;
                scope.spawn(move || -> Result<(usize, usize)> {
                    let mut inferences = 0;
                    let mut rebuilds = 0;
                    for &u in users.iter().filter(|&&u| u as usize % config.shards == shard) {
                        let start = starts
                            .get(&u)
                            .ok_or_else(|| Error::invalid(format!("no profile for user {u}")))?;
                        let mut session = UserSession::new(engine, u, start.profile, &start.history, &config.serving)?;
                        for (minute, evs) in ingested.user_buckets(u) {
                            if !in_window(minute) {
                                break;
                            }
                            let r = session.incremental_infer(engine, evs, &config.serving)?;
                            let ts = evs.last().map_or(minute * 60, |e| e.timestamp);
                            u2i.put(u, to_u2i(&r), ts)?;
                            inferences += 1;
                        }
                        rebuilds += session.rebuilds;
                    }
                    Ok((inferences, rebuilds))
                })
            })
            .collect();
        let out = workers.into_iter().map(|w| w.join().expect("shard worker panicked")).collect();
        stop.store(true, Ordering::Release);
        report.p99_busy_us = p99(lane.join().expect("serve lane panicked"));
        out
    });
    for r in shard_results {
        let (i, b) = r?;
        report.inferences += i;
        report.rebuilds += b;
    }
    let idle_stop = AtomicBool::new(true);
    let idle = lookup_lane(u2i, &users, &idle_stop, 1000);
    report.lookups = idle.len();
    report.p99_idle_us = p99(idle);
    Ok(report)
}

#[cfg(test)]
mod tests;
