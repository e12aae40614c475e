//! Synthetic catalog, users and interaction logs with planted ground truth.
//!
//! Items sit in a four-level factor hierarchy (top category, subcategory,
//! style, item noise). Users carry a small set of interest subcategories and
//! drift between them; a calendar supplies season and holiday context. Every
//! label used by the oracles (clusters, seasons, holidays, sessions) is kept.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng::{indexed_rng, stream_rng};
use crate::{ItemId, UserId};

pub const N_SEASONS: usize = 4;
pub const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_events: usize,
    pub n_top: usize,
    pub subs_per_top: usize,
    pub styles_per_sub: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub id_dim: usize,
    pub img_dim: usize,
    /// Item weight is `rank^-exponent` over a random popularity ranking.
    pub popularity_exponent: f64,
    /// Probability that an event follows the user's interests rather than
    /// being drawn from global popularity alone.
    pub personalization: f64,
    pub stay_style_prob: f64,
    pub stay_sub_prob: f64,
    pub explore_prob: f64,
    pub season_boost: f64,
    pub holiday_boost: f64,
    pub interests_per_user: usize,
    pub missing_visual_rate: f64,
    pub n_age_bands: usize,
    pub n_genders: usize,
    pub n_regions: usize,
    pub n_holidays: usize,
    pub holiday_days: u64,
    pub days: u64,
    pub session_len: usize,
    pub test_fraction: f64,
}

impl Default for WorldConfig {
    /// The standard benchmark: 10K items, 2K users, 200K events.
    fn default() -> Self {
        Self {
            n_items: 10_000,
            n_users: 2_000,
            n_events: 200_000,
            n_top: 16,
            subs_per_top: 4,
            styles_per_sub: 4,
            latent_dim: 16,
            feature_dim: 32,
            id_dim: 32,
            img_dim: 16,
            popularity_exponent: 0.8,
            personalization: 1.0,
            stay_style_prob: 0.5,
            stay_sub_prob: 0.3,
            explore_prob: 0.05,
            season_boost: 3.0,
            holiday_boost: 4.0,
            interests_per_user: 3,
            missing_visual_rate: 0.1,
            n_age_bands: 5,
            n_genders: 2,
            n_regions: 8,
            n_holidays: 6,
            holiday_days: 10,
            days: 360,
            session_len: 8,
            test_fraction: 0.1,
        }
    }
}

impl WorldConfig {
    /// A small world for unit tests and quick runs.
    pub fn small() -> Self {
        Self {
            n_items: 600,
            n_users: 120,
            n_events: 6_000,
            n_top: 4,
            subs_per_top: 3,
            styles_per_sub: 3,
            ..Self::default()
        }
    }

    pub fn n_subs(&self) -> usize {
        self.n_top * self.subs_per_top
    }

    pub fn n_styles(&self) -> usize {
        self.n_subs() * self.styles_per_sub
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_items", self.n_items),
            ("n_users", self.n_users),
            ("n_top", self.n_top),
            ("subs_per_top", self.subs_per_top),
            ("styles_per_sub", self.styles_per_sub),
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
            ("id_dim", self.id_dim),
            ("img_dim", self.img_dim),
            ("days", self.days as usize),
            ("session_len", self.session_len),
            ("n_age_bands", self.n_age_bands),
            ("n_genders", self.n_genders),
            ("n_regions", self.n_regions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("world config: {name} must be positive")));
            }
        }
        if self.id_dim < 2 {
            return Err(Error::invalid("world config: id_dim must be at least 2"));
        }
        if self.n_events < self.n_users {
            return Err(Error::invalid("world config: need at least one event per user"));
        }
        if self.interests_per_user == 0 || self.interests_per_user > self.n_subs() {
            return Err(Error::invalid("world config: interests_per_user out of range"));
        }
        if self.n_holidays as u64 * self.holiday_days > self.days {
            return Err(Error::invalid("world config: holidays do not fit in the calendar"));
        }
        for (name, p) in [
            ("personalization", self.personalization),
            ("stay_style_prob", self.stay_style_prob),
            ("stay_sub_prob", self.stay_sub_prob),
            ("explore_prob", self.explore_prob),
            ("missing_visual_rate", self.missing_visual_rate),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("world config: {name} must be in [0, 1]")));
            }
        }
        if self.popularity_exponent < 0.0 {
            return Err(Error::invalid("world config: popularity_exponent must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: ItemId,
    pub top: u32,
    pub sub: u32,
    pub style: u32,
    pub season: u8,
    pub holiday: Option<u8>,
    pub popularity_weight: f64,
    pub latent: Vec<f64>,
    pub features: Vec<f64>,
    pub teacher: Vec<f64>,
    pub visual: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: UserId,
    pub age: u8,
    pub gender: u8,
    pub region: u8,
    pub interests: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Click,
    Cart,
    Purchase,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Click => "click",
            Action::Cart => "cart",
            Action::Purchase => "purchase",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "click" => Ok(Action::Click),
            "cart" => Ok(Action::Cart),
            "purchase" => Ok(Action::Purchase),
            other => Err(Error::parse("action", format!("unknown action {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: u64,
    pub user: UserId,
    pub item: ItemId,
    pub action: Action,
    /// Session number within the user's log.
    pub session: u32,
}

/// Season and holiday context as a function of time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calendar {
    pub days: u64,
    /// Start day of each holiday window.
    pub holiday_starts: Vec<u64>,
    pub holiday_days: u64,
}

impl Calendar {
    fn new(config: &WorldConfig) -> Self {
        let spacing = config.days / config.n_holidays.max(1) as u64;
        let holiday_starts = (0..config.n_holidays as u64).map(|h| h * spacing + spacing / 3).collect();
        Self {
            days: config.days,
            holiday_starts,
            holiday_days: config.holiday_days,
        }
    }

    pub fn day(&self, timestamp: u64) -> u64 {
        (timestamp / SECONDS_PER_DAY) % self.days
    }

    pub fn season(&self, timestamp: u64) -> u8 {
        ((self.day(timestamp) * N_SEASONS as u64) / self.days) as u8
    }

    pub fn holiday(&self, timestamp: u64) -> Option<u8> {
        let d = self.day(timestamp);
        self.holiday_starts
            .iter()
            .position(|&s| d >= s && d < s + self.holiday_days)
            .map(|h| h as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub items: Vec<ItemRecord>,
    pub users: Vec<UserRecord>,
    /// Sorted by `(user, timestamp)`.
    pub events: Vec<Event>,
    pub calendar: Calendar,
}

fn gaussian_vec<R: Rng>(dim: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let n = Normal::new(0.0, std).unwrap();
    (0..dim).map(|_| n.sample(rng)).collect()
}

fn project(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Builds the synthetic world. Same config and seed give identical output.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let c = config;
    let calendar = Calendar::new(c);
    let mut rng = stream_rng(seed, "world/catalog");

    // Factor hierarchy.
    let tops: Vec<Vec<f64>> = (0..c.n_top).map(|_| gaussian_vec(c.latent_dim, 1.0, &mut rng)).collect();
    let subs: Vec<Vec<f64>> = (0..c.n_subs())
        .map(|s| {
            let o = gaussian_vec(c.latent_dim, 0.55, &mut rng);
            tops[s / c.subs_per_top].iter().zip(o).map(|(a, b)| a + b).collect()
        })
        .collect();
    let styles: Vec<Vec<f64>> = (0..c.n_styles())
        .map(|s| {
            let o = gaussian_vec(c.latent_dim, 0.35, &mut rng);
            subs[s / c.styles_per_sub].iter().zip(o).map(|(a, b)| a + b).collect()
        })
        .collect();
    let sub_season: Vec<u8> = (0..c.n_subs()).map(|_| rng.gen_range(0..N_SEASONS as u8)).collect();
    let style_holiday: Vec<Option<u8>> = (0..c.n_styles())
        .map(|_| {
            if c.n_holidays > 0 && rng.gen_bool(0.5) {
                Some(rng.gen_range(0..c.n_holidays as u8))
            } else {
                None
            }
        })
        .collect();

    let feat_proj: Vec<Vec<f64>> = (0..c.feature_dim)
        .map(|_| gaussian_vec(c.latent_dim, 1.0 / (c.latent_dim as f64).sqrt(), &mut rng))
        .collect();
    let id_proj: Vec<Vec<f64>> = (0..c.id_dim - 1)
        .map(|_| gaussian_vec(c.latent_dim, 1.0 / (c.latent_dim as f64).sqrt(), &mut rng))
        .collect();
    let img_proj: Vec<Vec<f64>> = (0..c.img_dim)
        .map(|_| gaussian_vec(c.latent_dim, 1.0 / (c.latent_dim as f64).sqrt(), &mut rng))
        .collect();

    // Round-robin style assignment keeps style sizes within one of each other.
    let mut style_of: Vec<usize> = (0..c.n_items).map(|i| i % c.n_styles()).collect();
    style_of.shuffle(&mut rng);
    let mut ranks: Vec<usize> = (1..=c.n_items).collect();
    ranks.shuffle(&mut rng);

    let mut items = Vec::with_capacity(c.n_items);
    for id in 0..c.n_items {
        let style = style_of[id];
        let sub = style / c.styles_per_sub;
        let top = sub / c.subs_per_top;
        let noise = gaussian_vec(c.latent_dim, 0.12, &mut rng);
        let latent: Vec<f64> = styles[style].iter().zip(&noise).map(|(a, b)| a + b).collect();
        let features: Vec<f64> = project(&feat_proj, &latent)
            .into_iter()
            .zip(gaussian_vec(c.feature_dim, 0.1, &mut rng))
            .map(|(a, b)| a + b)
            .collect();
        let weight = (ranks[id] as f64).powf(-c.popularity_exponent);
        let mut teacher: Vec<f64> = project(&id_proj, &latent)
            .into_iter()
            .zip(gaussian_vec(c.id_dim - 1, 0.1, &mut rng))
            .map(|(a, b)| a + b)
            .collect();
        // Behavioural embeddings carry a popularity coordinate.
        teacher.push(1.0 / (1.0 + (ranks[id] as f64).ln()));
        let visual = if rng.gen_bool(c.missing_visual_rate) {
            None
        } else {
            Some(
                project(&img_proj, &styles[style])
                    .into_iter()
                    .zip(gaussian_vec(c.img_dim, 0.2, &mut rng))
                    .map(|(a, b)| a + b)
                    .collect(),
            )
        };
        items.push(ItemRecord {
            id: id as ItemId,
            top: top as u32,
            sub: sub as u32,
            style: style as u32,
            season: sub_season[sub],
            holiday: style_holiday[style],
            popularity_weight: weight,
            latent,
            features,
            teacher,
            visual,
        });
    }

    let mut items_by_style: Vec<Vec<usize>> = vec![Vec::new(); c.n_styles()];
    for it in &items {
        items_by_style[it.style as usize].push(it.id as usize);
    }
    let style_samplers: Vec<Option<WeightedIndex<f64>>> = items_by_style
        .iter()
        .map(|ids| WeightedIndex::new(ids.iter().map(|&i| items[i].popularity_weight)).ok())
        .collect();
    let global_sampler = WeightedIndex::new(items.iter().map(|i| i.popularity_weight))
        .map_err(|e| Error::invalid(e.to_string()))?;

    // Profile-conditioned preference over top categories.
    let n_profiles = c.n_genders * c.n_age_bands;
    let profile_pref: Vec<Vec<f64>> = (0..n_profiles)
        .map(|_| (0..c.n_top).map(|_| rng.gen_range(0.0f64..1.0).powi(3) + 0.05).collect())
        .collect();

    let mut users = Vec::with_capacity(c.n_users);
    for u in 0..c.n_users {
        let mut urng = indexed_rng(seed, "world/users", u as u64);
        let age = urng.gen_range(0..c.n_age_bands) as u8;
        let gender = urng.gen_range(0..c.n_genders) as u8;
        let region = urng.gen_range(0..c.n_regions) as u8;
        let pref = WeightedIndex::new(&profile_pref[gender as usize * c.n_age_bands + age as usize]).unwrap();
        let first_top = pref.sample(&mut urng);
        let mut interests = vec![(first_top * c.subs_per_top + urng.gen_range(0..c.subs_per_top)) as u32];
        while interests.len() < c.interests_per_user {
            let s = urng.gen_range(0..c.n_subs()) as u32;
            if !interests.contains(&s) {
                interests.push(s);
            }
        }
        users.push(UserRecord {
            id: u as UserId,
            age,
            gender,
            region,
            interests,
        });
    }

    let base = c.n_events / c.n_users;
    let extra = c.n_events % c.n_users;
    let mut events = Vec::with_capacity(c.n_events);
    for user in &users {
        let n = base + usize::from((user.id as usize) < extra);
        let mut urng = indexed_rng(seed, "world/events", user.id as u64);
        let n_sessions = n.div_ceil(c.session_len);
        let mut starts: Vec<u64> = (0..n_sessions)
            .map(|_| urng.gen_range(0..c.days * SECONDS_PER_DAY - 3_600))
            .collect();
        starts.sort_unstable();
        let interest_w: Vec<f64> = (0..user.interests.len()).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let mut style: Option<usize> = None;
        let mut produced = 0;
        for (s_idx, &start) in starts.iter().enumerate() {
            let mut ts = start;
            for _ in 0..c.session_len {
                if produced == n {
                    break;
                }
                let season = calendar.season(ts);
                let holiday = calendar.holiday(ts);
                let item = if !urng.gen_bool(c.personalization) {
                    global_sampler.sample(&mut urng)
                } else {
                    let next_style = match style {
                        Some(st) if urng.gen_bool(c.stay_style_prob) => st,
                        Some(st) if urng.gen_bool(c.stay_sub_prob) => {
                            let sub = st / c.styles_per_sub;
                            pick_style(c, sub, holiday, &style_holiday, &mut urng)
                        }
                        _ => {
                            let sub = if urng.gen_bool(c.explore_prob) {
                                urng.gen_range(0..c.n_subs())
                            } else {
                                let w: Vec<f64> = user
                                    .interests
                                    .iter()
                                    .zip(&interest_w)
                                    .map(|(&s, &w)| {
                                        if sub_season[s as usize] == season {
                                            w * c.season_boost
                                        } else {
                                            w
                                        }
                                    })
                                    .collect();
                                user.interests[WeightedIndex::new(&w).unwrap().sample(&mut urng)] as usize
                            };
                            pick_style(c, sub, holiday, &style_holiday, &mut urng)
                        }
                    };
                    match &style_samplers[next_style] {
                        Some(sampler) => items_by_style[next_style][sampler.sample(&mut urng)],
                        None => global_sampler.sample(&mut urng),
                    }
                };
                style = Some(items[item].style as usize);
                let r: f64 = urng.gen();
                let action = if r < 0.8 {
                    Action::Click
                } else if r < 0.92 {
                    Action::Cart
                } else {
                    Action::Purchase
                };
                events.push(Event {
                    timestamp: ts,
                    user: user.id,
                    item: item as ItemId,
                    action,
                    session: s_idx as u32,
                });
                produced += 1;
                ts += urng.gen_range(20..90);
            }
        }
    }

    Ok(World {
        config: config.clone(),
        seed,
        items,
        users,
        events,
        calendar,
    })
}

fn pick_style<R: Rng>(c: &WorldConfig, sub: usize, holiday: Option<u8>, style_holiday: &[Option<u8>], rng: &mut R) -> usize {
    let w: Vec<f64> = (0..c.styles_per_sub)
        .map(|k| {
            let st = sub * c.styles_per_sub + k;
            if holiday.is_some() && style_holiday[st] == holiday {
                c.holiday_boost
            } else {
                1.0
            }
        })
        .collect();
    sub * c.styles_per_sub + WeightedIndex::new(&w).unwrap().sample(rng)
}

impl World {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item(&self, id: ItemId) -> Result<&ItemRecord> {
        self.items.get(id as usize).ok_or(Error::UnknownItem(id))
    }

    /// Events of each user in time order.
    pub fn user_logs(&self) -> Vec<Vec<Event>> {
        let mut logs = vec![Vec::new(); self.users.len()];
        for e in &self.events {
            logs[e.user as usize].push(*e);
        }
        logs
    }

    /// Index of the first held-out event of a log of length `n`.
    pub fn split_point(&self, n: usize) -> usize {
        let held = ((n as f64) * self.config.test_fraction).round() as usize;
        n.saturating_sub(held.max(usize::from(n > 1)))
    }

    /// Interaction counts over the training part of every user log.
    pub fn train_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.items.len()];
        for log in self.user_logs() {
            let cut = self.split_point(log.len());
            for e in &log[..cut] {
                counts[e.item as usize] += 1;
            }
        }
        counts
    }

    /// Items in the bottom popularity quartile of the training log (ties by id).
    pub fn longtail_items(&self) -> Vec<bool> {
        let counts = self.train_counts();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by_key(|&i| (counts[i], i));
        let mut tail = vec![false; counts.len()];
        for &i in order.iter().take(counts.len() / 4) {
            tail[i] = true;
        }
        tail
    }

    /// Item ids ranked by training popularity, most popular first.
    pub fn popularity_ranking(&self) -> Vec<ItemId> {
        let counts = self.train_counts();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(counts[i]), i));
        order.into_iter().map(|i| i as ItemId).collect()
    }

    /// Consecutive item pairs inside sessions, deduplicated and ordered.
    pub fn session_cooccurrences(&self) -> Vec<(ItemId, ItemId)> {
        let mut pairs = BTreeMap::new();
        for log in self.user_logs() {
            for w in log.windows(2) {
                if w[0].session == w[1].session && w[0].item != w[1].item {
                    *pairs.entry((w[0].item, w[1].item)).or_insert(0u32) += 1;
                }
            }
        }
        pairs.into_keys().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(fs::File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}

/// Writes events as `timestamp<TAB>user_id<TAB>item_id<TAB>action`, in time order.
pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| (e.timestamp, e.user, e.item));
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in &sorted {
        writeln!(w, "{}\t{}\t{}\t{}", e.timestamp, e.user, e.item, e.action.as_str())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let ctx = || format!("{}:{}", path.display(), n + 1);
        if f.len() != 4 {
            return Err(Error::parse(ctx(), "expected 4 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|e| Error::parse(ctx(), e.to_string()));
        out.push(Event {
            timestamp: num(f[0])?,
            user: num(f[1])? as UserId,
            item: num(f[2])? as ItemId,
            action: Action::parse(f[3])?,
            session: 0,
        });
    }
    Ok(out)
}
