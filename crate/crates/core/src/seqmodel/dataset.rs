//! Seven-task instruction dataset built from the synthetic logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::World;
use crate::numeric::rng::stream_rng;
use crate::tokenizer::Task;
use crate::{ItemId, UserId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub user: UserId,
    /// Age band, gender, region.
    pub profile: [u8; 3],
    /// Most recent last.
    pub history: Vec<ItemId>,
    pub task: Task,
    pub constraint: Option<u32>,
    pub target: ItemId,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    /// Targets before each user's held-out tail.
    Train,
    /// Targets inside the held-out tail.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub history_len: usize,
    /// Recent items checked by the Discover task.
    pub discover_window: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            history_len: 20,
            discover_window: 10,
            split: Split::Train,
            seed: 0,
        }
    }
}

/// Ground-truth check of the instruction's constraint against the target.
pub fn constraint_holds(world: &World, sample: &InstructionSample) -> bool {
    let Ok(item) = world.item(sample.target) else {
        return false;
    };
    match (sample.task, sample.constraint) {
        (Task::Query, Some(c)) => item.sub == c,
        (Task::Category, Some(c)) => item.style == c,
        (Task::Season, Some(c)) => item.season as u32 == c,
        (Task::Holiday, Some(c)) => item.holiday.map(u32::from) == Some(c),
        (t, None) => t.constraint_kind().is_none(),
        _ => false,
    }
}

/// Samples `task_mix[task]` instructions per task. Every emitted sample
/// satisfies its task's predicate under the world's labels.
pub fn build_sft_dataset(world: &World, task_mix: &BTreeMap<Task, usize>, config: &DatasetConfig) -> Result<Vec<InstructionSample>> {
    let logs = world.user_logs();
    let longtail = world.longtail_items();
    let mut out = Vec::new();
    for (&task, &count) in task_mix {
        if count == 0 {
            continue;
        }
        let mut cands: Vec<(usize, usize, Option<u32>)> = Vec::new();
        for (u, log) in logs.iter().enumerate() {
            let cut = world.split_point(log.len());
            let range = match config.split {
                Split::Train => 1..cut,
                Split::Test => cut.max(1)..log.len(),
            };
            let interests = &world.users[u].interests;
            for t in range {
                let e = &log[t];
                let item = &world.items[e.item as usize];
                let constraint = match task {
                    Task::JustForYou | Task::Longtail | Task::Discover => None,
                    Task::Query => Some(item.sub),
                    Task::Category => Some(item.style),
                    Task::Season => Some(world.calendar.season(e.timestamp) as u32),
                    Task::Holiday => world.calendar.holiday(e.timestamp).map(u32::from),
                };
                let ok = match task {
                    Task::JustForYou | Task::Query | Task::Category => true,
                    Task::Longtail => longtail[e.item as usize],
                    Task::Discover => {
                        let lo = t.saturating_sub(config.discover_window);
                        interests.contains(&item.sub) && log[lo..t].iter().all(|p| world.items[p.item as usize].sub != item.sub)
                    }
                    Task::Season => constraint == Some(item.season as u32),
                    Task::Holiday => constraint.is_some() && item.holiday.map(u32::from) == constraint,
                };
                if ok {
                    cands.push((u, t, constraint));
                }
            }
        }
        if cands.is_empty() {
            return Err(Error::NoQualifyingSample(task.as_str().into()));
        }
        let mut rng = stream_rng(config.seed, &format!("dataset/{}", task.as_str()));
        let mut picks: Vec<usize> = if count <= cands.len() {
            let mut idx = sample(&mut rng, cands.len(), count).into_vec();
            idx.sort_unstable();
            idx
        } else {
            let mut all: Vec<usize> = (0..cands.len()).collect();
            all.extend((0..count - cands.len()).map(|_| rng.gen_range(0..cands.len())));
            all
        };
        picks.truncate(count);
        for i in picks {
            let (u, t, constraint) = cands[i];
            let log = &logs[u];
            let user = &world.users[u];
            out.push(InstructionSample {
                user: user.id,
                profile: [user.age, user.gender, user.region],
                history: log[t.saturating_sub(config.history_len)..t].iter().map(|e| e.item).collect(),
                task,
                constraint,
                target: log[t].item,
                timestamp: log[t].timestamp,
            });
        }
    }
    let mut rng = stream_rng(config.seed, "dataset/order");
    out.shuffle(&mut rng);
    Ok(out)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// `user<TAB>age,gender,region<TAB>history<TAB>task<TAB>constraint|-<TAB>target<TAB>timestamp`.
pub fn write_dataset(path: &Path, samples: &[InstructionSample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        let c = s.constraint.map_or("-".to_string(), |c| c.to_string());
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.user,
            join(&s.profile),
            join(&s.history),
            s.task,
            c,
            s.target,
            s.timestamp
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<InstructionSample>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let ctx = || format!("{}:{}", path.display(), n + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::parse(ctx(), format!("expected 7 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|e| Error::parse(ctx(), e.to_string()));
        let list = |s: &str| -> Result<Vec<u64>> {
            if s.is_empty() {
                Ok(vec![])
            } else {
                s.split(',').map(num).collect()
            }
        };
        let p = list(f[1])?;
        if p.len() != 3 {
            return Err(Error::parse(ctx(), "profile needs 3 values"));
        }
        out.push(InstructionSample {
            user: num(f[0])? as UserId,
            profile: [p[0] as u8, p[1] as u8, p[2] as u8],
            history: list(f[2])?.into_iter().map(|x| x as ItemId).collect(),
            task: Task::parse(f[3])?,
            constraint: if f[4] == "-" { None } else { Some(num(f[4])? as u32) },
            target: num(f[5])? as ItemId,
            timestamp: num(f[6])?,
        });
    }
    Ok(out)
}

/// Equal count for every task.
pub fn uniform_mix(per_task: usize) -> BTreeMap<Task, usize> {
    Task::ALL.iter().map(|&t| (t, per_task)).collect()
}
