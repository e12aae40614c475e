//! `genrec`: stage-by-stage driver over a shared output directory.
//!
//! Layout under `--out-dir`:
//! `world.json`, `events.tsv`, `train.tsv`, `test.tsv` (gen-data),
//! `embeddings.sgt` (train-grounding), `rqvae/`, `sids.tsv` (fit-quantizer),
//! `buckets.tsv`, `index/` (build-index), `model/`, `sft_log.tsv`
//! (sft-train), `metrics.csv` (evaluate, run-experiment).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use genrec_core::config::KeyValues;
use genrec_core::evaluation::baselines::popularity_predictions;
use genrec_core::evaluation::experiment::{
    build_datasets, evaluate_generative, ground_items, model_config, quantize_items, sft_config, vocabulary, Decoding,
};
use genrec_core::evaluation::metrics::{first_hit, write_metrics_csv, HitCounter, MetricsReport};
use genrec_core::evaluation::world::{read_events, write_events};
use genrec_core::evaluation::{generate_world, run_experiment, Ablation, ExperimentConfig, World};
use genrec_core::generator::{format_result, generate, generate_flat, GenConfig, PromptState};
use genrec_core::grounding::{read_embeddings, write_embeddings};
use genrec_core::index::{PrefixBuckets, PrefixIndex, U2iIndex};
use genrec_core::quantizer::{read_sids, save_model, write_sids, SemanticId};
use genrec_core::seqmodel::dataset::{read_dataset, write_dataset, InstructionSample};
use genrec_core::seqmodel::model::{GenRecModel, ItemDims};
use genrec_core::seqmodel::train::{sft_train, NegativeMode};
use genrec_core::serving::{simulate, Engine, ServingConfig, SimConfig, UserStart};
use genrec_core::tokenizer::{ItemEmbeddings, SidTable, Task};
use genrec_core::{Error, ItemId, Result, UserId};

#[derive(Parser)]
#[command(name = "genrec", version, about = "Generative recommender pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic world, event log and train/test instruction sets.
    GenData,
    /// Multi-view grounding of item embeddings.
    TrainGrounding {
        /// Random embeddings instead of training.
        #[arg(long)]
        random: bool,
    },
    /// RQ-VAE over the item embeddings and the catalog's SIDs.
    FitQuantizer,
    /// Prefix buckets, plus the ANN index when a checkpoint is given.
    BuildIndex {
        #[arg(long)]
        prefix_len: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Multi-task SFT of the sequence model.
    SftTrain {
        #[arg(long)]
        prefix_len: Option<usize>,
        /// One of no_pretrained_emb, fewer_negatives, global_negatives.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Top-N items for one user and instruction.
    Generate {
        #[arg(long)]
        user: UserId,
        #[arg(long, default_value = "just_for_you")]
        task: String,
        #[arg(long)]
        constraint: Option<u32>,
    },
    /// SID-level HR@K of the checkpoint (or a baseline) on `test.tsv`.
    Evaluate {
        /// `popularity` scores the popularity baseline instead.
        #[arg(long)]
        baseline: Option<String>,
        /// Candidates from the top-1 prefix only.
        #[arg(long)]
        no_apf: bool,
    },
    /// Minute-bucketed nearline replay into the U2I index.
    ServeSim {
        /// Event TSV to replay (default: every user's held-out tail).
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        minutes: Option<u64>,
        #[arg(long, default_value_t = 1)]
        users_shards: usize,
        #[arg(long)]
        export_u2i: Option<PathBuf>,
        /// Rolling history length (default: the configured history_len).
        #[arg(long)]
        window: Option<usize>,
    },
    /// Full pipeline for the configured ablations and baselines.
    RunExperiment,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn world(&self) -> Result<World> {
        World::load(&self.path("world.json"))
    }

    fn embeddings(&self) -> Result<ndarray::Array2<f64>> {
        Ok(read_embeddings(&self.path("embeddings.sgt"))?.0)
    }

    fn sids(&self, n_items: usize) -> Result<(Vec<(ItemId, SemanticId)>, SidTable)> {
        let sids = read_sids(&self.path("sids.tsv"))?;
        let table = SidTable::new(n_items, &sids)?;
        Ok((sids, table))
    }

    fn model(&self) -> Result<GenRecModel> {
        GenRecModel::load(&self.path("model"))
    }

    fn prefix_len(&self, flag: Option<usize>) -> usize {
        flag.unwrap_or(self.cfg.prefix_lens[0])
    }

    /// Saved index when it matches the checkpoint's prefix length, else built.
    fn index(&self, model: &GenRecModel, items: &ItemEmbeddings, sids: &[(ItemId, SemanticId)]) -> Result<PrefixIndex> {
        let dir = self.path("index");
        if dir.join("manifest.txt").exists() {
            let ix = PrefixIndex::load(&dir)?;
            if ix.prefix_len == model.prefix_len() {
                return Ok(ix);
            }
            log::warn!("saved index has prefix length {}, rebuilding", ix.prefix_len);
        }
        let buckets = PrefixBuckets::new(sids, model.prefix_len())?;
        PrefixIndex::build(&buckets, &model.fuse_catalog(items)?, &self.cfg.index)
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut kv = match &g.config {
        Some(p) => KeyValues::read(p)?,
        None => KeyValues::default(),
    };
    if let Some(s) = g.seed {
        kv.set("seed", s);
    }
    ExperimentConfig::from_kv(&kv)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    fs::create_dir_all(&cli.global.out_dir)?;
    let ctx = Ctx {
        cfg,
        out: cli.global.out_dir,
    };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainGrounding { random } => train_grounding(&ctx, random),
        Command::FitQuantizer => fit_quantizer(&ctx),
        Command::BuildIndex { prefix_len, model } => build_index(&ctx, prefix_len, model.as_deref()),
        Command::SftTrain { prefix_len, ablation } => sft(&ctx, prefix_len, ablation.as_deref()),
        Command::Generate { user, task, constraint } => generate_for(&ctx, user, &task, constraint),
        Command::Evaluate { baseline, no_apf } => evaluate(&ctx, baseline.as_deref(), no_apf),
        Command::ServeSim {
            events,
            minutes,
            users_shards,
            export_u2i,
            window,
        } => serve_sim(&ctx, events.as_deref(), minutes, users_shards, export_u2i.as_deref(), window),
        Command::RunExperiment => experiment(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let world = generate_world(&ctx.cfg.world, ctx.cfg.seed)?;
    let (train, test) = build_datasets(&ctx.cfg, &world)?;
    world.save(&ctx.path("world.json"))?;
    write_events(&ctx.path("events.tsv"), &world.events)?;
    write_dataset(&ctx.path("train.tsv"), &train)?;
    write_dataset(&ctx.path("test.tsv"), &test)?;
    println!(
        "items={} users={} events={} train_samples={} test_samples={}",
        world.items.len(),
        world.users.len(),
        world.events.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

fn train_grounding(ctx: &Ctx, random: bool) -> Result<()> {
    let world = ctx.world()?;
    let emb = ground_items(&ctx.cfg, &world, !random)?;
    let ids: Vec<ItemId> = (0..emb.nrows() as ItemId).collect();
    write_embeddings(&ctx.path("embeddings.sgt"), &emb, &ids)?;
    println!("embeddings={}x{} grounded={}", emb.nrows(), emb.ncols(), !random);
    Ok(())
}

fn fit_quantizer(ctx: &Ctx) -> Result<()> {
    let emb = ctx.embeddings()?;
    let (model, sids) = quantize_items(&ctx.cfg, &emb)?;
    save_model(&ctx.path("rqvae"), &model)?;
    write_sids(&ctx.path("sids.tsv"), &sids)?;
    for l in 1..=model.levels() {
        let b = PrefixBuckets::new(&sids, l)?;
        let max = b.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        println!("prefix_len={l} buckets={} largest={max}", b.len());
    }
    Ok(())
}

fn build_index(ctx: &Ctx, prefix_len: Option<usize>, model_dir: Option<&Path>) -> Result<()> {
    let world = ctx.world()?;
    let (sids, _) = ctx.sids(world.n_items())?;
    let l = ctx.prefix_len(prefix_len);
    let buckets = PrefixBuckets::new(&sids, l)?;
    let mut text = String::new();
    for (p, items) in buckets.iter() {
        let p: Vec<String> = p.iter().map(u16::to_string).collect();
        let items: Vec<String> = items.iter().map(ItemId::to_string).collect();
        writeln!(text, "{}\t{}", p.join(","), items.join(",")).unwrap();
    }
    fs::write(ctx.path("buckets.tsv"), text)?;
    println!("prefix_len={l} buckets={}", buckets.len());
    if let Some(dir) = model_dir {
        let model = GenRecModel::load(dir)?;
        if model.prefix_len() != l {
            return Err(Error::InvalidArgument(format!("checkpoint prefix length {} != {l}", model.prefix_len())));
        }
        let items = ItemEmbeddings::from_world(&world, &ctx.embeddings()?)?;
        let ix = PrefixIndex::build(&buckets, &model.fuse_catalog(&items)?, &ctx.cfg.index)?;
        ix.save(&ctx.path("index"))?;
        println!("ann index written to {}", ctx.path("index").display());
    }
    Ok(())
}

fn sft(ctx: &Ctx, prefix_len: Option<usize>, ablation: Option<&str>) -> Result<()> {
    let world = ctx.world()?;
    let items = ItemEmbeddings::from_world(&world, &ctx.embeddings()?)?;
    let (sids, table) = ctx.sids(world.n_items())?;
    let train = read_dataset(&ctx.path("train.tsv"))?;
    let l = ctx.prefix_len(prefix_len);
    let mut sc = sft_config(&ctx.cfg);
    let mut learned = false;
    match ablation.map(Ablation::parse).transpose()? {
        None => {}
        Some(Ablation::NoPretrainedEmb) => learned = true,
        Some(Ablation::FewerNegatives) => sc.sample_negatives = ctx.cfg.fewer_negatives,
        Some(Ablation::GlobalNegatives) => sc.negative_mode = NegativeMode::Global,
        Some(a) => return Err(Error::InvalidArgument(format!("{} does not change training", a.as_str()))),
    }
    if l == 0 {
        sc.negative_mode = NegativeMode::Global;
    }
    let buckets = if l > 0 { Some(PrefixBuckets::new(&sids, l)?) } else { None };
    let model = GenRecModel::new(model_config(&ctx.cfg, l, learned), vocabulary(&ctx.cfg)?, ItemDims::of(&items))?;
    let (model, log) = sft_train(model, &items, &table, buckets.as_ref(), &train, &sc)?;
    model.save(&ctx.path("model"))?;
    let mut text = String::from("step\ttotal\tntp\tid\n");
    for s in &log.steps {
        writeln!(text, "{}\t{:.6}\t{:.6}\t{:.6}", s.step, s.total, s.ntp, s.id).unwrap();
    }
    fs::write(ctx.path("sft_log.tsv"), text)?;
    let last = log.steps.last().map_or(f64::NAN, |s| s.total);
    println!(
        "steps={} final_loss={last:.4} fallback_samples={} diverged={:?}",
        log.steps.len(),
        log.fallback_samples,
        log.diverged
    );
    Ok(())
}

/// Profile and the last `n` training-period items of `user`.
fn user_context(world: &World, user: UserId, n: usize) -> Result<([u8; 3], Vec<ItemId>)> {
    let u = world
        .users
        .get(user as usize)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown user {user}")))?;
    let log: Vec<_> = world.events.iter().filter(|e| e.user == user).collect();
    let cut = world.split_point(log.len());
    let hist: Vec<ItemId> = log[..cut].iter().map(|e| e.item).collect();
    Ok(([u.age, u.gender, u.region], hist[hist.len().saturating_sub(n)..].to_vec()))
}

fn generate_for(ctx: &Ctx, user: UserId, task: &str, constraint: Option<u32>) -> Result<()> {
    let world = ctx.world()?;
    let items = ItemEmbeddings::from_world(&world, &ctx.embeddings()?)?;
    let (sids, table) = ctx.sids(world.n_items())?;
    let model = ctx.model()?;
    let (profile, history) = user_context(&world, user, ctx.cfg.history_len)?;
    let sample = InstructionSample {
        user,
        profile,
        history,
        task: Task::parse(task)?,
        constraint,
        target: 0,
        timestamp: 0,
    };
    let state = PromptState::from_rows(&model, &items, &model.prompt_rows(&table, &sample)?)?;
    let gc = &ctx.cfg.gen;
    let result = if model.prefix_len() == 0 {
        generate_flat(&model, &items, &normalized_catalog(&model, &items)?, &state, gc)?
    } else {
        generate(&model, &items, &ctx.index(&model, &items, &sids)?, &state, gc)?
    };
    print!("{}", format_result(&result, gc));
    Ok(())
}

fn normalized_catalog(model: &GenRecModel, items: &ItemEmbeddings) -> Result<ndarray::Array2<f64>> {
    let mut m = model.fuse_catalog(items)?;
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
    Ok(m)
}

fn evaluate(ctx: &Ctx, baseline: Option<&str>, no_apf: bool) -> Result<()> {
    let world = ctx.world()?;
    let (sids, table) = ctx.sids(world.n_items())?;
    let test = read_dataset(&ctx.path("test.tsv"))?;
    let t = std::time::Instant::now();
    let (id, counter, prefix_correct) = match baseline {
        Some("popularity") => {
            let preds = popularity_predictions(&world, ctx.cfg.gen.top_n);
            let mut c = HitCounter::default();
            for s in &test {
                c.record(s.task, first_hit(&preds, s.target, &table)?);
            }
            ("popularity".to_string(), c, None)
        }
        Some(other) => return Err(Error::InvalidArgument(format!("unknown baseline {other:?}"))),
        None => {
            let items = ItemEmbeddings::from_world(&world, &ctx.embeddings()?)?;
            let model = ctx.model()?;
            let l = model.prefix_len();
            let decoding = match (l, no_apf) {
                (0, _) => Decoding::Flat(ctx.cfg.gen.clone()),
                (_, false) => Decoding::Fused(ctx.cfg.gen.clone()),
                (_, true) => Decoding::Fused(GenConfig {
                    beams: 1,
                    per_beam: ctx.cfg.gen.top_n,
                    apf: false,
                    ..ctx.cfg.gen.clone()
                }),
            };
            let buckets = if l > 0 { Some(PrefixBuckets::new(&sids, l)?) } else { None };
            let ev = evaluate_generative(&model, &items, &table, buckets.as_ref(), &ctx.cfg.index, &test, &table, &decoding)?;
            let id = format!("sid{l}_id{}", if no_apf { "_no_apf" } else { "" });
            (id, ev.counter, ev.prefix_correct)
        }
    };
    let mut report = MetricsReport::new(&id, "-", &counter);
    report.prefix_accuracy = prefix_correct.map(|c| c as f64 / test.len() as f64);
    report.wall_seconds = t.elapsed().as_secs_f64();
    write_metrics_csv(&ctx.path("metrics.csv"), std::slice::from_ref(&report))?;
    print!("{}", genrec_core::evaluation::metrics_csv(std::slice::from_ref(&report)));
    if let Some(p) = report.prefix_accuracy {
        println!("# prefix_accuracy={p:.4}");
    }
    Ok(())
}

fn serve_sim(
    ctx: &Ctx,
    events: Option<&Path>,
    minutes: Option<u64>,
    shards: usize,
    export: Option<&Path>,
    window: Option<usize>,
) -> Result<()> {
    let window = window.unwrap_or(ctx.cfg.history_len);
    let world = ctx.world()?;
    let items = ItemEmbeddings::from_world(&world, &ctx.embeddings()?)?;
    let (sids, table) = ctx.sids(world.n_items())?;
    let model = ctx.model()?;
    let index = ctx.index(&model, &items, &sids)?;
    let engine = Engine {
        model: &model,
        items: &items,
        sids: &table,
        index: &index,
    };
    let mut starts = HashMap::new();
    let mut replay = Vec::new();
    for (u, log) in world.user_logs().iter().enumerate() {
        let u = u as UserId;
        let (profile, history) = user_context(&world, u, window)?;
        starts.insert(u, UserStart { profile, history });
        replay.extend_from_slice(&log[world.split_point(log.len())..]);
    }
    if let Some(p) = events {
        replay = read_events(p)?;
    }
    let cfg = SimConfig {
        minutes,
        shards,
        serving: ServingConfig {
            history_window: window,
            gen: ctx.cfg.gen.clone(),
            ..ServingConfig::default()
        },
    };
    let u2i = U2iIndex::new(ctx.cfg.gen.top_n);
    let report = simulate(&engine, &starts, &replay, &cfg, &u2i)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = export {
        u2i.export_to(p)?;
        println!("u2i entries={} written to {}", u2i.len(), p.display());
    }
    Ok(())
}

fn experiment(ctx: &Ctx) -> Result<()> {
    let reports = run_experiment(&ctx.cfg)?;
    write_metrics_csv(&ctx.path("metrics.csv"), &reports)?;
    fs::write(ctx.path("reports.json"), serde_json::to_string_pretty(&reports)?)?;
    print!("{}", genrec_core::evaluation::metrics_csv(&reports));
    for r in &reports {
        if let Some(f) = &r.failure {
            eprintln!("{} failed: {f}", r.config_id);
        }
    }
    Ok(())
}
