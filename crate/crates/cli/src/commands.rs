//! Implementations of the CLI subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cadirec_core::augment::{ViewGenOpts, ViewSampler};
use cadirec_core::config::Config;
use cadirec_core::corpus::{
    build_splits, five_core_filter, generate_block_markov_corpus, generate_markov_corpus,
    load_corpus, load_interactions, sample_markov_corpus, save_corpus, InputFormat,
    InteractionCorpus, MarkovChain, SplitDataset,
};
use cadirec_core::diffusion::build_schedule;
use cadirec_core::error::{CadirecError, Result};
use cadirec_core::eval::{evaluate_split, EvalStage};
use cadirec_core::gradcheck::{grad_check, LossKind, ToyDims};
use cadirec_core::rng::SeedStream;
use cadirec_core::scalar::Scalar;
use cadirec_core::trainer::{fit, fit_from, Checkpoint, EpochStats, FitResult};

use crate::manifest::RunManifest;

pub struct PrepareArgs {
    pub input: Option<PathBuf>,
    pub format: InputFormat,
    pub synthetic: Option<String>,
    pub users: usize,
    pub vocab: usize,
    pub blocks: usize,
    pub jump: f64,
    pub len_range: (usize, usize),
    pub concentration: f64,
    pub seed: u64,
    pub no_filter: bool,
    pub out: PathBuf,
}

fn print_corpus_stats(corpus: &InteractionCorpus) {
    println!(
        "users {}  items {}  actions {}  avg-length {:.1}  density {:.2}%",
        corpus.num_users(),
        corpus.vocab_size,
        corpus.num_interactions(),
        corpus.avg_length(),
        corpus.density() * 100.0
    );
}

pub fn prepare(args: PrepareArgs) -> Result<()> {
    let mut manifest = RunManifest::new("prepare", None, args.seed);
    let corpus = match (&args.input, &args.synthetic) {
        (Some(path), None) => {
            manifest = manifest.with_input(path);
            let raw = load_interactions(path, args.format)?;
            println!("raw corpus:");
            print_corpus_stats(&raw);
            if args.no_filter {
                raw
            } else {
                let filtered = five_core_filter(&raw)?;
                println!("after 5-core filtering:");
                filtered
            }
        }
        (None, Some(kind)) => {
            let corpus = match kind.as_str() {
                "markov" => {
                    let (corpus, chain) = generate_markov_corpus(
                        args.users,
                        args.vocab,
                        args.seed,
                        args.len_range,
                        args.concentration,
                    );
                    crate::ensure_dir(&args.out)?;
                    chain.save(&args.out.join("transition.json"))?;
                    corpus
                }
                "block" => {
                    let (corpus, chain) = generate_block_markov_corpus(
                        args.users,
                        args.vocab,
                        args.blocks,
                        args.seed,
                        args.len_range,
                        args.concentration,
                        args.jump,
                    );
                    crate::ensure_dir(&args.out)?;
                    chain.save(&args.out.join("transition.json"))?;
                    corpus
                }
                "cycle" => {
                    let chain = MarkovChain::cycle(args.vocab);
                    let corpus = sample_markov_corpus(
                        args.users,
                        &chain,
                        args.len_range,
                        &mut SeedStream::new(args.seed),
                    );
                    crate::ensure_dir(&args.out)?;
                    chain.save(&args.out.join("transition.json"))?;
                    corpus
                }
                other => {
                    return Err(CadirecError::Config(format!(
                        "unknown synthetic kind {other:?} (markov|block|cycle)"
                    )))
                }
            };
            if args.no_filter {
                corpus
            } else {
                corpus // synthetic corpora are already dense; no filtering
            }
        }
        _ => {
            return Err(CadirecError::Config(
                "prepare needs exactly one of --input or --synthetic".into(),
            ))
        }
    };
    print_corpus_stats(&corpus);
    save_corpus(&corpus, &args.out)?;
    manifest
        .with_output(&args.out.join("corpus.json"))
        .with_output(&args.out.join("sequences.bin"))
        .write(&args.out)?;
    println!("prepared corpus written to {}", args.out.display());
    Ok(())
}

fn load_split_dataset(data: &Path, max_len: usize) -> Result<(InteractionCorpus, SplitDataset)> {
    let corpus = load_corpus(data)?;
    let split = build_splits(&corpus, max_len)?;
    Ok((corpus, split))
}

fn write_history(dir: &Path, history: &[EpochStats]) -> Result<()> {
    let mut csv = String::from("epoch,l_rec,l_cl,l_d,total,valid_hr10,valid_ndcg10\n");
    let mut jsonl = String::new();
    for h in history {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            h.epoch, h.l_rec, h.l_cl, h.l_d, h.total, h.valid_hr10, h.valid_ndcg10
        ));
        jsonl.push_str(&serde_json::to_string(h)?);
        jsonl.push('\n');
    }
    fs::write(dir.join("history.csv"), csv)?;
    fs::write(dir.join("history.jsonl"), jsonl)?;
    Ok(())
}

pub fn train<T: Scalar>(
    data: &Path,
    cfg: Config,
    resume: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (_corpus, split) = load_split_dataset(data, cfg.data.max_len)?;
    RunManifest::new("train", Some(&cfg), cfg.train.seed)
        .with_input(data)
        .with_output(&out.join("checkpoint.json"))
        .write(out)?;

    let FitResult {
        checkpoint,
        stopped_early,
    } = match resume {
        Some(path) => {
            let mut ckpt: Checkpoint<T> = Checkpoint::load(path)?;
            // the resumed run keeps its own config except for the epoch
            // budget, which the caller may extend
            ckpt.config.train.epochs = cfg.train.epochs.max(ckpt.config.train.epochs);
            fit_from(ckpt, &split)?
        }
        None => fit::<T>(&cfg, &split)?,
    };

    checkpoint.save(&out.join("checkpoint.json"))?;
    write_history(out, &checkpoint.history)?;

    let cfg = &checkpoint.config;
    let valid = evaluate_split(
        &checkpoint.best_params.tables,
        &checkpoint.best_params.encoder,
        &split,
        EvalStage::Valid,
        &cfg.eval.ks,
        cfg.eval.exclude_seen,
        &cfg.eval.length_boundaries,
    )?;
    let test = evaluate_split(
        &checkpoint.best_params.tables,
        &checkpoint.best_params.encoder,
        &split,
        EvalStage::Test,
        &cfg.eval.ks,
        cfg.eval.exclude_seen,
        &cfg.eval.length_boundaries,
    )?;
    let report = serde_json::json!({
        "best_epoch": checkpoint.best_epoch,
        "epochs_ran": checkpoint.history.len(),
        "stopped_early": stopped_early,
        "valid": valid.report,
        "test": test.report,
    });
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    println!(
        "best epoch {} | valid ndcg@10 {:.4} | test ndcg@10 {:.4} hr@10 {:.4}",
        checkpoint.best_epoch,
        checkpoint.best_valid_ndcg,
        test.report.ndcg.get(&10).copied().unwrap_or(f64::NAN),
        test.report.hr.get(&10).copied().unwrap_or(f64::NAN)
    );
    println!("run artifacts in {}", out.display());
    Ok(())
}

pub fn eval<T: Scalar>(
    checkpoint: &Path,
    data: &Path,
    stage: &str,
    exclude_seen: bool,
    groups: &[usize],
    out: Option<&Path>,
) -> Result<()> {
    let ckpt: Checkpoint<T> = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.config;
    let (_corpus, split) = load_split_dataset(data, cfg.data.max_len)?;
    let stage = match stage {
        "valid" => EvalStage::Valid,
        "test" => EvalStage::Test,
        other => {
            return Err(CadirecError::Config(format!(
                "unknown stage {other:?} (valid|test)"
            )))
        }
    };
    let outcome = evaluate_split(
        &ckpt.best_params.tables,
        &ckpt.best_params.encoder,
        &split,
        stage,
        &cfg.eval.ks,
        exclude_seen || cfg.eval.exclude_seen,
        groups,
    )?;
    let json = serde_json::to_string_pretty(&outcome.report)?;
    println!("{json}");
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, json + "\n")?;
        if !groups.is_empty() {
            let mut csv = String::from("group_upper,n_users,hr@10,ndcg@10\n");
            for gm in &outcome.report.per_group {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    gm.upper.map(|u| u.to_string()).unwrap_or_else(|| "inf".into()),
                    gm.n_users,
                    gm.hr.get(&10).copied().unwrap_or(f64::NAN),
                    gm.ndcg.get(&10).copied().unwrap_or(f64::NAN),
                ));
            }
            fs::write(path.with_extension("groups.csv"), csv)?;
        }
    }
    Ok(())
}

pub fn augment<T: Scalar>(
    checkpoint: &Path,
    data: &Path,
    rho: Option<f64>,
    count: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ckpt: Checkpoint<T> = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.config;
    let (_corpus, split) = load_split_dataset(data, cfg.data.max_len)?;
    let rho = rho.unwrap_or(cfg.train.rho);
    let schedule = build_schedule::<T>(
        cfg.diffusion.t_max,
        cfg.diffusion.schedule,
        cfg.diffusion.beta0,
    )?;
    let sampler = ViewSampler {
        tables: &ckpt.best_params.tables,
        denoiser: &ckpt.best_params.denoiser,
        schedule: &schedule,
        opts: ViewGenOpts {
            steps: cfg.augment.respace_steps,
            snap_posterior: cfg.augment.snap_posterior,
        },
    };
    let n = count.unwrap_or(split.num_users()).min(split.num_users());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(out)?;
    let stream = SeedStream::new(seed);
    for u in 0..n {
        let row = &split.train_inputs[u];
        let pair = sampler.make_pair(row, rho, &stream.child(u as u64))?;
        let record = serde_json::json!({
            "user": u,
            "parent": pair.parent,
            "view1": pair.view1,
            "positions1": pair.positions1,
            "view2": pair.view2,
            "positions2": pair.positions2,
        });
        writeln!(f, "{}", serde_json::to_string(&record)?)?;
    }
    println!("wrote {n} augmented pairs to {}", out.display());
    Ok(())
}

pub struct SweepArgs {
    pub data: PathBuf,
    pub base: Config,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub save_checkpoints: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
struct SweepCell {
    alpha: f64,
    beta: f64,
    rho: f64,
    seed: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
struct SweepRow {
    alpha: f64,
    beta: f64,
    rho: f64,
    seed: u64,
    status: String,
    epochs_ran: usize,
    best_epoch: usize,
    valid_ndcg10: f64,
    test_ndcg10: f64,
    test_hr10: f64,
}

pub fn sweep<T: Scalar>(args: SweepArgs) -> Result<()> {
    if args.alpha.is_empty() || args.beta.is_empty() || args.rho.is_empty() {
        return Err(CadirecError::Config("sweep grids must be nonempty".into()));
    }
    let (_corpus, split) = load_split_dataset(&args.data, args.base.data.max_len)?;
    RunManifest::new("sweep", Some(&args.base), args.base.train.seed)
        .with_input(&args.data)
        .with_output(&args.out.join("results.csv"))
        .write(&args.out)?;

    let mut cells = Vec::new();
    for &alpha in &args.alpha {
        for &beta in &args.beta {
            for &rho in &args.rho {
                for &seed in &args.seeds {
                    cells.push(SweepCell {
                        alpha,
                        beta,
                        rho,
                        seed,
                    });
                }
            }
        }
    }

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<SweepRow>> = Mutex::new(Vec::with_capacity(cells.len()));
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let cell = cells[i].clone();
                let row = run_cell::<T>(&args, &split, &cell);
                rows.lock().unwrap().push(row);
            });
        }
    });

    let mut rows = rows.into_inner().unwrap();
    rows.sort_by(|a, b| {
        b.valid_ndcg10
            .partial_cmp(&a.valid_ndcg10)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut csv =
        String::from("alpha,beta,rho,seed,status,epochs_ran,best_epoch,valid_ndcg10,test_ndcg10,test_hr10\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.alpha,
            r.beta,
            r.rho,
            r.seed,
            r.status,
            r.epochs_ran,
            r.best_epoch,
            r.valid_ndcg10,
            r.test_ndcg10,
            r.test_hr10
        ));
    }
    fs::write(args.out.join("results.csv"), &csv)?;
    println!("{csv}");
    let failures = rows.iter().filter(|r| r.status != "ok").count();
    println!(
        "sweep finished: {} cells, {} failed; table at {}",
        rows.len(),
        failures,
        args.out.join("results.csv").display()
    );
    Ok(())
}

fn run_cell<T: Scalar>(args: &SweepArgs, split: &SplitDataset, cell: &SweepCell) -> SweepRow {
    let mut cfg = args.base.clone();
    cfg.train.alpha = cell.alpha;
    cfg.train.beta = cell.beta;
    cfg.train.rho = cell.rho;
    cfg.train.seed = cell.seed;
    let mut row = SweepRow {
        alpha: cell.alpha,
        beta: cell.beta,
        rho: cell.rho,
        seed: cell.seed,
        status: "ok".into(),
        epochs_ran: 0,
        best_epoch: 0,
        valid_ndcg10: f64::NAN,
        test_ndcg10: f64::NAN,
        test_hr10: f64::NAN,
    };
    let outcome = (|| -> Result<()> {
        let res = fit::<T>(&cfg, split)?;
        let ckpt = res.checkpoint;
        row.epochs_ran = ckpt.history.len();
        row.best_epoch = ckpt.best_epoch;
        row.valid_ndcg10 = ckpt.best_valid_ndcg;
        let test = evaluate_split(
            &ckpt.best_params.tables,
            &ckpt.best_params.encoder,
            split,
            EvalStage::Test,
            &[10],
            cfg.eval.exclude_seen,
            &[],
        )?;
        row.test_ndcg10 = test.report.ndcg[&10];
        row.test_hr10 = test.report.hr[&10];
        if args.save_checkpoints {
            let name = format!(
                "cell_a{}_b{}_r{}_s{}",
                cell.alpha, cell.beta, cell.rho, cell.seed
            );
            ckpt.save(&args.out.join(name).join("checkpoint.json"))?;
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        row.status = format!("error: {e}");
        log::warn!(
            "sweep cell (alpha {}, beta {}, rho {}, seed {}) failed: {e}",
            cell.alpha,
            cell.beta,
            cell.rho,
            cell.seed
        );
    }
    row
}

pub fn check_grads(seed: u64, out: Option<&Path>) -> Result<()> {
    let mut reports = Vec::new();
    let mut all_passed = true;
    for kind in LossKind::all() {
        let report = grad_check(kind, ToyDims::default(), seed)?;
        println!(
            "{:<6} max-rel-err {:.3e}  {}",
            report.loss_kind,
            report.max_rel_err,
            if report.passed { "pass" } else { "FAIL" }
        );
        all_passed &= report.passed;
        reports.push(report);
    }
    let json = serde_json::to_string_pretty(&reports)?;
    if let Some(path) = out {
        fs::write(path, json + "\n")?;
    } else {
        println!("{json}");
    }
    if !all_passed {
        return Err(CadirecError::Contract(
            "gradient check failed; see report".into(),
        ));
    }
    Ok(())
}
