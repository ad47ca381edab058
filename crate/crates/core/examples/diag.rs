//! Scratch diagnostics for benchmark calibration (not part of the build).

use cadirec_core::config::Config;
use cadirec_core::corpus::{build_splits, generate_markov_corpus};
use cadirec_core::eval::{evaluate_split, EvalStage};
use cadirec_core::trainer::fit;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T
where
    <T as std::str::FromStr>::Err: std::fmt::Debug,
{
    std::env::args()
        .nth(i)
        .map(|s| s.parse().unwrap())
        .unwrap_or(default)
}

fn main() {
    let users: usize = arg(1, 300);
    let vocab: usize = arg(2, 200);
    let conc: f64 = arg(3, 0.15);
    let len_lo: usize = arg(4, 12);
    let len_hi: usize = arg(5, 24);
    let batch: usize = arg(6, 12);
    let lr: f64 = arg(7, 2e-3);
    let d: usize = arg(8, 24);
    let epochs: usize = arg(9, 200);
    let patience: usize = arg(10, 20);
    let seeds_n: usize = arg(11, 1);
    let spec: String = arg(12, "0:0.4,0.05:0.4,0:0,0.1:0.4".to_string());
    let temp: f64 = arg(13, 1.0);
    let dropout: f64 = arg(14, 0.1);

    let (corpus, _chain) = generate_markov_corpus(users, vocab, 7, (len_lo, len_hi), conc);
    let max_len = (len_hi - 2).min(30);
    let split = build_splits(&corpus, max_len).unwrap();
    eprintln!(
        "corpus: {users}u x {vocab}v conc {conc} len {len_lo}-{len_hi} max_len {max_len} | batch {batch} lr {lr} d {d}"
    );

    for pair in spec.split(',') {
        let (a, b) = pair.split_once(':').unwrap();
        let alpha: f64 = a.parse().unwrap();
        let beta: f64 = b.parse().unwrap();
        let mut cfg = Config::default();
        cfg.model.d = d;
        cfg.data.max_len = max_len;
        cfg.augment.respace_steps = 8;
        cfg.train.batch_size = batch;
        cfg.train.epochs = epochs;
        cfg.train.patience = patience;
        cfg.train.lr = lr;
        cfg.train.alpha = alpha;
        cfg.train.beta = beta;
        cfg.contrastive.temperature = temp;
        cfg.model.dropout = dropout;
        if alpha == 0.0 && beta == 0.0 {
            cfg.train.rho = 0.0;
        }
        let mut mean = 0.0;
        let t0 = std::time::Instant::now();
        for seed in 1..=seeds_n as u64 {
            cfg.train.seed = seed;
            let res = fit::<f32>(&cfg, &split).unwrap();
            let ck = res.checkpoint;
            let test = evaluate_split(
                &ck.best_params.tables,
                &ck.best_params.encoder,
                &split,
                EvalStage::Test,
                &[10],
                false,
                &[],
            )
            .unwrap();
            println!(
                "a={alpha} b={beta} rho={} seed {seed}: epochs {:>3} best {:>3} test-ndcg10 {:.4} valid {:.4} lrec_last {:.3}",
                cfg.train.rho,
                ck.history.len(),
                ck.best_epoch,
                test.report.ndcg[&10],
                ck.best_valid_ndcg,
                ck.history.last().unwrap().l_rec,
            );
            mean += test.report.ndcg[&10];
        }
        println!(
            "a={alpha} b={beta} MEAN test-ndcg10 {:.4}  ({:.0}s)",
            mean / seeds_n as f64,
            t0.elapsed().as_secs_f64()
        );
    }
}
