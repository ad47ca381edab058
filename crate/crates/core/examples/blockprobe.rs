//! Scratch: block-structured chain — does contrastive learning help here?

use cadirec_core::augment::{select_positions, AugmentedPair};
use cadirec_core::config::Config;
use cadirec_core::corpus::{build_splits, sample_markov_corpus, MarkovChain};
use cadirec_core::diffusion::build_schedule;
use cadirec_core::eval::{evaluate_split, EvalStage};
use cadirec_core::rng::SeedStream;
use cadirec_core::scalar::Scalar;
use cadirec_core::trainer::{fit, train_step, Adam, ModelParams};
use rand_distr::{Distribution, Gamma};

fn block_chain(vocab: usize, blocks: usize, conc: f64, jump: f64, stream: &mut SeedStream) -> MarkovChain {
    let per = vocab / blocks;
    let gamma = Gamma::new(conc, 1.0).unwrap();
    let mut transition = vec![0.0f64; vocab * vocab];
    for i in 0..vocab {
        let b = i / per;
        let next_b = (b + 1) % blocks;
        let row = &mut transition[i * vocab..(i + 1) * vocab];
        // small floor keeps every transition strictly positive
        for w in row.iter_mut() {
            *w = 1e-3 / vocab as f64;
        }
        let mut within = vec![0.0f64; per];
        let mut sum = 0.0;
        for w in within.iter_mut() {
            *w = gamma.sample(stream.rng()) + 1e-3;
            sum += *w;
        }
        for (j, w) in within.iter().enumerate() {
            row[b * per + j] += (1.0 - jump) * w / sum;
        }
        let mut out = vec![0.0f64; per];
        let mut sum2 = 0.0;
        for w in out.iter_mut() {
            *w = gamma.sample(stream.rng()) + 1e-3;
            sum2 += *w;
        }
        for (j, w) in out.iter().enumerate() {
            row[next_b * per + j] += jump * w / sum2;
        }
        let total: f64 = row.iter().sum();
        for w in row.iter_mut() {
            *w /= total;
        }
    }
    MarkovChain { vocab, transition, kind: "block".into() }
}

fn oracle_pair(row: &[u32], rho: f64, chain: &MarkovChain, stream: &SeedStream) -> AugmentedPair {
    let draw_view = |ptag: u64, gtag: u64| -> (Vec<u32>, Vec<usize>) {
        let positions = select_positions(row.len(), rho, &mut stream.child(ptag));
        let mut view = row.to_vec();
        let mut s = stream.child(gtag);
        for &p in &positions {
            let v = chain.vocab;
            let mut weights = vec![1.0f64; v];
            if p > 0 {
                for (j, w) in weights.iter_mut().enumerate() {
                    *w *= chain.prob(view[p - 1], (j + 1) as u32);
                }
            }
            if p + 1 < view.len() {
                for (j, w) in weights.iter_mut().enumerate() {
                    *w *= chain.prob((j + 1) as u32, view[p + 1]);
                }
            }
            let total: f64 = weights.iter().sum();
            let mut u: f64 = <f64 as Scalar>::uniform01(s.rng()) * total;
            let mut pick = v;
            for (j, w) in weights.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    pick = j + 1;
                    break;
                }
            }
            view[p] = pick.min(v) as u32;
        }
        (view, positions)
    };
    let (view1, positions1) = draw_view(1, 3);
    let (view2, positions2) = draw_view(2, 4);
    AugmentedPair { parent: row.to_vec(), view1, view2, positions1, positions2 }
}

fn main() {
    let alpha: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let temp: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(24.0);
    let rho: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let jump: f64 = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(0.08);
    let vocab = 128usize;
    let chain = block_chain(vocab, 8, 0.3, jump, &mut SeedStream::new(70));
    let corpus = sample_markov_corpus(256, &chain, (12, 24), &mut SeedStream::new(71));
    let split = build_splits(&corpus, 22).unwrap();

    let mut cfg = Config::default();
    cfg.model.d = 32;
    cfg.model.dropout = 0.1;
    cfg.data.max_len = 22;
    cfg.train.batch_size = 24;
    cfg.train.lr = 3e-3;
    cfg.train.alpha = alpha;
    cfg.train.beta = 0.0;
    cfg.train.rho = rho;
    cfg.train.epochs = 250;
    cfg.train.patience = 30;
    cfg.train.seed = 1;
    cfg.contrastive.temperature = temp;

    let mut base_cfg = cfg.clone();
    base_cfg.train.rho = 0.0;
    let res = fit::<f32>(&base_cfg, &split).unwrap();
    let ck = res.checkpoint;
    let t = evaluate_split(&ck.best_params.tables, &ck.best_params.encoder, &split, EvalStage::Test, &[10], false, &[]).unwrap();
    let curve: Vec<String> = ck.history.iter().step_by(10).map(|h| format!("{}:{:.3}", h.epoch, h.valid_ndcg10)).collect();
    println!("rec-only curve: {}", curve.join(" "));
    println!("rec-only: best {} of {} | valid {:.4} test {:.4}", ck.best_epoch, ck.history.len(), ck.best_valid_ndcg, t.report.ndcg[&10]);

    let root = SeedStream::new(1);
    let schedule = build_schedule::<f32>(1000, cfg.diffusion.schedule, cfg.diffusion.beta0).unwrap();
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, vocab, &mut root.child(0));
    let mut opt = Adam::new(cfg.train.lr, &params.block_shapes());
    let mut best = (0usize, f64::NEG_INFINITY, params.clone());
    for epoch in 0..cfg.train.epochs {
        let es = root.child(1).child(epoch as u64);
        for (bi, batch) in split.batches(cfg.train.batch_size, &es.child(0)).enumerate() {
            let ss = es.child(100 + bi as u64);
            let pairs: Vec<AugmentedPair> = (0..batch.batch)
                .map(|r| oracle_pair(&batch.unpadded_row(r), rho, &chain, &ss.child(50 + r as u64)))
                .collect();
            train_step(&mut params, &mut opt, &batch, &cfg, &schedule, epoch * 1000 + bi, &ss, Some(&pairs)).unwrap();
        }
        let v = evaluate_split(&params.tables, &params.encoder, &split, EvalStage::Valid, &[10], false, &[]).unwrap();
        let nd = v.report.ndcg[&10];
        if epoch % 10 == 0 {
            print!("{}:{:.3} ", epoch, nd);
            use std::io::Write as _;
            std::io::stdout().flush().ok();
        }
        if nd > best.1 {
            best = (epoch, nd, params.clone());
        }
        if epoch >= best.0 + 30 {
            break;
        }
    }
    println!();
    let t = evaluate_split(&best.2.tables, &best.2.encoder, &split, EvalStage::Test, &[10], false, &[]).unwrap();
    println!("oracle-CL a={alpha} t={temp} rho={rho} jump={jump}: best valid {:.4} at {} | test {:.4}", best.1, best.0, t.report.ndcg[&10]);
}
