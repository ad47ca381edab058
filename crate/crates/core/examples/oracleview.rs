//! Scratch: does contrastive learning help when views come from the TRUE
//! chain conditional (oracle generator)?

use cadirec_core::augment::{select_positions, AugmentedPair};
use cadirec_core::config::Config;
use cadirec_core::corpus::{build_splits, generate_markov_corpus, MarkovChain, SequenceBatch};
use cadirec_core::diffusion::build_schedule;
use cadirec_core::eval::{evaluate_split, EvalStage};
use cadirec_core::rng::SeedStream;
use cadirec_core::scalar::Scalar;
use cadirec_core::trainer::{fit, train_step, Adam, ModelParams};

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
    AugmentedPair {
        parent: row.to_vec(),
        view1,
        view2,
        positions1,
        positions2,
    }
}

fn main() {
    let users = 200;
    let vocab = 200;
    let (corpus, chain) = generate_markov_corpus(users, vocab, 7, (12, 24), 0.15);
    let split = build_splits(&corpus, 22).unwrap();

    let alpha: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let temp: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(24.0);
    let rho: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let epochs = 300usize;

    let mut cfg = Config::default();
    cfg.model.d = 48;
    cfg.model.dropout = 0.0;
    cfg.data.max_len = 22;
    cfg.train.batch_size = 24;
    cfg.train.lr = 3e-3;
    cfg.train.alpha = alpha;
    cfg.train.beta = 0.0; // no diffusion loss: isolate CL with oracle views
    cfg.train.rho = rho;
    cfg.train.epochs = epochs;
    cfg.train.seed = 1;
    cfg.contrastive.temperature = temp;

    // baseline for reference
    let mut base_cfg = cfg.clone();
    base_cfg.train.rho = 0.0;
    base_cfg.train.epochs = 300;
    base_cfg.train.patience = 40;
    let res = fit::<f32>(&base_cfg, &split).unwrap();
    let t = evaluate_split(&res.checkpoint.best_params.tables, &res.checkpoint.best_params.encoder, &split, EvalStage::Test, &[10], false, &[]).unwrap();
    println!("rec-only: best {} test {:.4}", res.checkpoint.best_epoch, t.report.ndcg[&10]);

    // manual loop with oracle views
    let root = SeedStream::new(1);
    let schedule = build_schedule::<f32>(1000, cfg.diffusion.schedule, cfg.diffusion.beta0).unwrap();
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, vocab, &mut root.child(0));
    let mut opt = Adam::new(cfg.train.lr, &params.block_shapes());
    let mut best = (0usize, f64::NEG_INFINITY);
    for epoch in 0..epochs {
        let es = root.child(1).child(epoch as u64);
        for (bi, batch) in split.batches(cfg.train.batch_size, &es.child(0)).enumerate() {
            let ss = es.child(100 + bi as u64);
            let pairs: Vec<AugmentedPair> = (0..batch.batch)
                .map(|r| oracle_pair(&batch.unpadded_row(r), rho, &chain, &ss.child(50 + r as u64)))
                .collect();
            let _ = train_step(&mut params, &mut opt, &batch, &cfg, &schedule, epoch * 1000 + bi, &ss, Some(&pairs)).unwrap();
        }
        let v = evaluate_split(&params.tables, &params.encoder, &split, EvalStage::Valid, &[10], false, &[]).unwrap();
        let nd = v.report.ndcg[&10];
        if nd > best.1 {
            best = (epoch, nd);
        }
        if epoch % 20 == 0 || epoch == epochs - 1 {
            let t = evaluate_split(&params.tables, &params.encoder, &split, EvalStage::Test, &[10], false, &[]).unwrap();
            println!("oracle-CL a={alpha} t={temp} rho={rho} epoch {epoch}: valid {nd:.4} test {:.4}", t.report.ndcg[&10]);
        }
        if epoch >= best.0 + 40 {
            break;
        }
    }
    println!("oracle-CL best valid {:.4} at {}", best.1, best.0);
    let _ = SequenceBatch::from_rows(&[vec![1]], vec![0], 2);
}
