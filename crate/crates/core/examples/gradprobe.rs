//! Scratch: per-term gradient norms through a real batch.

use cadirec_core::config::Config;
use cadirec_core::contrastive::cl_loss_graph;
use cadirec_core::corpus::{build_splits, generate_markov_corpus};
use cadirec_core::diffusion::{build_schedule, diffusion_loss_graph, draw_diffusion};
use cadirec_core::graph::Graph;
use cadirec_core::rng::SeedStream;
use cadirec_core::sr_encoder::{draw_supervision, encode_graph, last_states, rec_loss_graph, Mode};
use cadirec_core::trainer::{fit, make_view_pairs, register_params, ModelParams};
use cadirec_core::eval::{evaluate_split, EvalStage};

fn main() {
    let (corpus, _chain) = generate_markov_corpus(300, 200, 7, (12, 24), 0.15);
    let split = build_splits(&corpus, 22).unwrap();
    let mut cfg = Config::default();
    cfg.model.d = 24;
    cfg.data.max_len = 22;
    cfg.augment.respace_steps = 8;
    cfg.train.batch_size = 12;
    cfg.train.lr = 2e-3;
    cfg.train.alpha = 0.0; // train rec-only first
    cfg.train.beta = 0.0;
    cfg.train.rho = 0.0;
    cfg.train.epochs = 10;
    cfg.train.patience = 0;
    let res = fit::<f64>(&cfg, &split).unwrap();
    let params: ModelParams<f64> = res.checkpoint.params;
    let schedule = build_schedule::<f64>(1000, cfg.diffusion.schedule, cfg.diffusion.beta0).unwrap();

    cfg.train.rho = 0.2;
    let stream = SeedStream::new(123);
    let batch = split.batches(12, &SeedStream::new(9)).next().unwrap();
    let pairs = make_view_pairs(&params, &schedule, &cfg, &batch, &stream.child(3)).unwrap();

    // build each loss on its own tape and report block-group grad norms
    let probe = |name: &str, which: u8| {
        let mut g: Graph<f64> = Graph::new();
        let nodes = register_params(&mut g, &params);
        let mut s = SeedStream::new(777);
        let loss = match which {
            0 => {
                let h = encode_graph(&mut g, &nodes.tables, &nodes.encoder, 2, 0.0, &batch, Mode::Eval, &mut s);
                let sup = draw_supervision(&batch, 200, &mut SeedStream::new(5));
                rec_loss_graph(&mut g, h, nodes.tables.item, &sup)
            }
            1 => {
                let rows1: Vec<Vec<u32>> = pairs.iter().map(|p| p.view1.clone()).collect();
                let rows2: Vec<Vec<u32>> = pairs.iter().map(|p| p.view2.clone()).collect();
                let b1 = batch.with_rows(&rows1);
                let b2 = batch.with_rows(&rows2);
                let h1 = encode_graph(&mut g, &nodes.tables, &nodes.encoder, 2, 0.0, &b1, Mode::Eval, &mut s);
                let h2 = encode_graph(&mut g, &nodes.tables, &nodes.encoder, 2, 0.0, &b2, Mode::Eval, &mut s);
                let l1 = last_states(&mut g, h1, 12, 22);
                let l2 = last_states(&mut g, h2, 12, 22);
                cl_loss_graph(&mut g, l1, l2, 1.0)
            }
            _ => {
                let draws = draw_diffusion::<f64>(&batch, 0.2, 1000, 24, &mut SeedStream::new(6));
                diffusion_loss_graph(&mut g, &nodes.tables, &nodes.denoiser, &batch, &draws, &schedule, false, Mode::Eval, &mut s).total
            }
        };
        let val = g.value(loss).item();
        let mut grads = g.backward(loss);
        let shapes = params.block_shapes();
        let names: Vec<String> = params.named_blocks().iter().map(|(n, _)| n.clone()).collect();
        let mut by_group = std::collections::BTreeMap::new();
        for ((id, (r, c)), n) in nodes.order.iter().zip(shapes).zip(names.iter()) {
            let t = grads.take_or_zeros(*id, r, c);
            let sq: f64 = t.data().iter().map(|v| v * v).sum();
            let group = if n.starts_with("enc") { "encoder" } else if n.starts_with("den") { "denoiser" } else { n.as_str() };
            *by_group.entry(group.to_string()).or_insert(0.0) += sq;
        }
        print!("{name:<6} loss {val:7.4} |");
        for (gname, sq) in by_group {
            print!(" {gname} {:.4}", (sq as f64).sqrt());
        }
        println!();
    };
    probe("rec", 0);
    probe("cl", 1);
    probe("diff", 2);

    let t = evaluate_split(&params.tables, &params.encoder, &split, EvalStage::Test, &[10], false, &[]).unwrap();
    println!("after 10 rec-only epochs: test ndcg {:.4}", t.report.ndcg[&10]);
}
