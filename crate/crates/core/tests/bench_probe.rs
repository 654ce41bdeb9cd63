//! Scratch timing probe; deleted before the suite ships.

use blockworld::analysis::{cluster_phrases, sweep};
use blockworld::checkpoint;
use blockworld::config::{Config, ConvModeOpt};
use blockworld::data::{corpus_vocabulary, generate_corpus, to_samples, Relation};
use blockworld::eval::{evaluate, score_samples, EvalMode};
use blockworld::model::Model;
use blockworld::train::train;
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::path::Path;
use std::time::Instant;

fn gen_cfg(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.world_d = 2;
    cfg.world_h = 9;
    cfg.world_w = 9;
    cfg.num_blocks = 8;
    cfg.n_op = 32;
    cfg.d_op_vec = 8;
    cfg.d_e = 24;
    cfg.hidden = 48;
    cfg.conv_mode = ConvModeOpt::ReluBatchNorm;
    cfg.scenes = 100;
    cfg.examples_per_scene = 29;
    cfg.blocks_per_scene = 5;
    cfg.train_frac = 0.7;
    cfg.val_frac = 0.2;
    cfg.relations = [
        "left",
        "right",
        "above-north",
        "below-south",
        "on-top",
        "rotate-45-clockwise",
        "k-lengths-offset",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cfg.batch_size = 16;
    cfg.max_steps = 40000;
    cfg.eval_every = 10;
    cfg.lr = 4e-3;
    cfg.w_src = 2.0;
    cfg.lambda_op = 0.02;
    cfg.early_stop_acc = 0.0;
    cfg.early_stop_xyz = 0.0;
    cfg.early_stop_theta = 0.0;
    cfg
}

#[test]
fn probe_generalization() {
    let seed = 12u64;
    let cfg = gen_cfg(seed);
    let corpus = generate_corpus(&cfg).unwrap();
    eprintln!(
        "seed={} train/val/test examples: {}/{}/{}",
        seed,
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    let vocab = corpus_vocabulary(corpus.train.iter());
    let train_samples = to_samples(&corpus.train, &vocab);
    let val_samples = to_samples(&corpus.val, &vocab);
    let test_samples = to_samples(&corpus.test, &vocab);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let n_op = cfg.n_op;
    let mut model: Model<f64> = Model::init(cfg, vocab, &mut rng);
    let t0 = Instant::now();
    let mut epoch = 0usize;
    let out = train(&mut model, &train_samples, &val_samples, &mut |line| {
        epoch += 1;
        if epoch % 25 == 0 || line.contains("early_stop") || line.contains("abort") {
            eprintln!("{line}");
        }
    })
    .unwrap();
    let dt = t0.elapsed().as_secs_f64();
    eprintln!(
        "steps={} epochs={} early={} elapsed={:.0}s",
        out.steps, out.epochs, out.early_stopped, dt
    );
    let ckpt = format!("/tmp/probe_seed{seed}.bwck");
    checkpoint::save(Path::new(&ckpt), &model).unwrap();
    eprintln!("saved {ckpt}");

    let e2e = evaluate(&mut model, &test_samples, EvalMode::EndToEnd, 64).unwrap();
    let gold = evaluate(&mut model, &test_samples, EvalMode::GoldSource, 64).unwrap();
    eprintln!(
        "test end-to-end: acc={:.4} xyz={:.4} theta={:.4}",
        e2e.source_accuracy, e2e.mean_xyz, e2e.mean_abs_theta
    );
    eprintln!(
        "test gold-source: xyz={:.4} theta={:.4}",
        gold.mean_xyz, gold.mean_abs_theta
    );

    let scored = score_samples(&mut model, &test_samples, EvalMode::EndToEnd, 64).unwrap();
    let rot: Vec<f64> = scored
        .iter()
        .zip(&corpus.test)
        .filter(|(_, ex)| ex.meta.relation == Relation::Rotate45Clockwise)
        .map(|(s, _)| s.theta_err.abs())
        .collect();
    eprintln!(
        "rotation-bearing test examples: {} mean |theta err| = {:.4}",
        rot.len(),
        rot.iter().sum::<f64>() / rot.len() as f64
    );

    let threshold = 0.5 * (n_op as f64).ln();
    let table = cluster_phrases(&mut model, &corpus.train, threshold).unwrap();
    eprintln!(
        "clusters at H<={threshold:.3}: {} clusters, {}/{} selected, mean purity {:.4}",
        table.clusters.len(),
        table.selected,
        table.total,
        table.mean_purity
    );
    for c in &table.clusters {
        eprintln!(
            "  op {:>2} count {:>4} purity {:.3} majority {:<20} meanH {:.3}",
            c.op_index, c.count, c.purity, c.majority_relation, c.mean_entropy
        );
    }

    // Mean dx and planar displacement magnitude per op, interior and full.
    for op in 0..n_op {
        let field = sweep(&mut model, op, 9).unwrap();
        let interior: Vec<_> = field
            .probes
            .iter()
            .filter(|p| p.x > 1.0 && p.x < 8.0 && p.y > 1.0 && p.y < 8.0)
            .collect();
        let mdx_i = interior.iter().map(|p| p.dx).sum::<f64>() / interior.len() as f64;
        let pl_i = interior
            .iter()
            .map(|p| (p.dx * p.dx + p.dy * p.dy).sqrt())
            .sum::<f64>()
            / interior.len() as f64;
        let mdx_f = field.probes.iter().map(|p| p.dx).sum::<f64>() / field.probes.len() as f64;
        let pl_f = field
            .probes
            .iter()
            .map(|p| (p.dx * p.dx + p.dy * p.dy).sqrt())
            .sum::<f64>()
            / field.probes.len() as f64;
        eprintln!(
            "  sweep op {op:>2}: interior dx {mdx_i:+.3} planar {pl_i:.3} | full dx {mdx_f:+.3} planar {pl_f:.3}"
        );
    }
}
