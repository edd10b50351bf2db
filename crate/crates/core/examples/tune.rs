// Temporary tuning harness; not part of the deliverable.
use graphdebias_core::metrics;
use graphdebias_core::synth::{generate, SyntheticSpec};
use graphdebias_core::train::{accuracy, train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("pair");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let hidden: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
    let seeds: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3);

    match mode {
        "pair" => pair(epochs, hidden, lr, seeds),
        "sweep" => sweep(epochs, hidden, lr, seeds),
        "curve" => curve(hidden, lr, seeds),
        "accept" => accept(),
        _ => eprintln!("unknown mode"),
    }
}

fn args_val_fraction() -> f64 {
    std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(0.1)
}

fn epoch_list() -> Vec<usize> {
    std::env::args()
        .nth(10)
        .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect())
        .unwrap_or_else(|| vec![1, 2, 3, 4, 5, 6, 8, 10])
}

fn dropout_arg() -> f64 {
    std::env::args().nth(11).and_then(|s| s.parse().ok()).unwrap_or(0.0)
}

fn test_bias_mode() -> graphdebias_core::synth::TestBiasMode {
    use graphdebias_core::synth::TestBiasMode as M;
    match std::env::args().nth(7).as_deref() {
        Some("inverted") => M::Inverted,
        Some("removed") => M::Removed,
        _ => M::Independent,
    }
}

fn curve(hidden: usize, lr: f64, seeds: u64) {
    for seed in 0..seeds {
        let spec = SyntheticSpec {
            seed: 1000 + seed,
            test_bias: test_bias_mode(),
            ..SyntheticSpec::default()
        };
        let bundle = generate(&spec).unwrap();
        for epochs in epoch_list() {
            let mut config = base_config(epochs, hidden, lr, 2000 + seed);
            config.val_fraction = 0.0;
            config.dropout = dropout_arg();
            let (p_d, rep) = train(&bundle.train, &config).unwrap();
            let acc_d = accuracy(&bundle.test, &p_d).unwrap();
            config.no_debias = true;
            let (p_n, _) = train(&bundle.train, &config).unwrap();
            let acc_n = accuracy(&bundle.test, &p_n).unwrap();
            let auc = metrics::auc(
                &rep.final_q,
                &bundle.bias_flags.iter().map(|&b| !b).collect::<Vec<_>>(),
            )
            .unwrap();
            let (qu, qb) = {
                let mut su = (0.0, 0); let mut sb = (0.0, 0);
                for (q, &f) in rep.final_q.iter().zip(&bundle.bias_flags) {
                    if f { sb = (sb.0 + q, sb.1 + 1) } else { su = (su.0 + q, su.1 + 1) }
                }
                (su.0 / su.1 as f64, sb.0 / sb.1 as f64)
            };
            let qnear = rep.final_q.iter().filter(|&&q| (q - 0.7).abs() <= 0.15).count() as f64
                / rep.final_q.len() as f64;
            println!(
                "seed {seed} ep {epochs:>3}: debias {acc_d:.3} nodebias {acc_n:.3} gap {:+.3} auc {auc:.3} qu {qu:.2} qb {qb:.2} qnear {qnear:.2}",
                acc_d - acc_n
            );
        }
    }
}

fn diagnose(
    bundle: &graphdebias_core::SyntheticBundle,
    params: &graphdebias_core::ParamStore,
    config: &TrainConfig,
) {
    use graphdebias_core::estimator::{sample_negatives, structure_loglik};
    use graphdebias_core::classifier::label_loglik;
    use graphdebias_core::graph::normalize_adjacency;
    use graphdebias_core::posterior::{EnvBranch, E0Mode};
    let mut dy = (0.0, 0.0);
    let mut da = (0.0, 0.0);
    let mut counts = (0.0, 0.0);
    for (i, (g, &flag)) in bundle.train.graphs.iter().zip(&bundle.bias_flags).enumerate() {
        let adj = normalize_adjacency(g).unwrap();
        let y1 = label_loglik(g, &adj, g.label, params, EnvBranch::Independent, E0Mode::Uniform).unwrap();
        let y0 = label_loglik(g, &adj, g.label, params, EnvBranch::Biased, E0Mode::Uniform).unwrap();
        let pairs = sample_negatives(g, 900_000 + i as u64).unwrap();
        let a1 = structure_loglik(g, &pairs, params, EnvBranch::Independent, E0Mode::Uniform, false).unwrap();
        let a0 = structure_loglik(g, &pairs, params, EnvBranch::Biased, E0Mode::Uniform, false).unwrap();
        if flag {
            dy.1 += y1 - y0; da.1 += a1 - a0; counts.1 += 1.0;
        } else {
            dy.0 += y1 - y0; da.0 += a1 - a0; counts.0 += 1.0;
        }
    }
    println!(
        "    diag: dy_unb={:.3} dy_b={:.3} | da_unb={:.3} da_b={:.3} | prior logit={:.3}",
        dy.0 / counts.0, dy.1 / counts.1, da.0 / counts.0, da.1 / counts.1,
        (config.prior_e / (1.0 - config.prior_e)).ln()
    );
}

fn accept_config(epochs: usize, seed: u64) -> TrainConfig {
    use graphdebias_core::train::EStepGranularity;
    let e_step = match std::env::args().nth(2).as_deref() {
        Some("epoch") => EStepGranularity::Epoch,
        _ => EStepGranularity::Batch,
    };
    let epochs_override = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(epochs);
    TrainConfig {
        epochs: epochs_override,
        batch_size: 32,
        lr: 5e-3,
        hidden: 32,
        estimator_hidden: 16,
        prior_e: 0.7,
        seed,
        val_fraction: 0.0,
        e_step,
        ..TrainConfig::default()
    }
}

fn accept() {
    // Criterion 4 + 5 preview with the exact acceptance seeds.
    let mut gaps = Vec::new();
    let mut aucs = Vec::new();
    let mut medians = Vec::new();
    let t0 = Instant::now();
    for s in 1..=5u64 {
        let spec = SyntheticSpec { seed: s, test_bias: graphdebias_core::synth::TestBiasMode::Independent, ..SyntheticSpec::default() };
        let bundle = generate(&spec).unwrap();
        let mut config = accept_config(2, 100 + s);
        let (p_d, rep) = train(&bundle.train, &config).unwrap();
        let acc_d = accuracy(&bundle.test, &p_d).unwrap();
        config.no_debias = true;
        let (p_n, _) = train(&bundle.train, &config).unwrap();
        let acc_n = accuracy(&bundle.test, &p_n).unwrap();
        gaps.push(acc_d - acc_n);
        let unbiased: Vec<bool> = bundle.bias_flags.iter().map(|&b| !b).collect();
        aucs.push(metrics::auc(&rep.final_q, &unbiased).unwrap());
        let mut q = rep.final_q.clone();
        q.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(q[q.len() / 2]);
        println!("seed {s}: debias {acc_d:.3} nodebias {acc_n:.3} gap {:+.3} auc {:.3} med {:.3}", acc_d - acc_n, aucs.last().unwrap(), medians.last().unwrap());
    }
    let (mg, sg) = metrics::mean_sd(&gaps);
    println!("crit4: mean gap {mg:+.4} (sd {sg:.4})  runtime {:.1}s", t0.elapsed().as_secs_f64());
    println!("crit5: min auc {:.3}, medians {:?}", aucs.iter().cloned().fold(f64::INFINITY, f64::min), medians);

    // Criterion 6 preview: sweep on the default bundle seed 42.
    let spec = SyntheticSpec { test_bias: graphdebias_core::synth::TestBiasMode::Independent, ..SyntheticSpec::default() };
    let bundle = generate(&spec).unwrap();
    let grid = [0.1, 0.3, 0.5, 0.6, 0.7, 0.9, 0.99];
    let mut rows = Vec::new();
    let t1 = Instant::now();
    for &prior in &grid {
        let mut accs = Vec::new();
        for s in 1..=5u64 {
            let mut config = accept_config(std::env::args().nth(4).and_then(|x| x.parse().ok()).unwrap_or(3), 200 + s);
            config.prior_e = prior;
            let (params, _) = train(&bundle.train, &config).unwrap();
            accs.push(accuracy(&bundle.test, &params).unwrap());
        }
        let (m, sd) = metrics::mean_sd(&accs);
        rows.push(m);
        println!("prior {prior:>5}: acc {m:.4} ± {sd:.4}");
    }
    let best_interior = rows[1..6].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("crit6: best interior {best_interior:.4} vs p0.1 {:.4} vs p0.99 {:.4}  runtime {:.1}s", rows[0], rows[6], t1.elapsed().as_secs_f64());
}

fn base_config(epochs: usize, hidden: usize, lr: f64, seed: u64) -> TrainConfig {
    let estimator_hidden = std::env::args()
        .nth(8)
        .and_then(|s| s.parse().ok())
        .unwrap_or(hidden / 2);
    let batch_size = std::env::args()
        .nth(12)
        .and_then(|s| s.parse().ok())
        .unwrap_or(32);
    TrainConfig {
        epochs,
        hidden,
        estimator_hidden,
        lr,
        seed,
        batch_size,
        ..TrainConfig::default()
    }
}

fn pair(epochs: usize, hidden: usize, lr: f64, seeds: u64) {
    let mut gaps = Vec::new();
    for seed in 0..seeds {
        let spec = SyntheticSpec {
            seed: 1000 + seed,
            test_bias: test_bias_mode(),
            ..SyntheticSpec::default()
        };
        let t0 = Instant::now();
        let bundle = generate(&spec).unwrap();
        let nodes: usize = bundle.train.graphs.iter().map(|g| g.node_count()).sum();
        let max_nodes = bundle.train.graphs.iter().map(|g| g.node_count()).max().unwrap();
        let gen_t = t0.elapsed().as_secs_f64();

        let mut config = base_config(epochs, hidden, lr, 2000 + seed);
        config.val_fraction = args_val_fraction();
        config.patience = std::env::args().nth(9).and_then(|s| s.parse().ok()).unwrap_or(20);
        let t0 = Instant::now();
        let (params, report) = train(&bundle.train, &config).unwrap();
        diagnose(&bundle, &params, &config);
        let debias_t = t0.elapsed().as_secs_f64();
        let acc_debias = accuracy(&bundle.test, &params).unwrap();
        let train_acc = accuracy(&bundle.train, &params).unwrap();
        let auc = metrics::auc(
            &report.final_q,
            &bundle.bias_flags.iter().map(|&b| !b).collect::<Vec<_>>(),
        )
        .unwrap();
        let q_near_prior = report
            .final_q
            .iter()
            .filter(|&&q| (q - config.prior_e).abs() <= 0.15)
            .count() as f64
            / report.final_q.len() as f64;
        let (mean_unb, mean_b) = {
            let mut su = (0.0, 0); let mut sb = (0.0, 0);
            for (q, &f) in report.final_q.iter().zip(&bundle.bias_flags) {
                if f { sb = (sb.0 + q, sb.1 + 1) } else { su = (su.0 + q, su.1 + 1) }
            }
            (su.0 / su.1 as f64, sb.0 / sb.1 as f64)
        };

        config.no_debias = true;
        let t0 = Instant::now();
        let (params_nd, report_nd) = train(&bundle.train, &config).unwrap();
        let nodebias_t = t0.elapsed().as_secs_f64();
        let acc_nd = accuracy(&bundle.test, &params_nd).unwrap();
        let train_acc_nd = accuracy(&bundle.train, &params_nd).unwrap();

        gaps.push(acc_debias - acc_nd);
        println!(
            "seed {seed}: nodes={nodes} max={max_nodes} gen={gen_t:.1}s | debias acc={acc_debias:.3} (train {train_acc:.3}, {}ep best {:?}, {debias_t:.1}s) | nodebias acc={acc_nd:.3} (train {train_acc_nd:.3}, {}ep best {:?}, {nodebias_t:.1}s) | gap={:+.3} auc={auc:.3} qnear={q_near_prior:.2} qu={mean_unb:.3} qb={mean_b:.3}",
            report.epochs_run(), report.best_epoch, report_nd.epochs_run(), report_nd.best_epoch, acc_debias - acc_nd
        );
    }
    let (m, s) = metrics::mean_sd(&gaps);
    println!("mean gap = {m:+.4} (sd {s:.4})");
}

fn sweep(epochs: usize, hidden: usize, lr: f64, seeds: u64) {
    let spec = SyntheticSpec {
        seed: 1000,
        test_bias: test_bias_mode(),
        ..SyntheticSpec::default()
    };
    let bundle = generate(&spec).unwrap();
    for prior in [0.1, 0.3, 0.5, 0.6, 0.7, 0.9, 0.99] {
        let mut accs = Vec::new();
        for seed in 0..seeds {
            let mut config = base_config(epochs, hidden, lr, 3000 + seed);
            config.val_fraction = 0.0;
            config.prior_e = prior;
            let (params, _) = train(&bundle.train, &config).unwrap();
            accs.push(accuracy(&bundle.test, &params).unwrap());
        }
        let (m, s) = metrics::mean_sd(&accs);
        println!("prior {prior:>5}: acc {m:.3} ± {s:.3}");
    }
    let mut accs = Vec::new();
    for seed in 0..seeds {
        let mut config = base_config(epochs, hidden, lr, 3000 + seed);
        config.val_fraction = 0.0;
        config.no_debias = true;
        let (params, _) = train(&bundle.train, &config).unwrap();
        accs.push(accuracy(&bundle.test, &params).unwrap());
    }
    let (m, s) = metrics::mean_sd(&accs);
    println!("no-debias: acc {m:.3} ± {s:.3}");
}
