//! End-to-end run on the committed synthetic benchmark: generate the world,
//! train the compact network, report retrieval accuracy and the perturbed
//! F1max scores.
//!
//! Run with `cargo run --release --example toy_pipeline`.

use std::collections::BTreeMap;
use std::time::Instant;

use scangraph::evaluation::{evaluate_sequence, robustness_eval, EvalContext, Perturbation};
use scangraph::network::describe;
use scangraph::retrieval::DescriptorDb;
use scangraph::toybench::{generate, toy_feature_config, toy_grid, toy_train_config, ToyBenchConfig};
use scangraph::training::{build_pair_index, train, PairingConfig};

// TEMPORARY experiment knobs via env vars (EU_W, EIG_W, OCCL, MINPTS, LR, EPOCHS, QPE, M, K)
fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let t0 = Instant::now();
    let mut cfg = ToyBenchConfig::default();
    cfg.occlusion_extent = env_f64("OCCL", cfg.occlusion_extent);
    let data = generate(&cfg);
    let mut features_cfg = toy_feature_config();
    features_cfg.min_points = env_usize("MINPTS", features_cfg.min_points);
    let grid = toy_grid();
    let frames: Vec<_> = data
        .clouds
        .iter()
        .map(|c| scangraph::features::extract_frame_features(c, &grid, &features_cfg).unwrap())
        .collect();
    println!(
        "dataset: {} frames, {:.1} avg segments, {:?}",
        data.len(),
        frames.iter().map(|f| f.len()).sum::<usize>() as f64 / frames.len() as f64,
        t0.elapsed()
    );

    let pairs = build_pair_index(&data.poses, &PairingConfig::default());

    let train_idx = data.train_indices();
    let train_frames: Vec<_> = train_idx.iter().map(|&i| frames[i].clone()).collect();
    let train_poses: Vec<_> = train_idx.iter().map(|&i| data.poses[i].clone()).collect();
    let train_pairs = build_pair_index(&train_poses, &PairingConfig::default());

    let t1 = Instant::now();
    let mut train_cfg = toy_train_config(7);
    let euw = env_usize("EU_W", 16);
    let eigw = env_usize("EIG_W", 16);
    train_cfg.network.eu_layers = vec![vec![euw, euw], vec![2 * euw]];
    train_cfg.network.eig_layers = vec![vec![eigw, eigw], vec![2 * eigw]];
    train_cfg.network.knn_k = env_usize("K", train_cfg.network.knn_k);
    train_cfg.learning_rate = env_f64("LR", train_cfg.learning_rate);
    train_cfg.epochs = env_usize("EPOCHS", train_cfg.epochs);
    train_cfg.queries_per_epoch = Some(env_usize("QPE", 60));
    train_cfg.loss.negatives_per_batch = env_usize("M", train_cfg.loss.negatives_per_batch);
    let outcome = train(&train_frames, &train_pairs, &train_cfg).expect("training succeeds");
    let losses = &outcome.epoch_mean_loss;
    println!(
        "training: {} epochs in {:?}; loss {:.4} -> {:.4} (ratio {:.4})",
        losses.len(),
        t1.elapsed(),
        losses[0],
        losses.last().unwrap(),
        losses.last().unwrap() / losses[0]
    );

    let net = &outcome.network;
    let mut db = DescriptorDb::new(train_cfg.network.descriptor_dim);
    for &i in &train_idx {
        db.insert(0, i as u64, &describe(&frames[i], net).unwrap()).unwrap();
    }
    db.build_index().unwrap();
    let holdout = data.holdout_indices();
    let mut correct = 0;
    for &i in &holdout {
        let hits = db.query(&describe(&frames[i], net).unwrap(), 1).unwrap();
        if data.place_of[hits[0].frame_id as usize] == data.place_of[i] {
            correct += 1;
        }
    }
    println!(
        "top-1 retrieval on {} held-out queries: {}/{} = {:.1}%",
        holdout.len(),
        correct,
        holdout.len(),
        100.0 * correct as f64 / holdout.len() as f64
    );

    // distance diagnostics: within-place vs cross-place for holdout queries
    let descriptors: BTreeMap<usize, _> =
        (0..data.len()).map(|i| (i, describe(&frames[i], net).unwrap())).collect();
    let mut within = Vec::new();
    let mut cross = Vec::new();
    for &i in &holdout {
        for &j in &train_idx {
            let d = descriptors[&i].distance(&descriptors[&j]);
            if data.place_of[i] == data.place_of[j] {
                within.push(d);
            } else {
                cross.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("holdout distances: within {:.3}, cross {:.3}", mean(&within), mean(&cross));

    let report = evaluate_sequence(&descriptors, &pairs, 100, 9).unwrap();
    println!(
        "unperturbed:  F1max {:.3}, EP {:.3}",
        report.f1_max, report.extended_precision
    );

    let ctx = EvalContext {
        pairs: &pairs,
        grid: &grid,
        features: &features_cfg,
        np_multiplier: 100,
    };
    for perturbation in [Perturbation::random_rotation(), Perturbation::sector_occlusion()] {
        let r = robustness_eval(&data.clouds, net, &ctx, perturbation, 9).unwrap();
        println!(
            "{}: F1max {:.3}, EP {:.3} (delta {:+.3})",
            perturbation.label(),
            r.f1_max,
            r.extended_precision,
            r.f1_max - report.f1_max,
        );
    }
    println!("total {:?}", t0.elapsed());
}
