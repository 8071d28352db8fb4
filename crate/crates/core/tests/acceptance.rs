//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::{BTreeSet, HashMap};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gapcascade_core::arbiter::{
    cache_key, parse_response, Arbiter, ArbiterConfig, ArbitrationRequest, ArbitrationResult, Descriptor,
    DescriptorDb, GenerationParams, LlmClient, MockLlmClient, ResponseCache, TransportError,
};
use gapcascade_core::backends::SampleRef;
use gapcascade_core::eval::{
    dataset_stats, expected_latency, metrics, run_pipeline, sweep_trigger, threshold_grid, unit_steps, ArbiterModel,
    ArbiterStage, Cascade, ConfusionMatrix, EvalRecord, Split, StageLatencies, RECORD_SCHEMA_VERSION,
};
use gapcascade_core::fusion::{
    aggregate, fusion_weights, ClassDistribution, EnsembleEngine, EnsemblePrediction, FusionConfig, ModelOpinion,
    RouterConfig,
};
use gapcascade_core::loss::{diversity_loss_hard, focal_loss, js_divergence, total_loss, LossBatch, LossConfig, PairMode};
use gapcascade_core::synth::{
    gaussian_blobs, long_tail_manifest, synthetic_attributes, synthetic_descriptors, synthetic_log, synthetic_records,
};
use gapcascade_core::train::{
    cosine_warm_restarts, ema_update, make_toy_ensemble, train, TrainConfig, PROJECTION,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_dist(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let scale = rng.random_range(0.1..8.0);
    let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn opinion(id: String, probs: Vec<f64>) -> ModelOpinion {
    ModelOpinion::new(id, ClassDistribution::new(probs).expect("valid distribution"))
}

fn c01_fusion_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..10_000 {
        let n = rng.random_range(2..=8);
        let c = [2, 10, 306][trial % 3];
        let ops: Vec<ModelOpinion> = (0..n).map(|i| opinion(format!("m{i}"), random_dist(&mut rng, c))).collect();
        let cfg = FusionConfig {
            temperature: rng.random_range(0.05..5.0),
            k: c.min(3),
        };
        let ent: Vec<f64> = ops.iter().map(|o| o.entropy).collect();
        let w = fusion_weights(&ent, &cfg).map_err(|e| e.to_string())?;
        let sum: f64 = w.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("trial {trial}: weights sum to {sum}"))?;
        let p = aggregate(&ops, &w).map_err(|e| e.to_string())?;
        let psum: f64 = p.probs().iter().sum();
        ensure(
            (psum - 1.0).abs() <= 1e-9 && p.probs().iter().all(|v| (0.0..=1.0).contains(v)),
            || format!("trial {trial}: P_sys invalid (sum {psum})"),
        )?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<ModelOpinion> = perm.iter().map(|&i| ops[i].clone()).collect();
        let wp = fusion_weights(&permuted.iter().map(|o| o.entropy).collect::<Vec<_>>(), &cfg).map_err(|e| e.to_string())?;
        let pp = aggregate(&permuted, &wp).map_err(|e| e.to_string())?;
        for (j, &i) in perm.iter().enumerate() {
            ensure((wp[j] - w[i]).abs() <= 1e-12, || format!("trial {trial}: weights not equivariant"))?;
        }
        let dmax = p.probs().iter().zip(pp.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(dmax <= 1e-12, || format!("trial {trial}: P_sys changed by {dmax:e} under permutation"))?;
        if trial % 7 == 0 {
            let pred = EnsembleEngine::new(cfg, RouterConfig::default()).predict(&ops).map_err(|e| e.to_string())?;
            ensure(pred.weights == w, || format!("trial {trial}: engine weights differ"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("10000 sets in {secs:.2} s"))
}

fn c02_temperature_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cold = FusionConfig { temperature: 1e-3, k: 1 };
    let hot = FusionConfig { temperature: 1e6, k: 1 };
    let mut min_winner = f64::INFINITY;
    let mut max_dev: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let low = rng.random_range(0.0..3.0);
        let mut ent: Vec<f64> = (0..n).map(|_| low + rng.random_range(0.1..3.0)).collect();
        let winner = rng.random_range(0..n);
        ent[winner] = low;
        let w = fusion_weights(&ent, &cold).map_err(|e| e.to_string())?;
        min_winner = min_winner.min(w[winner]);
        let w = fusion_weights(&ent, &hot).map_err(|e| e.to_string())?;
        max_dev = w.iter().map(|v| (v - 1.0 / n as f64).abs()).fold(max_dev, f64::max);
    }
    ensure(min_winner > 0.999, || format!("cold winner weight {min_winner}"))?;
    ensure(max_dev < 1e-3, || format!("hot deviation from uniform {max_dev:e}"))?;
    let ln2 = 2f64.ln();
    let w = fusion_weights(&[0.0, ln2, ln2, ln2], &FusionConfig { temperature: 1.0, k: 1 }).map_err(|e| e.to_string())?;
    let err = w.iter().zip([0.4, 0.2, 0.2, 0.2]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-12, || format!("worked example off by {err:e}"))?;
    Ok(format!("cold min {min_winner:.6}, hot dev {max_dev:.1e}, worked err {err:.1e}"))
}

/// Straight-line fusion, routing and token-overlap arbitration.
struct Oracle {
    label: usize,
    route: bool,
    candidates: Vec<usize>,
    p_sys: Vec<f64>,
}

fn oracle(logits: &[&[f64]], tau: f64, k: usize, router: (f64, f64), arb: Option<(&[String], &[Descriptor], f64)>) -> Oracle {
    let c = logits[0].len();
    let mut dists = Vec::new();
    let mut ents = Vec::new();
    for z in logits {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.max(1e-12).ln()).sum();
        ents.push(h.clamp(0.0, (c as f64).ln()));
        dists.push(p);
    }
    let scores: Vec<f64> = ents.iter().map(|u| -u / tau).collect();
    let smax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - smax).exp()).collect();
    let es: f64 = ex.iter().sum();
    let alpha: Vec<f64> = ex.iter().map(|v| v / es).collect();
    let mut p_sys = vec![0.0; c];
    for (a, p) in alpha.iter().zip(&dists) {
        for j in 0..c {
            p_sys[j] += a * p[j];
        }
    }
    for v in p_sys.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| p_sys[b].partial_cmp(&p_sys[a]).unwrap().then(a.cmp(&b)));
    let candidates: Vec<usize> = order[..k].to_vec();
    let s = p_sys[candidates[0]];
    let gap = if k > 1 { (s - p_sys[candidates[1]]).max(0.0) } else { s };
    let route = s < router.0 || gap < router.1;
    let mut label = candidates[0];
    if let (true, Some((attrs, descs, lambda))) = (route, arb) {
        let mut best = f64::NEG_INFINITY;
        for &cand in &candidates {
            let d = &descs[cand];
            let hits = d.support.iter().filter(|t| attrs.contains(t)).count() as f64;
            let conflict = d.contradict.iter().filter(|t| attrs.contains(t)).count() as f64;
            let score = hits / d.support.len().max(1) as f64 - lambda * conflict;
            if score > best {
                best = score;
                label = cand;
            }
        }
    }
    Oracle {
        label,
        route,
        candidates,
        p_sys,
    }
}

fn c03_pipeline_oracle() -> Outcome {
    let (n, c, m) = (1000, 12, 4);
    let log = synthetic_log(3, n, c, m).map_err(|e| e.to_string())?;
    let db = synthetic_descriptors(&log.manifest.class_names).map_err(|e| e.to_string())?;
    let attrs = synthetic_attributes(&log.manifest);
    let lambda = 0.5;
    let router = RouterConfig::default();
    let cascade = Cascade {
        backends: log.backends(),
        engine: EnsembleEngine::new(FusionConfig::default(), router),
        arbiter: Some(ArbiterStage {
            arbiter: Arbiter::new(
                ArbiterConfig {
                    lambda_pen: lambda,
                    ..ArbiterConfig::default()
                },
                Arc::new(MockLlmClient::new(attrs.clone(), lambda)),
            )
            .map_err(|e| e.to_string())?,
            descriptors: db.clone(),
        }),
        policy: Default::default(),
    };
    let recs = run_pipeline(&log.manifest, &cascade, Split::Test, 4).map_err(|e| e.to_string())?;
    ensure(recs.len() == n, || format!("{} records", recs.len()))?;
    let descs: Vec<Descriptor> = (0..c).map(|i| db.get(i).unwrap().clone()).collect();
    let labels: HashMap<&str, usize> = log.manifest.entries.iter().map(|e| (e.sample_id.as_str(), e.label)).collect();
    let mut routed = 0;
    for r in &recs {
        let z: Vec<&[f64]> = log.stores.iter().map(|s| s.get(&r.sample_id).unwrap()).collect();
        let tokens: Vec<String> = {
            let name = &log.manifest.class_names[labels[r.sample_id.as_str()]];
            (1..4).map(|k| format!("{name}:a{k}")).collect()
        };
        let o = oracle(&z, 1.0, 3, (router.tau_conf, router.tau_gap), Some((&tokens, &descs, lambda)));
        ensure(
            o.label == r.final_label && o.route == r.prediction.route && o.candidates == r.prediction.candidates,
            || format!("sample {} diverges from oracle", r.sample_id),
        )?;
        let err = o.p_sys.iter().zip(r.prediction.p_sys.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-12, || format!("sample {}: P_sys differs by {err:e}", r.sample_id))?;
        routed += usize::from(o.route);
    }

    let grid = threshold_grid(&unit_steps(9), &unit_steps(9)).map_err(|e| e.to_string())?;
    let sweep = sweep_trigger(&recs, &grid, &ArbiterModel::PerfectInCandidates).map_err(|e| e.to_string())?;
    let at = |i: usize, j: usize| sweep.points[i * 9 + j].trigger_rate;
    for i in 0..9 {
        for j in 0..8 {
            ensure(at(i, j) <= at(i, j + 1), || format!("trigger rate drops along tau_gap at row {i}"))?;
            ensure(at(j, i) <= at(j + 1, i), || format!("trigger rate drops along tau_conf at column {i}"))?;
        }
    }
    Ok(format!("{n} records match, {routed} routed, 9x9 grid monotone"))
}

fn c04_gradients() -> Outcome {
    let start = Instant::now();
    let (c, models, batch, h) = (8, 4, 16, 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let mut logits: Vec<Vec<Vec<f64>>> = (0..models)
            .map(|_| (0..batch).map(|_| (0..c).map(|_| rng.random_range(-3.0..3.0)).collect()).collect())
            .collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..c)).collect();
        let hard: Vec<bool> = (0..batch).map(|_| rng.random_bool(0.5)).collect();
        let mut cfg = LossConfig::new(c);
        cfg.alpha_per_class = {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
            let mean = raw.iter().sum::<f64>() / c as f64;
            raw.into_iter().map(|a| a / mean).collect()
        };
        let temperature = rng.random_range(0.5..2.0);
        let eval = |l: &[Vec<Vec<f64>>]| {
            total_loss(
                &LossBatch {
                    logits: l,
                    labels: &labels,
                    hard_flags: &hard,
                    temperature,
                },
                &cfg,
            )
        };
        let analytic = eval(&logits).map_err(|e| e.to_string())?.grad_logits;
        let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
        for i in 0..models {
            for b in 0..batch {
                for k in 0..c {
                    let orig = logits[i][b][k];
                    logits[i][b][k] = orig + h;
                    let up = eval(&logits).map_err(|e| e.to_string())?.total;
                    logits[i][b][k] = orig - h;
                    let down = eval(&logits).map_err(|e| e.to_string())?.total;
                    logits[i][b][k] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[i][b][k];
                    diff = diff.max((a - numeric).abs());
                    scale = scale.max(a.abs()).max(numeric.abs());
                }
            }
        }
        let rel = diff / scale.max(f64::MIN_POSITIVE);
        ensure(rel < 1e-4, || format!("instance {inst}: relative error {rel:e}"))?;
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("max relative error {worst:.2e} over 100 instances in {secs:.1} s"))
}

fn c05_loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ce_err: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(2..20);
        let p = random_dist(&mut rng, c);
        let y = rng.random_range(0..c);
        let d = ClassDistribution::new(p.clone()).map_err(|e| e.to_string())?;
        let f = focal_loss(&d, y, 0.0, 1.0).map_err(|e| e.to_string())?;
        ce_err = ce_err.max((f + p[y].ln()).abs());
    }
    ensure(ce_err <= 1e-12, || format!("focal vs CE differs by {ce_err:e}"))?;
    let ln2 = 2f64.ln();
    for i in 0..10_000 {
        let c = rng.random_range(2..12);
        let p = ClassDistribution::new(random_dist(&mut rng, c)).unwrap();
        let q = ClassDistribution::new(random_dist(&mut rng, c)).unwrap();
        let pq = js_divergence(&p, &q).map_err(|e| e.to_string())?;
        let qp = js_divergence(&q, &p).map_err(|e| e.to_string())?;
        ensure((pq - qp).abs() <= 1e-12, || format!("pair {i}: JS asymmetric"))?;
        ensure((0.0..=ln2 + 1e-12).contains(&pq), || format!("pair {i}: JS = {pq} out of range"))?;
    }
    let a = ClassDistribution::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let b = ClassDistribution::new(vec![0.0, 0.0, 0.5, 0.5]).unwrap();
    let v = diversity_loss_hard(&[vec![a, b]], &[true], PairMode::Ordered).map_err(|e| e.to_string())?;
    ensure((v + 2.0 * ln2).abs() <= 1e-12, || format!("disjoint diversity {v}"))?;
    Ok(format!("CE err {ce_err:.1e}, 10000 JS pairs ok, diversity {v:.12}"))
}

fn toy_setup() -> (gapcascade_core::train::Dataset, Vec<gapcascade_core::train::ToyBackbone>, TrainConfig) {
    let data = gaussian_blobs(42, 1000, 5, 2, 4.0, 1.0);
    let ens = make_toy_ensemble(42, 4, 2, 8, 5).expect("valid toy shape");
    (data, ens, TrainConfig::toy(5))
}

fn c06_toy_training() -> Outcome {
    let start = Instant::now();
    let (data, ens, cfg) = toy_setup();
    let clean = train(&data, &ens, &cfg, None).map_err(|e| e.to_string())?;
    let clean_secs = start.elapsed().as_secs_f64();
    let epochs_to_95 = clean.epochs.iter().position(|e| e.train_top1 >= 0.95);
    let clean_acc = clean.epochs.last().map(|e| e.train_top1).unwrap_or(0.0);
    ensure(epochs_to_95.is_some(), || format!("clean run never reached 95% (final {clean_acc:.4})"))?;
    ensure(clean_secs < 60.0, || format!("clean run took {clean_secs:.1} s"))?;

    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut faulty = cfg.clone();
    let mut pool: Vec<usize> = (0..total).collect();
    pool.shuffle(&mut rng);
    faulty.nan_batches = pool[..total / 100].iter().copied().collect::<BTreeSet<_>>();
    let injected = faulty.nan_batches.len();
    let r = train(&data, &ens, &faulty, None).map_err(|e| e.to_string())?;
    let acc = r.epochs.last().map(|e| e.train_top1).unwrap_or(0.0);
    ensure(r.skipped_batch_count == injected, || {
        format!("skipped {} batches, injected {injected}", r.skipped_batch_count)
    })?;
    ensure((acc - clean_acc).abs() <= 0.02, || format!("faulty accuracy {acc:.4} vs clean {clean_acc:.4}"))?;
    for (before, after) in ens.iter().zip(r.final_params.iter().chain(&clean.final_params)) {
        let same = before.groups[PROJECTION]
            .values
            .iter()
            .zip(&after.groups[PROJECTION].values)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("projection of {} changed", before.model_id))?;
    }
    Ok(format!(
        "95% at epoch {}, final {clean_acc:.4} in {clean_secs:.1} s; {injected} NaN batches skipped, faulty final {acc:.4}",
        epochs_to_95.unwrap() + 1
    ))
}

fn c07_schedule_and_ema() -> Outcome {
    let (lo, hi, len) = (0.0005, 0.05, 10);
    let start = cosine_warm_restarts(0, len, lo, hi);
    let end = cosine_warm_restarts(len, len, lo, hi);
    let mid = cosine_warm_restarts(len / 2, len, lo, hi);
    ensure((start - hi).abs() <= 1e-12, || format!("step 0 gives {start}"))?;
    ensure((end - lo).abs() <= 1e-12, || format!("cycle end gives {end}"))?;
    ensure((mid - (lo + hi) / 2.0).abs() <= 1e-12, || format!("midpoint gives {mid}"))?;
    let e = ema_update(&[1.0], &[0.0], 0.9).map_err(|e| e.to_string())?;
    ensure(e[0] == 0.9, || format!("EMA gives {}", e[0]))?;
    Ok("cosine endpoints and midpoint exact, EMA 0.9".into())
}

fn c08_latency() -> Outcome {
    let e = expected_latency(12.5, 1250.0, 0.15).map_err(|e| e.to_string())?;
    ensure(e.serial_ms == 237.5, || format!("got {}", e.serial_ms))?;
    let z = expected_latency(12.5, 1250.0, 0.0).map_err(|e| e.to_string())?;
    ensure(z.serial_ms == 50.0, || format!("gamma = 0 gives {}", z.serial_ms))?;
    Ok(format!("237.5 ms serial ({} ms parallel); gamma = 0 gives 50 ms", e.parallel_ms))
}

fn c09_sweep_shape() -> Outcome {
    let recs = synthetic_records(9, 2000, 10, 4);
    let grid = threshold_grid(&unit_steps(9), &unit_steps(9)).map_err(|e| e.to_string())?;
    let res = sweep_trigger(&recs, &grid, &ArbiterModel::PerfectInCandidates).map_err(|e| e.to_string())?;
    let n = recs.len() as f64;
    for (cfg, p) in grid.iter().zip(&res.points) {
        let mut ok = 0usize;
        for r in &recs {
            let routed = r.prediction.confidence < cfg.tau_conf || r.prediction.gap < cfg.tau_gap;
            ok += usize::from(if routed {
                r.prediction.candidates.contains(&r.true_label)
            } else {
                r.prediction.candidates[0] == r.true_label
            });
        }
        let identity = ok as f64 / n;
        ensure((p.top1 - identity).abs() <= 1e-12, || {
            format!("({}, {}): top1 {} vs identity {identity}", cfg.tau_conf, cfg.tau_gap, p.top1)
        })?;
    }
    let at = |i: usize, j: usize| res.points[i * 9 + j];
    for i in 0..9 {
        for j in 0..8 {
            for (a, b) in [(at(i, j), at(i, j + 1)), (at(j, i), at(j + 1, i))] {
                ensure(b.trigger_rate >= a.trigger_rate && b.top1 >= a.top1, || {
                    format!("accuracy drops between ({}, {}) and ({}, {})", a.tau_conf, a.tau_gap, b.tau_conf, b.tau_gap)
                })?;
            }
        }
    }
    let zero = at(0, 0);
    ensure(zero.trigger_rate == 0.0 && zero.top1 == res.ensemble_top1, || {
        format!("gamma = 0 point {:?} vs ensemble {}", zero, res.ensemble_top1)
    })?;
    let top = res.points.iter().map(|p| p.top1).fold(0.0, f64::max);
    Ok(format!("ensemble {:.4} -> best {top:.4}, identity exact on 81 points", res.ensemble_top1))
}

fn record(id: usize, truth: usize, final_label: usize, c: usize) -> EvalRecord {
    let p_sys = ClassDistribution::one_hot(final_label, c).unwrap();
    let mut candidates = vec![final_label];
    candidates.extend((0..c).filter(|&k| k != final_label).take(2));
    EvalRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        sample_id: format!("r{id}"),
        model_ids: vec!["m".into()],
        model_argmax: vec![final_label],
        prediction: EnsemblePrediction {
            weights: vec![1.0],
            p_sys,
            candidates,
            confidence: 1.0,
            gap: 1.0,
            route: false,
        },
        final_label,
        arbitrated: false,
        fell_back: false,
        from_cache: false,
        true_label: truth,
        latencies: StageLatencies::default(),
    }
}

fn c10_metrics_fixture() -> Outcome {
    let labels = [0, 0, 1, 2];
    let preds = [0, 1, 1, 2];
    let recs: Vec<EvalRecord> = labels.iter().zip(preds).enumerate().map(|(i, (&t, p))| record(i, t, p, 3)).collect();
    let report = metrics(&recs, 3).map_err(|e| e.to_string())?;
    let mut cm = ConfusionMatrix::new(3);
    for (&t, p) in labels.iter().zip(preds) {
        cm.add(t, p).map_err(|e| e.to_string())?;
    }
    let expected = [[1, 1, 0], [0, 1, 0], [0, 0, 1]];
    for (t, row) in expected.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            ensure(cm.get(t, p) == v, || format!("confusion[{t}][{p}] = {}", cm.get(t, p)))?;
        }
    }
    // per class 2TP / (2TP + FP + FN): 2/3, 2/3, 1
    let hand = (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0;
    ensure(report.top1 == 0.75, || format!("top1 {}", report.top1))?;
    ensure((report.macro_f1 - 7.0 / 9.0).abs() <= 1e-12 && (hand - 7.0f64 / 9.0).abs() <= 1e-12, || {
        format!("macro-F1 {}", report.macro_f1)
    })?;
    Ok(format!("top1 {}, macro-F1 {:.6}", report.top1, report.macro_f1))
}

fn c11_dataset_stats() -> Outcome {
    let s = dataset_stats(&long_tail_manifest()).map_err(|e| e.to_string())?;
    ensure(s.total == 116_233, || format!("total {}", s.total))?;
    ensure((s.train, s.val, s.test) == (81_223, 11_488, 23_522), || {
        format!("splits {}/{}/{}", s.train, s.val, s.test)
    })?;
    ensure(format!("{:.2}", s.mean_count) == "379.85", || format!("mean {}", s.mean_count))?;
    ensure(s.max.count == 1276 && s.max.class_name == "jaboticaba", || format!("max {:?}", s.max))?;
    ensure(s.min.count == 25 && s.min.class_name == "muscadine_grape", || format!("min {:?}", s.min))?;
    Ok(format!(
        "total {}, splits {}/{}/{}, mean {:.2}, max {}, min {}, ratio {:.2}:1",
        s.total, s.train, s.val, s.test, s.mean_count, s.max.count, s.min.count, s.imbalance_ratio
    ))
}

/// Client answering with seeded junk, out-of-set names, valid names or transport errors.
struct FuzzClient {
    rng: Mutex<ChaCha8Rng>,
}

impl LlmClient for FuzzClient {
    fn complete(
        &self,
        request: &ArbitrationRequest,
        _prompt: &str,
        _params: &GenerationParams,
    ) -> Result<String, TransportError> {
        let mut rng = self.rng.lock().unwrap();
        let pick = |rng: &mut ChaCha8Rng| request.descriptors[rng.random_range(0..request.descriptors.len())].class_name.clone();
        match rng.random_range(0..10) {
            0 | 1 => Err(TransportError("connection reset".into())),
            2 => {
                let len = rng.random_range(0..40);
                Ok((0..len).map(|_| rng.random_range(32u8..127) as char).collect())
            }
            3 => Ok(format!("{{\"choice\": \"{}\"", pick(&mut rng))),
            4 => Ok(r#"{"choice": "not_a_candidate", "reason": "x"}"#.into()),
            5 => Ok(format!("{{\"choice\": {}}}", rng.random_range(0..100))),
            6 => Ok(format!("Thinking...\n{{\"choice\": \"  {}  \", \"reason\": \"shape\"}}", pick(&mut rng).to_uppercase())),
            _ => Ok(format!("{{\"choice\": \"{}\", \"reason\": \"color\"}}", pick(&mut rng))),
        }
    }
}

fn c12_arbitration_guarantee() -> Outcome {
    let c = 40;
    let names: Vec<String> = (0..c).map(|i| format!("cultivar_{i:02}")).collect();
    let db = DescriptorDb::new(
        names
            .iter()
            .map(|n| Descriptor {
                class_name: n.clone(),
                description: format!("about {n}"),
                support: vec![],
                contradict: vec![],
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let arbiter = Arbiter::new(
        ArbiterConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..ArbiterConfig::default()
        },
        Arc::new(FuzzClient {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(12)),
        }),
    )
    .map_err(|e| e.to_string())?;
    let cache = ResponseCache::new(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(121);
    let pool: Vec<ArbitrationRequest> = (0..600)
        .map(|i| {
            let k = rng.random_range(1..=5);
            let mut classes: Vec<usize> = (0..c).collect();
            classes.shuffle(&mut rng);
            ArbitrationRequest::new(SampleRef::id_only(format!("img{i}")), classes[..k].to_vec(), &db).unwrap()
        })
        .collect();
    let mut originals: HashMap<String, ArbitrationResult> = HashMap::new();
    let (mut hits, mut fallbacks) = (0, 0);
    for i in 0..10_000 {
        let req = &pool[rng.random_range(0..pool.len())];
        let r = arbiter.arbitrate(req);
        ensure(req.candidates.contains(&r.label), || format!("arbitration {i}: label {} outside candidates", r.label))?;
        ensure(r.fell_back == !r.valid, || format!("arbitration {i}: inconsistent flags"))?;
        if r.fell_back {
            fallbacks += 1;
            ensure(r.label == req.candidates[0], || format!("arbitration {i}: fallback is not c1"))?;
        } else {
            ensure(parse_response(&r.raw_response, req) == Some(r.label), || {
                format!("arbitration {i}: label does not match the response")
            })?;
        }
        let key = cache_key(req).map_err(|e| e.to_string())?;
        if r.from_cache {
            hits += 1;
            let orig = originals.get(&key).ok_or_else(|| format!("arbitration {i}: hit without origin"))?;
            let replay = ArbitrationResult {
                from_cache: false,
                latency_ms: orig.latency_ms,
                cache_warning: None,
                ..r.clone()
            };
            let stored = std::fs::read(cache.path_for(&key)).map_err(|e| e.to_string())?;
            ensure(
                serde_json::to_vec(&replay).unwrap() == serde_json::to_vec(orig).unwrap()
                    && serde_json::to_vec(orig).unwrap() == stored,
                || format!("arbitration {i}: cache hit differs from its origin"),
            )?;
        } else if r.valid {
            ensure(r.cache_warning.is_none(), || format!("arbitration {i}: cache warning {:?}", r.cache_warning))?;
            originals.insert(key, r);
        }
    }
    ensure(hits > 0 && fallbacks > 0, || format!("fuzz did not cover hits ({hits}) and fallbacks ({fallbacks})"))?;
    Ok(format!("10000 arbitrations: {hits} cache hits, {fallbacks} fallbacks, all labels in candidates"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("fusion invariant suite", c01_fusion_invariants),
        ("temperature limits", c02_temperature_limits),
        ("router/pipeline oracle equivalence", c03_pipeline_oracle),
        ("gradient correctness", c04_gradients),
        ("loss identities", c05_loss_identities),
        ("toy training run", c06_toy_training),
        ("scheduler/EMA unit values", c07_schedule_and_ema),
        ("latency model", c08_latency),
        ("sweep shape", c09_sweep_shape),
        ("metrics fixture", c10_metrics_fixture),
        ("dataset statistics", c11_dataset_stats),
        ("arbitration closed-set guarantee", c12_arbitration_guarantee),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = Duration::from_secs_f64(start.elapsed().as_secs_f64());
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
