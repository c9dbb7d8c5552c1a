//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! report always prints; exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use metashift::calibrate::{bcts_posterior, fit_bcts, nll_gradient};
use metashift::harness::{run_sweep, MethodKind, SweepOutput};
use metashift::synthdata::oracle_log_posterior;
use metashift::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn random_prior(rng: &mut impl Rng, space: MetaLabelSpace, floor: f64) -> JointPrior {
    let w: Vec<f64> = (0..space.size()).map(|_| rng.random::<f64>() + floor).collect();
    JointPrior::from_weights(space, &w).unwrap()
}

fn within(elapsed: Duration, limit_secs: f64) -> Outcome {
    if elapsed.as_secs_f64() < limit_secs {
        Ok(String::new())
    } else {
        Err(format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()))
    }
}

// 1. Reweighting the exact posterior between priors is exact.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let spec = GaussianGenerativeSpec::gauss_cmnist();
    let space = spec.space();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for pair in 0..50u64 {
        let pa = random_prior(&mut rng, space, 0.01);
        let pb = random_prior(&mut rng, space, 0.01);
        let x = sample_dataset(&random_prior(&mut rng, space, 0.1), &spec, 100, pair)
            .unwrap()
            .features;
        let moved = reweight_posterior(&oracle_posterior(&x, &spec, &pa).unwrap(), &pa, &pb).unwrap();
        let direct = oracle_posterior(&x, &spec, &pb).unwrap();
        for (a, b) in moved.as_matrix().data().iter().zip(direct.as_matrix().data()) {
            worst = worst.max((a - b).abs());
        }
    }
    check!(worst <= 1e-9, "max deviation {worst:e}");
    within(start.elapsed(), 1.0)?;
    Ok(format!("max deviation {worst:.1e} over 50 pairs x 100 points"))
}

/// Objective recomputed here so the oracle shares no code with the estimator.
fn log_lik(rows: &[Vec<f64>], source: &[f64], pi: &[f64]) -> f64 {
    rows.iter()
        .map(|r| {
            r.iter()
                .zip(source)
                .zip(pi)
                .map(|((q, s), p)| p * q / s)
                .sum::<f64>()
                .ln()
        })
        .sum()
}

/// Best simplex point on a step-1e-3 grid, then refined on a 1e-5 grid around it.
fn grid_argmax(rows: &[Vec<f64>], source: &[f64]) -> Vec<f64> {
    let m = source.len();
    let search = |center: &[f64], radius: f64, step: f64| -> Vec<f64> {
        let steps = (2.0 * radius / step).round() as i64;
        let lo: Vec<f64> = center.iter().map(|c| c - radius).collect();
        let mut best = (f64::NEG_INFINITY, center.to_vec());
        let mut consider = |pi: Vec<f64>| {
            if pi.iter().all(|p| *p >= 0.0) {
                let v = log_lik(rows, source, &pi);
                if v > best.0 {
                    best = (v, pi);
                }
            }
        };
        for i in 0..=steps {
            let a = (lo[0] + i as f64 * step).clamp(0.0, 1.0);
            if m == 2 {
                consider(vec![a, 1.0 - a]);
            } else {
                for j in 0..=steps {
                    let b = (lo[1] + j as f64 * step).clamp(0.0, 1.0);
                    consider(vec![a, b, 1.0 - a - b]);
                }
            }
        }
        best.1
    };
    let center = vec![0.5; m - 1];
    let coarse = search(&center, 0.5, 1e-3);
    search(&coarse[..m - 1], 2e-3, 1e-5)
}

// 2. EM reaches the global optimum and climbs monotonically.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let m = 2 + case % 2;
        let space = MetaLabelSpace::new(m, 1).unwrap();
        let n = rng.random_range(5..40);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(2) + 1e-3).collect();
                let t: f64 = w.iter().sum();
                w.into_iter().map(|v| v / t).collect()
            })
            .collect();
        let source = random_prior(&mut rng, space, 0.1);
        let post = PosteriorMatrix::from_rows(space, &rows).unwrap();
        let cfg = EmConfig {
            tolerance: 1e-12,
            max_iterations: 200_000,
            ..EmConfig::mle(m)
        };
        let res = em_estimate_prior(&post, &source, &cfg).unwrap();
        for w in res.log_likelihood_trace.windows(2) {
            check!(w[1] >= w[0] - 1e-9, "case {case}: trace decreased {} -> {}", w[0], w[1]);
        }
        let oracle = grid_argmax(&rows, source.probs());
        let l1: f64 = oracle
            .iter()
            .zip(res.target_prior.probs())
            .map(|(a, b)| (a - b).abs())
            .sum();
        worst = worst.max(l1);
        check!(l1 < 1e-3, "case {case}: L1 {l1:e} from grid optimum {oracle:?}");
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!("200 instances, max L1 to grid optimum {worst:.1e}"))
}

// 3. EM on exact posteriors recovers the target prior.
fn criterion_3() -> Outcome {
    let start = Instant::now();
    let spec = GaussianGenerativeSpec::gauss_cmnist();
    let space = spec.space();
    let truth = JointPrior::new(space, vec![0.1, 0.4, 0.4, 0.1]).unwrap();
    let source = lambda_prior(&default_anchors(), 0.05).unwrap();
    let (mut hits, mut label_hits) = (0, 0);
    let mut errors = Vec::new();
    for seed in 0..20 {
        let draw = sample_dataset(&truth, &spec, 10_000, 300 + seed).unwrap();
        let post = oracle_posterior(&draw.features, &spec, &source).unwrap();
        let est = em_estimate_prior(&post, &source, &EmConfig::mle(4)).unwrap();
        let err = est.target_prior.l1_distance(&truth);
        hits += (err < 0.02) as usize;
        errors.push(err);
        // counting the hidden labels is the best any estimator could do
        let counted = JointPrior::from_labels(space, &draw.meta_labels()).unwrap();
        label_hits += (counted.l1_distance(&truth) < 0.02) as usize;
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    check!(
        hits >= 19,
        "only {hits}/20 seeds within 0.02 L1 (mean {mean:.4}); counting the true labels gets {label_hits}/20"
    );
    within(start.elapsed(), 30.0)?;
    let max = errors.iter().cloned().fold(0.0, f64::max);
    Ok(format!("{hits}/20 seeds within 0.02 L1 (max {max:.4})"))
}

fn combined_sem(out: &SweepOutput, lambda: f64, a: Method, b: Method) -> f64 {
    let (x, y) = (out.summary_for(lambda, a).unwrap(), out.summary_for(lambda, b).unwrap());
    (x.sem * x.sem + y.sem * y.sem).sqrt()
}

fn mean_auc(out: &SweepOutput, lambda: f64, m: Method) -> f64 {
    out.summary_for(lambda, m).unwrap().mean_auc
}

// 4. U-shape on the default sweep.
fn criterion_4(out: &SweepOutput, elapsed: Duration) -> Outcome {
    let cfg = SweepConfig::default();
    check!(
        out.records.len() == 21 * 6 * 4,
        "expected 504 records, found {}",
        out.records.len()
    );
    let (erm, la, t512) = (Method::Erm, Method::La, Method::Ttlsa(512));
    let erm_drop = mean_auc(out, cfg.source_lambda, erm) - mean_auc(out, 1.0, erm);
    check!(erm_drop >= 0.05, "(a) ERM drop {erm_drop:.4} < 0.05");

    let la_curve: Vec<f64> = out.curve(la).iter().map(|r| r.mean_auc).collect();
    let la_range = la_curve.iter().cloned().fold(f64::MIN, f64::max)
        - la_curve.iter().cloned().fold(f64::MAX, f64::min);
    check!(la_range <= 0.05, "(b) LA range {la_range:.4} > 0.05");

    for &l in &cfg.lambdas {
        let gap = mean_auc(out, l, t512) - mean_auc(out, l, la);
        let sem2 = 2.0 * combined_sem(out, l, t512, la);
        check!(gap >= -sem2, "(c) TTLSA(512) below LA at lambda={l}: {gap:.4} vs -{sem2:.4}");
        if l == 0.0 || l == 1.0 {
            check!(gap > sem2, "(c) TTLSA(512) not above LA at lambda={l}: {gap:.4} <= {sem2:.4}");
        }
    }
    let mid = (mean_auc(out, 0.5, t512) - mean_auc(out, 0.5, la)).abs();
    let mid_sem2 = 2.0 * combined_sem(out, 0.5, t512, la);
    check!(mid <= mid_sem2, "(d) |TTLSA(512) - LA| at 0.5 = {mid:.4} > {mid_sem2:.4}");
    within(elapsed, 600.0)?;
    Ok(format!(
        "ERM drop {erm_drop:.3}, LA range {la_range:.3}, TTLSA(512)-LA at 0/1 = {:.3}/{:.3}, at 0.5 = {mid:.4}; {:.0}s",
        mean_auc(out, 0.0, t512) - mean_auc(out, 0.0, la),
        mean_auc(out, 1.0, t512) - mean_auc(out, 1.0, la),
        elapsed.as_secs_f64()
    ))
}

// 5. More adaptation data gets closer to the oracle.
fn criterion_5(out: &SweepOutput) -> Outcome {
    let (o, t512, t64) = (Method::Oracle, Method::Ttlsa(512), Method::Ttlsa(64));
    let lambdas = SweepConfig::default().lambdas;
    for &l in &lambdas {
        for (hi, lo) in [(o, t512), (t512, t64)] {
            let d = mean_auc(out, l, hi) - mean_auc(out, l, lo);
            let sem2 = 2.0 * combined_sem(out, l, hi, lo);
            check!(d >= -sem2, "{hi} < {lo} at lambda={l}: {d:.4} beyond 2 SEM {sem2:.4}");
        }
    }
    let avg_gap = |m: Method| {
        lambdas.iter().map(|&l| mean_auc(out, l, o) - mean_auc(out, l, m)).sum::<f64>()
            / lambdas.len() as f64
    };
    let (g512, g64) = (avg_gap(t512), avg_gap(t64));
    check!(g512 < g64, "mean gap to oracle: 512 -> {g512:.5}, 64 -> {g64:.5}");
    Ok(format!("mean gap to oracle {g512:.4} (512) < {g64:.4} (64)"))
}

// 6. Calibration ablation on scores scaled by 3.
fn criterion_6() -> Outcome {
    let start = Instant::now();
    let cfg = SweepConfig {
        logit_scale: 3.0,
        methods: vec![MethodKind::Ttlsa, MethodKind::Oracle],
        ..SweepConfig::default()
    };
    let spec = GaussianGenerativeSpec::gauss_cmnist();
    let ablation = run_calibration_ablation(&cfg, &spec).map_err(|e| e.to_string())?;
    let avg = |v: Vec<(f64, f64)>| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64;
    let delta = avg(ablation.auc_deltas(Method::Ttlsa(64)));
    let gap_cal = avg(ablation.oracle_gap(true, 64));
    let gap_uncal = avg(ablation.oracle_gap(false, 64));
    check!(delta >= 0.0, "calibrated TTLSA(64) lower by {:.5}", -delta);
    check!(gap_uncal > gap_cal, "gap uncalibrated {gap_uncal:.5} <= calibrated {gap_cal:.5}");

    // both arms share model weights, so raw logits agree before calibration
    let anchors = default_anchors();
    for seed in cfg.replicate_seeds() {
        let with = harness::train_replicate(&SweepConfig { calibration_enabled: true, ..cfg.clone() }, &spec, &anchors, seed)
            .map_err(|e| e.to_string())?;
        let without = harness::train_replicate(&SweepConfig { calibration_enabled: false, ..cfg.clone() }, &spec, &anchors, seed)
            .map_err(|e| e.to_string())?;
        check!(
            with.la.as_ref().map(|m| &m.model) == without.la.as_ref().map(|m| &m.model),
            "seed {seed}: arms trained different LA weights"
        );
    }
    within(start.elapsed(), 600.0)?;
    Ok(format!(
        "TTLSA(64) calibrated - uncalibrated = {delta:+.4}; oracle gap {gap_cal:.4} (cal) < {gap_uncal:.4} (uncal); {:.0}s",
        start.elapsed().as_secs_f64()
    ))
}

/// Independent mean NLL of `softmax(l / T + b)`.
fn bcts_nll(rows: &[Vec<f64>], labels: &[usize], t: f64, b: &[f64]) -> f64 {
    rows.iter()
        .zip(labels)
        .map(|(r, &y)| {
            let z: Vec<f64> = r.iter().zip(b).map(|(l, bb)| l / t + bb).collect();
            let mx = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .sum::<f64>()
        / rows.len() as f64
}

// 7. Temperature recovery and gradient check.
fn criterion_7() -> Outcome {
    let start = Instant::now();
    let spec = GaussianGenerativeSpec::gauss_cmnist();
    let space = spec.space();
    let prior = JointPrior::uniform(space);
    let data = sample_dataset(&prior, &spec, 5000, 70).unwrap();
    // labels are draws from the true posterior; the logits are 3x too sharp
    let log_post = oracle_log_posterior(&data.features, &spec, &prior).unwrap();
    let logits = LogitsMatrix::new(space, log_post).unwrap().scaled(3.0).unwrap();
    let params = fit_bcts(&logits, &data.meta_labels(), &CalibrationFitConfig::default())
        .map_err(|e| e.to_string())?;
    let t = params.temperature();
    check!((2.5..=3.5).contains(&t), "recovered T = {t:.3}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
        let temp = rng.random_range(0.5..3.0);
        let bias: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lm = LogitsMatrix::from_rows(space, &rows).unwrap();
        let g = nll_gradient(&lm, &labels, temp, &bias).map_err(|e| e.to_string())?;
        let fd_t = (bcts_nll(&rows, &labels, temp + h, &bias)
            - bcts_nll(&rows, &labels, temp - h, &bias))
            / (2.0 * h);
        let mut pairs = vec![(g.d_temperature, fd_t)];
        for k in 0..4 {
            let mut up = bias.clone();
            let mut dn = bias.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (bcts_nll(&rows, &labels, temp, &up) - bcts_nll(&rows, &labels, temp, &dn))
                / (2.0 * h);
            pairs.push((g.d_bias[k], fd));
        }
        for (a, f) in pairs {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        // the loss reported with the gradient matches the independent one
        let nll = bcts_nll(&rows, &labels, temp, &bias);
        check!((g.loss - nll).abs() < 1e-12, "loss {} vs {nll}", g.loss);
        let _ = bcts_posterior(&lm, temp, &bias).map_err(|e| e.to_string())?;
    }
    check!(worst <= 1e-4, "gradient relative error {worst:e}");
    within(start.elapsed(), 30.0)?;
    Ok(format!("T = {t:.3}; max gradient relative error {worst:.1e}"))
}

// 8. AUC equals pairwise counting; group accuracy identities.
fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let n = rng.random_range(2..200);
        let levels = rng.random_range(1..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut twice_wins, mut pos, mut neg) = (0u64, 0u64, 0u64);
        for i in 0..n {
            if labels[i] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    twice_wins += if scores[i] > scores[j] {
                        2
                    } else if scores[i] == scores[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        let brute = twice_wins as f64 / (2.0 * pos as f64 * neg as f64);
        let fast = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        check!(fast == brute, "case {case}: {fast} != {brute}");
    }

    let space = MetaLabelSpace::new(2, 2).unwrap();
    for case in 0..200 {
        let n = rng.random_range(1..100);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let z: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let r = group_accuracy(&pred, &y, &z, space).map_err(|e| e.to_string())?;
        let accs: Vec<f64> = r.per_group.iter().flatten().cloned().collect();
        let min = accs.iter().cloned().fold(f64::MAX, f64::min);
        let max = accs.iter().cloned().fold(f64::MIN, f64::max);
        let avg = accs.iter().sum::<f64>() / accs.len() as f64;
        check!(r.worst == min, "case {case}: worst {} != min {min}", r.worst);
        check!((r.average - avg).abs() < 1e-12, "case {case}: average {}", r.average);
        check!(r.worst <= r.average && r.average <= max + 1e-12, "case {case}: ordering");
        let correct = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        check!((r.example_weighted - correct as f64 / n as f64).abs() < 1e-12, "case {case}: accuracy");
    }
    within(start.elapsed(), 5.0)?;
    Ok("200 tied instances exact; 200 group-accuracy instances".into())
}

const DETERMINISM_CONFIG: &str = "\
lambdas=0,0.25,0.5,0.75,1
n_train=5000
replicates=2
record_priors=true
";

fn sweep_digest(config: &Path, out: &Path, threads: &str) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_metashift"))
        .args(["sweep", "--config"])
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .env("METASHIFT_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let bytes = std::fs::read(out.join("sweep.csv")).map_err(|e| e.to_string())?;
    Ok(Sha256::digest(bytes).to_vec())
}

// 9. Byte-identical sweep.csv across runs and thread counts.
fn criterion_9(sweep_time: Duration) -> Outcome {
    let start = Instant::now();
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let config = dir.path().join("config.txt");
    std::fs::write(&config, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let runs = [("1", "a"), ("1", "b"), ("8", "c"), ("8", "d")];
    let mut digests = Vec::new();
    for (threads, name) in runs {
        digests.push(sweep_digest(&config, &dir.path().join(name), threads)?);
    }
    check!(digests.windows(2).all(|w| w[0] == w[1]), "sweep.csv differs between runs");
    within(start.elapsed(), 2.0 * sweep_time.as_secs_f64().max(1.0))?;
    Ok(format!(
        "4 runs (1 and 8 threads) identical; {:.0}s",
        start.elapsed().as_secs_f64()
    ))
}

// 10. LA holds up against SUBG on a strongly imbalanced source.
fn criterion_10(out: &SweepOutput) -> Outcome {
    let cfg = SweepConfig::default();
    let spec = GaussianGenerativeSpec::gauss_cmnist();
    let source = lambda_prior(&default_anchors(), cfg.source_lambda).unwrap();
    let draw = sample_dataset(&source, &spec, cfg.n_train, 10).unwrap();
    let counts = draw.meta_labels().iter().fold(vec![0usize; 4], |mut c, &m| {
        c[m] += 1;
        c
    });
    let min_share = *counts.iter().min().unwrap() as f64 / cfg.n_train as f64;
    check!(min_share <= 0.05, "smallest group holds {min_share:.3} of the source");

    // per-seed averages over lambda, then mean and SEM across seeds
    let per_seed = |m: Method| -> Vec<f64> {
        cfg.replicate_seeds()
            .iter()
            .map(|&s| {
                let v: Vec<f64> = out
                    .records
                    .iter()
                    .filter(|r| r.method == m && r.seed == s)
                    .map(|r| r.auc)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    };
    let (la_mean, la_sem) = harness::mean_and_sem(&per_seed(Method::La));
    let (sg_mean, sg_sem) = harness::mean_and_sem(&per_seed(Method::Subg));
    let sem2 = 2.0 * (la_sem * la_sem + sg_sem * sg_sem).sqrt();
    check!(
        la_mean >= sg_mean - sem2,
        "LA {la_mean:.4} < SUBG {sg_mean:.4} - {sem2:.4}"
    );
    Ok(format!(
        "smallest group {:.1}%; LA {la_mean:.4} vs SUBG {sg_mean:.4} (2 SEM {sem2:.4})",
        100.0 * min_share
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    // optional criterion numbers on the command line select a subset
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut failures = 0;
    let mut report = |n: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        match guarded(run) {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS  {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n:>2} {name}: FAIL  {why}");
            }
        }
    };

    report(1, "reweighting exactness", &mut criterion_1);
    report(2, "EM global optimum", &mut criterion_2);
    report(3, "EM consistency", &mut criterion_3);

    let needs_sweep = [4, 5, 9, 10].iter().any(|&n| wanted(n));
    let start = Instant::now();
    let sweep = if needs_sweep {
        run_sweep(&SweepConfig::default(), &GaussianGenerativeSpec::gauss_cmnist())
            .map_err(|e| format!("sweep failed: {e}"))
    } else {
        Err("sweep skipped".into())
    };
    let sweep_time = start.elapsed();
    let with_sweep = |f: &dyn Fn(&SweepOutput) -> Outcome| match &sweep {
        Ok(out) => f(out),
        Err(e) => Err(e.clone()),
    };

    report(4, "U-shape", &mut || with_sweep(&|out| criterion_4(out, sweep_time)));
    report(5, "sample-size ordering", &mut || with_sweep(&criterion_5));
    report(6, "calibration ablation", &mut criterion_6);
    report(7, "temperature recovery", &mut criterion_7);
    report(8, "metric oracles", &mut criterion_8);
    report(9, "determinism", &mut || {
        let budget = if sweep.is_ok() { sweep_time } else { Duration::from_secs(600) };
        criterion_9(budget)
    });
    report(10, "LA vs SUBG", &mut || with_sweep(&criterion_10));

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
