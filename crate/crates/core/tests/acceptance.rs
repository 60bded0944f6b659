//! Acceptance gate: one test and one PASS/FAIL line per criterion.

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tokclean_core::desk_lm::CountModel;
use tokclean_core::orchestrator::{run_sweep, run_to_completion, Pipeline, RunConfig};
use tokclean_core::records::{Dataset, LossLog, Provenance, TokenMask};
use tokclean_core::scoring::{masked_sft_loss, score_dataset, Normalization, ScoreEntry, ScoreTable};
use tokclean_core::selection::{
    capacity_for, select_count, select_global_topk, select_local_topk, streaming_threshold, QuantileSketch,
};
use tokclean_core::synth::{generate, write_bundle, SynthSpec};
use tokclean_core::theory::{
    crossover_rhs, crossover_task, poor_group, rich_group, shipped_bound_specs, simulate_matthew, verify_bound,
    verify_crossover, violation_allowance, CleanerQuality,
};

static REPORTED: AtomicBool = AtomicBool::new(false);

fn report(id: u32, name: &str, pass: bool, detail: String) {
    REPORTED.store(true, Ordering::SeqCst);
    println!("criterion {id:>2} [{name}] {}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

fn random_dataset(rng: &mut ChaCha8Rng, max_samples: usize, max_len: usize) -> Dataset {
    let vocab = rng.random_range(1..5000u32);
    let n = rng.random_range(1..=max_samples);
    let samples: Vec<Vec<(u32, bool)>> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| (rng.random_range(0..vocab), rng.random_bool(0.7))).collect()
        })
        .collect();
    Dataset::from_samples(vocab, samples).unwrap()
}

fn random_log(rng: &mut ChaCha8Rng, d: &Dataset, id: &str) -> LossLog {
    let v = (0..d.total_tokens()).map(|_| rng.random::<f32>() * 12.0).collect();
    LossLog::new(id, d.digest(), v).unwrap()
}

fn criterion_01_format_round_trips() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for i in 0..1000 {
        let d = random_dataset(&mut rng, 12, 24);
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);

        let base = random_log(&mut rng, &d, &format!("base-{i}"));
        let bytes = base.to_bytes();
        let back = LossLog::from_bytes(&bytes).unwrap();
        assert_eq!(back, base);
        assert_eq!(back.to_bytes(), bytes);

        let labels: Vec<bool> = d.response_labels().iter().map(|r| *r && rng.random_bool(0.5)).collect();
        let mut prov = Provenance::new("random");
        prov.seed = Some(i);
        let mask = TokenMask::new(labels, &prov, d.digest());
        let bytes = mask.to_bytes();
        let back = TokenMask::from_bytes(&bytes).unwrap();
        assert_eq!(back, mask);
        assert_eq!(back.to_bytes(), bytes);

        if d.eligible_count() > 0 {
            let reference = random_log(&mut rng, &d, "ref");
            let table = score_dataset(&d, &base, &reference).unwrap();
            let bytes = table.to_bytes();
            let back = ScoreTable::from_bytes(&bytes).unwrap();
            assert_eq!(back, table);
            assert_eq!(back.to_bytes(), bytes);
        }

        let model = CountModel::train_counts(&d, rng.random_range(1..4), 0.05 + rng.random::<f64>()).unwrap();
        let bytes = model.to_bytes();
        let back = CountModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.model_id(), model.model_id());
        assert_eq!(back.to_bytes(), bytes);
        checked += 1;
    }
    let t = start.elapsed();
    report(
        1,
        "format round-trips",
        t < Duration::from_secs(10),
        format!("{checked} artifacts per format byte-exact in {t:.2?}"),
    );
}

fn criterion_02_scoring_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<Vec<(u32, bool)>> = (0..200)
        .map(|_| (0..50).map(|_| (rng.random_range(0..100), rng.random_bool(0.8))).collect())
        .collect();
    let d = Dataset::from_samples(100, samples).unwrap();
    assert_eq!(d.total_tokens(), 10_000);
    let base = random_log(&mut rng, &d, "b");
    let reference = random_log(&mut rng, &d, "r");
    let table = score_dataset(&d, &base, &reference).unwrap();
    let swapped = score_dataset(&d, &reference, &base).unwrap();

    let mut naive = Vec::new();
    for (i, r) in d.records().enumerate() {
        if r.is_response {
            naive.push(ScoreEntry {
                sample_id: r.sample_id,
                position: r.position,
                score: base.entries()[i] as f64 - reference.entries()[i] as f64,
            });
        }
    }
    let exact = naive.len() == table.len()
        && naive
            .iter()
            .zip(&table.entries)
            .all(|(a, b)| a.sample_id == b.sample_id && a.position == b.position && a.score.to_bits() == b.score.to_bits());
    let antisym = table.entries.iter().zip(&swapped.entries).all(|(a, b)| a.score == -b.score);
    report(
        2,
        "scoring exactness",
        exact && antisym,
        format!("{} scores bit-identical to naive loop: {exact}; antisymmetric: {antisym}", table.len()),
    );
}

fn criterion_03_masked_loss() {
    let g1 = masked_sft_loss(&[0.7, 3.0, 1.0], &[true, false, true], &[3], Normalization::Global).unwrap();
    let g2 = masked_sft_loss(&[1.0, 2.0, 4.0], &[true; 3], &[1, 2], Normalization::Global).unwrap();
    let p2 = masked_sft_loss(&[1.0, 2.0, 4.0], &[true; 3], &[1, 2], Normalization::PerSample).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let losses: Vec<f64> = (0..997).map(|_| rng.random::<f64>() * 5.0).collect();
    let plain = losses.iter().sum::<f64>() / losses.len() as f64;
    let full = masked_sft_loss(&losses, &vec![true; losses.len()], &[500, 497], Normalization::Global).unwrap();
    let ok = (g1 - 0.85).abs() < 1e-6
        && (g2 - 7.0 / 3.0).abs() < 1e-6
        && (p2 - 2.0).abs() < 1e-6
        && (full - plain).abs() < 1e-6;
    report(
        3,
        "masked loss",
        ok,
        format!("global {g1:.6} (0.85), {g2:.6} (7/3); per-sample {p2:.6} (2.0); all-labels {full:.6} vs mean {plain:.6}"),
    );
}

/// A dataset of `n` response tokens spread over samples of 100.
fn wide_dataset(n: usize) -> Dataset {
    let samples: Vec<Vec<(u32, bool)>> = (0..n / 100).map(|_| vec![(0, true); 100]).collect();
    Dataset::from_samples(1, samples).unwrap()
}

fn table_for(d: &Dataset, scores: &[f64]) -> ScoreTable {
    ScoreTable {
        entries: d
            .records()
            .zip(scores)
            .map(|(r, s)| ScoreEntry { sample_id: r.sample_id, position: r.position, score: *s })
            .collect(),
        base_model_id: "b".into(),
        ref_model_id: "r".into(),
        dataset_digest: d.digest(),
    }
}

fn criterion_04_selection_oracle() {
    let n = 1_000_000;
    let d = wide_dataset(n);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // coarse quantization forces many ties
    let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 5000.0).floor() / 100.0 - 25.0).collect();
    let table = table_for(&d, &scores);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut ok = true;
    let mut slowest = Duration::ZERO;
    let mut previous: Option<Vec<bool>> = None;
    for k in [30.0, 50.0, 60.0, 100.0] {
        let t = Instant::now();
        let mask = select_global_topk(&d, &table, k).unwrap();
        slowest = slowest.max(t.elapsed());
        let want = select_count(k, n);
        let mut oracle = vec![false; n];
        for &i in &order[..want] {
            oracle[i] = true;
        }
        ok &= mask.labels() == oracle.as_slice() && mask.selected_count() == (k * n as f64 / 100.0).floor() as usize;
        if let Some(prev) = &previous {
            ok &= prev.iter().zip(mask.labels()).all(|(a, b)| !a || *b);
        }
        previous = Some(mask.labels().to_vec());
    }
    report(
        4,
        "selection oracle",
        ok && slowest < Duration::from_secs(1),
        format!("masks equal sort oracle and nest for k in 30/50/60/100: {ok}; slowest k {slowest:.2?}"),
    );
}

fn criterion_05_streaming_selector() {
    let m = 10_000_000usize;
    let eps = 0.001;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let threshold = streaming_threshold(&scores, 50.0, eps).unwrap();
    let selected = scores.iter().filter(|s| **s >= threshold).count();
    let elapsed = start.elapsed();
    let exact = select_count(50.0, m);
    let err = selected.abs_diff(exact);

    let sketch_at = |len: u64| {
        let mut s = QuantileSketch::new(eps, len).unwrap();
        s.extend(scores[..len as usize].iter().copied());
        s.retained()
    };
    let (small, large) = (sketch_at(1_000_000), sketch_at(m as u64));
    let bounded = large <= 2 * small && (large as f64) < 0.01 * m as f64;
    let pass = (err as f64) <= eps * m as f64 && bounded && elapsed < Duration::from_secs(30);
    report(
        5,
        "streaming selector",
        pass,
        format!(
            "selected {selected} vs exact {exact} (|diff| {err} <= {}); sketch holds {small} values at 1e6 and {large} at 1e7 (capacity {}); {elapsed:.2?}",
            eps * m as f64,
            capacity_for(eps, m as u64)
        ),
    );
}

fn criterion_06_error_bound() {
    let start = Instant::now();
    let allowance = violation_allowance(0.1, 2000);
    let mut worst = 0.0f64;
    let mut runs = 0;
    for (i, spec) in shipped_bound_specs().iter().enumerate() {
        for m in [100, 1000] {
            let r = verify_bound(spec, m, 0.1, 2000, 600 + i as u64).unwrap();
            worst = worst.max(r.frequency);
            runs += 1;
        }
    }
    let t = start.elapsed();
    report(
        6,
        "error bound",
        worst <= allowance && t < Duration::from_secs(120),
        format!("{runs} spec/M pairs x 2000 trials: worst violation frequency {worst:.4} <= {allowance:.4}; {t:.2?}"),
    );
}

fn criterion_07_cleaning_crossover() {
    let start = Instant::now();
    let a = verify_crossover(
        &crossover_task(0.3).unwrap(),
        CleanerQuality { eta_hat: 0.05, r_hat: 0.6 },
        10_000,
        0.05,
        200,
        7,
    )
    .unwrap();
    let b = verify_crossover(
        &crossover_task(0.1).unwrap(),
        CleanerQuality { eta_hat: 0.099, r_hat: 0.01 },
        100,
        0.05,
        200,
        7,
    )
    .unwrap();
    let rhs_ok = (crossover_rhs(10_000, 0.05, 0.6).unwrap() - 0.008_614_641_489_667).abs() < 1e-12;
    let t = start.elapsed();
    let pass = rhs_ok
        && a.predicted_win
        && a.cleaned_not_worse()
        && !b.predicted_win
        && !b.cleaned_not_worse()
        && t < Duration::from_secs(300);
    report(
        7,
        "cleaning crossover",
        pass,
        format!(
            "A: rhs {:.6} gap {:.2} cleaned {:.6} <= full {:.6}; B: rhs {:.4} gap {:.3} cleaned {:.4} vs full {:.4}; {t:.2?}",
            a.rhs, a.gap, a.mean_cleaned_risk, a.mean_full_risk, b.rhs, b.gap, b.mean_cleaned_risk, b.mean_full_risk
        ),
    );
}

fn criterion_08_rich_and_poor_groups() {
    let start = Instant::now();
    let rich = simulate_matthew(&[rich_group()], 4, 50.0, 20, 8).unwrap();
    let poor = simulate_matthew(&[poor_group()], 4, 40.0, 20, 8).unwrap();
    let (r, p) = (&rich.groups[0], &poor.groups[0]);
    let rich_ok = r.deltas().iter().all(|d| *d <= 0.005);
    let poor_ok = p.deltas().iter().all(|d| *d >= -0.005);
    let t = start.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    report(
        8,
        "rich and poor groups",
        rich_ok && poor_ok && t < Duration::from_secs(300),
        format!("rich [{}] poor [{}] over 20 seeds; {t:.2?}", fmt(&r.mean_risk), fmt(&p.mean_risk)),
    );
}

fn synth_config(dir: &std::path::Path, seed: u64, k: f64) -> RunConfig {
    let corpus = generate(&SynthSpec::default(), seed).unwrap();
    write_bundle(&corpus, dir, seed).unwrap();
    let mut cfg = RunConfig::load(&dir.join("config.toml")).unwrap();
    cfg.k_percent = k;
    cfg
}

fn criterion_09_desk_pipeline() {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let (mut cleaned, mut full) = (0.0, 0.0);
    for seed in 0..10u64 {
        let dir = root.path().join(format!("seed_{seed}"));
        let mut cfg = synth_config(&dir, seed, 60.0);
        cfg.output_dir = dir.join("k60");
        cleaned += run_to_completion(cfg.clone()).unwrap().heldout_loss.unwrap();
        cfg.k_percent = 100.0;
        cfg.output_dir = dir.join("k100");
        full += run_to_completion(cfg).unwrap().heldout_loss.unwrap();
    }
    let (cleaned, full) = (cleaned / 10.0, full / 10.0);
    let gain = (full - cleaned) / full;

    let dir = root.path().join("sweep");
    let cfg = synth_config(&dir, 0, 60.0);
    let ks: Vec<f64> = (3..=10).map(|k| k as f64 * 10.0).collect();
    let sweep = run_sweep(&cfg, &ks).unwrap();
    let (best_k, _) = sweep.best().unwrap();
    let t = start.elapsed();
    let rows = sweep.rows.iter().map(|(k, l)| format!("{k}:{l:.4}")).collect::<Vec<_>>().join(" ");
    report(
        9,
        "desk pipeline",
        gain >= 0.01 && best_k < 100.0 && t < Duration::from_secs(600),
        format!("mean held-out loss k=60 {cleaned:.4} vs k=100 {full:.4} ({:.1}% better); sweep {rows}; best k {best_k}; {t:.2?}", gain * 100.0),
    );
}

fn criterion_10_global_beats_local() {
    // five clean samples (all informative) and five noisy ones (2 informative of 10)
    let mut samples = Vec::new();
    let mut informative = Vec::new();
    for s in 0..10 {
        let clean = s < 5;
        let mut tokens = vec![(0, false)];
        informative.push(false);
        for j in 0..10 {
            let inf = clean || j < 2;
            tokens.push((if inf { 1 } else { 2 }, true));
            informative.push(inf);
        }
        samples.push(tokens);
    }
    let d = Dataset::from_samples(3, samples).unwrap();
    // base loss is flat; the reference has learned informative tokens, not filler
    let base = LossLog::new("base", d.digest(), vec![3.0; d.total_tokens()]).unwrap();
    let reference = LossLog::new(
        "ref",
        d.digest(),
        d.tokens().iter().map(|t| if *t == 1 { 0.5 } else { 3.5 }).collect(),
    )
    .unwrap();
    let table = score_dataset(&d, &base, &reference).unwrap();
    let count = |m: &TokenMask| m.labels().iter().zip(&informative).filter(|(a, b)| **a && **b).count();
    let g = count(&select_global_topk(&d, &table, 50.0).unwrap());
    let l = count(&select_local_topk(&d, &table, 50.0).unwrap());
    // global: top 50 of 100 are all informative (60 exist); local: 5 per sample,
    // of which clean samples give 5 and noisy samples only their 2
    report(
        10,
        "global beats local",
        g == 50 && l == 5 * 5 + 5 * 2 && g > l,
        format!("informative tokens kept at k=50: global {g} (expected 50), local {l} (expected 35)"),
    );
}

fn criterion_11_resumability() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = synth_config(root.path(), 21, 60.0);
    cfg.iterations = 2;
    cfg.output_dir = root.path().join("whole");
    let whole = run_to_completion(cfg.clone()).unwrap();
    let want = whole.final_model().unwrap().model_id.clone();
    let total_steps = 1 + 3 * 2 + 1;
    let mut identical = 0;
    for cut in 1..total_steps {
        let mut c = cfg.clone();
        c.output_dir = root.path().join(format!("cut_{cut}"));
        let mut p = Pipeline::create(c).unwrap();
        p.run(Some(cut)).unwrap();
        let path = p.state_path().to_path_buf();
        drop(p);
        let mut p = Pipeline::resume(&path).unwrap();
        p.run(None).unwrap();
        if p.state().final_model().map(|m| m.model_id.as_str()) == Some(want.as_str()) {
            identical += 1;
        }
    }
    report(
        11,
        "resumability",
        identical == total_steps - 1,
        format!("{identical}/{} interruption points resume to final model {want}", total_steps - 1),
    );
}

// Runs every criterion even if an earlier one fails, printing one line each.
fn main() -> ExitCode {
    let criteria: [(u32, &str, fn()); 11] = [
        (1, "format round-trips", criterion_01_format_round_trips),
        (2, "scoring exactness", criterion_02_scoring_exactness),
        (3, "masked loss", criterion_03_masked_loss),
        (4, "selection oracle", criterion_04_selection_oracle),
        (5, "streaming selector", criterion_05_streaming_selector),
        (6, "error bound", criterion_06_error_bound),
        (7, "cleaning crossover", criterion_07_cleaning_crossover),
        (8, "rich and poor groups", criterion_08_rich_and_poor_groups),
        (9, "desk pipeline", criterion_09_desk_pipeline),
        (10, "global beats local", criterion_10_global_beats_local),
        (11, "resumability", criterion_11_resumability),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        REPORTED.store(false, Ordering::SeqCst);
        if std::panic::catch_unwind(run).is_err() {
            failed += 1;
            if !REPORTED.load(Ordering::SeqCst) {
                println!("criterion {id:>2} [{name}] FAIL: panicked before reporting");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
