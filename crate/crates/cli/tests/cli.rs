use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tokclean_core::orchestrator::{PipelineState, STATE_FILE};
use tokclean_core::records::{Dataset, LossLog, Provenance, TokenMask};
use tokclean_core::scoring::{score_dataset, ScoreTable};
use tokclean_core::selection::{select, select_count, SelectionConfig, SelectionMode};
use tokclean_core::theory::{to_jsonl, verify_bound, Corruption, NoisySpec};

fn tokclean(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokclean"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tokclean(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    ok(&["synth", "--out-dir", s(dir), "--seed", "5"]);
    dir.join("config.toml")
}

fn load_state(dir: &Path) -> PipelineState {
    PipelineState::load(&dir.join(STATE_FILE)).unwrap()
}

/// Loss logs of two desk models over `records`, written via the CLI.
fn two_logs(dir: &Path, records: &Path) -> (PathBuf, PathBuf) {
    let base = dir.join("base.tkcl");
    let theta0 = dir.join("m0");
    ok(&["desk-train", "--records", s(&base), "--out-model", s(&theta0)]);
    let all = dir.join("all.tkmk");
    let d = Dataset::load(records).unwrap();
    TokenMask::all_response(&d, &Provenance::new("all")).save(&all).unwrap();
    let theta1 = dir.join("m1");
    ok(&[
        "desk-train", "--records", s(records), "--mask", s(&all), "--init-model", s(&theta0), "--out-model",
        s(&theta1),
    ]);
    let (b, r) = (dir.join("b.tkll"), dir.join("r.tkll"));
    ok(&["desk-train", "--records", s(records), "--init-model", s(&theta0), "--out-losslog", s(&b)]);
    ok(&["desk-train", "--records", s(records), "--init-model", s(&theta1), "--out-losslog", s(&r)]);
    (b, r)
}

#[test]
fn help_exits_zero() {
    let out = tokclean(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("simulate"));
}

#[test]
fn self_evolving_run_on_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let stdout = ok(&["run", "--config", s(&cfg)]);
    assert!(stdout.contains("iteration 4:"), "{stdout}");
    let run = dir.path().join("run");
    let state = load_state(&run);
    // theta_0 plus the warmup model and one per iteration
    assert_eq!(state.models.len(), 6);
    for t in 1..=4 {
        assert!(run.join(format!("masks/mask_{t}.tkmk")).exists());
    }
    assert!(state.heldout_loss.unwrap().is_finite());
}

#[test]
fn interrupted_run_resumes_to_same_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--config", s(&cfg), "--output-dir", s(&a)]);
    let paused = ok(&["run", "--config", s(&cfg), "--output-dir", s(&b), "--max-steps", "3"]);
    assert!(paused.contains("resume with"));
    ok(&["resume", "--state", s(&b), "--max-steps", "2"]);
    ok(&["resume", "--state", s(&b.join(STATE_FILE))]);
    let (sa, sb) = (load_state(&a), load_state(&b));
    assert_eq!(sa.final_model().unwrap().model_id, sb.final_model().unwrap().model_id);
}

#[test]
fn too_few_samples_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let out_dir = dir.path().join("never");
    let out = tokclean(&["run", "--config", s(&cfg), "--iterations", "600", "--output-dir", s(&out_dir)]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.exists());
}

#[test]
fn score_matches_library_and_checks_digests() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let records = dir.path().join("train.tkcl");
    let (b, r) = two_logs(dir.path(), &records);
    let out = dir.path().join("s.tksc");
    ok(&["score", "--records", s(&records), "--base-log", s(&b), "--ref-log", s(&r), "--out", s(&out)]);
    let d = Dataset::load(&records).unwrap();
    let want = score_dataset(&d, &LossLog::load(&b).unwrap(), &LossLog::load(&r).unwrap()).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), want.to_bytes());

    // same shape, different tokens
    let other = dir.path().join("other");
    ok(&["synth", "--out-dir", s(&other), "--seed", "6"]);
    let foreign = other.join("train.tkcl");
    let bad = tokclean(&["score", "--records", s(&foreign), "--base-log", s(&b), "--ref-log", s(&r), "--out", s(&out)]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("digest"));
}

#[test]
fn select_modes_match_library() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let records = dir.path().join("train.tkcl");
    let (b, r) = two_logs(dir.path(), &records);
    let scores = dir.path().join("s.tksc");
    ok(&["score", "--records", s(&records), "--base-log", s(&b), "--ref-log", s(&r), "--out", s(&scores)]);
    let d = Dataset::load(&records).unwrap();
    let table = ScoreTable::load(&scores).unwrap();

    let global = dir.path().join("g.tkmk");
    ok(&["select", "--records", s(&records), "--scores", s(&scores), "--k", "60", "--out", s(&global)]);
    let mask = TokenMask::load(&global).unwrap();
    assert_eq!(mask.selected_count(), select_count(60.0, d.eligible_count()));
    assert_eq!(mask.selected_count(), (0.6 * d.eligible_count() as f64).floor() as usize);
    assert_eq!(mask, select(&d, &table, &SelectionConfig::global(60.0)).unwrap());

    let local = dir.path().join("l.tkmk");
    ok(&[
        "select", "--records", s(&records), "--scores", s(&scores), "--k", "60", "--mode", "local", "--out",
        s(&local),
    ]);
    let cfg = SelectionConfig {
        mode: SelectionMode::Local,
        ..SelectionConfig::global(60.0)
    };
    assert_eq!(TokenMask::load(&local).unwrap(), select(&d, &table, &cfg).unwrap());

    let out = tokclean(&["select", "--records", s(&records), "--k", "60", "--mode", "uniform-random", "--out", s(&local)]);
    assert_eq!(code(&out), 2);
    let u = dir.path().join("u.tkmk");
    ok(&[
        "select", "--records", s(&records), "--k", "30", "--mode", "uniform-random", "--seed", "4", "--out", s(&u),
    ]);
    assert_eq!(TokenMask::load(&u).unwrap().selected_count(), select_count(30.0, d.eligible_count()));
}

#[test]
fn report_formats() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dataset::from_samples(64, vec![vec![(17u32, false), (42, true)]]).unwrap();
    let (records, mask) = (dir.path().join("r.tkcl"), dir.path().join("m.tkmk"));
    d.save(&records).unwrap();
    TokenMask::new(vec![false, true], &Provenance::new("t"), d.digest()).save(&mask).unwrap();
    let base = ["report", "--records", s(&records), "--mask", s(&mask)];

    let plain = ok(&[&base[..], &["--format", "plain"]].concat());
    assert_eq!(plain, "17 ⟦42⟧\n");
    let ansi = ok(&base);
    assert_eq!(ansi.replace("\x1b[7m", "").replace("\x1b[27m", ""), "17 ⟦42⟧\n");
    let html = ok(&[&base[..], &["--format", "html"]].concat());
    assert!(html.contains("<span class=\"selected\">42</span>"));

    let detok = dir.path().join("d.tsv");
    std::fs::write(&detok, "17\thello\n42\tworld\n").unwrap();
    assert_eq!(ok(&[&base[..], &["--format", "plain", "--detok", s(&detok)]].concat()), "hello ⟦world⟧\n");

    let other = dir.path().join("o.tkmk");
    TokenMask::new(vec![false, true], &Provenance::new("t"), d.digest() ^ 1).save(&other).unwrap();
    assert_eq!(code(&tokclean(&["report", "--records", s(&records), "--mask", s(&other)])), 3);
}

#[test]
fn simulate_writes_library_trials_and_report_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bound.jsonl");
    let summary = ok(&[
        "simulate", "bound", "--contexts", "3", "--tokens", "2", "--eta", "0.2", "--m", "100", "--trials", "150",
        "--seed", "9", "--out", s(&out),
    ]);
    assert!(summary.contains("\"within_allowance\":true"), "{summary}");
    let spec = NoisySpec::uniform(3, 2, 0.2, Corruption::UniformOther).unwrap();
    let want = verify_bound(&spec, 100, 0.1, 150, 9).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), to_jsonl(&want.trials));
    let text = ok(&["report", "--trials", s(&out)]);
    assert!(text.contains("bound trials: 150"));

    let cross = dir.path().join("cross.jsonl");
    let summary = ok(&[
        "simulate", "crossover", "--eta-hat", "0.05", "--r-hat", "0.6", "--m", "2000", "--trials", "4", "--out",
        s(&cross),
    ]);
    assert!(summary.contains("predicted_win"));
    assert!(ok(&["report", "--trials", s(&cross)]).contains("crossover trials: 4"));

    let mt = dir.path().join("m.jsonl");
    let summary = ok(&["simulate", "matthew", "--groups", "rich,poor", "--seeds", "2", "--out", s(&mt)]);
    assert_eq!(summary.lines().count(), 2);
    assert!(ok(&["report", "--trials", s(&mt)]).contains("poor"));
    let bad = tokclean(&["simulate", "matthew", "--groups", "middle", "--out", s(&mt)]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn sweep_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    assert_eq!(code(&tokclean(&["sweep", "--config", s(&cfg), "--k", "60"])), 2);
    let out = tokclean(&["sweep", "--config", s(&cfg), "--k", "60,100,60"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    assert!(dir.path().join("run/sweep_plot.tsv").exists());
}

#[test]
fn external_trainer_contract_matches_embedded_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    ok(&["run", "--config", s(&cfg), "--output-dir", s(&dir.path().join("embedded"))]);

    let theta0 = dir.path().join("theta0");
    ok(&["desk-train", "--records", s(&dir.path().join("base.tkcl")), "--out-model", s(&theta0)]);
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str(&format!(
        "\n[trainer]\ncommand = [{:?}, \"desk-train\"]\nbase_model = {:?}\n",
        env!("CARGO_BIN_EXE_tokclean"),
        s(&theta0)
    ));
    let ext_cfg = dir.path().join("external.toml");
    std::fs::write(&ext_cfg, &text).unwrap();
    ok(&["run", "--config", s(&ext_cfg), "--output-dir", s(&dir.path().join("external"))]);

    let a = load_state(&dir.path().join("embedded"));
    let b = load_state(&dir.path().join("external"));
    let ids = |st: &PipelineState| st.models.iter().map(|m| m.model_id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
    assert_eq!(a.heldout_loss, b.heldout_loss);

    text = text.replace(&format!("{:?}, \"desk-train\"", env!("CARGO_BIN_EXE_tokclean")), "\"false\"");
    std::fs::write(&ext_cfg, &text).unwrap();
    let out = tokclean(&["run", "--config", s(&ext_cfg), "--output-dir", s(&dir.path().join("failing"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn desk_train_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let records = dir.path().join("train.tkcl");
    assert_eq!(code(&tokclean(&["desk-train", "--records", s(&records)])), 2);
    let out = tokclean(&[
        "desk-train", "--records", s(&records), "--mask", s(&dir.path().join("heldout_informative.tkmk")),
        "--out-model", s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&out), 2);
}
