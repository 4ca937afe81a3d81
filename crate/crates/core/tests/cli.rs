mod common;

use std::path::Path;
use std::process::{Command, Output};

use calibadv::annotated::parse_annotated_file;
use calibadv::calibration::baseline_group;
use calibadv::trace::write_trace_file;
use calibadv::CalibrationConfig;
use common::{random_group, rollout, GroupShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn calibadv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calibadv"))
        .args(args)
        .env_remove("CALIBADV_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn two_groups(path: &Path) -> Vec<calibadv::RolloutGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = GroupShape {
        logprobs: true,
        ..GroupShape::default()
    };
    let groups: Vec<_> = (0..2).map(|i| random_group(&mut rng, i, &shape)).collect();
    write_trace_file(&groups, path).unwrap();
    groups
}

#[test]
fn calibrate_writes_one_record_per_group() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let out = dir.path().join("out.jsonl");
    let groups = two_groups(&input);
    let o = calibadv(&["calibrate", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let records = parse_annotated_file(&out).unwrap();
    assert_eq!(records.len(), 2);
    let text = stdout(&o);
    for g in &groups {
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("{}\t", g.question_id)))
            .unwrap();
        assert!(line.contains(&format!("\t{}\t", g.rollouts.len())));
    }
}

#[test]
fn all_stages_off_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let out = dir.path().join("out.jsonl");
    let groups = two_groups(&input);
    let o = calibadv(&[
        "calibrate",
        s(&input),
        "-o",
        s(&out),
        "--no-soft-penalty",
        "--no-rebalance",
        "--no-decouple",
    ]);
    assert_eq!(code(&o), 0);
    let records = parse_annotated_file(&out).unwrap();
    for ((g, a), original) in records.iter().zip(&groups) {
        assert_eq!(g, original);
        assert_eq!(
            a,
            &baseline_group(original, &CalibrationConfig::default())
                .unwrap()
                .assignment
        );
    }
    let base = dir.path().join("base.jsonl");
    assert_eq!(
        code(&calibadv(&[
            "calibrate",
            s(&input),
            "-o",
            s(&base),
            "--pipeline",
            "baseline"
        ])),
        0
    );
    assert_eq!(std::fs::read(&base).unwrap(), std::fs::read(&out).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    two_groups(&input);
    let out = dir.path().join("o.jsonl");
    assert_eq!(
        code(&calibadv(&["calibrate", s(&input), "-o", s(&out), "--lambda", "0"])),
        1
    );
    assert_eq!(
        code(&calibadv(&["calibrate", s(&input), "-o", s(&out), "--unknown-flag"])),
        1
    );
    assert_eq!(
        code(&calibadv(&["calibrate", s(&input), "-o", s(&out), "--pipeline", "ppo"])),
        1
    );
    assert_eq!(
        code(&calibadv(&["calibrate", "/nonexistent/in.jsonl", "-o", s(&out)])),
        2
    );
    assert_eq!(
        code(&calibadv(&["calibrate", s(&input), "-o", "/nonexistent/dir/o.jsonl"])),
        2
    );
    assert_eq!(code(&calibadv(&["--help"])), 0);
    assert_eq!(code(&calibadv(&["--version"])), 0);
    assert_eq!(code(&calibadv(&[])), 1);

    let bad = dir.path().join("bad.jsonl");
    let text = std::fs::read_to_string(&input).unwrap();
    std::fs::write(&bad, format!("{text}{{\"question_id\": \"x\"\n")).unwrap();
    let o = calibadv(&["calibrate", s(&bad), "-o", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let threads = Command::new(env!("CARGO_BIN_EXE_calibadv"))
        .args(["calibrate", s(&input), "-o", s(&out)])
        .env("CALIBADV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 1);
}

#[test]
fn every_subcommand_lists_the_shared_flags() {
    let flags = [
        "--lambda",
        "--correctness-threshold",
        "--eps",
        "--ppl-threshold",
        "--think-prefix-tokens",
        "--no-soft-penalty",
        "--no-rebalance",
        "--no-decouple",
        "--pipeline",
        "--seed",
    ];
    for sub in ["calibrate", "analyze", "simulate", "report"] {
        let o = calibadv(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let help = stdout(&o);
        for f in flags {
            assert!(help.contains(f), "{sub} --help lacks {f}");
        }
    }
}

#[test]
fn analyze_reports_empty_silver_as_zero() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.jsonl");
    let g = calibadv::RolloutGroup {
        question_id: "q".into(),
        question_text: String::new(),
        reference_answer: "paris".into(),
        rollouts: vec![
            rollout("a", "london", &[&["d1"], &["d2"]], Some(4)),
            rollout("b", "rome", &[&["d3"]], Some(4)),
        ],
    };
    write_trace_file(std::slice::from_ref(&g), &traces).unwrap();
    let assignments = dir.path().join("a.jsonl");
    let mut a = baseline_group(&g, &CalibrationConfig::default()).unwrap().assignment;
    for adv in a.per_rollout.iter_mut().flatten() {
        *adv = -0.5;
    }
    calibadv::annotated::write_annotated_file(&[(g, a)], &assignments).unwrap();
    let table = dir.path().join("table.csv");
    let o = calibadv(&["analyze", s(&traces), s(&assignments), "--table", s(&table)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows, vec!["0,0,2", "1,0,1"]);
    assert!(stdout(&o).contains("telemetry: skipped"));
}

#[test]
fn analyze_matches_library_and_checks_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let groups = two_groups(&input);
    let assignments = dir.path().join("base.jsonl");
    assert_eq!(
        code(&calibadv(&[
            "calibrate",
            s(&input),
            "-o",
            s(&assignments),
            "--pipeline",
            "baseline"
        ])),
        0
    );
    let report = dir.path().join("report.csv");
    let table = dir.path().join("table.csv");
    let o = calibadv(&[
        "analyze",
        s(&input),
        s(&assignments),
        "--report",
        s(&report),
        "--table",
        s(&table),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let config = CalibrationConfig::default();
    let a: Vec<_> = groups
        .iter()
        .map(|g| baseline_group(g, &config).unwrap().assignment)
        .collect();
    let rows = calibadv::analysis::mispenalty_rate(&groups, &a, &config).unwrap();
    let written: Vec<String> = std::fs::read_to_string(&table)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect();
    let expected: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{}", r.step_index, r.proportion, r.count))
        .collect();
    assert_eq!(written, expected);
    let record = calibadv::analysis::batch_telemetry(0, &groups, &a, &config).unwrap();
    let back = calibadv::analysis::read_report(&report).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].perplexity, record.perplexity);
    assert_eq!(back[0].neg_pos_ratio, record.neg_pos_ratio);

    // one group only in the assignment file
    let other = dir.path().join("one.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_group(&mut rng, 0, &GroupShape::default());
    let a = baseline_group(&g, &config).unwrap().assignment;
    calibadv::annotated::write_annotated_file(&[(g, a)], &other).unwrap();
    assert_eq!(code(&calibadv(&["analyze", s(&input), s(&other)])), 1);
    assert_eq!(code(&calibadv(&["analyze", s(&input), "/nonexistent/a.jsonl"])), 2);
}

#[test]
fn simulate_is_deterministic_and_creates_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.toml");
    std::fs::write(&config, "updates = 12\nn_questions = 4\n").unwrap();
    let mut telemetry = Vec::new();
    for (name, pipeline) in [("a", "calibadv"), ("b", "calibadv"), ("c", "baseline")] {
        let out = dir.path().join("nested").join(name);
        let o = calibadv(&[
            "simulate",
            "--config",
            s(&config),
            "--out",
            s(&out),
            "--pipeline",
            pipeline,
            "--seed",
            "5",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains(&format!("pipeline={pipeline}")));
        telemetry.push(std::fs::read(out.join("telemetry.csv")).unwrap());
        let report = calibadv(&["report", s(&out.join("telemetry.csv"))]);
        assert_eq!(code(&report), 0);
        assert!(stdout(&report).contains("rows\t12"));
    }
    assert_eq!(telemetry[0], telemetry[1]);
    assert_ne!(telemetry[0], telemetry[2]);

    std::fs::write(&config, "updates = 0\n").unwrap();
    assert_eq!(
        code(&calibadv(&[
            "simulate",
            "-c",
            s(&config),
            "-o",
            s(&dir.path().join("x"))
        ])),
        1
    );
    std::fs::write(&config, "updates = [\n").unwrap();
    assert_eq!(
        code(&calibadv(&[
            "simulate",
            "-c",
            s(&config),
            "-o",
            s(&dir.path().join("x"))
        ])),
        1
    );
    let o = calibadv(&[
        "simulate",
        "-c",
        "/nonexistent/sim.toml",
        "-o",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn report_rejects_foreign_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    std::fs::write(&p, "a,b\n1,2\n").unwrap();
    assert_eq!(code(&calibadv(&["report", s(&p)])), 1);
    assert_eq!(code(&calibadv(&["report", "/nonexistent/r.csv"])), 2);
}
