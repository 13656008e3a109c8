use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use transzero_cli::plot::{load_groups, read_metrics};
use transzero_cli::{mean_stderr, RunConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_transzero"));
    c.env_remove("TRANSZERO_OUT_DIR");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        r#"
[network]
d_model = 8
heads = 2
layers = 1
ffn_hidden = 16
repr_hidden = 16
head_hidden = 8
max_depth = 16

[planner]
num_simulations = 2
subtree_layers = 1

[training]
episodes = 3
warmup_episodes = 1
train_steps_per_episode = 2
batch_size = 4
unroll_steps = 2
"#,
    )
    .unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let o = run(bin().args(["train", "--config", "/no/such/run.toml"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/run.toml"), "{}", stderr(&o));
}

#[test]
fn invalid_field_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for set in [
        "training.batch_size=0",
        "env.lava=100",
        "planner.mvc.beta=-1",
        "bench.repetitions=2",
    ] {
        let o = run(bin().args(["train", "--set", set, "--out-dir"]).arg(&out));
        assert_eq!(o.status.code(), Some(2), "{set}: {}", stderr(&o));
    }
    assert!(!out.exists());
}

#[test]
fn one_episode_smoke_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = run(bin()
        .args(["train", "--episodes", "1", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    assert!(!rows.is_empty());
    assert!(out.join("checkpoints/latest.tzck").exists());
    let snapshot: RunConfig =
        toml::from_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(snapshot.training.episodes, 1);
    assert_eq!(snapshot.output_dir, out);
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(bin()
            .arg("train")
            .arg("-c")
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&out));
        assert!(o.status.success(), "{}", stderr(&o));
        files.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let o = run(bin()
        .arg("train")
        .arg("-c")
        .arg(&cfg)
        .args(["--seed", "1", "--out-dir"])
        .arg(dir.path().join("c")));
    assert!(o.status.success());
    assert_ne!(
        fs::read(dir.path().join("c/metrics.csv")).unwrap(),
        files[0]
    );
}

#[test]
fn output_dir_comes_from_the_environment_unless_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let env_out = dir.path().join("from_env");
    let o = run(bin()
        .current_dir(dir.path())
        .env("TRANSZERO_OUT_DIR", &env_out)
        .args(["train", "--episodes", "1", "-c"])
        .arg(&cfg));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("metrics.csv").exists());
    let mut entries: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, vec!["from_env", "tiny.toml"]);
}

#[test]
fn eval_reports_mean_and_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = run(bin()
        .args([
            "train",
            "--episodes",
            "1",
            "--set",
            "training.train_steps_per_episode=0",
            "-c",
        ])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = out.join("config.toml");

    let o = run(bin().args(["eval", "--episodes", "1", "-c"]).arg(&snapshot));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("stderr 0.0000"), "{text}");

    let o = run(bin()
        .args(["eval", "--episodes", "20", "-c"])
        .arg(&snapshot));
    assert!(o.status.success());
    let mut r = csv::Reader::from_path(out.join("eval.csv")).unwrap();
    let rec = r.records().next().unwrap().unwrap();
    let mean: f64 = rec[3].parse().unwrap();
    assert!(mean >= 0.0);

    let o = run(bin()
        .args([
            "eval",
            "--episodes",
            "1",
            "--set",
            "network.d_model=16",
            "-c",
        ])
        .arg(&snapshot));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));

    let o = run(bin().args(["eval", "--episodes", "0", "-c"]).arg(&snapshot));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("bench");
    let o = run(bin()
        .args(["bench", "--set", "bench.cases=[{sims=1,layers=2}]", "-c"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("bench.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "mode,sims,layers,nodes,median_ms,iqr_ms,per_node_us,relative"
    );
    assert!(lines[1].starts_with("parallel,1,2,12,"));
    assert!(lines[2].starts_with("sequential,1,2,12,"));
    assert!(lines[2].ends_with(",1.000000"));
}

const HEADER: &str =
    "step,episodes,env_steps,mean_reward,value_loss,reward_loss,policy_loss,nodes_per_sim,plan_ms";

fn write_run(dir: &Path, seed: u64, rewards: &[f64]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let cfg = RunConfig {
        seed,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    fs::write(dir.join("config.toml"), cfg.to_toml()).unwrap();
    let mut text = format!("{HEADER}\n");
    for (i, r) in rewards.iter().enumerate() {
        text += &format!("{i},{},{},{r},,,,12.0,\n", i + 1, 10 * (i + 1));
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn seeds_of_one_config_share_a_band() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [[1.0, 4.0, 6.0], [3.0, 5.0, 9.0], [2.0, 9.0, 6.0]];
    let paths: Vec<PathBuf> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| write_run(&dir.path().join(format!("s{i}")), i as u64, r))
        .collect();
    let groups = load_groups(&paths).unwrap();
    assert_eq!(groups.len(), 1);
    let g = &groups[0];
    assert_eq!(g.files.len(), 3);
    for (k, p) in g.curve.iter().enumerate() {
        let col: Vec<f64> = runs.iter().map(|r| r[k]).collect();
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((p.mean - mean).abs() < 1e-12);
        assert!((p.stderr - sd / n.sqrt()).abs() < 1e-12);
        assert_eq!((p.mean, p.stderr), mean_stderr(&col));
    }

    let svg_path = dir.path().join("curves.svg");
    let o = run(bin().arg("plot").args(&paths).arg("-o").arg(&svg_path));
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert_eq!(svg.matches("<polygon").count(), 1);
    assert!(svg.contains("(3 runs)"));
}

#[test]
fn different_configs_form_separate_groups() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_run(&dir.path().join("a"), 0, &[1.0, 2.0]);
    let b_dir = dir.path().join("b");
    let b = write_run(&b_dir, 0, &[1.0, 2.0]);
    let mut cfg: RunConfig =
        toml::from_str(&fs::read_to_string(b_dir.join("config.toml")).unwrap()).unwrap();
    cfg.planner.num_simulations = 9;
    fs::write(b_dir.join("config.toml"), cfg.to_toml()).unwrap();
    let groups = load_groups(&[a, b]).unwrap();
    assert_eq!(groups.len(), 2);
}

#[test]
fn malformed_and_empty_csvs_exit_2_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(
        &bad,
        format!("{HEADER}\n0,1,10,1.0,,,,,\n1,2,20,oops,,,,,\n"),
    )
    .unwrap();
    let o = run(bin()
        .arg("plot")
        .arg(&bad)
        .arg("-o")
        .arg(dir.path().join("x.svg")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.csv:3"), "{}", stderr(&o));

    let short = dir.path().join("short.csv");
    fs::write(&short, format!("{HEADER}\n0,1,10\n")).unwrap();
    let o = run(bin()
        .arg("plot")
        .arg(&short)
        .arg("-o")
        .arg(dir.path().join("x.svg")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("short.csv:2"), "{}", stderr(&o));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, format!("{HEADER}\n")).unwrap();
    let o = run(bin()
        .arg("plot")
        .arg(&empty)
        .arg("-o")
        .arg(dir.path().join("x.svg")));
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x.svg").exists());
}
