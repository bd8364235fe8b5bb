use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zsirl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsirl")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn out_arg(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn oracle_writes_golden_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path(), "oracle");
    let o = zsirl(&["oracle", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("oracle/values.txt")).unwrap();
    assert!(table.lines().nth(1).unwrap().contains("grid_n=3 team_size=1 discount=0.9 tol="));
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 81);
    let summary = fs::read_to_string(dir.path().join("oracle/oracle_summary.csv")).unwrap();
    let mean: f64 = summary.lines().nth(1).unwrap().split(',').nth(6).unwrap().parse().unwrap();
    assert!((mean + 11.838).abs() < 1e-3, "{mean}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path(), "o");
    let unknown = write_config(dir.path(), "unknown.toml", "schema_version = 1\n[nash]\nhorizon = 5\nsteps = 1\n");
    let version = write_config(dir.path(), "version.toml", "schema_version = 9\n");
    let wrong_alg = write_config(dir.path(), "alg.toml", "schema_version = 1\nalgorithm = \"qp\"\n");
    let invalid = write_config(dir.path(), "invalid.toml", "schema_version = 1\n[nash]\nk_g = 500\n");
    for args in [
        vec!["oracle", "--config", &unknown, "--out", &out],
        vec!["oracle", "--config", &version, "--out", &out],
        vec!["solve-nash", "--config", &wrong_alg, "--out", &out],
        vec!["solve-nash", "--config", &invalid, "--out", &out],
        vec!["eval", "matchup", "--table", "2", "--out", &out],
        vec!["train-irl", "--out", &out],
        vec!["oracle", "--config", "/nonexistent/config.toml", "--out", &out],
        vec!["baseline", "nope", "--out", &out],
    ] {
        let o = zsirl(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn numeric_failure_exits_3_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "nan.toml",
        "schema_version = 1\n[nash]\ntotal_iterations = 200\nhidden = [8]\nlr_critic = 1e300\nlr_response = 1e300\n",
    );
    let out = out_arg(dir.path(), "nan");
    let o = zsirl(&["solve-nash", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("nan/diagnostic/f_run_policy_f.ckpt").exists());
}

const SMALL: &str = "schema_version = 1
[nash]
total_iterations = 300
hidden = [16]
log_every = 100
[demo]
n_trajectories = 200
[irl]
total_iterations = 300
k_r = 100
i_r = 2
pretrain_iters = 20
reward_horizon = 10
reward_hidden = [16]
[eval]
corr_states = 128
eval_batch = 16
eval_horizon = 20
";

/// The whole pipeline on a tiny budget, run twice: every CSV and checkpoint
/// must match byte for byte.
#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        fs::create_dir_all(&root).unwrap();
        let base = write_config(&root, "base.toml", SMALL);
        let with_inputs = write_config(
            &root,
            "inputs.toml",
            &format!(
                "{SMALL}[inputs]\ndemos = \"demos/demos.txt\"\nreward = \"irl/reward.ckpt\"\npolicy_f = \"irl/f.ckpt\"\npolicy_g = \"irl/g.ckpt\"\nreference_f = \"nash/f.ckpt\"\nreference_g = \"nash/g.ckpt\"\nb_policy_f = \"nash/f.ckpt\"\nb_policy_g = \"nash/g.ckpt\"\n"
            ),
        );
        let out = |name: &str| out_arg(&root, name);
        let steps: Vec<Vec<String>> = vec![
            vec!["solve-nash".into(), "--config".into(), base.clone(), "--out".into(), out("nash")],
            vec!["gen-demos".into(), "--config".into(), base.clone(), "--out".into(), out("demos")],
            vec!["train-irl".into(), "--config".into(), with_inputs.clone(), "--out".into(), out("irl")],
            vec!["eval".into(), "corr".into(), "--config".into(), with_inputs.clone(), "--out".into(), out("eval")],
            vec!["eval".into(), "kl".into(), "--config".into(), with_inputs.clone(), "--out".into(), out("eval")],
            vec!["eval".into(), "deterioration".into(), "--config".into(), with_inputs.clone(), "--out".into(), out("eval")],
            vec!["eval".into(), "matchup".into(), "--table".into(), "3".into(), "--config".into(), with_inputs.clone(), "--out".into(), out("eval")],
        ];
        for args in &steps {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let o = zsirl(&args);
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let mut files = Vec::new();
        for sub in ["nash", "demos", "irl", "eval"] {
            let mut names: Vec<_> = fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
            names.sort();
            for p in names {
                files.push((format!("{sub}/{}", p.file_name().unwrap().to_str().unwrap()), fs::read(&p).unwrap()));
            }
        }
        snapshots.push(files);
    }
    let names: Vec<&str> = snapshots[0].iter().map(|(n, _)| n.as_str()).collect();
    for want in ["nash/nash_log.csv", "irl/irl_metrics.csv", "eval/corr.csv", "eval/kl.csv", "eval/deterioration.csv", "eval/matchup.csv", "demos/demos.txt"] {
        assert!(names.contains(&want), "missing {want}");
    }
    assert_eq!(snapshots[0].len(), snapshots[1].len());
    for ((na, a), (nb, b)) in snapshots[0].iter().zip(&snapshots[1]) {
        assert_eq!(na, nb);
        assert!(a == b, "{na} differs between reruns");
    }
    let matchup = String::from_utf8(snapshots[0].iter().find(|(n, _)| n == "eval/matchup.csv").unwrap().1.clone()).unwrap();
    assert!(matchup.starts_with("statistic,fA_gA,fB_gA,fR_gA,fA_gB,fA_gR\nmean,"));
    assert!(matchup.contains("\nexact,"));
}

#[test]
fn baselines_run_on_tiny_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let demos = out_arg(dir.path(), "demos");
    assert!(zsirl(&["gen-demos", "--config", &write_config(dir.path(), "d.toml", "schema_version = 1\n[demo]\nn_trajectories = 50\n"), "--out", &demos]).status.success());
    let cfg = write_config(
        dir.path(),
        "b.toml",
        "schema_version = 1
[nash]
total_iterations = 100
hidden = [8]
[birl]
v_iterations = 50
r_iterations = 50
hidden = [8]
[dirl]
outer_iterations = 2
pi_iterations = 20
r_iterations = 10
pretrain_iters = 5
horizon = 5
reward_hidden = [8]
[qp]
iterations = 50
hidden = [8]
log_every = 10
[inputs]
demos = \"demos/demos.txt\"
",
    );
    for (method, csv) in [("birl", "birl_metrics.csv"), ("dirl", "dirl_metrics.csv"), ("qp", "qp_metrics.csv")] {
        let out = out_arg(dir.path(), method);
        let o = zsirl(&["baseline", method, "--config", &cfg, "--out", &out]);
        assert!(o.status.success(), "{method}: {}", String::from_utf8_lossy(&o.stderr));
        let text = fs::read_to_string(dir.path().join(method).join(csv)).unwrap();
        assert!(text.starts_with("iteration,metric,value,batch_size\n"));
        assert!(text.lines().skip(1).all(|l| l.split(',').nth(1).unwrap().starts_with(&format!("{method}/"))));
    }
    for k in 0..2 {
        assert!(dir.path().join(format!("dirl/policy_set/pi_{k}_f.ckpt")).exists());
    }
}
