use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn avgrl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avgrl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = avgrl(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn export_solve_and_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["export", "--env", "delayed", "--out", "d.json"], dir);

    let avg = json(&ok(
        &["solve", "--mdp", "d.json", "--criterion", "average"],
        dir,
    ));
    assert!((avg["gain"].as_f64().unwrap() - 10.0 / 3.0).abs() < 1e-8);
    assert_eq!(avg["policy"], serde_json::json!([1, 0, 0]));

    let disc = json(&ok(
        &[
            "solve",
            "--mdp",
            "d.json",
            "--criterion",
            "discounted",
            "--gamma",
            "0.1",
        ],
        dir,
    ));
    assert_eq!(disc["policy"][0], 0);
    assert!(disc["values"].as_array().unwrap().len() == 3);

    let table = ok(&["gap", "--mdp", "d.json", "--gammas", "0.1,0.9"], dir);
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][5], "gap");
    assert!((rows[1][5].parse::<f64>().unwrap() - 7.0 / 3.0).abs() < 1e-9);
    assert!(rows[2][5].parse::<f64>().unwrap().abs() < 1e-9);
}

#[test]
fn tabular_train_and_summarize() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("c.json"),
        r#"{"steps": 20000, "eval_every": 2000, "alpha": 0.2, "seed": 4}"#,
    )
    .unwrap();
    ok(
        &[
            "train", "--agent", "rlearn", "--env", "delayed", "--config", "c.json", "--out",
            "r.csv",
        ],
        dir,
    );
    let text = fs::read_to_string(dir.join("r.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,eval_avg_reward,u_tilde,seed"));
    assert_eq!(lines.count(), 10);
    let summary = json(&ok(&["summarize", "r.csv", "--tail", "3"], dir));
    assert!((summary["mean"].as_f64().unwrap() - 10.0 / 3.0).abs() < 1e-6);
    assert_eq!(summary["tail"], 3);

    ok(
        &[
            "train",
            "--agent",
            "q",
            "--env",
            "random:S=3,A=2,seed=1",
            "--out",
            "q.csv",
            "--steps",
            "2000",
            "--eval-every",
            "1000",
        ],
        dir,
    );
    let text = fs::read_to_string(dir.join("q.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().split(',').nth(2) == Some(""));
}

#[test]
fn deep_train_with_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let env = "aoi:K=1,N=1,dmax=4,p=1";
    ok(
        &[
            "train",
            "--agent",
            "ddr",
            "--env",
            env,
            "--out",
            "a.csv",
            "--steps",
            "600",
            "--eval-every",
            "300",
            "--save-checkpoint",
            "net.json",
        ],
        dir,
    );
    let text = fs::read_to_string(dir.join("a.csv")).unwrap();
    assert!(text.starts_with("step,eval_avg_reward,u_tilde,seed,loss,target_syncs\n"));
    let ckpt = json(&fs::read_to_string(dir.join("net.json")).unwrap());
    assert_eq!(ckpt["format"], "avgrl-dueling");

    ok(
        &[
            "train",
            "--agent",
            "ddqn",
            "--env",
            env,
            "--out",
            "b.csv",
            "--steps",
            "300",
            "--eval-every",
            "300",
            "--load-checkpoint",
            "net.json",
        ],
        dir,
    );
    let out = avgrl(
        &[
            "train",
            "--agent",
            "ddr",
            "--env",
            "aoi:K=2,N=1,dmax=4,p=1",
            "--out",
            "c.csv",
            "--steps",
            "10",
            "--eval-every",
            "10",
            "--load-checkpoint",
            "net.json",
        ],
        dir,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn run_then_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("exp.json"),
        r#"{
            "env": "random:S=4,A=2,seed=2",
            "agent": "rviq",
            "learning": {"steps": 4000, "eval_every": 1000, "eval_horizon": 2000},
            "seeds": [0, 1, 2],
            "ref_states": [0, 3],
            "output_dir": "out"
        }"#,
    )
    .unwrap();
    let said = ok(&["run", "exp.json"], dir);
    assert!(said.contains("6 cells, 0 failed"));
    let manifest = json(&fs::read_to_string(dir.join("out/manifest.json")).unwrap());
    let records = manifest["records"].as_array().unwrap();
    assert_eq!(records.len(), 6);
    for r in records {
        let digest = r["digest"].as_str().unwrap();
        assert_eq!(digest.len(), 64);
        assert_eq!(r["config_hash"].as_str().unwrap().len(), 32);
    }
    let envelope = ok(&["aggregate", "out"], dir);
    let lines: Vec<&str> = envelope.lines().collect();
    assert_eq!(lines[0], "step,mean,min,max");
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[2] <= v[1] && v[1] <= v[3]);
    }

    // tampering is detected
    let first = records[0]["file"].as_str().unwrap();
    fs::write(dir.join("out").join(first), "step,eval_avg_reward\n1,0\n").unwrap();
    let out = avgrl(&["aggregate", "out"], dir);
    assert!(!out.status.success());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = avgrl(
        &[
            "train",
            "--agent",
            "ddr",
            "--env",
            "aoi:K=1,N=1,p=1",
            "--out",
            "x.csv",
        ],
        dir,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`dmax`"));

    fs::write(
        dir.join("bad.json"),
        r#"{"num_states":1,"num_actions":1,"kernel":[[[[0,1.0,0.5]]]]}"#,
    )
    .unwrap();
    let out = avgrl(&["solve", "--mdp", "bad.json"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sum"));

    fs::write(
        dir.join("short.csv"),
        "step,eval_avg_reward,u_tilde,seed\n1,2,,0\n",
    )
    .unwrap();
    let out = avgrl(&["summarize", "short.csv", "--tail", "10"], dir);
    assert!(!out.status.success());
}
