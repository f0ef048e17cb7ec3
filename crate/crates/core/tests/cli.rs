use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[world]
clients = 3
classes = 3
d_in = 8
d_emb = 6
samples_per_class_per_client = 20
seed = 2

[fl]
max_global_rounds = 15
warmup_rounds = 2
patience = 2
seed = 2

[train]
learning_rate = 0.01
max_epochs = 60
"#;

fn mpft(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mpft"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("MPFT_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("spec.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.display().to_string()
}

fn without_wall_time(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time");
    v
}

#[test]
fn local_run_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("local");
    let res = mpft(&["run", "--config", &cfg, "--method", "local", "--out", out.to_str().unwrap()], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["accuracy.csv", "fairness.csv", "report.json"]);
}

#[test]
fn unknown_method_exits_two_and_names_the_field() {
    let res = mpft(&["run", "--method", "fedsgd", "--out", "unused"], None);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("fl.method"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[fl.extra]\n");
    let res = mpft(&["run", "--config", &cfg], None);
    assert_eq!(res.status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearnin_rate = 0.1\n").unwrap();
    let res = mpft(&["run", "--config", bad.to_str().unwrap()], None);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("learnin_rate"));
}

#[test]
fn sweep_writes_one_directory_per_entry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[[sweep]]\n\"fl.sampling\" = \"random\"\n\"fl.rate\" = 0.1\n[[sweep]]\n\"fl.sampling\" = \"random\"\n\"fl.rate\" = 0.3\n");
    let out = dir.path().join("sweep");
    let res = mpft(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut subdirs: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    subdirs.sort();
    assert_eq!(subdirs.len(), 2);
    assert_ne!(subdirs[0], subdirs[1]);
    for s in &subdirs {
        assert!(out.join(s).join("report.json").exists());
    }
}

#[test]
fn compare_tabulates_sorted_rows_and_rejects_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let mut reports = Vec::new();
    for m in ["mpft", "fedavg"] {
        let out = dir.path().join(m);
        assert!(mpft(&["run", "--config", &cfg, "--method", m, "--out", out.to_str().unwrap()], None).status.success());
        reports.push(out.join("report.json").display().to_string());
    }
    let table_dir = dir.path().join("table");
    let mut args = vec!["compare", "--out", table_dir.to_str().unwrap()];
    args.extend(reports.iter().map(String::as_str));
    let res = mpft(&args, None);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,ood_acc,ind_acc,rounds,comm_bytes,wall_time,report");
    assert!(lines[1].starts_with("fedavg,") && lines[2].starts_with("mpft,"));
    assert_eq!(fs::read_to_string(table_dir.join("comparison.csv")).unwrap(), text);

    let single = mpft(&["compare", &reports[0]], None);
    assert_eq!(String::from_utf8(single.stdout).unwrap().lines().count(), 2);
    let missing = mpft(&["compare", "does/not/exist.json"], None);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[attack]\nenabled = true\niterations = 500\nlog_every = 50\n");
    for method in ["mpft", "fedavg", "local", "proto_avg"] {
        let a = dir.path().join(format!("{method}-1"));
        let b = dir.path().join(format!("{method}-8"));
        for (out, threads) in [(&a, "1"), (&b, "8")] {
            let res = mpft(&["run", "--config", &cfg, "--method", method, "--out", out.to_str().unwrap()], Some(threads));
            assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        }
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            if name == "report.json" {
                assert_eq!(without_wall_time(&a.join(&name)), without_wall_time(&b.join(&name)));
            } else {
                assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{method}: {name:?}");
            }
        }
    }
}

#[test]
fn generate_and_attack_commands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("gen");
    assert!(mpft(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()], None).status.success());
    assert!(out.join("embeddings.mpftemb").exists() && out.join("world.json").exists());

    let imported = dir.path().join("imported.toml");
    fs::write(&imported, format!("embeddings = {:?}\n{SMALL}", out.join("embeddings.mpftemb").display().to_string())).unwrap();
    let run_out = dir.path().join("imported-run");
    let res = mpft(&["run", "--config", imported.to_str().unwrap(), "--out", run_out.to_str().unwrap()], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let atk = dir.path().join("atk");
    let attack_cfg = write_config(dir.path(), "[attack]\niterations = 200\n");
    let res = mpft(&["attack", "--config", &attack_cfg, "--seed", "3", "--out", atk.to_str().unwrap()], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(atk.join("attack_trajectory.csv")).unwrap();
    assert!(csv.starts_with("iteration,prototype_mse,input_mse\n"));
    assert_eq!(csv.lines().count(), 1 + 200 / 100 + 1);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let spec = mpft::experiment::ExperimentSpec::load(&path).unwrap();
        spec.validate().unwrap();
        let again = mpft::experiment::ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(spec, again, "{}", path.display());
    }
}
