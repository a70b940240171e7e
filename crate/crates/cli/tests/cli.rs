use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tli_core::fixtures::{self, GraphBuilder};
use tli_core::{center_crop, read_store, resize, write_store, GraphDoc, TensorMap};

fn tli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tli"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("failed to run tli")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn save(dir: &Path, name: &str, g: &GraphDoc, store: Option<&TensorMap>) -> PathBuf {
    let graph = dir.join(format!("{name}.tligraph.json"));
    fs::write(&graph, g.to_json()).unwrap();
    if let Some(s) = store {
        fs::write(dir.join(format!("{name}.tlitensors")), write_store(s)).unwrap();
    }
    graph
}

#[test]
fn score_self_and_twin() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::residual();
    save(dir.path(), "a", &g, None);
    save(dir.path(), "b", &fixtures::renamed(&g, "other.", "b"), None);

    let o = tli(&["score", "a.tligraph.json", "a.tligraph.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "tli_score=1.0000\n");

    let o = tli(&["score", "a.tligraph.json", "b.tligraph.json", "--report", "r.json"], dir.path());
    assert_eq!(stdout(&o), "tli_score=1.0000\n");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["tli_score"], 1.0);
    assert_eq!(
        report["per_param"]["conv_a.weight"][0]["teacher"],
        "other.conv_a.weight"
    );
    assert!(report["per_param"]["fc.bias"][0]["score"]["components"]["shape"].is_number());
}

#[test]
fn malformed_graph_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), "ok", &fixtures::chain(), None);
    fs::write(
        dir.path().join("bad.tligraph.json"),
        r#"{"name":"bad","nodes":[{"id":"in","kind":"input","inputs":[]},{"id":"x","kind":"warp","inputs":["in"]}],"outputs":["x"]}"#,
    )
    .unwrap();
    let o = tli(&["score", "bad.tligraph.json", "ok.tligraph.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("kind") && err.contains("bad.tligraph.json"), "{err}");

    let o = tli(&["score", "missing.tligraph.json", "ok.tligraph.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = tli(&["score", "ok.tligraph.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shapes_required_without_store() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"name":"n","nodes":[{"id":"in","kind":"input","inputs":[]},{"id":"fc","kind":"linear","inputs":["in"],"params":[{"name":"fc.weight","role":"weight"}]}],"outputs":["fc"]}"#;
    fs::write(dir.path().join("n.tligraph.json"), text).unwrap();
    let o = tli(&["score", "n.tligraph.json", "n.tligraph.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fc.weight"));
}

#[test]
fn transfer_identity_writes_teacher_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::concat_branches();
    let teacher_store = fixtures::random_store(&g, 1);
    save(dir.path(), "teacher", &g, Some(&teacher_store));
    save(dir.path(), "student", &g, Some(&fixtures::random_store(&g, 2)));
    let o = tli(
        &["transfer", "student.tligraph.json", "teacher.tligraph.json", "--out", "out.tlitensors"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "tli_score=1.0000\n");
    assert_eq!(
        fs::read(dir.path().join("out.tlitensors")).unwrap(),
        fs::read(dir.path().join("teacher.tlitensors")).unwrap()
    );
}

#[test]
fn lambda_endpoints_on_a_shrinking_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let net = |shape: &[usize]| {
        let mut b = GraphBuilder::new("net");
        b.input("in").linear("fc", "in", shape, false).output("out", &["fc"]);
        b.build()
    };
    let teacher = net(&[6, 5]);
    let student = net(&[3, 2]);
    let t_store = fixtures::random_store(&teacher, 3);
    save(dir.path(), "t", &teacher, Some(&t_store));
    save(dir.path(), "s", &student, Some(&fixtures::random_store(&student, 4)));

    let run = |lambda: &str, out: &str| {
        let o = tli(
            &["transfer", "s.tligraph.json", "t.tligraph.json", "--out", out, "--lambda", lambda],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
        read_store(&fs::read(dir.path().join(out)).unwrap()).unwrap()
    };
    let pure_resize = run("0", "l0.tlitensors");
    let pure_crop = run("1", "l1.tlitensors");
    let src = &t_store["fc.weight"];
    assert_ne!(pure_resize["fc.weight"], pure_crop["fc.weight"]);
    assert_eq!(pure_resize["fc.weight"], resize(src, &[3, 2]).unwrap());
    assert_eq!(pure_crop["fc.weight"], center_crop(src, &[3, 2]).unwrap().tensor);
}

#[test]
fn transfer_norm_policy_flag() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::norm_net();
    let s_store = fixtures::random_store(&g, 5);
    save(dir.path(), "s", &g, Some(&s_store));
    save(dir.path(), "t", &g, Some(&fixtures::random_store(&g, 6)));
    let o = tli(
        &[
            "transfer", "s.tligraph.json", "t.tligraph.json", "--out", "o.tlitensors",
            "--norm-policy", "skip_norm_params", "--report", "rep.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let out = read_store(&fs::read(dir.path().join("o.tlitensors")).unwrap()).unwrap();
    for name in ["bn1.weight", "bn1.bias", "bn1.running_mean", "bn2.running_var", "ln.weight", "ln.bias"] {
        assert!(out[name].bit_eq(&s_store[name]), "{name}");
    }
    assert!(!out["conv1.weight"].bit_eq(&s_store["conv1.weight"]));
    let rep = fs::read_to_string(dir.path().join("rep.json")).unwrap();
    assert!(rep.contains("kept_by_norm_policy"));

    let o = tli(
        &["transfer", "s.tligraph.json", "t.tligraph.json", "--out", "x.tlitensors", "--norm-policy", "never"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_transfer_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::chain();
    save(dir.path(), "s", &g, Some(&fixtures::random_store(&g, 1)));
    save(dir.path(), "t", &g, None);
    let o = tli(&["transfer", "s.tligraph.json", "t.tligraph.json", "--out", "o.tlitensors"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("o.tlitensors").exists());

    save(dir.path(), "t", &g, Some(&fixtures::random_store(&g, 2)));
    let o = tli(
        &["transfer", "s.tligraph.json", "t.tligraph.json", "--out", "o.tlitensors", "--lambda", "2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("o.tlitensors").exists());
    let leftovers = fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 4);
}

#[test]
fn matrix_single_and_twins() {
    let dir = tempfile::tempdir().unwrap();
    let models = dir.path().join("zoo");
    fs::create_dir(&models).unwrap();
    save(&models, "solo", &fixtures::chain(), None);
    let o = tli(&["matrix", "zoo", "--out", "m.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with('#'));
    assert_eq!(&lines[1..], &["model,solo", "solo,1.0000"]);

    let g = fixtures::opaque_net();
    save(&models, "solo", &g, None);
    save(&models, "twin", &fixtures::renamed(&g, "q", "twin"), None);
    let o = tli(&["matrix", "zoo", "--out", "m.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(csv.contains("\r\n"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        &lines[1..],
        &["model,solo,twin", "solo,1.0000,1.0000", "twin,1.0000,1.0000"]
    );

    fs::write(models.join("broken.tligraph.json"), "{").unwrap();
    let o = tli(&["matrix", "zoo", "--out", "m2.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.tligraph.json"));
    assert!(!dir.path().join("m2.csv").exists());

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(tli(&["matrix", "empty", "--out", "e.csv"], dir.path()).status.code(), Some(2));
}

#[test]
fn inspect_dumps_paths() {
    let dir = tempfile::tempdir().unwrap();
    let chain = fixtures::chain();
    let store = fixtures::random_store(&chain, 1);
    save(dir.path(), "chain", &chain, Some(&store));
    let o = tli(&["inspect", "chain.tligraph.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["submodules"].as_array().unwrap().len(), 1);
    assert_eq!(v["paths"].as_array().unwrap().len(), store.len());
    assert_eq!(v["param_count"], store.len());

    save(dir.path(), "res", &fixtures::residual(), None);
    let o = tli(&["inspect", "res.tligraph.json"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["submodules"].as_array().unwrap().len(), 2);
    let branch = |name: &str| {
        v["paths"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["param_name"] == name)
            .unwrap()["branch_index"]
            .as_u64()
            .unwrap()
    };
    assert_eq!(branch("conv_b.weight"), 0);
    assert_eq!(branch("conv_sc.weight"), 1);
}

#[test]
fn select_and_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let o = tli(&["fixtures", "--out", "zoo"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_dir(dir.path().join("zoo")).unwrap().count(), 10);
    let o = tli(
        &["select", "zoo/residual.tligraph.json", "zoo/chain.tligraph.json", "zoo/residual.tligraph.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("index=1 tli_score=1.0000"));
}

#[test]
fn help_per_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["score", "transfer", "matrix", "inspect", "select", "fixtures"] {
        let o = tli(&[sub, "--help"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{sub}");
    }
}
