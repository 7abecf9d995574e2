use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn liftrisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liftrisk")).args(args).env("RUST_LOG", "warn").output().expect("spawn liftrisk")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const CONFIG: &str = "# two-epoch desk run\nprofile = desk\nmax_epochs = 2\nseed = 42\n";

/// A desk dataset and one short training run, shared by the tests.
struct Fixture {
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_fixture");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        let data = root.join("data");
        let o = liftrisk(&["synth", "--out", s(&data), "--seed", "42", "--profile", "desk"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let config = root.join("desk.cfg");
        fs::write(&config, CONFIG).unwrap();
        let model = root.join("run").join("model.ckpt");
        let o = liftrisk(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&model)]);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture { root, data, config, model }
    })
}

fn class_of_zone(z: u32) -> usize {
    match z {
        4 | 5 => 0,
        6..=9 => 1,
        _ => 2,
    }
}

fn manifest_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn synth_default_profile_is_complete_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = liftrisk(&["synth", "--out", s(d.path()), "--seed", "42", "--profile", "default"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let trials = fs::read_dir(a.path().join("trials")).unwrap().count();
    assert_eq!(trials, 720);
    let mut counts = [0; 3];
    for row in manifest_rows(&a.path().join("manifest.csv")) {
        counts[class_of_zone(row[2].parse().unwrap())] += 1;
    }
    assert_eq!(counts, [120, 240, 360]);
    assert!(snapshot(a.path()) == snapshot(b.path()));
}

#[test]
fn synth_usage_errors() {
    let o = liftrisk(&["synth", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("keep.txt"), "x").unwrap();
    let o = liftrisk(&["synth", "--out", s(d.path()), "--profile", "desk"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not empty"));
    assert_eq!(fs::read_dir(d.path()).unwrap().count(), 1);
}

#[test]
fn train_writes_checkpoint_history_metrics_and_split() {
    let f = fixture();
    let run = f.model.parent().unwrap();
    assert!(fs::read(&f.model).unwrap().starts_with(b"LRISK"));
    let metrics = fs::read_to_string(run.join("model_metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("accuracy,")));
    assert!(metrics.lines().any(|l| l.starts_with("rk,")));
    assert!(metrics.lines().any(|l| l.starts_with('#') && l.contains("seed = 42")));
    assert!(metrics.contains("row,precision,recall,f_measure,value"));
    let history = fs::read_to_string(run.join("model_history.csv")).unwrap();
    assert!(history.contains("epoch,loss,accuracy"));
    assert_eq!(history.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let split = manifest_rows(&run.join("model_split").join("manifest.csv"));
    assert_eq!(split.len(), 720);
    assert_eq!(split.iter().filter(|r| r[5] == "train").count(), 540);
    assert_eq!(split.iter().filter(|r| r[5] == "test").count(), 180);
}

#[test]
fn train_rerun_is_identical() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let model = out.path().join("again.ckpt");
    let o = liftrisk(&["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = f.model.parent().unwrap();
    assert_eq!(
        fs::read(out.path().join("again_metrics.csv")).unwrap(),
        fs::read(run.join("model_metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(out.path().join("again_history.csv")).unwrap(),
        fs::read(run.join("model_history.csv")).unwrap()
    );
    assert_eq!(fs::read(&model).unwrap(), fs::read(&f.model).unwrap());
}

#[test]
fn train_config_errors_exit_2() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.cfg");
    fs::write(&cfg, "profile = desk\nfoo = 1\n").unwrap();
    let o = liftrisk(&["train", "--data", s(&f.data), "--config", s(&cfg), "--out", s(&d.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("foo"));
    let o = liftrisk(&[
        "train",
        "--data",
        s(&f.data),
        "--config",
        s(&d.path().join("absent.cfg")),
        "--out",
        s(&d.path().join("m.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = liftrisk(&["train", "--data", s(&f.data), "--config", s(&f.config)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("m.ckpt").exists());
}

#[test]
fn unreadable_data_exits_3() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let o = liftrisk(&[
        "train",
        "--data",
        s(&d.path().join("none")),
        "--config",
        s(&f.config),
        "--out",
        s(&d.path().join("m.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("manifest.csv"));
    let o = liftrisk(&["eval", "--model", s(&d.path().join("none.ckpt")), "--data", s(&f.data)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("wild.cfg");
    fs::write(&cfg, "profile = desk\nmax_epochs = 2\nlearning_rate = 1e200\n").unwrap();
    let o = liftrisk(&["train", "--data", s(&f.data), "--config", s(&cfg), "--out", s(&d.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn eval_reproduces_train_report() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("eval.csv");
    let o =
        liftrisk(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--config", s(&f.config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(f.model.parent().unwrap().join("model_metrics.csv")).unwrap());
    let o = liftrisk(&["eval", "--model", s(&f.model), "--data", s(&f.data)]);
    assert!(o.status.success());
    assert_eq!(o.stdout, fs::read(&out).unwrap());
}

#[test]
fn eval_width_mismatch_exits_5() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("wide.cfg");
    fs::write(&cfg, "profile = desk\nimage_width = 95\n").unwrap();
    let o = liftrisk(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(5));
    let e = stderr(&o);
    assert!(e.contains("55") && e.contains("95"), "{e}");
}

#[test]
fn saliency_writes_maps_mean_and_attribution() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let o =
        liftrisk(&["saliency", "--model", s(&f.model), "--data", s(&f.data), "--class", "high", "--out", s(d.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let split = manifest_rows(&f.model.parent().unwrap().join("model_split").join("manifest.csv"));
    let high_test = split.iter().filter(|r| r[5] == "test" && class_of_zone(r[2].parse().unwrap()) == 2).count();
    let names: Vec<String> =
        fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    let per_image = names.iter().filter(|n| n.starts_with("saliency_high_trial_") && n.ends_with(".pgm")).count();
    assert_eq!(per_image, high_test);
    assert!(names.contains(&"saliency_high_mean.pgm".to_string()));
    assert_eq!(names.len(), high_test + 2);
    let pgm = fs::read(d.path().join("saliency_high_mean.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n55 55\n255\n"));
    assert_eq!(pgm.len(), b"P5\n55 55\n255\n".len() + 55 * 55);
    let csv = fs::read_to_string(d.path().join("sensor_attribution_high.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "sensor,name,total,rank");
    assert_eq!(rows.len(), 13);
    let o = liftrisk(&[
        "saliency",
        "--model",
        s(&f.model),
        "--data",
        s(&f.data),
        "--class",
        "severe",
        "--out",
        s(d.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tune_single_cell_grid() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let grid = d.path().join("grid.txt");
    fs::write(&grid, "profile = desk\nmax_epochs = 1\nlambdas = 1e-5\nalphas = 1e-3\ndropouts = 0.25\n").unwrap();
    let out = d.path().join("tune");
    let o = liftrisk(&["tune", "--data", s(&f.data), "--grid", s(&grid), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("tune_results.csv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("rank,cell,"));
    assert!(rows[1].starts_with("1,0,0,"));
    assert!(out.join("curves").join("cell_0.csv").exists());
    assert_eq!(manifest_rows(&out.join("split").join("manifest.csv")).len(), 720);
    fs::write(&grid, "lambdas = 1e-5\nbogus = 2\n").unwrap();
    let o = liftrisk(&["tune", "--data", s(&f.data), "--grid", s(&grid)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn commands_leave_the_dataset_untouched() {
    let f = fixture();
    let before = snapshot(&f.data);
    let d = tempfile::tempdir().unwrap();
    assert!(liftrisk(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--out", s(&d.path().join("e.csv"))])
        .status
        .success());
    assert!(liftrisk(&[
        "saliency",
        "--model",
        s(&f.model),
        "--data",
        s(&f.data),
        "--class",
        "low",
        "--out",
        s(d.path())
    ])
    .status
    .success());
    assert!(before == snapshot(&f.data));
    assert!(f.root.join("run").join("model_split").join("manifest.csv").exists());
}
