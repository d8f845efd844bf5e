use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gss_core::dataset::{write_sample, DatasetManifest, Grid, Sample, Split};
use gss_core::scenegen::SceneSpec;
use gss_core::schema::presets;

fn gss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gss"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    schema: PathBuf,
    scene: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let schema = root.join("toy.cfg");
    fs::write(&schema, presets::toy().to_config_string()).unwrap();
    let mut spec = SceneSpec::toy();
    spec.height = 16;
    spec.width = 16;
    let scene = root.join("scene.cfg");
    fs::write(&scene, spec.to_config_string()).unwrap();
    Fixture {
        _dir: dir,
        root,
        schema,
        scene,
    }
}

fn gen(f: &Fixture, out: &Path, scenes: &str) -> Output {
    gss(&[
        "gen",
        "--schema",
        p(&f.schema),
        "--scene",
        p(&f.scene),
        "--scenes",
        scenes,
        "--seed",
        "7",
        "--out",
        p(out),
    ])
}

#[test]
fn gen_counts_and_is_repeatable() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    assert!(gen(&f, &a, "12").status.success());
    assert!(gen(&f, &b, "12").status.success());
    let m = DatasetManifest::load(&a).unwrap();
    assert_eq!(m.files(Split::Train).count(), 10);
    assert_eq!(m.files(Split::Test).count(), 2);
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    for e in &m.samples {
        assert_eq!(fs::read(a.join(&e.file)).unwrap(), fs::read(b.join(&e.file)).unwrap());
    }
    assert!(a.join("run.json").exists());
}

#[test]
fn missing_schema_is_a_config_error() {
    let f = fixture();
    let missing = f.root.join("nope.cfg");
    let out = gss(&["gen", "--schema", p(&missing), "--scenes", "6", "--out", p(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.cfg"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gss(&["train"]).status.code(), Some(1));
    assert_eq!(gss(&["bogus"]).status.code(), Some(1));
    assert_eq!(gss(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_resume_eval_render() {
    let f = fixture();
    let data = f.root.join("data");
    assert!(gen(&f, &data, "12").status.success());
    let model_cfg = f.root.join("model.json");
    fs::write(&model_cfg, r#"{"base_width": 4, "levels": 2}"#).unwrap();
    let train_cfg = f.root.join("train.json");
    fs::write(&train_cfg, r#"{"batch_size": 4, "decay_every": 1, "seed": 3}"#).unwrap();
    let run = f.root.join("run");
    let train = |epochs: &str, resume: bool| {
        let mut args = vec![
            "train",
            "--data",
            p(&data),
            "--mode",
            "gss",
            "--model-config",
            p(&model_cfg),
            "--train-config",
            p(&train_cfg),
            "--epochs",
            epochs,
            "--out",
            p(&run),
        ];
        if resume {
            args.push("--resume");
        }
        gss(&args)
    };
    let out = train("1", false);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["checkpoint.gssm", "history.jsonl", "run.json", "model_config.json", "train_config.json"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let out = train("2", true);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert_eq!(records[1]["epoch"], 1);
    // decay every epoch: the resumed epoch runs at the second step of the schedule
    let lr = records[1]["learning_rate"].as_f64().unwrap();
    assert!((lr - 1e-4).abs() < 1e-15, "{lr}");

    let ck = run.join("checkpoint.gssm");
    let report = |name: &str, extra: &[&str]| {
        let path = f.root.join(name);
        let mut args = vec!["eval", "--data", p(&data), "--out", p(&path)];
        args.extend_from_slice(extra);
        let out = gss(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(&path).unwrap()
    };
    let r1 = report("r1.json", &["--checkpoint", p(&ck)]);
    let r2 = report("r2.json", &["--checkpoint", p(&ck)]);
    assert_eq!(r1, r2);
    let oracle: serde_json::Value = serde_json::from_slice(&report("oracle.json", &["--oracle"])).unwrap();
    let m = &oracle["metrics"];
    assert_eq!(m["pa_vis"], 1.0);
    assert_eq!(m["miou_vis"], 1.0);
    assert_eq!(m["present_with_void"]["pa_pres_normalized"], 1.0);
    assert_eq!(m["present_without_void"]["miou_pres"], 1.0);
    let plain: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&plain), keys(&oracle));

    let sample = data.join(DatasetManifest::load(&data).unwrap().files(Split::Test).next().unwrap());
    let img = f.root.join("img");
    let out = gss(&["render", "--sample", p(&sample), "--checkpoint", p(&ck), "--out", p(&img)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(&img).unwrap().filter(|e| {
        let n = e.as_ref().unwrap().file_name();
        n.to_string_lossy().ends_with(".ppm") || n.to_string_lossy().ends_with(".pgm")
    }).count(), 5);
}

#[test]
fn eval_rejects_empty_split_and_foreign_schema() {
    let f = fixture();
    let data = f.root.join("data");
    assert!(gen(&f, &data, "6").status.success());
    let mut m = DatasetManifest::load(&data).unwrap();
    m.samples.retain(|e| e.split == Split::Train);
    m.save(&data).unwrap();
    let out = gss(&["eval", "--oracle", "--data", p(&data), "--out", p(&f.root.join("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    // a checkpoint trained on another schema
    let other = f.root.join("other");
    let schema2 = f.root.join("other.cfg");
    fs::write(&schema2, presets::toy().to_config_string().replace("wedge", "ramp")).unwrap();
    let mut spec = SceneSpec::toy();
    spec.height = 16;
    spec.width = 16;
    for l in &mut spec.layers {
        for o in &mut l.objects {
            if o.category == "wedge" {
                o.category = "ramp".into();
            }
        }
    }
    let scene2 = f.root.join("other_scene.cfg");
    fs::write(&scene2, spec.to_config_string()).unwrap();
    let out = gss(&[
        "gen", "--schema", p(&schema2), "--scene", p(&scene2), "--scenes", "6", "--out", p(&other),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model_cfg = f.root.join("model.json");
    fs::write(&model_cfg, r#"{"base_width": 2, "levels": 1}"#).unwrap();
    let run = f.root.join("run");
    let out = gss(&[
        "train", "--data", p(&other), "--mode", "dss", "--model-config", p(&model_cfg), "--epochs", "1",
        "--batch-size", "2", "--out", p(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fresh = f.root.join("fresh");
    assert!(gen(&f, &fresh, "6").status.success());
    let out = gss(&[
        "eval", "--checkpoint", p(&run.join("checkpoint.gssm")), "--data", p(&fresh), "--out",
        p(&f.root.join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn render_sample_and_palette_rules() {
    let f = fixture();
    let schema = presets::toy();
    // wall everywhere, both foreground groups void
    let sample = Sample {
        depth: Grid::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        visible: Grid::filled(2, 2, 0),
        group_maps: vec![Grid::filled(2, 2, 1), Grid::filled(2, 2, 0), Grid::filled(2, 2, 0)],
        num_categories: schema.num_categories(),
    };
    let path = f.root.join("s.gss");
    write_sample(&sample, &path).unwrap();
    let out_dir = f.root.join("img");
    let out = gss(&["render", "--sample", p(&path), "--schema", p(&f.schema), "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let images: Vec<String> = {
        let mut v: Vec<String> = fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".ppm") || n.ends_with(".pgm"))
            .collect();
        v.sort();
        v
    };
    // depth, visible and one map per group
    assert_eq!(images.len(), schema.num_groups() + 2);
    let far = fs::read(out_dir.join("group2_far.ppm")).unwrap();
    let header = b"P6\n2 2\n255\n";
    assert_eq!(&far[..header.len()], header);
    assert!(far[header.len()..].iter().all(|&b| b == 0));
    let first = fs::read(out_dir.join("visible.ppm")).unwrap();
    let again = f.root.join("img2");
    assert!(gss(&["render", "--sample", p(&path), "--schema", p(&f.schema), "--out", p(&again)]).status.success());
    assert_eq!(first, fs::read(again.join("visible.ppm")).unwrap());

    let palette = f.root.join("palette.cfg");
    fs::write(&palette, "wall 255 0 0\n").unwrap();
    let out = gss(&[
        "render", "--sample", p(&path), "--schema", p(&f.schema), "--palette", p(&palette), "--out", p(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("palette"));
}

#[test]
fn shipped_configs_match_the_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let schema = gss_core::GroupSchema::load(&root.join("toy.schema")).unwrap();
    assert_eq!(schema, presets::toy());
    let scene = SceneSpec::load(&root.join("toy.scene")).unwrap();
    assert_eq!(scene.to_config_string(), SceneSpec::toy().to_config_string());
}
