use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "epochs=1",
    "decay_start_epoch=1",
    "batch_size=2",
    "model.encoder.latent_channels=16",
    "model.encoder.attribute_channels=8",
    "model.encoder.pose_base_channels=8",
    "model.encoder.texture_base_channels=8",
    "model.renderer.block_channels=[16, 8, 8]",
    "model.renderer.modulation_hidden=8",
    "model.discriminator.base_channels=8",
    "model.parsing.base_channels=8",
    "model.parsing.depth=2",
];

fn posegen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posegen"))
        .args(args)
        .env("POSEGEN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = posegen(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    posegen(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for o in TINY {
        args.extend(["--set", o]);
    }
    args
}

fn count_files(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().count()
}

#[test]
fn gen_data_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["gen-data", "--seed", "3", "--count", "8", "--out", s(&a)]);
    assert!(stdout.contains("8 pairs"));
    ok(&["gen-data", "--seed", "3", "--count", "8", "--out", s(&b)]);
    for sub in ["images", "poses", "parses"] {
        assert_eq!(count_files(&a.join(sub)), 16, "{sub}");
    }
    let index = std::fs::read(a.join("pairs.jsonl")).unwrap();
    assert_eq!(index.iter().filter(|&&c| c == b'\n').count(), 8);
    assert_eq!(index, std::fs::read(b.join("pairs.jsonl")).unwrap());
    let out = posegen(&["gen-data", "--classes", "5", "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--count", "1", "--out", s(&data)]);
    let out = dir.path().join("run");
    let missing = dir.path().join("missing");
    assert_eq!(code(&["train-parsing", "--data", s(&missing), "--out", s(&out)]), 1);
    assert_eq!(code(&["train-parsing", "--data", s(&data), "--out", s(&out), "--set", "bogus=1"]), 2);
    assert_eq!(code(&["train-parsing", "--data", s(&data), "--out", s(&out), "--set", "model.classes=9"]), 2);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochs = \"many\"").unwrap();
    assert_eq!(code(&["train-parsing", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&out)]), 2);
    // A learning rate this large overflows within the first steps.
    let args = with_tiny(vec!["train", "--data", s(&data), "--out", s(&out), "--set", "ablations.use_parsing=false", "--set", "lr_g=1e30", "--set", "lr_d=1e30", "--set", "epochs=4", "--set", "adam_beta1=0.0"]);
    assert_eq!(code(&args), 3);
}

#[test]
fn train_infer_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["gen-data", "--seed", "1", "--count", "2", "--out", s(&data)]);

    let parsing_dir = root.join("parsing");
    ok(&with_tiny(vec!["train-parsing", "--data", s(&data), "--out", s(&parsing_dir)]));
    // Two pairs in both directions plus four self pairs with batch size 2: four steps.
    let log = std::fs::read_to_string(parsing_dir.join("parsing_metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let parsing_ckpt: PathBuf = parsing_dir.join("parsing_final.safetensors");
    assert!(parsing_ckpt.exists() && parsing_dir.join("parsing_epoch_001.safetensors").exists());

    let gen_dir = root.join("gen");
    ok(&with_tiny(vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&gen_dir),
        "--parsing-ckpt",
        s(&parsing_ckpt),
    ]));
    let log = std::fs::read_to_string(gen_dir.join("generator_metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let gen_ckpt = gen_dir.join("generator_final.safetensors");

    let source = data.join("images/000000_s.png");
    let own_pose = data.join("poses/000000_s.json");
    let other_pose = data.join("poses/000000_t.json");
    let models = ["--gen-ckpt", s(&gen_ckpt), "--parsing-ckpt", s(&parsing_ckpt)];

    let synth = root.join("out/synth.png");
    let mut args = vec!["synthesize", "--source", s(&source), "--target-pose", s(&other_pose), "--out", s(&synth)];
    args.extend(models);
    ok(&args);
    let img = image::open(&synth).unwrap();
    assert_eq!(img.color(), image::ColorType::Rgb8);
    assert_eq!((img.width(), img.height()), (48, 64));
    let grid = image::open(root.join("out/synth_grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (144, 64));

    let self_transfer = root.join("out/self.png");
    let mut args = vec!["synthesize", "--source", s(&source), "--target-pose", s(&own_pose), "--out", s(&self_transfer)];
    args.extend(models);
    ok(&args);
    let swapped = root.join("out/swap.png");
    let mut args = vec![
        "swap", "--source", s(&source), "--donor", s(&source), "--attribute", "upper_clothes", "--out", s(&swapped),
    ];
    args.extend(models);
    ok(&args);
    assert_eq!(std::fs::read(&self_transfer).unwrap(), std::fs::read(&swapped).unwrap());

    let mut args = vec!["swap", "--source", s(&source), "--donor", s(&source), "--attribute", "hat", "--out", s(&swapped)];
    args.extend(models);
    let out = posegen(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("upper_clothes"));

    let dump = root.join("dump");
    let mut args = vec!["dump-correspondence", "--source", s(&source), "--target-pose", s(&other_pose), "--out", s(&dump)];
    args.extend(models);
    ok(&args);
    let header: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dump.join("correspondence.json")).unwrap()).unwrap();
    assert_eq!((header["h"].as_u64(), header["w"].as_u64()), (Some(4), Some(3)));
    let bytes = std::fs::read(dump.join("correspondence.bin")).unwrap();
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(values.len(), 144);
    for row in values.chunks(12) {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
    }
    assert!(dump.join("correspondence.png").exists());

    let report = root.join("report/metrics.json");
    let table = ok(&["evaluate", "--generated", s(&data.join("images")), "--targets", s(&data.join("images")), "--out", s(&report)]);
    assert!(table.contains("mean"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["ssim"]["mean"].as_f64(), Some(1.0));
    assert_eq!(json["l1"]["mean"].as_f64(), Some(0.0));
    assert_eq!(json["count"].as_u64(), Some(4));
}
