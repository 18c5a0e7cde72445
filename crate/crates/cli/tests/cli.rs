use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenesynth::fusion::write_palette;
use scenesynth::gan::Alphabet;
use scenesynth::pipeline::read_manifest;
use scenesynth::{RasterImage, Recognizer, SemanticMap};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scenesynth"))
}

fn fonts_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/fonts")
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).env("RUST_LOG", "warn").output().unwrap();
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Sky above a two-tone facade above a strip of trees.
fn scene(w: usize, h: usize, i: usize) -> (RasterImage, SemanticMap) {
    let horizon = h / 4 + i % 5;
    let ground = h - h / 6;
    let split = w / 3 + 7 * i % (w / 3);
    let tone = |k: usize, c: usize| 0.2 + 0.6 * (((k * 7 + c * 3 + i) % 10) as f32 / 10.0);
    let mut ids = vec![0u32; w * h];
    let img = RasterImage::from_fn(w, h, 3, |x, y, c| {
        if y < horizon {
            [0.55, 0.7, 0.95][c]
        } else if y < ground {
            ids[y * w + x] = 1;
            tone(usize::from(x >= split), c)
        } else {
            ids[y * w + x] = 2;
            [0.15, 0.45, 0.12][c]
        }
    });
    let palette: BTreeMap<u32, String> =
        [(0, "sky"), (1, "building"), (2, "tree")].into_iter().map(|(i, n)| (i, n.to_string())).collect();
    (img, SemanticMap::new(w, h, ids, palette).unwrap())
}

/// Inputs for `n` scenes plus a synth config at `root/synth.toml`.
fn write_inputs(root: &Path, n: usize) -> PathBuf {
    std::fs::create_dir_all(root.join("bg")).unwrap();
    std::fs::create_dir_all(root.join("maps")).unwrap();
    let mut palette = BTreeMap::new();
    for i in 0..n {
        let (img, map) = scene(160, 120, i);
        img.save_png(root.join(format!("bg/s{i}.png"))).unwrap();
        map.save_png(root.join(format!("maps/s{i}.png"))).unwrap();
        palette = map.palette().clone();
    }
    write_palette(root.join("palette.tsv"), &palette).unwrap();
    std::fs::write(root.join("corpus.txt"), "OPEN\nHOTEL\nEXIT 4\nCAFE\n").unwrap();
    let cfg = root.join("synth.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 3\nmax_instances = 4\n[paths]\nbackgrounds = \"bg\"\nsemantic_maps = \"maps\"\npalette = \"palette.tsv\"\n\
             corpus = \"corpus.txt\"\nfonts = {:?}\noutput = \"out\"\n[text]\npx_height = 24.0\n",
            fonts_dir()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn synth_writes_images_annotations_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_inputs(dir.path(), 3);
    let o = run(&["synth", "--config", cfg.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(code(&o), 0);
    let out = dir.path().join("out");
    let rows = read_manifest(&out.join("manifest.tsv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.instances <= 4));
    assert!(rows.iter().map(|r| r.instances).sum::<usize>() > 0);
    for r in &rows {
        assert!(out.join("images").join(format!("{}.png", r.stem)).exists());
        assert!(out.join("annotations").join(format!("{}.txt", r.stem)).exists());
    }
}

#[test]
fn trailing_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_inputs(dir.path(), 2);
    let o = run(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "9", "--max-instances", "1", "--paths.output", "other"]);
    assert_eq!(code(&o), 0);
    let rows = read_manifest(&dir.path().join("other/manifest.tsv")).unwrap();
    assert!(rows.iter().all(|r| r.instances <= 1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn dry_run_validates_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_inputs(dir.path(), 2);
    let o = run(&["synth", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("2 input pairs"));
    assert!(!dir.path().join("out").exists());

    let o = run(&["synth", "--config", cfg.to_str().unwrap(), "--dry-run", "--set", "paths.corpus=missing.txt"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupt_background_is_partial_success() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_inputs(dir.path(), 3);
    std::fs::write(dir.path().join("bg/s1.png"), b"not a png").unwrap();
    let o = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let out = dir.path().join("out");
    assert_eq!(read_manifest(&out.join("manifest.tsv")).unwrap().len(), 2);
    let failures = std::fs::read_to_string(out.join("failures.tsv")).unwrap();
    assert_eq!(failures.lines().count(), 2);
    assert!(failures.lines().nth(1).unwrap().starts_with("s1\t"));
}

#[test]
fn fatal_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_inputs(dir.path(), 1);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&run(&["synth", "--config", "/nonexistent/synth.toml"])), 1);
    assert_eq!(code(&run(&["synth", "--config", cfg, "--set", "max_instances=16"])), 1);
    assert_eq!(code(&run(&["synth", "--config", cfg, "--no_such_field", "1"])), 1);
    assert_eq!(code(&run(&["synth", "--config", cfg, "--seed"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn segment_writes_an_indexed_region_map() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), 1);
    let out = dir.path().join("regions.png");
    let o = run(&["segment", dir.path().join("bg/s0.png").to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&out).unwrap()));
    let info = decoder.read_info().unwrap().info().clone();
    assert_eq!((info.width, info.height), (160, 120));
}

#[test]
fn pretrain_then_train_then_synth() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth_cfg = write_inputs(root, 2);

    std::fs::write(
        root.join("pretrain.toml"),
        format!(
            "fonts = {:?}\noutput = \"models/recognizer.ckpt\"\n[pretrain]\nalphabet = \"ABC\"\ninput_size = 16\nbatch = 8\n\
             steps_per_epoch = 2\nmax_epochs = 1\nmin_accuracy = 0.0\nheldout_per_class = 2\nbase_px = 16.0\n",
            fonts_dir()
        ),
    )
    .unwrap();
    let o = run(&["pretrain-recognizer", "--config", root.join("pretrain.toml").to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let rec = Recognizer::load(&root.join("models/recognizer.ckpt")).unwrap();
    assert_eq!(rec.alphabet(), &Alphabet::new("ABC").unwrap());

    std::fs::create_dir_all(root.join("reals")).unwrap();
    for i in 0..4 {
        RasterImage::from_fn(20, 16, 3, |x, _, c| if (x + i) % 5 < 2 { 0.05 } else { 0.3 + 0.1 * c as f32 })
            .save_png(root.join(format!("reals/r{i}.png")))
            .unwrap();
    }
    std::fs::write(
        root.join("gan.toml"),
        format!(
            "backgrounds = \"bg\"\nreal_crops = \"reals\"\nfonts = {:?}\nrecognizer = \"models/recognizer.ckpt\"\n\
             output = \"models/gan\"\nsamples = 8\n[gan]\ncrop_size = 16\nbatch = 2\nwarmup_iterations = 1\n\
             warmup_critic_steps = 2\niterations = 3\ncheckpoint_every = 2\n",
            fonts_dir()
        ),
    )
    .unwrap();
    let gan_cfg = root.join("gan.toml");
    assert_eq!(code(&run(&["train-gan", "--config", gan_cfg.to_str().unwrap(), "--dry-run"])), 0);
    assert!(!root.join("models/gan").exists());
    assert_eq!(code(&run(&["train-gan", "--config", gan_cfg.to_str().unwrap()])), 0);
    let gan_dir = root.join("models/gan");
    assert!(gan_dir.join("generator.ckpt").exists());
    assert!(gan_dir.join("gan_000002.ckpt").exists());
    let log = std::fs::read_to_string(gan_dir.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let generator = gan_dir.join("generator.ckpt");
    let o = run(&[
        "synth",
        "--config",
        synth_cfg.to_str().unwrap(),
        "--set",
        &format!("paths.generator={:?}", generator.to_str().unwrap()),
        "--generator_input",
        "16",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_manifest(&root.join("out/manifest.tsv")).unwrap().len(), 2);
}
