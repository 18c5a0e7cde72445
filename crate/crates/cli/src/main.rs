use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scenesynth::gan::{load_real_crops, pretrain_recognizer, samples_from_backgrounds};
use scenesynth::imaging::load_image;
use scenesynth::pipeline::{batch_synthesize, load_config, match_pairs, GanJob, PretrainJob, Resources};
use scenesynth::segmentation::segment;
use scenesynth::text::load_font_dir;
use scenesynth::{Gan, RasterImage, Recognizer, SynthesisConfig};

const EXIT_FATAL: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "scenesynth", version, about = "Synthesize annotated scene-text images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Place text into every background/semantic-map pair.
    Synth(Common),
    /// Train the appearance generator against real text crops.
    TrainGan(Common),
    /// Train the character recognizer used by the appearance loss.
    PretrainRecognizer(Common),
    /// Write the region map of one image as an indexed PNG.
    Segment(SegmentArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; relative paths in it resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (synth only).
    #[arg(long)]
    workers: Option<usize>,
    /// Validate the config and inputs, then exit.
    #[arg(long)]
    dry_run: bool,
    /// Override a config field, e.g. `--set text.px_height=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Further overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    rest: Vec<String>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    image: PathBuf,
    output: PathBuf,
    /// Synthesis config whose `segmentation` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_FATAL) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn run(cmd: Command) -> CliResult<u8> {
    match cmd {
        Command::Synth(c) => synth(c),
        Command::TrainGan(c) => train_gan(c),
        Command::PretrainRecognizer(c) => pretrain(c),
        Command::Segment(s) => segment_cmd(s),
    }
}

/// Collect `--set k=v` and trailing `--k v` / `--k=v` overrides. Dashes in
/// keys become underscores so `--max-instances 3` works.
fn overrides(set: &[String], rest: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in set {
        let (k, v) = s.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        out.push((k.trim().to_string(), v.to_string()));
    }
    let mut it = rest.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| format!("unexpected argument {flag:?}"))?;
        let (k, v) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("--{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

fn with_flags(c: &Common, seed_key: &str) -> CliResult<Vec<(String, String)>> {
    let mut o = overrides(&c.set, &c.rest)?;
    if let Some(s) = c.seed {
        o.push((seed_key.into(), s.to_string()));
    }
    Ok(o)
}

fn synth(c: Common) -> CliResult<u8> {
    let mut o = with_flags(&c, "seed")?;
    if let Some(w) = c.workers {
        o.push(("workers".into(), w.to_string()));
    }
    let cfg: SynthesisConfig = load_config(c.config.as_deref(), &o)?;
    if c.dry_run {
        cfg.validate()?;
        let pairs = match_pairs(&cfg.paths.backgrounds, &cfg.paths.semantic_maps)?;
        Resources::load(&cfg)?;
        println!("ok: {} input pairs", pairs.len());
        return Ok(0);
    }
    let summary = batch_synthesize(&cfg)?;
    let total: usize = summary.rows.iter().map(|r| r.instances).sum();
    println!(
        "{} images, {} text instances, {} failures -> {}",
        summary.rows.len(),
        total,
        summary.failures.len(),
        cfg.paths.output.display()
    );
    Ok(summary.exit_code() as u8)
}

fn pretrain(c: Common) -> CliResult<u8> {
    let job: PretrainJob = load_config(c.config.as_deref(), &with_flags(&c, "pretrain.seed")?)?;
    require(&job.output, "output")?;
    let fonts = load_font_dir(&job.fonts)?;
    if c.dry_run {
        println!("ok: {} fonts", fonts.len());
        return Ok(0);
    }
    let (rec, report) = pretrain_recognizer(&fonts, &job.pretrain)?;
    if let Some(d) = job.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    rec.save(&job.output)?;
    println!(
        "held-out accuracy {:.4} after {} epochs -> {}",
        report.heldout_accuracy,
        report.epochs,
        job.output.display()
    );
    Ok(0)
}

fn train_gan(c: Common) -> CliResult<u8> {
    let job: GanJob = load_config(c.config.as_deref(), &with_flags(&c, "gan.seed")?)?;
    require(&job.output, "output")?;
    job.gan.validate()?;
    let size = job.gan.crop_size;
    let backgrounds = list_images(&job.backgrounds)?
        .iter()
        .map(load_image)
        .collect::<Result<Vec<RasterImage>, _>>()?;
    let reals = load_real_crops(&job.real_crops, size)?;
    let fonts = load_font_dir(&job.fonts)?;
    let recognizer = Recognizer::load(&job.recognizer)?;
    if c.dry_run {
        println!("ok: {} backgrounds, {} real crops, {} fonts", backgrounds.len(), reals.len(), fonts.len());
        return Ok(0);
    }
    let samples = samples_from_backgrounds(&backgrounds, &fonts, recognizer.alphabet(), size, job.samples, job.gan.seed)?;
    let mut gan = Gan::new(job.gan.clone(), recognizer)?;
    std::fs::create_dir_all(&job.output)?;
    let log_path = job.output.join("train_log.tsv");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log_file, "iteration\tl_d\tl_g\tl_f\tl_s\tseconds")?;
    let records = gan.train(&samples, &reals, Some(&job.output), Some(&mut log_file))?;
    log_file.flush()?;
    if let Some(last) = records.last() {
        println!(
            "{} iterations, final L_D {:.4e} L_S {:.4e} -> {}",
            records.len(),
            last.losses.l_d,
            last.losses.l_s,
            job.output.join("generator.ckpt").display()
        );
    }
    Ok(0)
}

fn segment_cmd(s: SegmentArgs) -> CliResult<u8> {
    let cfg: SynthesisConfig = load_config(s.config.as_deref(), &overrides(&s.set, &[])?)?;
    let img = load_image(&s.image)?;
    let (map, regions) = segment(&img, &cfg.segmentation)?;
    map.save_indexed_png(&s.output)?;
    println!("{} regions -> {}", regions.len(), s.output.display());
    Ok(0)
}

fn require(p: &Path, name: &str) -> CliResult<()> {
    if p.as_os_str().is_empty() {
        return Err(format!("{name} is not set").into());
    }
    Ok(())
}

fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(format!("no images in {}", dir.display()).into());
    }
    Ok(v)
}
