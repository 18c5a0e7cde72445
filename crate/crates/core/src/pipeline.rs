//! End-to-end synthesis: regions → text → placement → appearance →
//! composition → annotations, over a directory of backgrounds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{load_palette, load_semantic_map, select_candidates, SelectionParams, SemanticMap};
use crate::gan::{compose_masked, AppearanceModel, GanConfig, PretrainConfig};
use crate::geometry::{place_text, random_homography, Homography, PlacedText, PlacementParams, Quad, Rect};
use crate::imaging::{load_image, Mask, RasterImage};
use crate::segmentation::{segment, SegmentationParams};
use crate::text::{load_corpus, load_font_dir, rasterize_text, sample_text, Corpus, Font, TextMode};

/// Hard cap on text instances per background.
pub const MAX_INSTANCES: usize = 15;
/// Largest IoU allowed between two placed text quads.
pub const MAX_OVERLAP_IOU: f64 = 0.05;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub backgrounds: PathBuf,
    pub semantic_maps: PathBuf,
    pub palette: PathBuf,
    pub corpus: PathBuf,
    pub fonts: PathBuf,
    /// Trained generator; without one, text is filled with a flat contrasting color.
    pub generator: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Probability of sampling a single word; otherwise a line.
    pub word_fraction: f64,
    pub max_chars: usize,
    /// Render height before placement scaling.
    pub px_height: f32,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            word_fraction: 0.7,
            max_chars: 16,
            px_height: 48.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub paths: PathsConfig,
    pub segmentation: SegmentationParams,
    pub selection: SelectionParams,
    pub placement: PlacementParams,
    pub text: TextConfig,
    /// Square side the generator runs at.
    pub generator_input: usize,
    pub max_instances: usize,
    /// Placement attempts per candidate region.
    pub retries: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            segmentation: SegmentationParams::default(),
            selection: SelectionParams::default(),
            placement: PlacementParams::default(),
            text: TextConfig::default(),
            generator_input: 64,
            max_instances: MAX_INSTANCES,
            retries: 3,
            seed: 0,
            workers: 1,
        }
    }
}

impl SynthesisConfig {
    /// Parameter checks that need no filesystem access.
    pub fn check_params(&self) -> Result<()> {
        if !(1..=MAX_INSTANCES).contains(&self.max_instances) {
            return Err(Error::Config(format!(
                "max_instances {} outside [1, {MAX_INSTANCES}]",
                self.max_instances
            )));
        }
        if self.retries == 0 || self.workers == 0 || self.text.max_chars == 0 {
            return Err(Error::Config("retries, workers and text.max_chars must be positive".into()));
        }
        if self.generator_input == 0 || !self.generator_input.is_multiple_of(4) {
            return Err(Error::Config("generator_input must be a positive multiple of 4".into()));
        }
        if !(0.0..=1.0).contains(&self.text.word_fraction) {
            return Err(Error::Config("text.word_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=0.3).contains(&self.placement.max_perturb) {
            return Err(Error::Config("placement.max_perturb must lie in [0, 0.3]".into()));
        }
        Ok(())
    }

    /// Parameter checks plus existence of every referenced path.
    pub fn validate(&self) -> Result<()> {
        self.check_params()?;
        let p = &self.paths;
        for (name, path) in [
            ("backgrounds", &p.backgrounds),
            ("semantic_maps", &p.semantic_maps),
            ("palette", &p.palette),
            ("corpus", &p.corpus),
            ("fonts", &p.fonts),
        ] {
            require_path(name, path)?;
        }
        if let Some(g) = &p.generator {
            require_path("generator", g)?;
        }
        Ok(())
    }
}

fn require_path(name: &str, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("paths.{name} is not set")));
    }
    if !path.exists() {
        return Err(Error::Config(format!("paths.{name}: {} does not exist", path.display())));
    }
    Ok(())
}

/// Set `dotted.key = value` in a TOML table. The value is parsed as a TOML
/// literal when possible and taken as a string otherwise.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut t = table;
    for part in &parts[..parts.len() - 1] {
        let entry = t
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parse a TOML config with `key=value` overrides applied on top.
pub fn parse_config<T: serde::de::DeserializeOwned>(text: &str, overrides: &[(String, String)]) -> Result<T> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Read a TOML config file; relative paths inside resolve against its directory.
pub fn load_config<T: serde::de::DeserializeOwned + ResolvePaths>(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<T> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut cfg: T = parse_config(&text, overrides)?;
    let base = path
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    cfg.resolve_paths(&base);
    Ok(cfg)
}

pub trait ResolvePaths {
    fn resolve_paths(&mut self, base: &Path);
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ResolvePaths for SynthesisConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [
            &mut p.backgrounds,
            &mut p.semantic_maps,
            &mut p.palette,
            &mut p.corpus,
            &mut p.fonts,
            &mut p.output,
        ] {
            resolve(base, path);
        }
        if let Some(g) = &mut p.generator {
            resolve(base, g);
        }
    }
}

/// Recognizer pretraining job.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainJob {
    pub fonts: PathBuf,
    pub output: PathBuf,
    pub pretrain: PretrainConfig,
}

impl ResolvePaths for PretrainJob {
    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.fonts);
        resolve(base, &mut self.output);
    }
}

/// GAN training job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanJob {
    pub backgrounds: PathBuf,
    pub real_crops: PathBuf,
    pub fonts: PathBuf,
    pub recognizer: PathBuf,
    pub output: PathBuf,
    /// Number of synthetic training samples drawn from the backgrounds.
    pub samples: usize,
    pub gan: GanConfig,
}

impl Default for GanJob {
    fn default() -> Self {
        Self {
            backgrounds: PathBuf::new(),
            real_crops: PathBuf::new(),
            fonts: PathBuf::new(),
            recognizer: PathBuf::new(),
            output: PathBuf::new(),
            samples: 512,
            gan: GanConfig::default(),
        }
    }
}

impl ResolvePaths for GanJob {
    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.backgrounds,
            &mut self.real_crops,
            &mut self.fonts,
            &mut self.recognizer,
            &mut self.output,
        ] {
            resolve(base, p);
        }
    }
}

/// How placed text gets its colors.
#[derive(Clone, Debug)]
pub enum Appearance {
    Generator(AppearanceModel),
    /// Black or white, whichever contrasts with the local background.
    Flat,
}

impl Appearance {
    pub fn render(&self, crop: &RasterImage, mask: &Mask) -> Result<RasterImage> {
        match self {
            Appearance::Generator(model) => model.infer(crop, mask),
            Appearance::Flat => {
                let crop = crop.to_rgb();
                let n = crop.pixel_count().max(1) as f64;
                let lum = crop
                    .data()
                    .chunks(3)
                    .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                    .sum::<f64>()
                    / n;
                let ink = if lum > 0.5 { 0.0 } else { 1.0 };
                let fill = RasterImage::filled(crop.width(), crop.height(), 3, ink);
                compose_masked(&fill, mask, &crop)
            }
        }
    }
}

/// Immutable inputs shared by every synthesis task.
#[derive(Clone, Debug)]
pub struct Resources {
    pub fonts: Vec<Font>,
    pub corpus: Corpus,
    pub palette: BTreeMap<u32, String>,
    pub appearance: Appearance,
}

impl Resources {
    pub fn load(cfg: &SynthesisConfig) -> Result<Self> {
        let p = &cfg.paths;
        let appearance = match &p.generator {
            Some(g) => Appearance::Generator(AppearanceModel::load(g, cfg.generator_input)?),
            None => Appearance::Flat,
        };
        Ok(Self {
            fonts: load_font_dir(&p.fonts)?,
            corpus: load_corpus(&p.corpus)?,
            palette: load_palette(&p.palette)?,
            appearance,
        })
    }
}

/// One placed text instance.
#[derive(Clone, Debug)]
pub struct Instance {
    pub quad: Quad,
    pub transcript: String,
    pub region_id: u32,
    pub class: String,
    pub score: f64,
    /// Perturbation homography drawn for the region.
    pub homography: Homography,
}

#[derive(Clone, Debug)]
pub struct SynthesisRecord {
    pub image: RasterImage,
    pub instances: Vec<Instance>,
    /// Union of placed text pixels.
    pub text_mask: Mask,
}

impl SynthesisRecord {
    pub fn annotations(&self) -> Result<Vec<Annotation>> {
        self.instances
            .iter()
            .map(|i| Annotation::from_quad(&i.quad, &i.transcript))
            .collect()
    }
}

/// Synthesize text into one background. Zero candidate regions yields an
/// unmodified copy.
pub fn synthesize_one<R: Rng>(
    background: &RasterImage,
    semantic: &SemanticMap,
    res: &Resources,
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> Result<SynthesisRecord> {
    cfg.check_params()?;
    let (w, h) = (background.width(), background.height());
    if (semantic.width(), semantic.height()) != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            actual: (semantic.width(), semantic.height()),
        });
    }
    let mut canvas = background.to_rgb();
    let mut text_mask = Mask::new(w, h);
    let mut instances: Vec<Instance> = Vec::new();

    let (_, regions) = segment(&canvas, &cfg.segmentation)?;
    let candidates = select_candidates(&regions, semantic, &cfg.selection)?;
    if candidates.is_empty() {
        return Ok(SynthesisRecord {
            image: canvas,
            instances,
            text_mask,
        });
    }
    let target = rng.random_range(1..=cfg.max_instances);

    for cand in score_weighted_order(&candidates.iter().map(|c| c.score).collect::<Vec<_>>(), rng).into_iter().map(|i| &candidates[i]) {
        if instances.len() >= target {
            break;
        }
        let b = &cand.region.bbox;
        let rect = Rect {
            x0: b.x0 as f64,
            y0: b.y0 as f64,
            x1: b.x1 as f64,
            y1: b.y1 as f64,
        };
        for _ in 0..cfg.retries {
            let Some((placed, hom)) = try_place(rng, res, cfg, &cand.region, &rect, (w, h))? else {
                continue;
            };
            if instances.iter().any(|i| i.quad.iou(&placed.quad) > MAX_OVERLAP_IOU) {
                continue;
            }
            composite(&mut canvas, &mut text_mask, &placed, &res.appearance)?;
            instances.push(Instance {
                quad: placed.quad,
                transcript: placed.transcript,
                region_id: cand.region.id,
                class: cand.dominant_class.clone(),
                score: cand.score,
                homography: hom,
            });
            break;
        }
    }
    Ok(SynthesisRecord {
        image: canvas,
        instances,
        text_mask,
    })
}

/// Visiting order drawn without replacement with probability proportional
/// to score (exponential-key sampling).
fn score_weighted_order<R: Rng>(scores: &[f64], rng: &mut R) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / s.max(f64::MIN_POSITIVE), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

// One placement attempt; `None` when the sampled text does not fit.
fn try_place<R: Rng>(
    rng: &mut R,
    res: &Resources,
    cfg: &SynthesisConfig,
    region: &crate::segmentation::Region,
    rect: &Rect,
    size: (usize, usize),
) -> Result<Option<(PlacedText, Homography)>> {
    let mode = if rng.random_bool(cfg.text.word_fraction) { TextMode::Word } else { TextMode::Line };
    let text = sample_text(&res.corpus, rng, mode, cfg.text.max_chars)?;
    let usable: Vec<&Font> = res
        .fonts
        .iter()
        .filter(|f| text.chars().filter(|c| !c.is_whitespace()).all(|c| f.has_glyph(c)))
        .collect();
    let Some(font) = usable.choose(rng) else {
        return Ok(None);
    };
    let mask = rasterize_text(&text, font, cfg.text.px_height)?;
    let hom = random_homography(rng, rect, cfg.placement.max_perturb)?;
    match place_text(region, &hom, &mask, &cfg.placement, size) {
        Ok(p) => Ok(Some((p, hom))),
        Err(Error::DoesNotFit(_) | Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn composite(canvas: &mut RasterImage, union: &mut Mask, placed: &PlacedText, appearance: &Appearance) -> Result<()> {
    let (x0, y0) = placed.origin;
    let (mw, mh) = (placed.mask.width(), placed.mask.height());
    let crop = canvas.crop(x0, y0, mw, mh)?;
    let out = appearance.render(&crop, &placed.mask)?;
    canvas.paste(&out, x0, y0);
    for y in 0..mh {
        for x in 0..mw {
            if placed.mask.get(x, y) {
                union.set(x0 + x, y0 + y, true);
            }
        }
    }
    Ok(())
}

/// One annotation line: four integer vertices clockwise from top-left and a
/// transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub points: [[i64; 2]; 4],
    pub transcript: String,
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

impl Annotation {
    pub fn from_quad(quad: &Quad, transcript: &str) -> Result<Self> {
        if transcript.contains(['\n', '\r']) {
            return Err(Error::invalid("transcript contains a line break"));
        }
        let mut v = quad.0;
        // Positive shoelace area is clockwise on screen (y down).
        if quad.signed_area() < 0.0 {
            v = [v[0], v[3], v[2], v[1]];
        }
        Ok(Self {
            points: v.map(|p| [round_half_up(p.x), round_half_up(p.y)]),
            transcript: transcript.to_string(),
        })
    }

    pub fn to_line(&self) -> String {
        let coords: Vec<String> = self.points.iter().flatten().map(i64::to_string).collect();
        format!("{},{}", coords.join(","), self.transcript)
    }

    /// The transcript is everything after the eighth comma.
    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let mut parts = line.splitn(9, ',');
        let mut nums = [0i64; 8];
        for (i, n) in nums.iter_mut().enumerate() {
            let field = parts.next().ok_or_else(|| format!("expected 8 coordinates, found {i}"))?;
            *n = field
                .trim()
                .parse()
                .map_err(|_| format!("coordinate {} is not an integer: {field:?}", i + 1))?;
        }
        let transcript = parts.next().ok_or("missing transcript")?.to_string();
        Ok(Self {
            points: [[nums[0], nums[1]], [nums[2], nums[3]], [nums[4], nums[5]], [nums[6], nums[7]]],
            transcript,
        })
    }
}

pub fn format_annotations(anns: &[Annotation]) -> String {
    anns.iter().map(|a| a.to_line() + "\n").collect()
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            Annotation::parse_line(l).map_err(|reason| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            })
        })
        .collect()
}

pub fn write_annotations(anns: &[Annotation], path: &Path) -> Result<()> {
    std::fs::write(path, format_annotations(anns)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// Per-image RNG seed: FNV-1a over the global seed and the file stem.
pub fn image_seed(seed: u64, stem: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(stem.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A background and its semantic map, matched by file stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputPair {
    pub stem: String,
    pub background: PathBuf,
    pub semantic_map: PathBuf,
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
        if let (Some(ext), Some(stem)) = (ext, stem) {
            if exts.contains(&ext.as_str()) {
                out.entry(stem).or_insert(path);
            }
        }
    }
    Ok(out)
}

/// Background/semantic-map pairs sorted by stem. Unmatched files are skipped.
pub fn match_pairs(backgrounds: &Path, semantic_maps: &Path) -> Result<Vec<InputPair>> {
    let bgs = stems(backgrounds, &["png", "jpg", "jpeg"])?;
    let maps = stems(semantic_maps, &["png"])?;
    let pairs: Vec<InputPair> = bgs
        .into_iter()
        .filter_map(|(stem, background)| {
            let m = maps.get(&stem);
            if m.is_none() {
                log::warn!("no semantic map for {}", background.display());
            }
            m.map(|m| InputPair {
                semantic_map: m.clone(),
                background,
                stem,
            })
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "no background in {} has a semantic map in {}",
            backgrounds.display(),
            semantic_maps.display()
        )));
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub stem: String,
    pub instances: usize,
    pub classes: BTreeSet<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub rows: Vec<ManifestRow>,
    pub failures: Vec<(String, String)>,
}

impl BatchSummary {
    /// 0 when every image succeeded, 2 on partial success.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const FAILURES_FILE: &str = "failures.tsv";

pub fn image_path(output: &Path, stem: &str) -> PathBuf {
    output.join("images").join(format!("{stem}.png"))
}

pub fn annotation_path(output: &Path, stem: &str) -> PathBuf {
    output.join("annotations").join(format!("{stem}.txt"))
}

fn process_pair(pair: &InputPair, res: &Resources, cfg: &SynthesisConfig) -> Result<ManifestRow> {
    let bg = load_image(&pair.background)?;
    let semantic = load_semantic_map(&pair.semantic_map, &cfg.paths.palette)?;
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, &pair.stem));
    let rec = synthesize_one(&bg, &semantic, res, cfg, &mut rng)?;
    rec.image.save_png(image_path(&cfg.paths.output, &pair.stem))?;
    write_annotations(&rec.annotations()?, &annotation_path(&cfg.paths.output, &pair.stem))?;
    Ok(ManifestRow {
        stem: pair.stem.clone(),
        instances: rec.instances.len(),
        classes: rec.instances.iter().map(|i| i.class.clone()).collect(),
    })
}

/// Synthesize every matched pair with `cfg.workers` threads. Per-image
/// failures are recorded and do not stop the batch.
pub fn batch_synthesize(cfg: &SynthesisConfig) -> Result<BatchSummary> {
    cfg.validate()?;
    let pairs = match_pairs(&cfg.paths.backgrounds, &cfg.paths.semantic_maps)?;
    let res = Resources::load(cfg)?;
    let out = &cfg.paths.output;
    for d in [out.clone(), out.join("images"), out.join("annotations")] {
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<ManifestRow>> =
        pool.install(|| pairs.par_iter().map(|p| process_pair(p, &res, cfg)).collect());

    let mut summary = BatchSummary::default();
    for (pair, r) in pairs.iter().zip(results) {
        match r {
            Ok(row) => summary.rows.push(row),
            Err(e) => {
                log::error!("{}: {e}", pair.stem);
                summary.failures.push((pair.stem.clone(), e.to_string()));
            }
        }
    }
    let mut manifest = String::from("stem\tinstances\tclasses\n");
    for r in &summary.rows {
        let classes: Vec<&str> = r.classes.iter().map(String::as_str).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", r.stem, r.instances, classes.join(",")));
    }
    let mpath = out.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let mut failures = String::from("stem\terror\n");
    for (stem, err) in &summary.failures {
        failures.push_str(&format!("{stem}\t{}\n", err.replace(['\t', '\n'], " ")));
    }
    let fpath = out.join(FAILURES_FILE);
    std::fs::write(&fpath, failures).map_err(|e| Error::io(&fpath, e))?;
    Ok(summary)
}

/// Parse a manifest written by [`batch_synthesize`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let err = |reason: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: reason.into(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err("expected 3 tab-separated fields"));
            }
            Ok(ManifestRow {
                stem: f[0].to_string(),
                instances: f[1].parse().map_err(|_| err("bad instance count"))?,
                classes: f[2].split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pt;

    #[test]
    fn axis_aligned_quad_serializes() {
        let q = Quad([pt(0.0, 0.0), pt(10.0, 0.0), pt(10.0, 5.0), pt(0.0, 5.0)]);
        let a = Annotation::from_quad(&q, "ab").unwrap();
        assert_eq!(a.to_line(), "0,0,10,0,10,5,0,5,ab");
        assert_eq!(format_annotations(&[]), "");
    }

    #[test]
    fn counter_clockwise_input_is_reordered() {
        let q = Quad([pt(0.0, 0.0), pt(0.0, 5.0), pt(10.0, 5.0), pt(10.0, 0.0)]);
        let a = Annotation::from_quad(&q, "x").unwrap();
        assert_eq!(a.points, [[0, 0], [10, 0], [10, 5], [0, 5]]);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(-2.5), -2);
        assert_eq!(round_half_up(2.49), 2);
    }

    #[test]
    fn transcript_with_commas_round_trips() {
        let a = Annotation {
            points: [[1, 2], [30, 2], [30, 12], [1, 12]],
            transcript: "a,b,,c".into(),
        };
        let back = Annotation::parse_line(&a.to_line()).unwrap();
        assert_eq!(back, a);
        assert!(Annotation::parse_line("1,2,3").is_err());
        assert!(Annotation::parse_line("1,2,3,4,5,6,7,x,t").is_err());
        let q = Quad([pt(0.0, 0.0), pt(1.0, 0.0), pt(1.0, 1.0), pt(0.0, 1.0)]);
        assert!(Annotation::from_quad(&q, "a\nb").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg: SynthesisConfig = parse_config(
            "max_instances = 4\n[segmentation]\ncompactness = 5.0\n",
            &[
                ("segmentation.k_per_512".into(), "123".into()),
                ("paths.output".into(), "out dir".into()),
                ("text.word_fraction".into(), "0".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.max_instances, 4);
        assert_eq!(cfg.segmentation.k_per_512, 123);
        assert_eq!(cfg.segmentation.compactness, 5.0);
        assert_eq!(cfg.paths.output, PathBuf::from("out dir"));
        assert_eq!(cfg.text.word_fraction, 0.0);
        assert!(parse_config::<SynthesisConfig>("bogus = 1", &[]).is_err());
    }

    #[test]
    fn instance_limit_enforced() {
        for n in [0, 16] {
            let cfg = SynthesisConfig {
                max_instances: n,
                ..Default::default()
            };
            assert!(cfg.check_params().is_err());
        }
        assert!(SynthesisConfig::default().check_params().is_ok());
    }

    #[test]
    fn visiting_order_follows_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut first = [0usize; 3];
        for _ in 0..n {
            let order = score_weighted_order(&[0.6, 0.9, 0.9], &mut rng);
            let mut sorted = order.clone();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2]);
            first[order[0]] += 1;
        }
        // P(first = i) = s_i / Σ s.
        for (i, p) in [0.25, 0.375, 0.375].into_iter().enumerate() {
            let f = first[i] as f64 / n as f64;
            assert!((f - p).abs() < 0.015, "{i}: {f} vs {p}");
        }
    }

    #[test]
    fn image_seed_depends_on_both_inputs() {
        assert_ne!(image_seed(1, "a"), image_seed(2, "a"));
        assert_ne!(image_seed(1, "a"), image_seed(1, "b"));
        assert_eq!(image_seed(7, "img_01"), image_seed(7, "img_01"));
    }
}
