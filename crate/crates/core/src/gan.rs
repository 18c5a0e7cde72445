//! Appearance adaptation: a generator restyles rendered text inside a
//! background crop, trained as a Wasserstein GAN against real text crops,
//! with a feature-level critic and a frozen character recognizer keeping
//! the embedded text legible.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    checkpoint_bytes, clip_weights, load_checkpoint, save_checkpoint, Crop, Graph, ParamStore, Real, RmsProp, Tensor,
    Var,
};
use crate::error::{Error, Result};
use crate::imaging::{load_image, Mask, RasterImage};
use crate::text::{rasterize_text, CharBox, Font, TextMask};

pub const LEAK: f64 = 0.2;

/// Characters the recognizer distinguishes, in class-index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Alphabet {
    pub fn new(chars: &str) -> Result<Self> {
        let mut v: Vec<char> = Vec::new();
        for c in chars.chars().filter(|c| !c.is_whitespace()) {
            if !v.contains(&c) {
                v.push(c);
            }
        }
        if v.is_empty() {
            return Err(Error::invalid("alphabet is empty"));
        }
        Ok(Self { chars: v })
    }

    /// Digits and upper-case Latin letters.
    pub fn alphanumeric_upper() -> Self {
        Self::new("0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ").expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c)
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if [1.0, 0.5, 0.25].contains(&scale) {
        Ok(())
    } else {
        Err(Error::Config(format!("network scale {scale} not in {{1, 0.5, 0.25}}")))
    }
}

fn ch(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

fn init_weight<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / ((1.0 + LEAK * LEAK) * fan_in as f64)).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn add_conv<R: Rng>(p: &mut ParamStore<f32>, rng: &mut R, name: &str, cout: usize, cin: usize, k: usize) {
    p.insert(format!("{name}.w"), init_weight(rng, &[cout, cin, k, k], cin * k * k));
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn add_deconv<R: Rng>(p: &mut ParamStore<f32>, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize, stride: usize) {
    let fan_in = (cin * k * k / (stride * stride)).max(1);
    p.insert(format!("{name}.w"), init_weight(rng, &[cin, cout, k, k], fan_in));
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn add_linear<R: Rng>(p: &mut ParamStore<f32>, rng: &mut R, name: &str, out: usize, inp: usize) {
    p.insert(format!("{name}.w"), init_weight(rng, &[out, inp], inp));
    p.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn conv<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var, name: &str, stride: usize, pad: usize, train: bool) -> Result<Var> {
    let w = g.bind(p, &format!("{name}.w"), train)?;
    let b = g.bind(p, &format!("{name}.b"), train)?;
    g.conv2d(x, w, Some(b), stride, pad)
}

fn deconv<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    x: Var,
    name: &str,
    stride: usize,
    pad: usize,
    out_pad: usize,
    train: bool,
) -> Result<Var> {
    let w = g.bind(p, &format!("{name}.w"), train)?;
    let b = g.bind(p, &format!("{name}.b"), train)?;
    g.conv_transpose2d(x, w, Some(b), stride, pad, out_pad)
}

fn linear<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var, name: &str, train: bool) -> Result<Var> {
    let w = g.bind(p, &format!("{name}.w"), train)?;
    let b = g.bind(p, &format!("{name}.b"), train)?;
    g.linear(x, w, Some(b))
}

fn lrelu<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.leaky_relu(x, T::lit(LEAK))
}

/// Generator parameters (`g.*`) at channel scale `scale`.
pub fn init_generator(scale: f64, seed: u64) -> Result<ParamStore<f32>> {
    check_scale(scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c1, c2, c3) = (ch(64, scale), ch(128, scale), ch(256, scale));
    let mut p = ParamStore::new();
    add_conv(&mut p, &mut rng, "g.b1", c1, 4, 7);
    add_conv(&mut p, &mut rng, "g.b2", c2, c1, 3);
    add_conv(&mut p, &mut rng, "g.b3", c3, c2, 3);
    for r in 0..2 {
        add_conv(&mut p, &mut rng, &format!("g.b4.r{r}.c0"), c3, c3, 3);
        add_conv(&mut p, &mut rng, &format!("g.b4.r{r}.c1"), c3, c3, 3);
    }
    add_deconv(&mut p, &mut rng, "g.b5", c3, c2, 3, 2);
    add_deconv(&mut p, &mut rng, "g.b6", c2, c1, 3, 2);
    add_deconv(&mut p, &mut rng, "g.b7", c1, 3, 7, 1);
    Ok(p)
}

/// Generator output and the output of each of its seven blocks.
pub struct GeneratorOutput {
    pub image: Var,
    pub blocks: [Var; 7],
}

/// `input: [N, 4, H, W]` (RGB crop ⊕ mask), `H` and `W` multiples of 4.
pub fn generator_forward<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, input: Var, train: bool) -> Result<GeneratorOutput> {
    let s = g.shape(input).to_vec();
    if s.len() != 4 || s[1] != 4 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) || s[2] == 0 || s[3] == 0 {
        return Err(Error::Shape {
            node: "generator input".into(),
            expected: "[N, 4, H, W] with H, W multiples of 4".into(),
            actual: format!("{s:?}"),
        });
    }
    let b1 = conv(g, p, input, "g.b1", 1, 3, train)?;
    let b1 = lrelu(g, b1)?;
    let b2 = conv(g, p, b1, "g.b2", 2, 1, train)?;
    let b2 = lrelu(g, b2)?;
    let b3 = conv(g, p, b2, "g.b3", 2, 1, train)?;
    let b3 = lrelu(g, b3)?;
    let mut h = b3;
    for r in 0..2 {
        let t = conv(g, p, h, &format!("g.b4.r{r}.c0"), 1, 1, train)?;
        let t = lrelu(g, t)?;
        let t = conv(g, p, t, &format!("g.b4.r{r}.c1"), 1, 1, train)?;
        let sum = g.add(h, t)?;
        h = lrelu(g, sum)?;
    }
    let b4 = h;
    let b5 = deconv(g, p, b4, "g.b5", 2, 1, 1, train)?;
    let b5 = lrelu(g, b5)?;
    let b6 = deconv(g, p, b5, "g.b6", 2, 1, 1, train)?;
    let b6 = lrelu(g, b6)?;
    let b7 = deconv(g, p, b6, "g.b7", 1, 3, 0, train)?;
    let image = g.sigmoid(b7)?;
    Ok(GeneratorOutput {
        image,
        blocks: [b1, b2, b3, b4, b5, b6, image],
    })
}

/// Critic parameters (`d.*`): four stride-2 4×4 convolutions and a 1×1
/// projection to one channel.
pub fn init_discriminator(scale: f64, seed: u64) -> Result<ParamStore<f32>> {
    check_scale(scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let mut cin = 3;
    for (i, base) in [64, 128, 256, 512].into_iter().enumerate() {
        let c = ch(base, scale);
        add_conv(&mut p, &mut rng, &format!("d.c{}", i + 1), c, cin, 4);
        cin = c;
    }
    add_conv(&mut p, &mut rng, "d.out", 1, cin, 1);
    Ok(p)
}

/// Critic value per sample, `[N, 1]`. Spatial size must be a multiple of 16.
pub fn discriminator_forward<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var, train: bool) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) || s[2] == 0 {
        return Err(Error::Shape {
            node: "discriminator input".into(),
            expected: "[N, 3, H, W] with H, W multiples of 16".into(),
            actual: format!("{s:?}"),
        });
    }
    let mut h = x;
    for i in 1..=4 {
        h = conv(g, p, h, &format!("d.c{i}"), 2, 1, train)?;
        h = lrelu(g, h)?;
    }
    let o = conv(g, p, h, "d.out", 1, 0, train)?;
    g.spatial_mean(o)
}

const TRUNK: [usize; 3] = [16, 32, 64];
pub const FEATURE_DIM: usize = 64;

/// Feature critic parameters (`df.*`).
pub fn init_feature_critic(seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    add_linear(&mut p, &mut rng, "df.fc1", 64, FEATURE_DIM);
    add_linear(&mut p, &mut rng, "df.fc2", 1, 64);
    p
}

pub fn feature_critic_forward<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, f: Var, train: bool) -> Result<Var> {
    let h = linear(g, p, f, "df.fc1", train)?;
    let h = lrelu(g, h)?;
    linear(g, p, h, "df.fc2", train)
}

fn recognizer_trunk<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var, train: bool) -> Result<Var> {
    let h = conv(g, p, x, "r.c1", 1, 1, train)?;
    let h = lrelu(g, h)?;
    let h = conv(g, p, h, "r.c2", 2, 1, train)?;
    let h = lrelu(g, h)?;
    let h = conv(g, p, h, "r.c3", 2, 1, train)?;
    lrelu(g, h)
}

/// Character classifier over square gray crops.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognizer {
    params: ParamStore<f32>,
    alphabet: Alphabet,
    input_size: usize,
}

const ALPHABET_KEY: &str = "r.alphabet";

impl Recognizer {
    pub fn new(alphabet: Alphabet, input_size: usize, seed: u64) -> Result<Self> {
        if input_size < 8 || !input_size.is_multiple_of(4) {
            return Err(Error::Config(format!("recognizer input size {input_size} must be a multiple of 4, at least 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        add_conv(&mut p, &mut rng, "r.c1", TRUNK[0], 1, 3);
        add_conv(&mut p, &mut rng, "r.c2", TRUNK[1], TRUNK[0], 3);
        add_conv(&mut p, &mut rng, "r.c3", TRUNK[2], TRUNK[1], 3);
        let q = input_size / 4;
        add_linear(&mut p, &mut rng, "r.fc", alphabet.len(), TRUNK[2] * q * q);
        Ok(Self {
            params: p,
            alphabet,
            input_size,
        })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Logits `[N, K]` for gray crops `x: [N, 1, S, S]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, train: bool) -> Result<Var> {
        let t = recognizer_trunk(g, p, x, train)?;
        let f = g.flatten(t)?;
        linear(g, p, f, "r.fc", train)
    }

    /// Pooled trunk features `[N, 64]` of composed RGB crops `[N, 3, H, W]`
    /// (the frozen feature extractor).
    pub fn features<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, rgb: Var) -> Result<Var> {
        let s = g.shape(rgb).to_vec();
        let gray = g.gray(rgb)?;
        let crops: Vec<Crop> = (0..s[0])
            .map(|i| Crop {
                batch: i,
                x0: 0.0,
                y0: 0.0,
                x1: s[3] as f64,
                y1: s[2] as f64,
            })
            .collect();
        let x = g.crop_resize(gray, &crops, self.input_size, self.input_size)?;
        let t = recognizer_trunk(g, p, x, false)?;
        g.spatial_mean(t)
    }

    /// Predicted class per crop.
    pub fn classify(&self, crops: &Tensor<f32>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.constant(crops.clone())?;
        let l = self.logits(&mut g, &self.params, x, false)?;
        let k = self.alphabet.len();
        Ok(g.value(l)
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn to_store(&self) -> ParamStore<f32> {
        let mut s = self.params.clone();
        let codes: Vec<f32> = self.alphabet.chars.iter().map(|&c| c as u32 as f32).collect();
        s.insert(ALPHABET_KEY, Tensor::new(vec![codes.len()], codes).expect("1-d"));
        s
    }

    pub fn from_store(store: ParamStore<f32>) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("recognizer checkpoint: {m}"));
        let codes = store.get(ALPHABET_KEY).ok_or_else(|| bad("missing alphabet"))?.clone();
        let chars: String = codes
            .data()
            .iter()
            .map(|&v| char::from_u32(v as u32).ok_or_else(|| bad("bad alphabet code")))
            .collect::<Result<_>>()?;
        let alphabet = Alphabet::new(&chars)?;
        let mut params = store.subset("r.c");
        params.extend(store.subset("r.fc"))?;
        let fc = params.get("r.fc.w").ok_or_else(|| bad("missing r.fc.w"))?;
        let cells = fc.shape()[1] / TRUNK[2];
        let q = (cells as f64).sqrt().round() as usize;
        if q * q != cells || fc.shape()[0] != alphabet.len() {
            return Err(bad("classifier shape does not match alphabet"));
        }
        Ok(Self {
            params,
            alphabet,
            input_size: q * 4,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_store(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(load_checkpoint(path)?)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint_bytes(&self.to_store())
    }
}

/// Square sampling window around one character, sized from the line height
/// so glyph scale and baseline position are preserved across samples.
pub fn char_crop(b: &CharBox, baseline_y: f32, px_height: f32, batch: usize) -> Crop {
    let side = 1.2 * px_height as f64;
    let cx = (b.x0 + b.x1) as f64 / 2.0;
    let y0 = baseline_y as f64 - 0.9 * px_height as f64;
    Crop {
        batch,
        x0: cx - side / 2.0,
        y0,
        x1: cx + side / 2.0,
        y1: y0 + side,
    }
}

/// Masked blend `gx·m + x·(1−m)` per channel.
pub fn compose_masked(gx: &RasterImage, m: &Mask, x: &RasterImage) -> Result<RasterImage> {
    let (w, h) = (x.width(), x.height());
    if (gx.width(), gx.height()) != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            actual: (gx.width(), gx.height()),
        });
    }
    if (m.width(), m.height()) != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            actual: (m.width(), m.height()),
        });
    }
    if gx.channels() != x.channels() {
        return Err(Error::invalid("generated and background crops differ in channel count"));
    }
    let c = x.channels();
    let data = x
        .data()
        .iter()
        .zip(gx.data())
        .enumerate()
        .map(|(i, (&xv, &gv))| {
            let mv = m.data()[i / c] as f32;
            gv * mv + xv * (1.0 - mv)
        })
        .collect();
    RasterImage::new(w, h, c, data)
}

fn image_chw(img: &RasterImage, out: &mut Vec<f32>) {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.push(img.get(x, y, ch));
            }
        }
    }
}

fn chw_image(t: &[f32], w: usize, h: usize) -> Result<RasterImage> {
    let plane = w * h;
    RasterImage::new(w, h, 3, (0..plane * 3).map(|i| t[(i % 3) * plane + i / 3]).collect())
}

/// One GAN training example: a background crop with the text mask to embed.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub x: RasterImage,
    pub text: TextMask,
}

impl TrainingSample {
    pub fn new(x: RasterImage, text: TextMask) -> Result<Self> {
        if (x.width(), x.height()) != (text.width(), text.height()) {
            return Err(Error::DimensionMismatch {
                expected: (x.width(), x.height()),
                actual: (text.width(), text.height()),
            });
        }
        if x.channels() != 3 {
            return Err(Error::invalid("training crops must be RGB"));
        }
        Ok(Self { x, text })
    }
}

/// Real text crops, center-cropped to a square and resized to `size`.
pub fn load_real_crops(dir: &Path, size: usize) -> Result<Vec<RasterImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    let crops = paths
        .iter()
        .map(|p| Ok(square_resize(&load_image(p)?.to_rgb(), size)))
        .collect::<Result<Vec<_>>>()?;
    if crops.is_empty() {
        return Err(Error::Config(format!("no real crops in {}", dir.display())));
    }
    Ok(crops)
}

/// Center square crop then bilinear resize, preserving aspect ratio.
pub fn square_resize(img: &RasterImage, size: usize) -> RasterImage {
    let side = img.width().min(img.height());
    let x0 = (img.width() - side) / 2;
    let y0 = (img.height() - side) / 2;
    img.crop(x0, y0, side, side).expect("inside image").resize_bilinear(size, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub alphabet: String,
    pub input_size: usize,
    pub batch: usize,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub min_accuracy: f64,
    pub heldout_per_class: usize,
    pub base_px: f32,
    pub scale_jitter: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alphabet: "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ".into(),
            input_size: 24,
            batch: 64,
            steps_per_epoch: 100,
            max_epochs: 30,
            lr: 1e-3,
            target_accuracy: 0.95,
            min_accuracy: 0.8,
            heldout_per_class: 20,
            base_px: 24.0,
            scale_jitter: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epochs: usize,
    pub heldout_accuracy: f64,
    pub heldout_size: usize,
}

fn sample_crops(canvas: Tensor<f32>, crops: &[Crop], size: usize) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.constant(canvas)?;
    let c = g.crop_resize(x, crops, size, size)?;
    Ok(g.value(c).clone())
}

/// One jittered single-character render, returned as an `S×S` gray crop.
fn render_char_crop<R: Rng>(
    rng: &mut R,
    fonts: &[&Font],
    alphabet: &Alphabet,
    class: usize,
    cfg: &PretrainConfig,
) -> Result<Vec<f32>> {
    let target = alphabet.chars()[class];
    let usable: Vec<&&Font> = fonts.iter().filter(|f| f.has_glyph(target)).collect();
    let font = **usable.choose(rng).ok_or(Error::MissingGlyph(target))?;
    let px = cfg.base_px * rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter);
    let pick = |rng: &mut R| {
        let c = *alphabet.chars().choose(rng).expect("non-empty");
        if font.has_glyph(c) {
            c
        } else {
            target
        }
    };
    let (text, idx) = if rng.random_bool(0.5) {
        let (a, b) = (pick(rng), pick(rng));
        (format!("{a}{target}{b}"), 1)
    } else {
        (target.to_string(), 0)
    };
    let tm = rasterize_text(&text, font, px)?;
    let bg = rng.random_range(0.0..1.0f32);
    let fg = if bg > 0.5 {
        rng.random_range(0.0..bg - 0.3)
    } else {
        rng.random_range(bg + 0.3..1.0)
    };
    let (w, h) = (tm.width(), tm.height());
    let data: Vec<f32> = tm.mask.data().iter().map(|&m| if m != 0 { fg } else { bg }).collect();
    let canvas = Tensor::new(vec![1, 1, h, w], data)?;
    let crop = char_crop(&tm.char_boxes[idx], tm.baseline_y, tm.px_height, 0);
    Ok(sample_crops(canvas, &[crop], cfg.input_size)?.into_data())
}

fn render_batch<R: Rng>(
    rng: &mut R,
    fonts: &[&Font],
    alphabet: &Alphabet,
    classes: &[usize],
    cfg: &PretrainConfig,
) -> Result<Tensor<f32>> {
    let s = cfg.input_size;
    let mut data = Vec::with_capacity(classes.len() * s * s);
    for &c in classes {
        data.extend(render_char_crop(rng, fonts, alphabet, c, cfg)?);
    }
    Tensor::new(vec![classes.len(), 1, s, s], data)
}

/// Train the character recognizer on jittered renders until the held-out
/// accuracy reaches the target or the epoch cap is hit.
pub fn pretrain_recognizer(fonts: &[Font], cfg: &PretrainConfig) -> Result<(Recognizer, PretrainReport)> {
    if fonts.len() < 2 {
        return Err(Error::Config(format!("need at least 2 fonts, got {}", fonts.len())));
    }
    let alphabet = Alphabet::new(&cfg.alphabet)?;
    if cfg.batch == 0 || cfg.steps_per_epoch == 0 || cfg.max_epochs == 0 || cfg.heldout_per_class == 0 {
        return Err(Error::Config("batch, steps_per_epoch, max_epochs and heldout_per_class must be positive".into()));
    }
    let fonts: Vec<&Font> = fonts.iter().collect();
    let mut rec = Recognizer::new(alphabet.clone(), cfg.input_size, cfg.seed)?;
    let k = alphabet.len();

    let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0ff5_e700_0001);
    let held_classes: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, cfg.heldout_per_class)).collect();
    let held = render_batch(&mut held_rng, &fonts, &alphabet, &held_classes, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = RmsProp::new(cfg.lr as f32, 0.9);
    let mut report = PretrainReport {
        epochs: 0,
        heldout_accuracy: 0.0,
        heldout_size: held_classes.len(),
    };
    for epoch in 1..=cfg.max_epochs {
        for _ in 0..cfg.steps_per_epoch {
            let classes: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..k)).collect();
            let x = render_batch(&mut rng, &fonts, &alphabet, &classes, cfg)?;
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let logits = rec.logits(&mut g, &rec.params, xv, true)?;
            let loss = g.softmax_cross_entropy(logits, &classes)?;
            let grads = g.backward(loss, None)?.param_grads(&g);
            opt.step(&mut rec.params, &grads)?;
        }
        let pred = rec.classify(&held)?;
        let correct = pred.iter().zip(&held_classes).filter(|(a, b)| a == b).count();
        report.epochs = epoch;
        report.heldout_accuracy = correct as f64 / held_classes.len() as f64;
        log::info!("recognizer epoch {epoch}: held-out accuracy {:.4}", report.heldout_accuracy);
        if report.heldout_accuracy >= cfg.target_accuracy {
            break;
        }
    }
    if report.heldout_accuracy < cfg.min_accuracy {
        return Err(Error::TrainingFailed {
            accuracy: report.heldout_accuracy,
            required: cfg.min_accuracy,
        });
    }
    Ok((rec, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub scale: f64,
    pub crop_size: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    pub clip: f64,
    pub critic_steps: usize,
    /// Critic steps per generator step during the first `warmup_iterations`
    /// iterations and every `boost_every`-th iteration after.
    pub warmup_critic_steps: usize,
    pub warmup_iterations: usize,
    pub boost_every: usize,
    pub lambda_s: f64,
    /// Also push the generator against the feature critic.
    pub generator_feature_loss: bool,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            scale: 0.25,
            crop_size: 64,
            batch: 16,
            lr: 5e-5,
            decay: 0.9,
            clip: 0.01,
            critic_steps: 5,
            warmup_critic_steps: 100,
            warmup_iterations: 25,
            boost_every: 500,
            lambda_s: 1.0,
            generator_feature_loss: false,
            iterations: 2000,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn critic_steps_at(&self, iteration: usize) -> usize {
        let boosted = iteration < self.warmup_iterations || (self.boost_every > 0 && iteration.is_multiple_of(self.boost_every));
        if boosted {
            self.warmup_critic_steps.max(self.critic_steps)
        } else {
            self.critic_steps
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(16) {
            return Err(Error::Config(format!("crop_size {} must be a positive multiple of 16", self.crop_size)));
        }
        if self.batch == 0 || self.critic_steps == 0 {
            return Err(Error::Config("batch and critic_steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip > 0.0 && (0.0..1.0).contains(&self.decay) && self.lambda_s >= 0.0) {
            return Err(Error::Config("lr and clip must be positive, decay in [0, 1), lambda_s non-negative".into()));
        }
        Ok(())
    }
}

/// Per-batch loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_d: f64,
    pub l_g: f64,
    pub l_f: f64,
    pub l_s: f64,
}

impl LossReport {
    /// Critic estimate of the Wasserstein distance, `mean D(y) − mean D(G_m(x))`.
    pub fn wasserstein(&self) -> f64 {
        -self.l_d
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub losses: LossReport,
    pub seconds: f64,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let l = &self.losses;
        format!("{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.3}", self.iteration, l.l_d, l.l_g, l.l_f, l.l_s, self.seconds)
    }
}

/// `mean(fake) − mean(real)`.
pub fn critic_gap<T: Real>(g: &mut Graph<T>, fake: Var, real: Var) -> Result<Var> {
    let a = g.mean(fake)?;
    let b = g.mean(real)?;
    g.sub(a, b)
}

/// Feature critic gap: `mean D_F(F(composed)) − mean D_F(F(real))`.
pub fn feature_loss<T: Real>(
    g: &mut Graph<T>,
    recognizer: &Recognizer,
    feature_critic: &ParamStore<T>,
    composed: Var,
    real: Var,
    train: bool,
) -> Result<Var> {
    let r: ParamStore<T> = recognizer.params.cast();
    let f_fake = recognizer.features(g, &r, composed)?;
    let f_real = recognizer.features(g, &r, real)?;
    let df_fake = feature_critic_forward(g, feature_critic, f_fake, train)?;
    let df_real = feature_critic_forward(g, feature_critic, f_real, train)?;
    critic_gap(g, df_fake, df_real)
}

/// Mean per-character cross-entropy of the frozen recognizer on character
/// crops of `composed: [N, 3, H, W]`.
pub fn semantic_loss<T: Real>(g: &mut Graph<T>, recognizer: &Recognizer, composed: Var, chars: &[(Crop, usize)]) -> Result<Var> {
    if chars.is_empty() {
        return Err(Error::invalid("semantic loss needs at least one character"));
    }
    let r: ParamStore<T> = recognizer.params.cast();
    let gray = g.gray(composed)?;
    let crops: Vec<Crop> = chars.iter().map(|c| c.0).collect();
    let labels: Vec<usize> = chars.iter().map(|c| c.1).collect();
    let s = recognizer.input_size;
    let x = g.crop_resize(gray, &crops, s, s)?;
    let logits = recognizer.logits(g, &r, x, false)?;
    g.softmax_cross_entropy(logits, &labels)
}

struct Batch {
    x: Tensor<f32>,
    mask: Tensor<f32>,
    chars: Vec<(Crop, usize)>,
}

fn assemble(samples: &[&TrainingSample], alphabet: &Alphabet) -> Result<Batch> {
    let n = samples.len();
    let (w, h) = (samples[0].x.width(), samples[0].x.height());
    let mut x = Vec::with_capacity(n * 3 * w * h);
    let mut mask = Vec::with_capacity(n * w * h);
    let mut chars = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if (s.x.width(), s.x.height()) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                actual: (s.x.width(), s.x.height()),
            });
        }
        image_chw(&s.x, &mut x);
        mask.extend(s.text.mask.data().iter().map(|&v| v as f32));
        for b in &s.text.char_boxes {
            if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > w as f32 || b.y1 > h as f32 {
                return Err(Error::invalid(format!("char box for {:?} lies outside the {w}x{h} crop", b.ch)));
            }
            if let Some(label) = alphabet.index(b.ch) {
                chars.push((char_crop(b, s.text.baseline_y, s.text.px_height, i), label));
            }
        }
    }
    Ok(Batch {
        x: Tensor::new(vec![n, 3, h, w], x)?,
        mask: Tensor::new(vec![n, 1, h, w], mask)?,
        chars,
    })
}

fn real_batch(reals: &[&RasterImage]) -> Result<Tensor<f32>> {
    let (w, h) = (reals[0].width(), reals[0].height());
    let mut data = Vec::with_capacity(reals.len() * 3 * w * h);
    for r in reals {
        if (r.width(), r.height(), r.channels()) != (w, h, 3) {
            return Err(Error::invalid("real crops must share one RGB size"));
        }
        image_chw(r, &mut data);
    }
    Tensor::new(vec![reals.len(), 3, h, w], data)
}

/// Generator, critics and the frozen recognizer, with their optimizers.
pub struct Gan {
    pub config: GanConfig,
    pub generator: ParamStore<f32>,
    pub critic: ParamStore<f32>,
    pub feature_critic: ParamStore<f32>,
    recognizer: Recognizer,
    opt_g: RmsProp<f32>,
    opt_d: RmsProp<f32>,
    opt_df: RmsProp<f32>,
}

impl Gan {
    pub fn new(config: GanConfig, recognizer: Recognizer) -> Result<Self> {
        config.validate()?;
        let (lr, decay) = (config.lr as f32, config.decay as f32);
        Ok(Self {
            generator: init_generator(config.scale, config.seed.wrapping_add(1))?,
            critic: init_discriminator(config.scale, config.seed.wrapping_add(2))?,
            feature_critic: init_feature_critic(config.seed.wrapping_add(3)),
            recognizer,
            opt_g: RmsProp::new(lr, decay),
            opt_d: RmsProp::new(lr, decay),
            opt_df: RmsProp::new(lr, decay),
            config,
        })
    }

    pub fn recognizer(&self) -> &Recognizer {
        &self.recognizer
    }

    fn composed(&self, g: &mut Graph<f32>, batch: &Batch, train_g: bool) -> Result<Var> {
        let x = g.constant(batch.x.clone())?;
        let m = g.constant(batch.mask.clone())?;
        let input = g.concat_channels(x, m)?;
        let out = generator_forward(g, &self.generator, input, train_g)?;
        g.compose_masked(out.image, x, &batch.mask)
    }

    fn semantic_term(&self, g: &mut Graph<f32>, composed: Var, chars: &[(Crop, usize)]) -> Result<Option<Var>> {
        if chars.is_empty() {
            return Ok(None);
        }
        semantic_loss(g, &self.recognizer, composed, chars).map(Some)
    }

    /// One critic update on D and D_F; clips both afterwards.
    pub fn discriminator_step(&mut self, samples: &[&TrainingSample], reals: &[&RasterImage]) -> Result<LossReport> {
        if samples.is_empty() || reals.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let batch = assemble(samples, &self.recognizer.alphabet)?;
        let mut g = Graph::new();
        let fake = self.composed(&mut g, &batch, false)?;
        let real = g.constant(real_batch(reals)?)?;
        let d_fake = discriminator_forward(&mut g, &self.critic, fake, true)?;
        let d_real = discriminator_forward(&mut g, &self.critic, real, true)?;
        let l_d = critic_gap(&mut g, d_fake, d_real)?;
        let l_f = feature_loss(&mut g, &self.recognizer, &self.feature_critic, fake, real, true)?;
        let total = g.add(l_d, l_f)?;
        let grads = g.backward(total, None)?.param_grads(&g);
        let (dg, dfg): (std::collections::BTreeMap<_, _>, std::collections::BTreeMap<_, _>) =
            grads.into_iter().partition(|(k, _)| k.starts_with("d."));
        self.opt_d.step(&mut self.critic, &dg)?;
        self.opt_df.step(&mut self.feature_critic, &dfg)?;
        let c = self.config.clip as f32;
        clip_weights(&mut self.critic, c);
        clip_weights(&mut self.feature_critic, c);
        Ok(LossReport {
            l_d: g.value(l_d).item() as f64,
            l_f: g.value(l_f).item() as f64,
            ..Default::default()
        })
    }

    /// One generator update on `L_G + λ_S·L_S` (plus the optional
    /// feature term).
    pub fn generator_step(&mut self, samples: &[&TrainingSample]) -> Result<LossReport> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let batch = assemble(samples, &self.recognizer.alphabet)?;
        let mut g = Graph::new();
        let fake = self.composed(&mut g, &batch, true)?;
        let d_fake = discriminator_forward(&mut g, &self.critic, fake, false)?;
        let m = g.mean(d_fake)?;
        let l_g = g.scale(m, -1.0)?;
        let mut total = l_g;
        let mut report = LossReport::default();
        if let Some(l_s) = self.semantic_term(&mut g, fake, &batch.chars)? {
            report.l_s = g.value(l_s).item() as f64;
            let w = g.scale(l_s, self.config.lambda_s as f32)?;
            total = g.add(total, w)?;
        }
        if self.config.generator_feature_loss {
            let f = self.recognizer.features(&mut g, &self.recognizer.params, fake)?;
            let df = feature_critic_forward(&mut g, &self.feature_critic, f, false)?;
            let m = g.mean(df)?;
            let lf = g.scale(m, -1.0)?;
            report.l_f = g.value(lf).item() as f64;
            total = g.add(total, lf)?;
        }
        report.l_g = g.value(l_g).item() as f64;
        let grads = g.backward(total, None)?.param_grads(&g);
        self.opt_g.step(&mut self.generator, &grads)?;
        Ok(report)
    }

    /// Generator, critic and feature-critic parameters in one store.
    pub fn checkpoint_store(&self) -> Result<ParamStore<f32>> {
        let mut s = self.generator.clone();
        s.extend(self.critic.clone())?;
        s.extend(self.feature_critic.clone())?;
        Ok(s)
    }

    /// Critic estimates `(mean D(y) − mean D(G_m(x)), mean D_F(F(y)) − mean D_F(F(G_m(x))))`
    /// over the given samples, forward only.
    pub fn critic_estimate(&self, samples: &[TrainingSample], reals: &[RasterImage]) -> Result<(f64, f64)> {
        if samples.is_empty() || reals.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let b = self.config.batch;
        let mean_over = |chunks: Vec<Result<(f64, f64)>>, n: usize| -> Result<(f64, f64)> {
            let mut acc = (0.0, 0.0);
            for c in chunks {
                let c = c?;
                acc.0 += c.0;
                acc.1 += c.1;
            }
            Ok((acc.0 / n as f64, acc.1 / n as f64))
        };
        let fake = samples
            .chunks(b)
            .map(|c| {
                let refs: Vec<&TrainingSample> = c.iter().collect();
                let batch = assemble(&refs, &self.recognizer.alphabet)?;
                let mut g = Graph::new();
                let x = self.composed(&mut g, &batch, false)?;
                self.critic_sums(&mut g, x)
            })
            .collect();
        let real = reals
            .chunks(b)
            .map(|c| {
                let refs: Vec<&RasterImage> = c.iter().collect();
                let mut g = Graph::new();
                let y = g.constant(real_batch(&refs)?)?;
                self.critic_sums(&mut g, y)
            })
            .collect();
        let f = mean_over(fake, samples.len())?;
        let r = mean_over(real, reals.len())?;
        Ok((r.0 - f.0, r.1 - f.1))
    }

    fn critic_sums(&self, g: &mut Graph<f32>, x: Var) -> Result<(f64, f64)> {
        let d = discriminator_forward(g, &self.critic, x, false)?;
        let f = self.recognizer.features(g, &self.recognizer.params, x)?;
        let df = feature_critic_forward(g, &self.feature_critic, f, false)?;
        let sum = |v: &Tensor<f32>| v.data().iter().map(|&a| a as f64).sum::<f64>();
        Ok((sum(g.value(d)), sum(g.value(df))))
    }

    /// [`Gan::train_observed`] without an observer.
    pub fn train(
        &mut self,
        samples: &[TrainingSample],
        reals: &[RasterImage],
        out_dir: Option<&Path>,
        log: Option<&mut dyn Write>,
    ) -> Result<Vec<LogRecord>> {
        self.train_observed(samples, reals, out_dir, log, &mut |_, _| Ok(()))
    }

    /// Alternate critic updates with one generator update per iteration.
    /// Checkpoints go to `out_dir` every `checkpoint_every` iterations; a
    /// non-finite loss aborts with the last good checkpoint. `observer` runs
    /// after every critic and generator step.
    pub fn train_observed(
        &mut self,
        samples: &[TrainingSample],
        reals: &[RasterImage],
        out_dir: Option<&Path>,
        mut log: Option<&mut dyn Write>,
        observer: &mut dyn FnMut(&Gan, TrainEvent) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        if reals.is_empty() {
            return Err(Error::Config("no real crops".into()));
        }
        let size = self.config.crop_size;
        if samples.iter().any(|s| s.x.width() != size || s.x.height() != size)
            || reals.iter().any(|r| r.width() != size || r.height() != size)
        {
            return Err(Error::Config(format!("all crops must be {size}x{size}")));
        }
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let start = Instant::now();
        let mut records = Vec::with_capacity(self.config.iterations);
        let mut last_good: Option<PathBuf> = None;
        let b = self.config.batch;
        for it in 0..self.config.iterations {
            let mut step = |gan: &mut Gan, rng: &mut ChaCha8Rng| -> Result<LossReport> {
                let mut rep = LossReport::default();
                for _ in 0..gan.config.critic_steps_at(it) {
                    let xs: Vec<&TrainingSample> = (0..b).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
                    let ys: Vec<&RasterImage> = (0..b).map(|_| &reals[rng.random_range(0..reals.len())]).collect();
                    let d = gan.discriminator_step(&xs, &ys)?;
                    rep.l_d = d.l_d;
                    rep.l_f = d.l_f;
                    observer(gan, TrainEvent::CriticStep { iteration: it })?;
                }
                let xs: Vec<&TrainingSample> = (0..b).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
                let gr = gan.generator_step(&xs)?;
                rep.l_g = gr.l_g;
                rep.l_s = gr.l_s;
                observer(gan, TrainEvent::GeneratorStep { iteration: it, losses: rep })?;
                Ok(rep)
            };
            let rep = match step(self, &mut rng) {
                Ok(r) => r,
                Err(Error::NonFinite(msg)) => {
                    log::error!("iteration {it}: {msg}");
                    return Err(Error::Diverged { iteration: it, last_good });
                }
                Err(e) => return Err(e),
            };
            let rec = LogRecord {
                iteration: it,
                losses: rep,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.to_line()).map_err(|e| Error::io("training log", e))?;
            }
            records.push(rec);
            if let Some(d) = out_dir {
                let every = self.config.checkpoint_every;
                if (every > 0 && (it + 1) % every == 0) || it + 1 == self.config.iterations {
                    let p = d.join(format!("gan_{:06}.ckpt", it + 1));
                    save_checkpoint(&self.checkpoint_store()?, &p)?;
                    last_good = Some(p);
                }
            }
        }
        if let Some(d) = out_dir {
            save_checkpoint(&self.generator, &d.join("generator.ckpt"))?;
        }
        Ok(records)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainEvent {
    CriticStep { iteration: usize },
    GeneratorStep { iteration: usize, losses: LossReport },
}

/// A trained generator ready for inference.
#[derive(Clone, Debug)]
pub struct AppearanceModel {
    params: ParamStore<f32>,
    input_size: usize,
}

impl AppearanceModel {
    pub fn new(params: ParamStore<f32>, input_size: usize) -> Result<Self> {
        if input_size == 0 || !input_size.is_multiple_of(4) {
            return Err(Error::Config(format!("generator input size {input_size} must be a positive multiple of 4")));
        }
        let g = params.subset("g.");
        if g.get("g.b1.w").is_none() || g.get("g.b7.w").is_none() {
            return Err(Error::Config("checkpoint holds no generator parameters".into()));
        }
        Ok(Self { params: g, input_size })
    }

    pub fn load(path: &Path, input_size: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("generator checkpoint {} not found", path.display())));
        }
        Self::new(load_checkpoint(path)?, input_size)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Restyle the text pixels of `x` under `m`: the crop is resized to the
    /// generator input, translated, resized back, and blended at full
    /// resolution so pixels outside `m` are untouched.
    pub fn infer(&self, x: &RasterImage, m: &Mask) -> Result<RasterImage> {
        if (x.width(), x.height()) != (m.width(), m.height()) {
            return Err(Error::DimensionMismatch {
                expected: (x.width(), x.height()),
                actual: (m.width(), m.height()),
            });
        }
        let x = x.to_rgb();
        if m.count() == 0 {
            return Ok(x);
        }
        let s = self.input_size;
        let xs = x.resize_bilinear(s, s);
        let ms = Mask::from_image(&m.to_image().resize_bilinear(s, s));
        let mut data = Vec::with_capacity(4 * s * s);
        image_chw(&xs, &mut data);
        data.extend(ms.data().iter().map(|&v| v as f32));
        let mut g = Graph::new();
        let input = g.constant(Tensor::new(vec![1, 4, s, s], data)?)?;
        let out = generator_forward(&mut g, &self.params, input, false)?;
        let gx = chw_image(g.value(out.image).data(), s, s)?.resize_bilinear(x.width(), x.height());
        compose_masked(&gx, m, &x)
    }
}

// Up to `max_len` alphabet characters rendered at `px` and embedded at a
// random position of a `size`×`size` mask.
fn render_chars<R: Rng>(rng: &mut R, fonts: &[Font], alphabet: &Alphabet, size: usize, max_len: usize, px: f32) -> Result<TextMask> {
    let px = px.max(crate::text::MIN_PX_HEIGHT);
    for _ in 0..100 {
        let font = fonts.choose(rng).ok_or_else(|| Error::Config("no fonts".into()))?;
        let len = rng.random_range(1..=max_len.max(1));
        let text: String = (0..len).map(|_| *alphabet.chars().choose(rng).expect("non-empty")).collect();
        if !text.chars().all(|c| font.has_glyph(c)) {
            continue;
        }
        let tm = rasterize_text(&text, font, px)?;
        if tm.width() > size || tm.height() > size {
            continue;
        }
        let x0 = rng.random_range(0..=size - tm.width());
        let y0 = rng.random_range(0..=size - tm.height());
        return tm.embed(size, size, x0, y0);
    }
    Err(Error::Config(format!("cannot fit alphabet text into a {size}x{size} crop")))
}

/// Flat-color crops with 1–2 rendered characters, plus real-crop stand-ins
/// with dark text on the same kind of background. Backgrounds stay near
/// mid-gray so an untrained generator's text is hard to read.
pub fn toy_dataset(
    fonts: &[Font],
    alphabet: &Alphabet,
    size: usize,
    n_samples: usize,
    n_reals: usize,
    seed: u64,
) -> Result<(Vec<TrainingSample>, Vec<RasterImage>)> {
    if fonts.is_empty() {
        return Err(Error::Config("no fonts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = size as f32 * 0.65;
    let render = |rng: &mut ChaCha8Rng| -> Result<(RasterImage, TextMask, [f32; 3])> {
        let tm = render_chars(rng, fonts, alphabet, size, 2, px)?;
        let bg = [0; 3].map(|_| rng.random_range(0.35..0.65f32));
        Ok((flat(size, bg), tm, bg))
    };
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (x, tm, _) = render(&mut rng)?;
        samples.push(TrainingSample::new(x, tm)?);
    }
    let mut reals = Vec::with_capacity(n_reals);
    for _ in 0..n_reals {
        let (x, tm, bg) = render(&mut rng)?;
        let fg = bg.map(|_| rng.random_range(0.0..0.1f32));
        reals.push(compose_masked(&flat(size, fg), &tm.mask, &x)?);
    }
    Ok((samples, reals))
}

/// Training samples cut from backgrounds: a random square window resized to
/// `size` with 1–3 alphabet characters embedded.
pub fn samples_from_backgrounds(
    backgrounds: &[RasterImage],
    fonts: &[Font],
    alphabet: &Alphabet,
    size: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    if backgrounds.is_empty() {
        return Err(Error::Config("no backgrounds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let bg = backgrounds.choose(&mut rng).expect("non-empty").to_rgb();
            let short = bg.width().min(bg.height());
            let side = ((short as f64 * rng.random_range(0.2..0.5)).round() as usize).clamp(1, short);
            let x0 = rng.random_range(0..=bg.width() - side);
            let y0 = rng.random_range(0..=bg.height() - side);
            let x = bg.crop(x0, y0, side, side)?.resize_bilinear(size, size);
            let px = size as f32 * rng.random_range(0.35..0.6f32);
            let tm = render_chars(&mut rng, fonts, alphabet, size, 3, px)?;
            TrainingSample::new(x, tm)
        })
        .collect()
}

fn flat(size: usize, c: [f32; 3]) -> RasterImage {
    RasterImage::from_fn(size, size, 3, |_, _, ch| c[ch])
}
