//! Foreground text: corpus sampling and glyph rasterization into binary masks.

use std::path::{Path, PathBuf};

use ab_glyph::{Font as _, FontArc, Glyph, PxScale, ScaleFont};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Mask;

/// Newline-delimited text corpus with a derived word index.
#[derive(Clone, Debug)]
pub struct Corpus {
    lines: Vec<String>,
    words: Vec<String>,
}

impl Corpus {
    /// Normalize lines (trim, collapse runs of whitespace) and drop empties.
    pub fn from_lines<I, S>(lines: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let lines: Vec<String> = lines
            .into_iter()
            .map(|l| l.as_ref().split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::invalid("corpus has no non-empty lines"));
        }
        let words = lines
            .iter()
            .flat_map(|l| l.split(' ').map(String::from))
            .collect();
        Ok(Self { lines, words })
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: format!("invalid UTF-8: {e}"),
    })?;
    Corpus::from_lines(text.lines()).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: "corpus is empty".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    Word,
    Line,
}

const SAMPLE_TRIES: usize = 100;

/// Uniformly sample a word or line no longer than `max_chars` characters.
/// Lines are cut at a word boundary; entries that cannot fit are resampled.
pub fn sample_text<R: Rng + ?Sized>(
    corpus: &Corpus,
    rng: &mut R,
    mode: TextMode,
    max_chars: usize,
) -> Result<String> {
    if max_chars == 0 {
        return Err(Error::invalid("max_chars must be at least 1"));
    }
    for _ in 0..SAMPLE_TRIES {
        match mode {
            TextMode::Word => {
                let w = &corpus.words[rng.random_range(0..corpus.words.len())];
                if w.chars().count() <= max_chars {
                    return Ok(w.clone());
                }
            }
            TextMode::Line => {
                let line = &corpus.lines[rng.random_range(0..corpus.lines.len())];
                let mut out = String::new();
                let mut len = 0;
                for word in line.split(' ') {
                    let wl = word.chars().count();
                    let extra = if out.is_empty() { wl } else { wl + 1 };
                    if len + extra > max_chars {
                        break;
                    }
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(word);
                    len += extra;
                }
                if !out.is_empty() {
                    return Ok(out);
                }
            }
        }
    }
    Err(Error::invalid(format!(
        "no corpus entry fits in {max_chars} characters after {SAMPLE_TRIES} tries"
    )))
}

/// A scalable outline font.
#[derive(Clone)]
pub struct Font {
    name: String,
    inner: FontArc,
}

impl std::fmt::Debug for Font {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Font").field("name", &self.name).finish()
    }
}

impl Font {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let inner = FontArc::try_from_vec(bytes).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self { name, inner })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn has_glyph(&self, c: char) -> bool {
        c.is_whitespace() || self.inner.glyph_id(c).0 != 0
    }
}

/// Load every `.ttf`/`.otf` file in `dir`, sorted by file name.
pub fn load_font_dir(dir: impl AsRef<Path>) -> Result<Vec<Font>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("ttf") || e.eq_ignore_ascii_case("otf"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .ttf/.otf fonts in {}", dir.display())));
    }
    paths.iter().map(Font::load).collect()
}

/// Exact (unrounded) outline bounds of one character in mask coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharBox {
    pub ch: char,
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl CharBox {
    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
        cx >= self.x0 && cx <= self.x1 && cy >= self.y0 && cy <= self.y1
    }
}

/// Binary text mask with transcript and per-character geometry.
#[derive(Clone, Debug)]
pub struct TextMask {
    pub mask: Mask,
    pub transcript: String,
    pub char_boxes: Vec<CharBox>,
    pub baseline_y: f32,
    pub px_height: f32,
}

impl TextMask {
    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    /// Union of all character boxes `(x0, y0, x1, y1)`.
    pub fn ink_box(&self) -> (f32, f32, f32, f32) {
        self.char_boxes.iter().fold(
            (f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY),
            |(a, b, c, d), cb| (a.min(cb.x0), b.min(cb.y0), c.max(cb.x1), d.max(cb.y1)),
        )
    }

    /// Place this mask at `(x0, y0)` inside a larger `w x h` canvas, shifting
    /// the geometry accordingly. The mask must fit.
    pub fn embed(&self, w: usize, h: usize, x0: usize, y0: usize) -> Result<TextMask> {
        if x0 + self.width() > w || y0 + self.height() > h {
            return Err(Error::DoesNotFit(format!(
                "{}x{} mask does not fit at ({x0},{y0}) in {w}x{h}",
                self.width(),
                self.height()
            )));
        }
        let mut mask = Mask::new(w, h);
        for y in 0..self.height() {
            for x in 0..self.width() {
                if self.mask.get(x, y) {
                    mask.set(x + x0, y + y0, true);
                }
            }
        }
        let (dx, dy) = (x0 as f32, y0 as f32);
        Ok(TextMask {
            mask,
            transcript: self.transcript.clone(),
            char_boxes: self
                .char_boxes
                .iter()
                .map(|b| CharBox {
                    ch: b.ch,
                    x0: b.x0 + dx,
                    y0: b.y0 + dy,
                    x1: b.x1 + dx,
                    y1: b.y1 + dy,
                })
                .collect(),
            baseline_y: self.baseline_y + dy,
            px_height: self.px_height,
        })
    }
}

pub const MIN_PX_HEIGHT: f32 = 8.0;

/// Render `text` left to right, threshold coverage at 0.5 and crop to the ink
/// with a one-pixel margin. Whitespace advances the pen but gets no box.
pub fn rasterize_text(text: &str, font: &Font, px_height: f32) -> Result<TextMask> {
    if text.trim().is_empty() {
        return Err(Error::invalid("cannot rasterize empty text"));
    }
    if !(px_height >= MIN_PX_HEIGHT) {
        return Err(Error::invalid(format!(
            "px_height {px_height} below minimum {MIN_PX_HEIGHT}"
        )));
    }
    if let Some(c) = text.chars().find(|&c| !font.has_glyph(c)) {
        return Err(Error::MissingGlyph(c));
    }
    let scale = PxScale::from(px_height);
    let scaled = font.inner.as_scaled(scale);
    let factor = scaled.scale_factor();

    // Lay out on a baseline at y = 0.
    let mut pen = 0.0f32;
    let mut prev = None;
    let mut placed = Vec::new();
    for ch in text.chars() {
        let id = scaled.glyph_id(ch);
        if let Some(p) = prev {
            pen += scaled.kern(p, id);
        }
        if !ch.is_whitespace() {
            placed.push((ch, id, pen));
        }
        pen += scaled.h_advance(id);
        prev = Some(id);
    }

    let mut boxes = Vec::with_capacity(placed.len());
    for &(ch, id, x) in &placed {
        let outline = font.inner.outline(id);
        let b = match outline {
            Some(o) => CharBox {
                ch,
                x0: x + o.bounds.min.x * factor.horizontal,
                x1: x + o.bounds.max.x * factor.horizontal,
                // ab_glyph stores the outline rect as (xMin, yMax)..(xMax, yMin).
                y0: -o.bounds.min.y * factor.vertical,
                y1: -o.bounds.max.y * factor.vertical,
            },
            // Visible character without contours (rare): an empty box at the pen.
            None => CharBox { ch, x0: x, x1: x, y0: 0.0, y1: 0.0 },
        };
        boxes.push(b);
    }
    let (bx0, by0, bx1, by1) = boxes.iter().fold(
        (f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY),
        |(a, b, c, d), cb| (a.min(cb.x0), b.min(cb.y0), c.max(cb.x1), d.max(cb.y1)),
    );
    // Integer shift so that the ink starts one pixel in.
    let ox = 1.0 - bx0.floor();
    let oy = 1.0 - by0.floor();
    let width = (bx1 + ox).ceil() as usize + 1;
    let height = (by1 + oy).ceil() as usize + 1;

    let mut coverage = vec![0.0f32; width * height];
    for &(_, id, x) in &placed {
        let glyph: Glyph = id.with_scale_and_position(scale, ab_glyph::point(x + ox, oy));
        if let Some(og) = font.inner.outline_glyph(glyph) {
            let pb = og.px_bounds();
            og.draw(|gx, gy, c| {
                let px = pb.min.x as i64 + gx as i64;
                let py = pb.min.y as i64 + gy as i64;
                if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                    let cell = &mut coverage[py as usize * width + px as usize];
                    *cell = (*cell + c).min(1.0);
                }
            });
        }
    }
    let data = coverage.iter().map(|&c| (c >= 0.5) as u8).collect();
    let mask = Mask::from_data(width, height, data)?;
    let char_boxes = boxes
        .into_iter()
        .map(|b| CharBox {
            ch: b.ch,
            x0: b.x0 + ox,
            x1: b.x1 + ox,
            y0: b.y0 + oy,
            y1: b.y1 + oy,
        })
        .collect();
    Ok(TextMask {
        mask,
        transcript: text.to_string(),
        char_boxes,
        baseline_y: oy,
        px_height,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn test_font() -> Font {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/fonts/DejaVuSans.ttf");
        Font::load(p).unwrap()
    }

    #[test]
    fn corpus_lines_and_words() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "hello world\n  second   line \n\nthird\n").unwrap();
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.lines().len(), 3);
        assert_eq!(c.lines()[1], "second line");
        assert!(c.words().contains(&"hello".to_string()));
        assert!(c.words().contains(&"world".to_string()));
        std::fs::write(&p, "\n   \n\n").unwrap();
        assert!(load_corpus(&p).is_err());
        std::fs::write(&p, [0xff, 0xfe, 0x41]).unwrap();
        assert!(load_corpus(&p).is_err());
    }

    #[test]
    fn sampling_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = Corpus::from_lines(["abc"]).unwrap();
        assert_eq!(sample_text(&one, &mut rng, TextMode::Word, 10).unwrap(), "abc");
        assert!(sample_text(&one, &mut rng, TextMode::Word, 1).is_err());
        assert!(sample_text(&one, &mut rng, TextMode::Line, 2).is_err());
        let mixed = Corpus::from_lines(["abc", "x", "the quick brown fox"]).unwrap();
        for _ in 0..20 {
            assert_eq!(sample_text(&mixed, &mut rng, TextMode::Word, 1).unwrap(), "x");
            let line = sample_text(&mixed, &mut rng, TextMode::Line, 9).unwrap();
            assert!(line.chars().count() <= 9);
        }
        let a: Vec<String> = {
            let mut r = ChaCha8Rng::seed_from_u64(42);
            (0..10).map(|_| sample_text(&mixed, &mut r, TextMode::Line, 12).unwrap()).collect()
        };
        let b: Vec<String> = {
            let mut r = ChaCha8Rng::seed_from_u64(42);
            (0..10).map(|_| sample_text(&mixed, &mut r, TextMode::Line, 12).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn single_char_mask() {
        let m = rasterize_text("I", &test_font(), 24.0).unwrap();
        assert!(m.mask.count() >= 1);
        assert_eq!(m.char_boxes.len(), 1);
        assert_eq!(m.transcript, "I");
    }

    #[test]
    fn two_chars_ordered() {
        let m = rasterize_text("AB", &test_font(), 24.0).unwrap();
        assert_eq!(m.char_boxes.len(), 2);
        assert!(m.char_boxes[0].x1 <= m.char_boxes[1].x0);
    }

    #[test]
    fn mask_inside_char_boxes() {
        let m = rasterize_text("Hello, gy!", &test_font(), 19.0).unwrap();
        assert_eq!(m.char_boxes.len(), 9);
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.mask.get(x, y) {
                    assert!(m.char_boxes.iter().any(|b| b.contains_pixel(x, y)), "({x},{y})");
                }
            }
        }
        // One-pixel margin around the ink.
        let (x0, y0, x1, y1) = m.mask.bbox().unwrap();
        assert!(x0 >= 1 && y0 >= 1 && x1 < m.width() && y1 < m.height());
    }

    #[test]
    fn errors() {
        let f = test_font();
        assert!(matches!(rasterize_text("a\u{10FFFD}", &f, 20.0), Err(Error::MissingGlyph('\u{10FFFD}'))));
        assert!(rasterize_text("", &f, 20.0).is_err());
        assert!(rasterize_text("  ", &f, 20.0).is_err());
        assert!(rasterize_text("a", &f, 7.0).is_err());
    }

    #[test]
    fn deterministic_and_scale_linear() {
        let f = test_font();
        let a = rasterize_text("Wave", &f, 20.0).unwrap();
        let b = rasterize_text("Wave", &f, 20.0).unwrap();
        assert_eq!(a.mask, b.mask);
        let d = rasterize_text("Wave", &f, 40.0).unwrap();
        for (s, l) in a.char_boxes.iter().zip(&d.char_boxes) {
            assert!((l.width() - 2.0 * s.width()).abs() <= 1.0);
        }
    }
}
