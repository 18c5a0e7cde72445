//! Fusion of contour regions with an externally produced semantic label map.
//!
//! Every contour region gets a class histogram from the semantic map; its
//! score is the largest class fraction and its class the one attaining it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::Region;

/// Per-pixel semantic class ids with an id → name palette.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    width: usize,
    height: usize,
    class_ids: Vec<u32>,
    palette: BTreeMap<u32, String>,
}

impl SemanticMap {
    pub fn new(
        width: usize,
        height: usize,
        class_ids: Vec<u32>,
        palette: BTreeMap<u32, String>,
    ) -> Result<Self> {
        if class_ids.len() != width * height {
            return Err(Error::invalid("class id buffer does not match dimensions"));
        }
        if let Some(&bad) = class_ids.iter().find(|id| !palette.contains_key(id)) {
            return Err(Error::UnknownClassIndex(bad));
        }
        Ok(Self {
            width,
            height,
            class_ids,
            palette,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn palette(&self) -> &BTreeMap<u32, String> {
        &self.palette
    }

    #[inline]
    pub fn class_at(&self, x: usize, y: usize) -> u32 {
        self.class_ids[y * self.width + x]
    }

    pub fn class_name(&self, id: u32) -> &str {
        &self.palette[&id]
    }

    pub fn class_id(&self, name: &str) -> Option<u32> {
        self.palette.iter().find(|(_, n)| n.as_str() == name).map(|(&i, _)| i)
    }

    /// Write the ids as an 8-bit grayscale PNG (ids must be < 256).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.class_ids.iter().any(|&i| i > 255) {
            return Err(Error::invalid("class ids above 255 cannot be stored in 8 bits"));
        }
        let bytes: Vec<u8> = self.class_ids.iter().map(|&i| i as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Encode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Parse a palette file: one `index<TAB>class_name` per line; blank lines and
/// `#` comments are skipped.
pub fn load_palette(path: impl AsRef<Path>) -> Result<BTreeMap<u32, String>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut palette = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (idx, name) = trimmed
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `index<TAB>class_name`"))?;
        let idx: u32 = idx.trim().parse().map_err(|_| parse_err("index is not an integer"))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(parse_err("empty class name"));
        }
        if palette.insert(idx, name.to_string()).is_some() {
            return Err(parse_err("duplicate index"));
        }
    }
    if palette.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: "palette is empty".into(),
        });
    }
    Ok(palette)
}

pub fn write_palette(path: impl AsRef<Path>, palette: &BTreeMap<u32, String>) -> Result<()> {
    let path = path.as_ref();
    let body: String = palette.iter().map(|(i, n)| format!("{i}\t{n}\n")).collect();
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Load an indexed (or 8/16-bit grayscale) PNG of class ids plus its palette.
pub fn load_semantic_map(image_path: impl AsRef<Path>, palette_path: impl AsRef<Path>) -> Result<SemanticMap> {
    let image_path = image_path.as_ref();
    let palette = load_palette(palette_path)?;
    let decode_err = |reason: String| Error::Decode {
        path: image_path.to_path_buf(),
        reason,
    };
    let file = std::fs::File::open(image_path).map_err(|e| Error::io(image_path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let ids: Vec<u32> = match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {
            buf[..w * h].iter().map(|&b| b as u32).collect()
        }
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect(),
        (png::ColorType::Indexed | png::ColorType::Grayscale, depth) => {
            let bits = depth as usize;
            let stride = info.line_size;
            (0..h)
                .flat_map(|y| {
                    let row = &buf[y * stride..(y + 1) * stride];
                    (0..w).map(move |x| {
                        let bit = x * bits;
                        let byte = row[bit / 8];
                        let shift = 8 - bits - (bit % 8);
                        ((byte >> shift) & ((1u8 << bits) - 1)) as u32
                    })
                })
                .collect()
        }
        (ct, _) => return Err(decode_err(format!("semantic maps must be indexed or grayscale, got {ct:?}"))),
    };
    SemanticMap::new(w, h, ids, palette)
}

/// Pixel count per class id for the pixels of `region`.
pub fn overlap_counts(region: &Region, map: &SemanticMap) -> Result<BTreeMap<u32, usize>> {
    if region.area == 0 {
        return Err(Error::invalid("region is empty"));
    }
    if region.bbox.x1 > map.width || region.bbox.y1 > map.height {
        return Err(Error::invalid("region extends outside the semantic map"));
    }
    let mut counts = BTreeMap::new();
    for (x, y) in region.pixels() {
        *counts.entry(map.class_at(x, y)).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Fraction of the region's pixels covered by each class id.
pub fn overlap_fractions(region: &Region, map: &SemanticMap) -> Result<BTreeMap<u32, f64>> {
    let counts = overlap_counts(region, map)?;
    let total: usize = counts.values().sum();
    Ok(counts
        .into_iter()
        .map(|(c, n)| (c, n as f64 / total as f64))
        .collect())
}

/// Top class fraction and its class id. Ties go to the larger pixel overlap,
/// then the smaller class id.
pub fn semantic_score(region: &Region, map: &SemanticMap) -> Result<(f64, u32)> {
    let counts = overlap_counts(region, map)?;
    let total: usize = counts.values().sum();
    let (&id, &n) = counts
        .iter()
        .max_by(|(ia, na), (ib, nb)| {
            let fa = **na as f64 / total as f64;
            let fb = **nb as f64 / total as f64;
            fa.total_cmp(&fb).then(na.cmp(nb)).then(ib.cmp(ia))
        })
        .expect("non-empty region");
    Ok((n as f64 / total as f64, id))
}

/// A region that passed semantic filtering.
#[derive(Clone, Debug)]
pub struct CandidateRegion {
    pub region: Region,
    pub score: f64,
    pub class_id: u32,
    pub dominant_class: String,
    pub class_fractions: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    pub whitelist: BTreeSet<String>,
    pub min_score: f64,
    pub min_area_frac: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            whitelist: ["signboard", "building", "wall", "car", "door", "board"]
                .into_iter()
                .map(String::from)
                .collect(),
            min_score: 0.6,
            min_area_frac: 0.005,
        }
    }
}

/// Keep whitelisted, high-scoring, large-enough regions; best first.
pub fn select_candidates(
    regions: &[Region],
    map: &SemanticMap,
    params: &SelectionParams,
) -> Result<Vec<CandidateRegion>> {
    if params.whitelist.is_empty() {
        return Err(Error::Config("semantic whitelist is empty".into()));
    }
    if !(0.0..=1.0).contains(&params.min_score) || !(0.0..=1.0).contains(&params.min_area_frac) {
        return Err(Error::Config("min_score and min_area_frac must lie in [0,1]".into()));
    }
    let min_area = params.min_area_frac * (map.width * map.height) as f64;
    let mut out = Vec::new();
    for region in regions {
        if (region.area as f64) < min_area {
            continue;
        }
        let (score, class_id) = semantic_score(region, map)?;
        let name = map.class_name(class_id);
        if score < params.min_score || !params.whitelist.contains(name) {
            continue;
        }
        let class_fractions = overlap_fractions(region, map)?
            .into_iter()
            .map(|(c, f)| (map.class_name(c).to_string(), f))
            .collect();
        out.push(CandidateRegion {
            region: region.clone(),
            score,
            class_id,
            dominant_class: name.to_string(),
            class_fractions,
        });
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.region.area.cmp(&a.region.area))
            .then(a.region.id.cmp(&b.region.id))
    });
    Ok(out)
}
