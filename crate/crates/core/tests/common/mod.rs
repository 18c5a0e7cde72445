#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenesynth::fusion::write_palette;
use scenesynth::{RasterImage, SemanticMap, SynthesisConfig};

pub const SKY: u32 = 0;
pub const BUILDING: u32 = 1;
pub const TREE: u32 = 2;

pub fn fonts_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/fonts")
}

pub fn palette() -> BTreeMap<u32, String> {
    [(SKY, "sky"), (BUILDING, "building"), (TREE, "tree")]
        .into_iter()
        .map(|(i, n)| (i, n.to_string()))
        .collect()
}

/// Sky band, one or two flat building facades, a strip of trees, light noise.
pub fn scene(w: usize, h: usize, seed: u64) -> (RasterImage, SemanticMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = h / 4 + rng.random_range(0..h / 8);
    let ground = h - h / 6;
    let split = w / 3 + rng.random_range(0..w / 3);
    let facade = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.15..0.85f32));
    let (a, b) = (facade(&mut rng), facade(&mut rng));
    let mut ids = vec![SKY; w * h];
    let noise: Vec<f32> = (0..w * h * 3).map(|_| rng.random_range(-0.015..0.015f32)).collect();
    let img = RasterImage::from_fn(w, h, 3, |x, y, c| {
        let base = if y < horizon {
            [0.55, 0.7, 0.95][c] + 0.1 * y as f32 / horizon as f32
        } else if y < ground {
            ids[y * w + x] = BUILDING;
            if x < split { a[c] } else { b[c] }
        } else {
            ids[y * w + x] = TREE;
            [0.15, 0.45, 0.12][c]
        };
        (base + noise[(y * w + x) * 3 + c]).clamp(0.0, 1.0)
    });
    let map = SemanticMap::new(w, h, ids, palette()).unwrap();
    (img, map)
}

pub const CORPUS: &str = "OPEN 24 HOURS\nHOTEL CENTRAL\nEXIT\nCAFE ROMA\nPARKING\nSALE 50\nBAKERY\nNO ENTRY\nPHARMACY\nBUS STOP 12\n";

/// Write `n` scenes plus palette and corpus under `root`; returns a config
/// pointing at them with output in `root/out`.
pub fn write_inputs(root: &Path, n: usize, w: usize, h: usize) -> SynthesisConfig {
    let bg = root.join("backgrounds");
    let maps = root.join("maps");
    std::fs::create_dir_all(&bg).unwrap();
    std::fs::create_dir_all(&maps).unwrap();
    for i in 0..n {
        let (img, map) = scene(w, h, 1000 + i as u64);
        img.save_png(bg.join(format!("scene_{i:02}.png"))).unwrap();
        map.save_png(maps.join(format!("scene_{i:02}.png"))).unwrap();
    }
    write_palette(root.join("palette.tsv"), &palette()).unwrap();
    std::fs::write(root.join("corpus.txt"), CORPUS).unwrap();
    let mut cfg = SynthesisConfig::default();
    cfg.paths.backgrounds = bg;
    cfg.paths.semantic_maps = maps;
    cfg.paths.palette = root.join("palette.tsv");
    cfg.paths.corpus = root.join("corpus.txt");
    cfg.paths.fonts = fonts_dir();
    cfg.paths.output = root.join("out");
    cfg.seed = 42;
    cfg
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
