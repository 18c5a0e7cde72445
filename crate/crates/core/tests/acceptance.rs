//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each; exits non-zero if any fails. Criterion 8's recognizer feeds
//! the GAN run of criterion 9, whose generator drives criterion 10.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenesynth::autodiff::{grad_check, save_checkpoint, Crop, Graph, ParamStore, Tensor, Var};
use scenesynth::fusion::{overlap_fractions, semantic_score};
use scenesynth::gan::{
    compose_masked, generator_forward, init_generator, pretrain_recognizer, toy_dataset, TrainEvent,
};
use scenesynth::geometry::{homography_from_correspondences, pt, random_homography, warp_raster, Interp, Point, Rect};
use scenesynth::imaging::load_image;
use scenesynth::pipeline::{
    annotation_path, batch_synthesize, format_annotations, image_path, image_seed, read_annotations, read_manifest,
    synthesize_one, MANIFEST_FILE,
};
use scenesynth::segmentation::{
    enforce_connectivity_with, extract_regions, merge_similar, slic_superpixels, slic_with_costs,
};
use scenesynth::text::load_font_dir;
use scenesynth::{
    Gan, GanConfig, Mask, PretrainConfig, RasterImage, Recognizer, RegionMap, Resources, SemanticMap,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn report(n: usize, name: &str, start: Instant, out: &Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match out {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    println!("criterion {n:>2} {tag}  {name}: {detail} [{secs:.1} s]");
    out.is_ok()
}

fn main() {
    let _ = env_logger::try_init();
    let mut passed = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        if report(n, name, t, &out) {
            passed += 1;
        }
    };
    run(1, "semantic score worked example", &mut c1_semantic_score);
    run(2, "masked composition exactness", &mut c2_compose);
    run(3, "homography suite", &mut c3_homography);
    run(4, "segmentation suite", &mut c4_segmentation);
    run(5, "fusion oracle", &mut c5_fusion);
    run(6, "gradient checks", &mut c6_gradients);
    run(7, "generator block sizes at scale 1", &mut c7_block_sizes);

    let mut recognizer = None;
    run(8, "recognizer pretraining", &mut || {
        let (r, msg) = c8_pretrain()?;
        recognizer = Some(r);
        Ok(msg)
    });
    let mut generator = None;
    run(9, "GAN smoke training", &mut || {
        let rec = recognizer.clone().ok_or("no pretrained recognizer from criterion 8")?;
        let (out, g) = c9_gan(rec);
        generator = g;
        out
    });
    run(10, "end-to-end determinism and validity", &mut || {
        let g = generator.as_ref().ok_or("no trained generator from criterion 9")?;
        c10_end_to_end(g)
    });

    println!("acceptance: {passed}/10 criteria passed");
    if passed != 10 {
        std::process::exit(1);
    }
}

fn c1_semantic_score() -> Outcome {
    let (w, h) = (20, 20);
    let palette: BTreeMap<u32, String> = [(0, "sky"), (1, "building")]
        .into_iter()
        .map(|(i, n)| (i, n.to_string()))
        .collect();
    // Rows 0..15 building, 15..20 sky: 300 / 400 pixels.
    let ids = (0..w * h).map(|i| if i / w < 15 { 1 } else { 0 }).collect();
    let map = SemanticMap::new(w, h, ids, palette).map_err(err)?;
    let img = RasterImage::filled(w, h, 3, 0.5);
    let regions = extract_regions(&RegionMap::new(w, h, vec![0; w * h]).map_err(err)?, &img).map_err(err)?;
    let (score, class) = semantic_score(&regions[0], &map).map_err(err)?;
    let fr = overlap_fractions(&regions[0], &map).map_err(err)?;
    ensure!(score == 0.75, "score {score}");
    ensure!(map.class_name(class) == "building", "class {}", map.class_name(class));
    ensure!(fr[&1] == 0.75 && fr[&0] == 0.25, "fractions {fr:?}");
    Ok(format!("score {score}, class {}", map.class_name(class)))
}

fn c2_compose() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (w, h) = (64, 64);
    for t in 0..100 {
        let x = RasterImage::from_fn(w, h, 3, |_, _, _| rng.random::<f32>());
        let gx = RasterImage::from_fn(w, h, 3, |_, _, _| rng.random::<f32>());
        let density = rng.random::<f64>();
        let m = Mask::from_fn(w, h, |_, _| rng.random_bool(density));
        let out = compose_masked(&gx, &m, &x).map_err(err)?;

        // The training graph blends the same way.
        let mut g = Graph::<f32>::new();
        let chw = |img: &RasterImage| {
            Tensor::from_fn(&[1, 3, h, w], |i| {
                let (c, p) = (i / (w * h), i % (w * h));
                img.get(p % w, p / w, c)
            })
        };
        let mt = Tensor::from_fn(&[1, 1, h, w], |i| if m.get(i % w, i / w) { 1.0 } else { 0.0 });
        let gv = g.input(chw(&gx)).map_err(err)?;
        let xv = g.input(chw(&x)).map_err(err)?;
        let cv = g.compose_masked(gv, xv, &mt).map_err(err)?;
        let graph_out = g.value(cv).data().to_vec();

        for y in 0..h {
            for xx in 0..w {
                let src = if m.get(xx, y) { &gx } else { &x };
                for c in 0..3 {
                    let want = src.get(xx, y, c).to_bits();
                    ensure!(out.get(xx, y, c).to_bits() == want, "triple {t}: pixel ({xx},{y},{c})");
                    ensure!(
                        graph_out[(c * h + y) * w + xx].to_bits() == want,
                        "triple {t}: graph pixel ({xx},{y},{c})"
                    );
                }
            }
        }
    }
    Ok("100 triples bit-exact (raster and graph)".into())
}

fn random_quad(rng: &mut ChaCha8Rng) -> [Point; 4] {
    let x0 = rng.random_range(0.0..256.0);
    let y0 = rng.random_range(0.0..256.0);
    let w = rng.random_range(20.0..256.0);
    let h = rng.random_range(20.0..256.0);
    let j = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-0.2 * s..0.2 * s);
    [
        pt(x0 + j(rng, w), y0 + j(rng, h)),
        pt(x0 + w + j(rng, w), y0 + j(rng, h)),
        pt(x0 + w + j(rng, w), y0 + h + j(rng, h)),
        pt(x0 + j(rng, w), y0 + h + j(rng, h)),
    ]
}

fn c3_homography() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_corr, mut worst_inv, mut worst_warp) = (0.0f64, 0.0f64, 0.0f64);
    let size = 64;
    let ramp = RasterImage::from_fn(size, size, 1, |x, y, _| (x + 2 * y) as f32 / (3 * size) as f32);
    let frame = Rect {
        x0: 0.0,
        y0: 0.0,
        x1: (size - 1) as f64,
        y1: (size - 1) as f64,
    };
    let mut n = 0;
    while n < 1000 {
        let (src, dst) = (random_quad(&mut rng), random_quad(&mut rng));
        let Ok(h) = homography_from_correspondences(&src, &dst) else {
            continue;
        };
        n += 1;
        for (s, d) in src.iter().zip(&dst) {
            worst_corr = worst_corr.max((h.apply(*s) - d).norm());
        }
        let inv = h.inverse().map_err(err)?;
        let p = h.matrix() * inv.matrix();
        let p = p / p[(2, 2)];
        worst_inv = worst_inv.max((p - Matrix3::identity()).abs().max());

        let hw = random_homography(&mut rng, &frame, 0.15).map_err(err)?;
        let fwd = warp_raster(&ramp, &hw, size, size, Interp::Bilinear).map_err(err)?;
        let back = warp_raster(&fwd, &hw.inverse().map_err(err)?, size, size, Interp::Bilinear).map_err(err)?;
        // Interior: pixels whose round trip stays two pixels clear of every border.
        let inside = |q: Point| q.x >= 2.0 && q.y >= 2.0 && q.x <= (size - 3) as f64 && q.y <= (size - 3) as f64;
        let (mut sum, mut count) = (0.0f64, 0usize);
        for y in 0..size {
            for x in 0..size {
                let q = pt(x as f64, y as f64);
                if inside(q) && inside(hw.apply(q)) {
                    sum += (back.get(x, y, 0) - ramp.get(x, y, 0)).abs() as f64;
                    count += 1;
                }
            }
        }
        ensure!(count > 0, "warp {n}: empty interior");
        worst_warp = worst_warp.max(sum / count as f64);
    }
    ensure!(worst_corr < 1e-9, "correspondence error {worst_corr:e}");
    ensure!(worst_inv < 1e-9, "H·H⁻¹ deviation {worst_inv:e}");
    ensure!(worst_warp < 0.02, "ramp round-trip error {worst_warp}");
    Ok(format!(
        "1000 H: correspondence {worst_corr:.1e}, inverse {worst_inv:.1e}, worst ramp error {worst_warp:.4}"
    ))
}

fn random_image(rng: &mut ChaCha8Rng) -> RasterImage {
    let w = rng.random_range(24..=64);
    let h = rng.random_range(24..=64);
    let rects: Vec<([usize; 4], [f32; 3])> = (0..rng.random_range(1..6))
        .map(|_| {
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            let r = [x0, y0, rng.random_range(x0..=w), rng.random_range(y0..=h)];
            (r, [0; 3].map(|_| rng.random::<f32>()))
        })
        .collect();
    let bg = [0; 3].map(|_| rng.random::<f32>());
    let noise = rng.random_range(0.0..0.1f32);
    RasterImage::from_fn(w, h, 3, |x, y, c| {
        let base = rects
            .iter()
            .rev()
            .find(|(r, _)| x >= r[0] && y >= r[1] && x < r[2] && y < r[3])
            .map_or(bg[c], |(_, col)| col[c]);
        (base + noise * (((x * 7 + y * 13 + c * 5) % 17) as f32 / 17.0 - 0.5)).clamp(0.0, 1.0)
    })
}

fn check_partition(map: &RegionMap, stage: &str) -> Result<(), String> {
    let n = map.region_count();
    ensure!(map.labels().len() == map.width() * map.height(), "{stage}: label buffer size");
    ensure!(map.labels().iter().all(|&l| (l as usize) < n), "{stage}: label out of range");
    let areas = map.areas();
    ensure!(areas.iter().all(|&a| a >= 1), "{stage}: empty label");
    ensure!(
        areas.iter().sum::<usize>() == map.width() * map.height(),
        "{stage}: areas do not sum to pixel count"
    );
    Ok(())
}

/// Every label of `fine` lies inside a single label of `coarse`.
fn is_coarsening(fine: &RegionMap, coarse: &RegionMap) -> bool {
    let mut owner = vec![u32::MAX; fine.region_count()];
    fine.labels().iter().zip(coarse.labels()).all(|(&f, &c)| {
        let o = &mut owner[f as usize];
        if *o == u32::MAX {
            *o = c;
        }
        *o == c
    })
}

fn c4_segmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..50 {
        let img = random_image(&mut rng);
        let (w, h) = (img.width(), img.height());
        let k = rng.random_range(4..40);
        let (slic, costs) = slic_with_costs(&img, k, 10.0, 10).map_err(err)?;
        check_partition(&slic, &format!("image {i} slic"))?;
        ensure!(slic.region_count() <= k, "image {i}: {} clusters for k={k}", slic.region_count());
        ensure!(
            costs.windows(2).all(|c| c[1] <= c[0] * (1.0 + 1e-12)),
            "image {i}: SLIC cost increased {costs:?}"
        );
        let conn = enforce_connectivity_with(&slic, w * h / k / 4);
        check_partition(&conn, &format!("image {i} connectivity"))?;
        ensure!(conn.is_connected(), "image {i}: disconnected label after connectivity");
        let mut prev = conn.clone();
        for t in [1.0, 4.0, 8.0, 16.0, 64.0] {
            let merged = merge_similar(&conn, &img, t).map_err(err)?;
            check_partition(&merged, &format!("image {i} merge {t}"))?;
            ensure!(
                merged.region_count() <= prev.region_count(),
                "image {i}: merge at {t} increased region count"
            );
            ensure!(is_coarsening(&prev, &merged), "image {i}: merge at {t} is not a coarsening");
            prev = merged;
        }
        let regions = extract_regions(&prev, &img).map_err(err)?;
        ensure!(regions.len() == prev.region_count(), "image {i}: region list length");
        ensure!(
            regions.iter().map(|r| r.area).sum::<usize>() == w * h,
            "image {i}: extracted areas do not sum to pixel count"
        );
        for r in &regions {
            ensure!(
                r.pixels().all(|(x, y)| prev.label(x, y) == r.id) && r.pixels().count() == r.area,
                "image {i}: region {} membership",
                r.id
            );
        }

        let single = slic_superpixels(&img, 1, 10.0, 10).map_err(err)?;
        ensure!(single.region_count() == 1, "image {i}: k=1 gave {} regions", single.region_count());
    }

    let halves = RasterImage::from_fn(64, 64, 3, |x, _, _| if x < 32 { 0.0 } else { 1.0 });
    let map = slic_superpixels(&halves, 2, 10.0, 10).map_err(err)?;
    ensure!(map.region_count() == 2, "two halves gave {} regions", map.region_count());
    for y in 0..64 {
        let left = map.label(0, y);
        let edge = (0..64).find(|&x| map.label(x, y) != left).unwrap_or(64);
        ensure!((31..=33).contains(&edge), "row {y}: boundary at column {edge}");
        ensure!((edge..64).all(|x| map.label(x, y) != left), "row {y}: ragged boundary");
    }
    Ok("50 random images: partition, area, connectivity, merge monotone; k=1; halves split at 32±1".into())
}

fn c5_fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let palette: BTreeMap<u32, String> = (0..5).map(|i| (i, format!("class{i}"))).collect();
    for t in 0..50 {
        let w = rng.random_range(1..=64);
        let h = rng.random_range(1..=64);
        let ids: Vec<u32> = (0..w * h).map(|_| rng.random_range(0..5)).collect();
        let map = SemanticMap::new(w, h, ids, palette.clone()).map_err(err)?;
        // Voronoi regions from a few random seeds.
        let seeds: Vec<(f64, f64)> = (0..rng.random_range(1..6))
            .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
            .collect();
        let raw: Vec<u32> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (0..seeds.len())
                    .min_by(|&a, &b| {
                        let d = |s: (f64, f64)| (s.0 - x).powi(2) + (s.1 - y).powi(2);
                        d(seeds[a]).total_cmp(&d(seeds[b]))
                    })
                    .unwrap() as u32
            })
            .collect();
        let rmap = RegionMap::from_raw(w, h, &raw);
        let img = RasterImage::filled(w, h, 3, 0.5);
        let regions = extract_regions(&rmap, &img).map_err(err)?;
        let r = &regions[rng.random_range(0..regions.len())];

        let mut tally: BTreeMap<u32, usize> = BTreeMap::new();
        let mut total = 0usize;
        for y in 0..h {
            for x in 0..w {
                if rmap.label(x, y) == r.id {
                    *tally.entry(map.class_at(x, y)).or_default() += 1;
                    total += 1;
                }
            }
        }
        let want: BTreeMap<u32, f64> = tally.into_iter().map(|(c, n)| (c, n as f64 / total as f64)).collect();
        let got = overlap_fractions(r, &map).map_err(err)?;
        ensure!(got == want, "pair {t}: {got:?} vs {want:?}");
    }
    Ok("50 pairs equal the brute-force tally exactly".into())
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// Bounded away from zero so activation kinks stay outside the stencil.
fn rand_nz(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> scenesynth::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(y).len() as f64;
    let r = g.constant(Tensor::from_fn(g.shape(y), |_| rng.random_range(-1.0..1.0) / n.sqrt()))?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

type Build = Arc<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> scenesynth::Result<Var>>;

fn c6_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for round in 0..20u64 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let h = rng.random_range(3..7);
        let w = rng.random_range(3..7);
        let co = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..k);
        let op = if stride > 1 { rng.random_range(0..stride) } else { 0 };
        let mut s = ParamStore::new();
        s.insert("x", rand_nz(&mut rng, &[n, c, h, w]));
        s.insert("x3", rand_t(&mut rng, &[n, 3, h, w]));
        s.insert("wc", rand_t(&mut rng, &[co, c, k, k]));
        s.insert("wt", rand_t(&mut rng, &[c, co, k, k]));
        s.insert("b", rand_t(&mut rng, &[co]));
        s.insert("wl", rand_t(&mut rng, &[co, c * h * w]));
        s.insert("y", rand_t(&mut rng, &[n, c, h, w]));
        s.insert("z", rand_t(&mut rng, &[n, co, h, w]));
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..co)).collect();
        let mask = Tensor::from_fn(&[n, 1, h, w], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let crops: Vec<Crop> = (0..3)
            .map(|_| {
                let x0 = rng.random_range(-1.0..w as f64 / 2.0);
                let y0 = rng.random_range(-1.0..h as f64 / 2.0);
                Crop {
                    batch: rng.random_range(0..n),
                    x0,
                    y0,
                    x1: x0 + rng.random_range(1.0..w as f64),
                    y1: y0 + rng.random_range(1.0..h as f64),
                }
            })
            .collect();
        let seed = round;
        let builds: Vec<(&str, Build)> = vec![
            ("conv2d", Arc::new(move |g, s| {
                let (x, wc, b) = (g.param(s, "x")?, g.param(s, "wc")?, g.param(s, "b")?);
                let y = g.conv2d(x, wc, Some(b), stride, pad)?;
                probe(g, y, seed)
            })),
            ("conv_transpose2d", Arc::new(move |g, s| {
                let (x, wt, b) = (g.param(s, "x")?, g.param(s, "wt")?, g.param(s, "b")?);
                let y = g.conv_transpose2d(x, wt, Some(b), stride, pad, op)?;
                probe(g, y, seed)
            })),
            ("leaky_relu", Arc::new(move |g, s| {
                let x = g.param(s, "x")?;
                let y = g.leaky_relu(x, 0.2)?;
                probe(g, y, seed)
            })),
            ("sigmoid", Arc::new(move |g, s| {
                let x = g.param(s, "y")?;
                let y = g.sigmoid(x)?;
                probe(g, y, seed)
            })),
            ("linear+flatten", Arc::new(move |g, s| {
                let x = g.param(s, "y")?;
                let x = g.flatten(x)?;
                let (wl, b) = (g.param(s, "wl")?, g.param(s, "b")?);
                let y = g.linear(x, wl, Some(b))?;
                probe(g, y, seed)
            })),
            ("reshape", Arc::new(move |g, s| {
                let x = g.param(s, "y")?;
                let y = g.reshape(x, &[n * c, h * w])?;
                probe(g, y, seed)
            })),
            ("spatial_mean+mean", Arc::new(move |g, s| {
                let x = g.param(s, "y")?;
                let m = g.spatial_mean(x)?;
                let q = g.mul(m, m)?;
                g.mean(q)
            })),
            ("concat_channels", Arc::new(move |g, s| {
                let (a, b) = (g.param(s, "y")?, g.param(s, "z")?);
                let y = g.concat_channels(a, b)?;
                probe(g, y, seed)
            })),
            ("add/sub/mul/scale", Arc::new(move |g, s| {
                let (a, b) = (g.param(s, "y")?, g.param(s, "x")?);
                let p = g.add(a, b)?;
                let q = g.sub(a, b)?;
                let r = g.mul(p, q)?;
                let r = g.scale(r, 1.7)?;
                probe(g, r, seed)
            })),
            ("softmax_cross_entropy", Arc::new({
                let targets = targets.clone();
                move |g, s| {
                    let x = g.param(s, "y")?;
                    let x = g.flatten(x)?;
                    let (wl, b) = (g.param(s, "wl")?, g.param(s, "b")?);
                    let logits = g.linear(x, wl, Some(b))?;
                    g.softmax_cross_entropy(logits, &targets)
                }
            })),
            ("crop_resize", Arc::new({
                let crops = crops.clone();
                move |g, s| {
                    let x = g.param(s, "y")?;
                    let y = g.crop_resize(x, &crops, 4, 3)?;
                    probe(g, y, seed)
                }
            })),
            ("gray", Arc::new(move |g, s| {
                let x = g.param(s, "x3")?;
                let y = g.gray(x)?;
                probe(g, y, seed)
            })),
            ("compose_masked", Arc::new({
                let mask = mask.clone();
                move |g, s| {
                    let (a, b) = (g.param(s, "y")?, g.param(s, "x")?);
                    let y = g.compose_masked(a, b, &mask)?;
                    probe(g, y, seed)
                }
            })),
        ];
        for (name, build) in builds {
            let r = grad_check(&s, 1e-5, None, 0, |g, s| build(g, s)).map_err(|e| format!("{name}: {e}"))?;
            let e = worst.entry(name).or_default();
            *e = e.max(r.max_rel_error);
        }
    }
    for (name, e) in &worst {
        ensure!(*e < 1e-4, "{name}: max relative error {e:e}");
    }
    let prim = worst.values().cloned().fold(0.0, f64::max);

    let mut s = init_generator(0.25, 6).map_err(err)?.cast::<f64>();
    let total = s.num_elements();
    s.insert("input", Tensor::from_fn(&[2, 4, 16, 16], |_| rng.random_range(0.0..1.0)));
    let r = grad_check(&s, 1e-5, Some(1500), 6, |g, s| {
        let x = g.param(s, "input")?;
        let out = generator_forward(g, s, x, true)?;
        probe(g, out.image, 99)
    })
    .map_err(err)?;
    ensure!(r.max_rel_error < 1e-4, "generator: {r:?}");
    Ok(format!(
        "{} primitives over 20 shapes worst {prim:.1e}; generator ({total} params, {} coords sampled) {:.1e}",
        worst.len(),
        r.checked,
        r.max_rel_error
    ))
}

fn c7_block_sizes() -> Outcome {
    let p = init_generator(1.0, 7).map_err(err)?;
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::filled(&[1, 4, 256, 256], 0.5)).map_err(err)?;
    let out = generator_forward(&mut g, &p, x, false).map_err(err)?;
    let shapes: Vec<Vec<usize>> = out.blocks.iter().map(|b| g.shape(*b).to_vec()).collect();
    let sizes: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
    let channels: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
    ensure!(sizes == [256, 128, 64, 64, 128, 256, 256], "sizes {sizes:?}");
    ensure!(channels == [64, 128, 256, 256, 128, 64, 3], "channels {channels:?}");
    ensure!(shapes.iter().all(|s| s[2] == s[3]), "non-square block output {shapes:?}");
    Ok(format!("sizes {sizes:?}, channels {channels:?}"))
}

fn c8_pretrain() -> Result<(Recognizer, String), String> {
    let fonts = load_font_dir(common::fonts_dir()).map_err(err)?;
    let cfg = PretrainConfig::default();
    let (rec, rep) = pretrain_recognizer(&fonts, &cfg).map_err(err)?;
    let classes = rec.alphabet().len();
    let msg = format!(
        "{:.1}% on {} held-out glyphs, {classes} classes, {} fonts, {} epochs",
        100.0 * rep.heldout_accuracy,
        rep.heldout_size,
        fonts.len(),
        rep.epochs
    );
    ensure!(fonts.len() >= 5, "only {} fonts", fonts.len());
    ensure!(classes >= 36, "only {classes} classes");
    ensure!(rep.heldout_accuracy >= 0.95, "{msg}");
    Ok((rec, msg))
}

fn c9_gan(rec: Recognizer) -> (Outcome, Option<ParamStore<f32>>) {
    let run = || -> Result<(String, Gan), String> {
        let fonts = load_font_dir(common::fonts_dir()).map_err(err)?;
        let size = 16;
        let (samples, reals) = toy_dataset(&fonts, rec.alphabet(), size, 256, 256, 7).map_err(err)?;
        let (eval_x, eval_y) = toy_dataset(&fonts, rec.alphabet(), size, 128, 128, 8).map_err(err)?;
        let cfg = GanConfig {
            crop_size: size,
            iterations: 2000,
            lambda_s: 0.01,
            ..GanConfig::default()
        };
        ensure!(cfg.scale == 0.25, "scale {}", cfg.scale);
        let clip = cfg.clip as f32;
        let warmup_end = cfg.warmup_iterations - 1;
        let last = cfg.iterations - 1;
        let r_bytes = rec.checkpoint_bytes();
        let mut gan = Gan::new(cfg, rec).map_err(err)?;

        let mut critic_steps = 0usize;
        let mut clip_violation: Option<String> = None;
        let mut r_changed: Option<usize> = None;
        let mut l_s: Vec<f64> = Vec::new();
        let (mut w_start, mut w_end) = (None, None);
        gan.train_observed(&samples, &reals, None, None, &mut |gan, ev| {
            match ev {
                TrainEvent::CriticStep { iteration } => {
                    critic_steps += 1;
                    let (d, f) = (gan.critic.max_abs(), gan.feature_critic.max_abs());
                    if (d > clip || f > clip) && clip_violation.is_none() {
                        clip_violation = Some(format!("iteration {iteration}: |D| {d}, |D_F| {f}"));
                    }
                }
                TrainEvent::GeneratorStep { iteration, losses } => {
                    l_s.push(losses.l_s);
                    if r_changed.is_none() && gan.recognizer().checkpoint_bytes() != r_bytes {
                        r_changed = Some(iteration);
                    }
                    if iteration == warmup_end {
                        w_start = Some(gan.critic_estimate(&eval_x, &eval_y)?.0);
                    }
                    if iteration == last {
                        w_end = Some(gan.critic_estimate(&eval_x, &eval_y)?.0);
                    }
                }
            }
            Ok(())
        })
        .map_err(err)?;

        let (w0, w1) = (w_start.ok_or("no start estimate")?, w_end.ok_or("no end estimate")?);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let s0 = mean(&l_s[..25]);
        let s1 = mean(&l_s[l_s.len() - 100..]);
        let reduction = 1.0 - s1 / s0;
        let msg = format!(
            "W {w0:.5} -> {w1:.5}; L_S {s0:.3} -> {s1:.3} ({:.0}% lower); {critic_steps} critic steps clipped; R unchanged",
            100.0 * reduction
        );
        ensure!(clip_violation.is_none(), "clip bound violated at {}", clip_violation.unwrap());
        ensure!(r_changed.is_none(), "recognizer changed at iteration {}", r_changed.unwrap());
        ensure!(w1 < w0, "W did not decrease: {msg}");
        ensure!(reduction >= 0.2, "L_S reduction below 20%: {msg}");
        Ok((msg, gan))
    };
    match run() {
        Ok((msg, gan)) => (Ok(msg), Some(gan.generator)),
        Err(e) => (Err(e), None),
    }
}

fn c10_end_to_end(generator: &ParamStore<f32>) -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let gpath = root.join("generator.ckpt");
    save_checkpoint(generator, &gpath).map_err(err)?;
    let mut cfg = common::write_inputs(&root.join("inputs"), 10, 160, 120);
    cfg.paths.generator = Some(gpath);
    cfg.generator_input = 16;

    let run = |name: &str, workers: usize| -> Result<BTreeMap<std::path::PathBuf, Vec<u8>>, String> {
        let mut c = cfg.clone();
        c.workers = workers;
        c.paths.output = root.join(name);
        let s = batch_synthesize(&c).map_err(err)?;
        ensure!(s.failures.is_empty(), "{name}: failures {:?}", s.failures);
        Ok(common::tree_bytes(&c.paths.output))
    };
    let a = run("run_a", 1)?;
    let b = run("run_b", 1)?;
    let c = run("run_c", 4)?;
    ensure!(a == b, "two sequential runs differ");
    ensure!(a == c, "workers 1 and 4 differ");

    let out = root.join("run_a");
    let res = Resources::load(&cfg).map_err(err)?;
    let rows = read_manifest(&out.join(MANIFEST_FILE)).map_err(err)?;
    ensure!(rows.len() == 10, "manifest has {} rows", rows.len());
    let mut total = 0;
    for row in &rows {
        let ann_path = annotation_path(&out, &row.stem);
        let anns = read_annotations(&ann_path).map_err(err)?;
        let text = std::fs::read_to_string(&ann_path).map_err(err)?;
        ensure!(format_annotations(&anns) == text, "{}: annotation round trip", row.stem);
        ensure!(anns.len() == row.instances && row.instances <= 15, "{}: {} instances", row.stem, anns.len());
        total += anns.len();

        let bg_path = cfg.paths.backgrounds.join(format!("{}.png", row.stem));
        let bg = load_image(&bg_path).map_err(err)?;
        let map_path = cfg.paths.semantic_maps.join(format!("{}.png", row.stem));
        let semantic = scenesynth::fusion::load_semantic_map(&map_path, &cfg.paths.palette).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, &row.stem));
        let rec = synthesize_one(&bg, &semantic, &res, &cfg, &mut rng).map_err(err)?;
        ensure!(rec.annotations().map_err(err)? == anns, "{}: annotations differ from re-synthesis", row.stem);
        for inst in &rec.instances {
            let q = &inst.quad;
            let inb = q.vertices().iter().all(|v| v.x >= -0.5 && v.y >= -0.5 && v.x <= 159.5 && v.y <= 119.5);
            ensure!(q.is_simple() && q.area() > 0.0 && inb, "{}: invalid quad {q:?}", row.stem);
        }
        let output = load_image(image_path(&out, &row.stem)).map_err(err)?;
        let support = rec.text_mask.dilate(1);
        for y in 0..bg.height() {
            for x in 0..bg.width() {
                if !support.get(x, y) && output.pixel(x, y) != bg.pixel(x, y) {
                    return Err(format!("{}: background changed at ({x},{y})", row.stem));
                }
            }
        }
    }
    ensure!(total > 0, "no text placed in any image");
    Ok(format!(
        "10 images, {total} instances; byte-identical across runs and worker counts; annotations lossless; background preserved"
    ))
}
