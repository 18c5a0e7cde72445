//! Property tests for the invariants of each stage.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenesynth::fusion::{overlap_fractions, select_candidates, semantic_score};
use scenesynth::gan::compose_masked;
use scenesynth::geometry::{homography_from_correspondences, place_text, pt, random_homography, Quad, Rect};
use scenesynth::imaging::bilinear_sample;
use scenesynth::pipeline::Annotation;
use scenesynth::segmentation::{extract_regions, merge_similar, segment, trace_boundary};
use scenesynth::text::{load_font_dir, rasterize_text};
use scenesynth::{Mask, PlacementParams, RasterImage, RegionMap, SegmentationParams, SelectionParams, SemanticMap};

fn fonts_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/fonts")
}

fn coord() -> impl Strategy<Value = f64> {
    0.0..300.0f64
}

fn quad_points() -> impl Strategy<Value = [(f64, f64); 4]> {
    [(coord(), coord()), (coord(), coord()), (coord(), coord()), (coord(), coord())]
}

/// Pixels of a `w x h` image split into labelled rectangles.
fn label_grid() -> impl Strategy<Value = (usize, usize, Vec<u32>)> {
    (4usize..24, 4usize..24).prop_flat_map(|(w, h)| {
        (Just(w), Just(h), proptest::collection::vec(0u32..4, w * h))
    })
}

fn image() -> impl Strategy<Value = RasterImage> {
    (8usize..28, 8usize..28, any::<u64>()).prop_map(|(w, h, seed)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<[f32; 3]> = (0..4).map(|_| [0; 3].map(|_| rng.random::<f32>())).collect();
        let (sx, sy) = (rng.random_range(1..w), rng.random_range(1..h));
        RasterImage::from_fn(w, h, 3, |x, y, c| {
            let q = (x >= sx) as usize + 2 * (y >= sy) as usize;
            (cols[q][c] + 0.05 * rng.random::<f32>()).min(1.0)
        })
    })
}

/// Star-shaped blob: rectangles sharing the pixel `(cx, cy)`, so no holes.
fn blob() -> impl Strategy<Value = Mask> {
    (6usize..30, 6usize..30)
        .prop_flat_map(|(w, h)| {
            let rects = proptest::collection::vec((0..w, 0..h, 0..w, 0..h), 1..5);
            (Just(w), Just(h), 0..w, 0..h, rects)
        })
        .prop_map(|(w, h, cx, cy, rects)| {
            Mask::from_fn(w, h, |x, y| {
                rects.iter().any(|&(a, b, c, d)| {
                    let (x0, x1) = (a.min(c).min(cx), a.max(c).max(cx));
                    let (y0, y1) = (b.min(d).min(cy), b.max(d).max(cy));
                    (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
                })
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn homography_reproduces_correspondences(src in quad_points(), dst in quad_points()) {
        let s = src.map(|(x, y)| pt(x, y));
        let d = dst.map(|(x, y)| pt(x, y));
        if let Ok(h) = homography_from_correspondences(&s, &d) {
            // Exact algebra, judged relative to how close the map is to degenerate.
            let inv = h.inverse().unwrap();
            for (a, b) in s.iter().zip(&d) {
                let scale = 1.0 + h.matrix().norm() * inv.matrix().norm();
                prop_assert!((h.apply(*a) - b).norm() < 1e-9 * scale, "{:?} -> {:?}", a, b);
                prop_assert!((inv.apply(*b) - a).norm() < 1e-9 * scale);
            }
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in quad_points(), b in quad_points()) {
        let a = Quad(a.map(|(x, y)| pt(x, y)));
        let b = Quad(b.map(|(x, y)| pt(x, y)));
        prop_assume!(a.is_convex() && b.is_convex() && a.area() > 1.0 && b.area() > 1.0);
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn annotation_line_round_trips(
        pts in proptest::array::uniform8(-10_000i64..10_000),
        transcript in "[^\r\n]{0,24}",
    ) {
        let ann = Annotation {
            points: [[pts[0], pts[1]], [pts[2], pts[3]], [pts[4], pts[5]], [pts[6], pts[7]]],
            transcript,
        };
        prop_assert_eq!(Annotation::parse_line(&ann.to_line()).unwrap(), ann);
    }

    #[test]
    fn composition_keeps_background_bit_exact(
        w in 1usize..20, h in 1usize..20, seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = RasterImage::from_fn(w, h, 3, |_, _, _| rng.random::<f32>());
        let gx = RasterImage::from_fn(w, h, 3, |_, _, _| rng.random::<f32>());
        let m = Mask::from_fn(w, h, |_, _| rng.random::<bool>());
        let out = compose_masked(&gx, &m, &x).unwrap();
        for yy in 0..h {
            for xx in 0..w {
                let want = if m.get(xx, yy) { gx.pixel(xx, yy) } else { x.pixel(xx, yy) };
                prop_assert_eq!(out.pixel(xx, yy), want);
            }
        }
    }

    #[test]
    fn bilinear_sampling_is_lipschitz(img in image(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, e in 1e-4..0.5f64) {
        let x = fx * (img.width() - 1) as f64;
        let y = fy * (img.height() - 1) as f64;
        let x2 = (x + e).min((img.width() - 1) as f64);
        let (a, b) = (bilinear_sample(&img, x, y).unwrap(), bilinear_sample(&img, x2, y).unwrap());
        let mut max_diff = 0.0f32;
        for yy in 0..img.height() {
            for xx in 1..img.width() {
                for c in 0..3 {
                    max_diff = max_diff.max((img.get(xx, yy, c) - img.get(xx - 1, yy, c)).abs());
                }
            }
        }
        for c in 0..3 {
            prop_assert!((a[c] - b[c]).abs() as f64 <= 2.0 * (x2 - x) * max_diff as f64 + 1e-6);
        }
    }

    #[test]
    fn segmentation_partitions_the_image(img in image(), k in 1usize..2000) {
        let params = SegmentationParams { k_per_512: k, ..Default::default() };
        let (map, regions) = segment(&img, &params).unwrap();
        let n = img.width() * img.height();
        prop_assert_eq!(map.labels().len(), n);
        prop_assert_eq!(regions.iter().map(|r| r.area).sum::<usize>(), n);
        prop_assert!(map.is_connected());
        let mut seen = vec![0usize; n];
        for r in &regions {
            prop_assert!(r.area >= 1);
            for (x, y) in r.pixels() {
                seen[y * img.width() + x] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn merging_never_adds_regions(img in image(), t in 0.1..60.0f64) {
        let raw: Vec<u32> = (0..img.width() * img.height()).map(|i| i as u32 / 5).collect();
        let map = RegionMap::from_raw(img.width(), img.height(), &raw);
        let merged = merge_similar(&map, &img, t).unwrap();
        prop_assert!(merged.region_count() <= map.region_count());
        prop_assert_eq!(merged.areas().iter().sum::<usize>(), img.width() * img.height());
    }

    #[test]
    fn traced_boundary_is_the_border_pixel_set(m in blob()) {
        let traced: BTreeSet<(i32, i32)> = trace_boundary(&m).into_iter().collect();
        let (w, h) = (m.width() as i32, m.height() as i32);
        let set = |x: i32, y: i32| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
        let mut brute = BTreeSet::new();
        for y in 0..h {
            for x in 0..w {
                if set(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !set(x + dx, y + dy)) {
                    brute.insert((x, y));
                }
            }
        }
        prop_assert_eq!(traced, brute);
    }

    #[test]
    fn overlap_fractions_sum_to_one((w, h, ids) in label_grid(), classes in proptest::collection::vec(0u32..3, 1..600)) {
        let palette: BTreeMap<u32, String> = (0..3).map(|i| (i, format!("c{i}"))).collect();
        let cls: Vec<u32> = (0..w * h).map(|i| classes[i % classes.len()]).collect();
        let map = SemanticMap::new(w, h, cls, palette).unwrap();
        let rmap = RegionMap::from_raw(w, h, &ids);
        let img = RasterImage::filled(w, h, 3, 0.5);
        for r in extract_regions(&rmap, &img).unwrap() {
            let sum: f64 = overlap_fractions(&r, &map).unwrap().values().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_score_ignores_region_ids((w, h, ids) in label_grid(), shift in 1u32..1000) {
        let palette: BTreeMap<u32, String> = (0..4).map(|i| (i, format!("c{i}"))).collect();
        let cls: Vec<u32> = (0..w * h).map(|i| ((i * 7 + i / w) % 4) as u32).collect();
        let map = SemanticMap::new(w, h, cls, palette).unwrap();
        let img = RasterImage::filled(w, h, 3, 0.5);
        let compact = RegionMap::from_raw(w, h, &ids);
        let a = extract_regions(&compact, &img).unwrap();
        let n = compact.region_count() as u32;
        let rotated = compact.labels().iter().map(|&l| (l + shift) % n).collect();
        let b = extract_regions(&RegionMap::new(w, h, rotated).unwrap(), &img).unwrap();
        let key = |rs: &[scenesynth::Region]| {
            let mut v: Vec<(Vec<(usize, usize)>, (f64, u32))> = rs
                .iter()
                .map(|r| (r.pixels().collect(), semantic_score(r, &map).unwrap()))
                .collect();
            v.sort_by(|p, q| p.0.cmp(&q.0));
            v
        };
        prop_assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn selection_is_a_fixed_point((w, h, ids) in label_grid(), min_score in 0.0..1.0f64) {
        let palette: BTreeMap<u32, String> =
            [(0, "building"), (1, "sky"), (2, "car"), (3, "tree")].into_iter().map(|(i, n)| (i, n.to_string())).collect();
        let cls: Vec<u32> = (0..w * h).map(|i| ids[(i * 3) % ids.len()]).collect();
        let map = SemanticMap::new(w, h, cls, palette).unwrap();
        let img = RasterImage::filled(w, h, 3, 0.5);
        let regions = extract_regions(&RegionMap::from_raw(w, h, &ids), &img).unwrap();
        let params = SelectionParams { min_score, min_area_frac: 0.0, ..Default::default() };
        let first = select_candidates(&regions, &map, &params).unwrap();
        let ids1: BTreeSet<u32> = first.iter().map(|c| c.region.id).collect();
        prop_assert!(ids1.iter().all(|id| regions.iter().any(|r| r.id == *id)));
        let again: Vec<_> = first.iter().map(|c| c.region.clone()).collect();
        let second = select_candidates(&again, &map, &params).unwrap();
        let ids2: BTreeSet<u32> = second.iter().map(|c| c.region.id).collect();
        prop_assert_eq!(ids1, ids2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn placed_text_stays_inside_its_quad(
        rw in 60usize..140, rh in 30usize..70, seed in any::<u64>(), word in "[A-Z]{2,7}",
    ) {
        let (w, h) = (rw + 20, rh + 20);
        let raw: Vec<u32> = (0..w * h)
            .map(|i| { let (x, y) = (i % w, i / w); u32::from((10..10 + rw).contains(&x) && (10..10 + rh).contains(&y)) })
            .collect();
        let map = RegionMap::from_raw(w, h, &raw);
        let img = RasterImage::filled(w, h, 3, 0.5);
        let regions = extract_regions(&map, &img).unwrap();
        let region = regions.iter().find(|r| r.area == rw * rh).unwrap();
        let b = region.bbox;
        let rect = Rect { x0: b.x0 as f64, y0: b.y0 as f64, x1: b.x1 as f64, y1: b.y1 as f64 };
        let params = PlacementParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hom = random_homography(&mut rng, &rect, params.max_perturb).unwrap();
        let font = &load_font_dir(fonts_dir()).unwrap()[0];
        let text = rasterize_text(&word, font, 32.0).unwrap();
        let Ok(p) = place_text(region, &hom, &text, &params, (w, h)) else {
            return Ok(());
        };
        prop_assert!(p.quad.is_simple() && p.quad.area() > 0.0);
        let limit = (b.width() * b.height()) as f64 * (1.0 + 2.0 * params.max_perturb).powi(2);
        prop_assert!(p.quad.area() <= limit);
        for y in 0..p.mask.height() {
            for x in 0..p.mask.width() {
                if p.mask.get(x, y) {
                    let q = pt((x + p.origin.0) as f64, (y + p.origin.1) as f64);
                    prop_assert!(p.quad.distance(q) <= 2.0, "pixel {:?} outside quad {:?}", q, p.quad);
                }
            }
        }
    }
}
