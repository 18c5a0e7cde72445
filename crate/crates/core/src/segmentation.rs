//! Gradient-homogeneous region segmentation: SLIC superpixels, connectivity
//! enforcement, agglomerative colour merging and boundary tracing.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{rgb_to_lab, LabColor, LabImage, Mask, RasterImage};

/// One region id per pixel, ids compact in `[0, region_count)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    region_count: usize,
}

impl RegionMap {
    /// Validate a label buffer: every id in `[0, max]` must be used.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::invalid("label buffer does not match dimensions"));
        }
        let count = *labels.iter().max().unwrap() as usize + 1;
        let mut used = vec![false; count];
        for &l in &labels {
            used[l as usize] = true;
        }
        if let Some(missing) = used.iter().position(|u| !u) {
            return Err(Error::invalid(format!("label {missing} is unused")));
        }
        Ok(Self {
            width,
            height,
            labels,
            region_count: count,
        })
    }

    /// Relabel arbitrary ids compactly in order of first appearance.
    pub fn from_raw(width: usize, height: usize, raw: &[u32]) -> Self {
        assert_eq!(raw.len(), width * height);
        let mut remap = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&r| {
                let next = remap.len() as u32;
                *remap.entry(r).or_insert(next)
            })
            .collect();
        Self {
            width,
            height,
            labels,
            region_count: remap.len(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.region_count];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }

    /// True when every label's pixels form one 4-connected component.
    pub fn is_connected(&self) -> bool {
        let (_, n) = connected_components(self);
        n == self.region_count
    }

    /// Dump the labels as an 8-bit indexed PNG (ids modulo 256) with a
    /// deterministic pseudo-random palette.
    pub fn save_indexed_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(
            std::io::BufWriter::new(file),
            self.width as u32,
            self.height as u32,
        );
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        let palette: Vec<u8> = (0u32..256)
            .flat_map(|i| {
                let h = i.wrapping_mul(2_654_435_761);
                [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
            })
            .collect();
        enc.set_palette(palette);
        let bytes: Vec<u8> = self.labels.iter().map(|&l| (l % 256) as u8).collect();
        let encode_err = |e: png::EncodingError| Error::Encode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = enc.write_header().map_err(encode_err)?;
        w.write_image_data(&bytes).map_err(encode_err)
    }
}

/// SLIC defaults scaled for image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    /// Superpixel count for a 512x512 image; scaled by pixel count.
    pub k_per_512: usize,
    pub compactness: f64,
    pub iterations: usize,
    pub merge_delta_e: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            k_per_512: 300,
            compactness: 10.0,
            iterations: 10,
            merge_delta_e: 8.0,
        }
    }
}

impl SegmentationParams {
    pub fn k_for(&self, pixels: usize) -> usize {
        let k = (self.k_per_512 as f64 * pixels as f64 / (512.0 * 512.0)).round() as usize;
        k.clamp(1, pixels)
    }
}

/// Full contour segmentation: SLIC, connectivity, colour merging, tracing.
pub fn segment(image: &RasterImage, params: &SegmentationParams) -> Result<(RegionMap, Vec<Region>)> {
    let k = params.k_for(image.pixel_count());
    let map = slic_superpixels(image, k, params.compactness, params.iterations)?;
    let min_size = image.pixel_count() / k / 4;
    let map = enforce_connectivity_with(&map, min_size);
    let map = merge_similar(&map, image, params.merge_delta_e)?;
    let regions = extract_regions(&map, image)?;
    Ok((map, regions))
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

struct SlicState<'a> {
    lab: &'a LabImage,
    step: f64,
    spatial_weight: f64,
}

impl SlicState<'_> {
    #[inline]
    fn dist2(&self, c: &Center, x: usize, y: usize) -> f64 {
        let p = self.lab.at(x, y);
        let (dl, da, db) = (p.l - c.lab[0], p.a - c.lab[1], p.b - c.lab[2]);
        let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
        dl * dl + da * da + db * db + self.spatial_weight * (dx * dx + dy * dy)
    }
}

fn seed_grid(width: usize, height: usize, k: usize) -> (usize, usize) {
    let nx = ((k as f64 * width as f64 / height as f64).sqrt().ceil() as usize).clamp(1, width.min(k));
    let ny = (k / nx).clamp(1, height);
    (nx, ny)
}

/// SLIC superpixels. Returns compact labels for the clusters that own pixels.
pub fn slic_superpixels(
    image: &RasterImage,
    k: usize,
    compactness: f64,
    iterations: usize,
) -> Result<RegionMap> {
    slic_with_costs(image, k, compactness, iterations).map(|(m, _)| m)
}

/// As [`slic_superpixels`], also returning the total squared 5-D assignment
/// cost after every iteration.
pub fn slic_with_costs(
    image: &RasterImage,
    k: usize,
    compactness: f64,
    iterations: usize,
) -> Result<(RegionMap, Vec<f64>)> {
    let (w, h) = (image.width(), image.height());
    if k == 0 {
        return Err(Error::invalid("superpixel count k must be at least 1"));
    }
    if k > w * h {
        return Err(Error::invalid(format!(
            "superpixel count {k} exceeds pixel count {}",
            w * h
        )));
    }
    if iterations == 0 {
        return Err(Error::invalid("SLIC needs at least one iteration"));
    }
    let lab = rgb_to_lab(&image.to_rgb())?;
    let step = ((w * h) as f64 / k as f64).sqrt();
    let state = SlicState {
        lab: &lab,
        step,
        spatial_weight: (compactness / step).powi(2),
    };

    let (nx, ny) = seed_grid(w, h, k);
    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = ((i as f64 + 0.5) * w as f64 / nx as f64).floor().min((w - 1) as f64);
            let y = ((j as f64 + 0.5) * h as f64 / ny as f64).floor().min((h - 1) as f64);
            let c = lab.at(x as usize, y as usize);
            centers.push(Center {
                lab: [c.l, c.a, c.b],
                x,
                y,
            });
        }
    }

    let mut assign: Vec<u32> = vec![u32::MAX; w * h];
    let mut costs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let cost = assign_pixels(&state, &centers, &mut assign, w, h);
        costs.push(cost);
        update_centers(&lab, &mut centers, &assign, w);
    }
    Ok((RegionMap::from_raw(w, h, &assign), costs))
}

/// Assignment step. Candidates are the centres whose 2S x 2S window covers the
/// pixel plus the pixel's current centre, which keeps the Lloyd cost monotone.
fn assign_pixels(state: &SlicState, centers: &[Center], assign: &mut [u32], w: usize, h: usize) -> f64 {
    let s = state.step;
    let cell = s.max(1.0);
    let bw = (w as f64 / cell).ceil() as usize + 1;
    let bh = (h as f64 / cell).ceil() as usize + 1;
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); bw * bh];
    for (i, c) in centers.iter().enumerate() {
        let bx = ((c.x / cell).floor() as usize).min(bw - 1);
        let by = ((c.y / cell).floor() as usize).min(bh - 1);
        buckets[by * bw + bx].push(i as u32);
    }

    let row_costs: Vec<f64> = assign
        .par_chunks_mut(w)
        .enumerate()
        .map(|(y, row)| {
            let mut total = 0.0;
            let by = ((y as f64 / cell).floor() as usize).min(bh - 1);
            for (x, slot) in row.iter_mut().enumerate() {
                let bx = ((x as f64 / cell).floor() as usize).min(bw - 1);
                let mut best = (f64::INFINITY, u32::MAX);
                let consider = |ci: u32, best: &mut (f64, u32)| {
                    let d = state.dist2(&centers[ci as usize], x, y);
                    if d < best.0 || (d == best.0 && ci < best.1) {
                        *best = (d, ci);
                    }
                };
                for yy in by.saturating_sub(1)..=(by + 1).min(bh - 1) {
                    for xx in bx.saturating_sub(1)..=(bx + 1).min(bw - 1) {
                        for &ci in &buckets[yy * bw + xx] {
                            let c = &centers[ci as usize];
                            if (x as f64 - c.x).abs() <= s && (y as f64 - c.y).abs() <= s {
                                consider(ci, &mut best);
                            }
                        }
                    }
                }
                if *slot != u32::MAX {
                    consider(*slot, &mut best);
                }
                if best.1 == u32::MAX {
                    for ci in 0..centers.len() as u32 {
                        consider(ci, &mut best);
                    }
                }
                *slot = best.1;
                total += best.0;
            }
            total
        })
        .collect();
    row_costs.iter().sum()
}

fn update_centers(lab: &LabImage, centers: &mut [Center], assign: &[u32], w: usize) {
    let mut sums = vec![[0.0f64; 6]; centers.len()];
    for (i, &a) in assign.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let p = lab.pixels[i];
        let s = &mut sums[a as usize];
        s[0] += p.l;
        s[1] += p.a;
        s[2] += p.b;
        s[3] += x as f64;
        s[4] += y as f64;
        s[5] += 1.0;
    }
    for (c, s) in centers.iter_mut().zip(&sums) {
        if s[5] > 0.0 {
            let n = s[5];
            *c = Center {
                lab: [s[0] / n, s[1] / n, s[2] / n],
                x: s[3] / n,
                y: s[4] / n,
            };
        }
    }
}

const NEIGHBORS4: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Label 4-connected components of equal-label pixels in scan order.
fn connected_components(map: &RegionMap) -> (Vec<u32>, usize) {
    let (w, h) = (map.width, map.height);
    let mut comp = vec![u32::MAX; w * h];
    let mut n = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if comp[start] != u32::MAX {
            continue;
        }
        let label = map.labels[start];
        comp[start] = n;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for (dx, dy) in NEIGHBORS4 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if comp[j] == u32::MAX && map.labels[j] == label {
                    comp[j] = n;
                    queue.push_back(j);
                }
            }
        }
        n += 1;
    }
    (comp, n as usize)
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(sizes: Vec<usize>) -> Self {
        Self {
            parent: (0..sizes.len()).collect(),
            size: sizes,
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Attach `child`'s root under `root`'s root.
    fn attach(&mut self, child: usize, root: usize) -> usize {
        let (c, r) = (self.find(child), self.find(root));
        if c != r {
            self.parent[c] = r;
            self.size[r] += self.size[c];
        }
        r
    }
}

/// Split disconnected labels and absorb fragments smaller than
/// `(pixels / region_count) / 4` into their largest neighbour.
pub fn enforce_connectivity(map: &RegionMap) -> RegionMap {
    let min_size = map.width * map.height / map.region_count / 4;
    enforce_connectivity_with(map, min_size)
}

/// [`enforce_connectivity`] with an explicit fragment size threshold.
pub fn enforce_connectivity_with(map: &RegionMap, min_size: usize) -> RegionMap {
    let (w, h) = (map.width, map.height);
    let (comp, n) = connected_components(map);
    let mut sizes = vec![0usize; n];
    for &c in &comp {
        sizes[c as usize] += 1;
    }
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x] as usize;
            if x + 1 < w {
                let b = comp[y * w + x + 1] as usize;
                if a != b {
                    adjacency[a].insert(b);
                    adjacency[b].insert(a);
                }
            }
            if y + 1 < h {
                let b = comp[(y + 1) * w + x] as usize;
                if a != b {
                    adjacency[a].insert(b);
                    adjacency[b].insert(a);
                }
            }
        }
    }

    let mut sets = DisjointSet::new(sizes);
    loop {
        let mut changed = false;
        for c in 0..n {
            if sets.find(c) != c || sets.size[c] >= min_size {
                continue;
            }
            let neighbours: BTreeSet<usize> = adjacency[c].iter().map(|&a| sets.find(a)).collect();
            let best = neighbours
                .into_iter()
                .filter(|&r| r != c)
                .max_by(|&a, &b| sets.size[a].cmp(&sets.size[b]).then(b.cmp(&a)));
            if let Some(target) = best {
                let root = sets.attach(c, target);
                let moved = std::mem::take(&mut adjacency[c]);
                adjacency[root].extend(moved);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let raw: Vec<u32> = comp.iter().map(|&c| sets.find(c as usize) as u32).collect();
    RegionMap::from_raw(w, h, &raw)
}

#[derive(Clone, Copy, PartialEq)]
struct MergeCandidate {
    dist: f64,
    a: usize,
    b: usize,
    stamp_a: u32,
    stamp_b: u32,
}

impl Eq for MergeCandidate {}

impl Ord for MergeCandidate {
    // Reversed so the max-heap pops the smallest distance, then smallest ids.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.a.cmp(&self.a))
            .then(other.b.cmp(&self.b))
    }
}

impl PartialOrd for MergeCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Agglomeratively merge adjacent regions whose mean Lab colours are closer
/// than `delta_e_threshold`, globally closest pair first.
pub fn merge_similar(map: &RegionMap, image: &RasterImage, delta_e_threshold: f64) -> Result<RegionMap> {
    if !(delta_e_threshold > 0.0) {
        return Err(Error::invalid("merge threshold must be positive"));
    }
    check_dims(map, image)?;
    let lab = rgb_to_lab(&image.to_rgb())?;
    let n = map.region_count;
    let (w, h) = (map.width, map.height);
    let mut sums = vec![[0.0f64; 3]; n];
    let mut counts = vec![0usize; n];
    for (i, &l) in map.labels.iter().enumerate() {
        let p = lab.pixels[i];
        let s = &mut sums[l as usize];
        s[0] += p.l;
        s[1] += p.a;
        s[2] += p.b;
        counts[l as usize] += 1;
    }
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for y in 0..h {
        for x in 0..w {
            let a = map.label(x, y) as usize;
            let right = (x + 1 < w).then(|| map.label(x + 1, y) as usize);
            let down = (y + 1 < h).then(|| map.label(x, y + 1) as usize);
            for b in [right, down].into_iter().flatten() {
                if a != b {
                    adjacency[a].insert(b);
                    adjacency[b].insert(a);
                }
            }
        }
    }

    let mean = |s: &[f64; 3], c: usize| LabColor {
        l: s[0] / c as f64,
        a: s[1] / c as f64,
        b: s[2] / c as f64,
    };
    let mut stamps = vec![0u32; n];
    let mut alive = vec![true; n];
    let mut heap = BinaryHeap::new();
    for a in 0..n {
        for &b in adjacency[a].range(a + 1..) {
            heap.push(MergeCandidate {
                dist: mean(&sums[a], counts[a]).distance(&mean(&sums[b], counts[b])),
                a,
                b,
                stamp_a: 0,
                stamp_b: 0,
            });
        }
    }
    let mut parent: Vec<usize> = (0..n).collect();
    while let Some(cand) = heap.pop() {
        let MergeCandidate { dist, a, b, stamp_a, stamp_b } = cand;
        if !alive[a] || !alive[b] || stamps[a] != stamp_a || stamps[b] != stamp_b {
            continue;
        }
        if dist >= delta_e_threshold {
            break;
        }
        // Merge b into a (a < b).
        alive[b] = false;
        parent[b] = a;
        for i in 0..3 {
            sums[a][i] += sums[b][i];
        }
        counts[a] += counts[b];
        stamps[a] += 1;
        let moved = std::mem::take(&mut adjacency[b]);
        for nb in moved {
            adjacency[nb].remove(&b);
            if nb != a {
                adjacency[nb].insert(a);
                adjacency[a].insert(nb);
            }
        }
        adjacency[a].remove(&b);
        let ma = mean(&sums[a], counts[a]);
        for &nb in &adjacency[a] {
            let (lo, hi) = if a < nb { (a, nb) } else { (nb, a) };
            heap.push(MergeCandidate {
                dist: ma.distance(&mean(&sums[nb], counts[nb])),
                a: lo,
                b: hi,
                stamp_a: stamps[lo],
                stamp_b: stamps[hi],
            });
        }
    }
    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i as u32
    };
    let raw: Vec<u32> = map.labels.iter().map(|&l| root(l as usize)).collect();
    Ok(RegionMap::from_raw(w, h, &raw))
}

fn check_dims(map: &RegionMap, image: &RasterImage) -> Result<()> {
    if (map.width, map.height) != (image.width(), image.height()) {
        return Err(Error::DimensionMismatch {
            expected: (image.width(), image.height()),
            actual: (map.width, map.height),
        });
    }
    Ok(())
}

/// Axis-aligned pixel box, exclusive on the max side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// A connected region of a [`RegionMap`].
#[derive(Clone, Debug)]
pub struct Region {
    pub id: u32,
    pub area: usize,
    pub bbox: BBox,
    pub mean_lab: LabColor,
    /// Outer border pixels in clockwise order (screen coordinates).
    pub boundary: Vec<(i32, i32)>,
    /// Membership mask local to `bbox`.
    pub mask: Mask,
}

impl Region {
    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.bbox.x0
            && y >= self.bbox.y0
            && x < self.bbox.x1
            && y < self.bbox.y1
            && self.mask.get(x - self.bbox.x0, y - self.bbox.y0)
    }

    /// Iterate member pixels in scan order (image coordinates).
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let BBox { x0, y0, .. } = self.bbox;
        (0..self.mask.height()).flat_map(move |y| {
            (0..self.mask.width())
                .filter(move |&x| self.mask.get(x, y))
                .map(move |x| (x + x0, y + y0))
        })
    }
}

/// One [`Region`] per label, in label order.
pub fn extract_regions(map: &RegionMap, image: &RasterImage) -> Result<Vec<Region>> {
    check_dims(map, image)?;
    let lab = rgb_to_lab(&image.to_rgb())?;
    let n = map.region_count;
    let (w, h) = (map.width, map.height);
    let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    let mut sums = vec![[0.0f64; 3]; n];
    let mut areas = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            let l = map.label(x, y) as usize;
            let b = &mut boxes[l];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x + 1), b.3.max(y + 1));
            let p = lab.at(x, y);
            sums[l][0] += p.l;
            sums[l][1] += p.a;
            sums[l][2] += p.b;
            areas[l] += 1;
        }
    }
    let regions = (0..n)
        .map(|l| {
            let (x0, y0, x1, y1) = boxes[l];
            let bbox = BBox { x0, y0, x1, y1 };
            let mask = Mask::from_fn(bbox.width(), bbox.height(), |x, y| {
                map.label(x + x0, y + y0) == l as u32
            });
            let boundary = trace_boundary(&mask)
                .into_iter()
                .map(|(x, y)| (x + x0 as i32, y + y0 as i32))
                .collect();
            let a = areas[l] as f64;
            Region {
                id: l as u32,
                area: areas[l],
                bbox,
                mean_lab: LabColor {
                    l: sums[l][0] / a,
                    a: sums[l][1] / a,
                    b: sums[l][2] / a,
                },
                boundary,
                mask,
            }
        })
        .collect();
    Ok(regions)
}

// Clockwise on screen (y down), starting west.
const MOORE: [(i32, i32); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

/// Moore-neighbour trace of the outer border of the set pixels that contain
/// the first set pixel in scan order. Clockwise on screen.
pub fn trace_boundary(mask: &Mask) -> Vec<(i32, i32)> {
    let (w, h) = (mask.width() as i32, mask.height() as i32);
    let inside = |x: i32, y: i32| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    let Some(first) = mask.data().iter().position(|&v| v != 0) else {
        return Vec::new();
    };
    let start = ((first % mask.width()) as i32, (first / mask.width()) as i32);

    // Returns the next boundary pixel and the backtrack direction index
    // (relative to the new pixel) to resume scanning from.
    let step = |cur: (i32, i32), back: usize| -> Option<((i32, i32), usize)> {
        let mut prev = (cur.0 + MOORE[back].0, cur.1 + MOORE[back].1);
        for i in 1..=8 {
            let d = (back + i) % 8;
            let cand = (cur.0 + MOORE[d].0, cur.1 + MOORE[d].1);
            if inside(cand.0, cand.1) {
                let rel = (prev.0 - cand.0, prev.1 - cand.1);
                let nb = MOORE.iter().position(|&m| m == rel).expect("adjacent backtrack");
                return Some((cand, nb));
            }
            prev = cand;
        }
        None
    };

    let mut out = vec![start];
    let Some((second, mut back)) = step(start, 0) else {
        return out;
    };
    let mut cur = second;
    let limit = 4 * (w as usize * h as usize) + 8;
    for _ in 0..limit {
        let (next, nb) = step(cur, back).expect("non-isolated pixel has a neighbour");
        if cur == start && next == second {
            break;
        }
        out.push(cur);
        cur = next;
        back = nb;
    }
    out
}
