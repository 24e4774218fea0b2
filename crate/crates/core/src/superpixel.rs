//! SLIC superpixels and the pixel <-> region plumbing that lets regions act
//! as MIL instances.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::RegionGroups;
use crate::error::{Error, Result};
use crate::pooling::InstanceVector;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    pub k: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl SlicParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Partition of an image into 4-connected regions labelled `0..region_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    region_sizes: Vec<usize>,
}

impl SuperpixelMap {
    /// Validates that `labels` use every id in `0..max+1` at least once.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::shape(
                "superpixel map",
                format!("{height}x{width} map with {} labels", labels.len()),
            ));
        }
        let n = *labels.iter().max().expect("nonempty") as usize + 1;
        let mut region_sizes = vec![0usize; n];
        for &l in &labels {
            region_sizes[l as usize] += 1;
        }
        if region_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("superpixel labels skip a region id"));
        }
        Ok(Self {
            height,
            width,
            labels,
            region_sizes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn region_count(&self) -> usize {
        self.region_sizes.len()
    }

    pub fn region_sizes(&self) -> &[usize] {
        &self.region_sizes
    }

    pub fn groups(&self) -> Arc<RegionGroups> {
        Arc::new(RegionGroups::new(self.labels.clone(), self.region_count()).expect("validated partition"))
    }

    /// True when every region is a single 4-connected component.
    pub fn is_connected(&self) -> bool {
        let comps = components(self.height, self.width, &self.labels);
        comps.count == self.region_count()
    }

    /// Writes the label map as 16-bit grayscale PNG (pixel value = region id).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.region_count() > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!(
                "{} regions do not fit a 16-bit label map",
                self.region_count()
            )));
        }
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.labels.iter().map(|&l| l as u16).collect(),
        )
        .expect("buffer size matches");
        buf.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        let g = img.into_luma16();
        let (w, h) = g.dimensions();
        Self::from_labels(h as usize, w as usize, g.into_raw().into_iter().map(u32::from).collect())
    }
}

/// sRGB (components in [0, 1]) to CIELAB under a D65 white point.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let [r, g, b] = rgb.map(|c| lin(c.clamp(0.0, 1.0)));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.950_47), f(y), f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn image_planes<S: Scalar>(image: &Tensor<S>) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let (c, h, w) = match *image.dims() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::shape("slic", format!("expected [C,H,W] image, got {:?}", image.dims()))),
    };
    if c != 1 && c != 3 {
        return Err(Error::shape("slic", format!("expected 1 or 3 channels, got {c}")));
    }
    let d = image.data();
    let px = (0..h * w)
        .map(|i| {
            let ch = |k: usize| d[(if c == 3 { k } else { 0 }) * h * w + i].as_f64();
            srgb_to_lab([ch(0), ch(1), ch(2)])
        })
        .collect();
    Ok((h, w, px))
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    y: f64,
    x: f64,
}

/// Simple linear iterative clustering in (L, a, b, x, y).
///
/// Centers start on a grid of spacing `S = sqrt(H W / k)`, nudged to the
/// lowest-gradient pixel of their 3x3 neighbourhood; each iteration assigns
/// pixels within a `2S x 2S` window to the nearest center under
/// `D = sqrt(d_lab^2 + (d_xy / S)^2 m^2)` and recenters. Fragments that are
/// disconnected from their cluster's main body are merged into the largest
/// adjacent region.
///
/// The main body survives however small it is. Dropping bodies below a
/// quarter of the nominal area, as some implementations do, loses whole
/// clusters on fine striped texture, where a cluster along a boundary breaks
/// into a dozen slivers of similar size.
pub fn slic<S: Scalar>(image: &Tensor<S>, params: &SlicParams) -> Result<SuperpixelMap> {
    let (h, w, lab) = image_planes(image)?;
    let n = h * w;
    if params.k == 0 || params.k > n {
        return Err(Error::invalid(format!("superpixel count {} outside [1, {n}]", params.k)));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::invalid("compactness must be positive"));
    }
    let s = (n as f64 / params.k as f64).sqrt();
    let rows = ((h as f64 / s).round() as usize).clamp(1, h);
    let cols = ((w as f64 / s).round() as usize).clamp(1, w);
    let (sy, sx) = (h as f64 / rows as f64, w as f64 / cols as f64);

    let grad = |y: usize, x: usize| -> f64 {
        let at = |yy: usize, xx: usize| lab[yy * w + xx];
        let (l, r) = (at(y, x.saturating_sub(1)), at(y, (x + 1).min(w - 1)));
        let (u, d) = (at(y.saturating_sub(1), x), at((y + 1).min(h - 1), x));
        (0..3).map(|c| (r[c] - l[c]).powi(2) + (d[c] - u[c]).powi(2)).sum()
    };
    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            // continuous grid-cell centre; only snapped when a lower-gradient pixel is found
            let fy = (r as f64 + 0.5) * sy - 0.5;
            let fx = (c as f64 + 0.5) * sx - 0.5;
            let cy = (fy.round() as usize).min(h - 1);
            let cx = (fx.round() as usize).min(w - 1);
            let (mut by, mut bx) = (cy, cx);
            let mut moved = false;
            if s >= 3.0 {
                let mut best = grad(cy, cx);
                for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        let g = grad(yy, xx);
                        if g < best {
                            best = g;
                            by = yy;
                            bx = xx;
                            moved = true;
                        }
                    }
                }
            }
            centers.push(Center {
                lab: lab[by * w + bx],
                y: if moved { by as f64 } else { fy },
                x: if moved { bx as f64 } else { fx },
            });
        }
    }

    let radius = sy.max(sx).ceil() as isize;
    let spatial = (params.compactness / s).powi(2);
    let mut label = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.iterations.max(1) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let (y0, y1) = (
                (c.y.round() as isize - radius).max(0) as usize,
                ((c.y.round() as isize + radius).min(h as isize - 1)) as usize,
            );
            let (x0, x1) = (
                (c.x.round() as isize - radius).max(0) as usize,
                ((c.x.round() as isize + radius).min(w as isize - 1)) as usize,
            );
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = lab[y * w + x];
                    let dc: f64 = (0..3).map(|k| (p[k] - c.lab[k]).powi(2)).sum();
                    let ds = (y as f64 - c.y).powi(2) + (x as f64 - c.x).powi(2);
                    let d = dc + ds * spatial;
                    if d < dist[y * w + x] {
                        dist[y * w + x] = d;
                        label[y * w + x] = ci as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in label.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let a = &mut acc[l as usize];
            let p = lab[i];
            a[0] += p[0];
            a[1] += p[1];
            a[2] += p[2];
            a[3] += (i / w) as f64;
            a[4] += (i % w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                c.lab = [a[0] / a[5], a[1] / a[5], a[2] / a[5]];
                c.y = a[3] / a[5];
                c.x = a[4] / a[5];
            }
        }
    }

    let labels = enforce_connectivity(h, w, &label);
    SuperpixelMap::from_labels(h, w, labels)
}

struct Components {
    id: Vec<usize>,
    count: usize,
    sizes: Vec<usize>,
    source: Vec<u32>,
}

fn components(h: usize, w: usize, labels: &[u32]) -> Components {
    let mut id = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut source = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if id[start] != usize::MAX {
            continue;
        }
        let cid = sizes.len();
        let l = labels[start];
        id[start] = cid;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if id[q] == usize::MAX && labels[q] == l {
                    id[q] = cid;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
        source.push(l);
    }
    Components {
        count: sizes.len(),
        id,
        sizes,
        source,
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Keeps the largest component of each cluster; every other component is
/// merged into its largest neighbour.
fn enforce_connectivity(h: usize, w: usize, label: &[u32]) -> Vec<u32> {
    let comps = components(h, w, label);
    let mut largest: std::collections::HashMap<u32, usize> = Default::default();
    for c in 0..comps.count {
        let src = comps.source[c];
        if src == u32::MAX {
            continue;
        }
        let e = largest.entry(src).or_insert(c);
        if comps.sizes[c] > comps.sizes[*e] {
            *e = c;
        }
    }
    let mut kept = vec![false; comps.count];
    for &c in largest.values() {
        kept[c] = true;
    }
    if !kept.iter().any(|&k| k) {
        // every pixel unassigned: the largest component absorbs everything
        let big = (0..comps.count).max_by_key(|&c| (comps.sizes[c], usize::MAX - c)).expect("nonempty");
        kept[big] = true;
    }

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); comps.count];
    for y in 0..h {
        for x in 0..w {
            let a = comps.id[y * w + x];
            for q in [(x + 1 < w).then(|| y * w + x + 1), (y + 1 < h).then(|| (y + 1) * w + x)]
                .into_iter()
                .flatten()
            {
                let b = comps.id[q];
                if a != b {
                    adj[a].push(b);
                    adj[b].push(a);
                }
            }
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }

    let mut parent: Vec<usize> = (0..comps.count).collect();
    let mut size: Vec<usize> = comps.sizes.clone();
    let mut resolved = kept.clone();
    let mut pending: Vec<usize> = (0..comps.count).filter(|&c| !kept[c]).collect();
    // orphans touching resolved regions merge first; repeat until none remain
    while !pending.is_empty() {
        let mut next = Vec::new();
        let mut progressed = false;
        for &c in &pending {
            let target = adj[c]
                .iter()
                .filter(|&&nb| resolved[nb])
                .map(|&nb| find(&mut parent, nb))
                .max_by_key(|&root| (size[root], usize::MAX - root));
            match target {
                Some(root) => {
                    parent[c] = root;
                    size[root] += comps.sizes[c];
                    resolved[c] = true;
                    progressed = true;
                }
                None => next.push(c),
            }
        }
        assert!(progressed, "orphan components unreachable from kept regions");
        pending = next;
    }

    let mut relabel = vec![u32::MAX; comps.count];
    let mut next_id = 0u32;
    (0..h * w)
        .map(|p| {
            let root = find(&mut parent, comps.id[p]);
            if relabel[root] == u32::MAX {
                relabel[root] = next_id;
                next_id += 1;
            }
            relabel[root]
        })
        .collect()
}

/// One instance per region: the mean probability of its member pixels.
pub fn pool_to_superpixels(prob_map: &[f64], sp: &SuperpixelMap) -> Result<InstanceVector> {
    if prob_map.len() != sp.labels.len() {
        return Err(Error::shape(
            "pool_to_superpixels",
            format!("map has {} pixels, superpixels cover {}", prob_map.len(), sp.labels.len()),
        ));
    }
    let groups = RegionGroups::new(sp.labels.clone(), sp.region_count())?;
    InstanceVector::new(groups.means(prob_map))
}

/// Renders per-region values back onto pixels.
pub fn paint_instances(values: &[f64], sp: &SuperpixelMap) -> Result<Vec<f64>> {
    if values.len() != sp.region_count() {
        return Err(Error::shape(
            "paint_instances",
            format!("{} values for {} regions", values.len(), sp.region_count()),
        ));
    }
    Ok(sp.labels.iter().map(|&l| values[l as usize]).collect())
}

/// Region-mean smoothing of a probability map (prediction-time use).
pub fn smooth_by_regions(prob_map: &[f64], sp: &SuperpixelMap) -> Result<Vec<f64>> {
    let inst = pool_to_superpixels(prob_map, sp)?;
    paint_instances(inst.probs(), sp)
}
