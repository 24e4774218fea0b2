//! F-measure scoring for positive (CA) and negative (NC) images, and
//! probability heatmaps.
//!
//! Positive images compare predicted-positive pixels against the annotated
//! region. Negative images compare predicted-negative pixels against the
//! whole image, so a clean all-negative prediction scores 1.

use std::fmt::{self, Write as _};
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::{Network, SideOutputs};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::objective::threshold_map;
use crate::scalar::Scalar;
use crate::synth::DatasetEntry;
use crate::tensor::Tensor;

/// Precision, recall and F of prediction `h` against truth `g`.
///
/// Empty `h` gives precision 0 unless `g` is empty too; two empty masks
/// score (1, 1, 1).
pub fn f_measure(h: &Mask, g: &Mask) -> Result<(f64, f64, f64)> {
    if h.dims() != g.dims() {
        return Err(Error::shape(
            "f_measure",
            format!("prediction {:?} vs truth {:?}", h.dims(), g.dims()),
        ));
    }
    let (nh, ng) = (h.count(), g.count());
    if nh == 0 && ng == 0 {
        return Ok((1.0, 1.0, 1.0));
    }
    let inter = h.intersection_count(g) as f64;
    let precision = if nh == 0 { 0.0 } else { inter / nh as f64 };
    let recall = if ng == 0 { 0.0 } else { inter / ng as f64 };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f))
}

/// Which probability map to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSelect {
    Fused,
    /// Zero-based side-output index.
    Side(usize),
}

impl fmt::Display for MapSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapSelect::Fused => write!(f, "fused"),
            MapSelect::Side(t) => write!(f, "side{}", t + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub label: u8,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    /// Fraction of pixels predicted positive.
    pub predicted_fraction: f64,
    /// Fraction of pixels in the ground-truth mask.
    pub true_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub select: MapSelect,
    pub images: Vec<ImageScore>,
    /// Mean F over positive images; `None` without any.
    pub ca_mean_f: Option<f64>,
    pub nc_mean_f: Option<f64>,
    /// Mean |predicted fraction - true fraction| over positive images.
    pub ca_area_error: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn from_scores(threshold: f64, select: MapSelect, images: Vec<ImageScore>) -> Self {
        let ca = || images.iter().filter(|s| s.label == 1);
        Self {
            threshold,
            select,
            ca_mean_f: mean(ca().map(|s| s.f)),
            nc_mean_f: mean(images.iter().filter(|s| s.label == 0).map(|s| s.f)),
            ca_area_error: mean(ca().map(|s| (s.predicted_fraction - s.true_fraction).abs())),
            images,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image\tlabel\tprecision\trecall\tf\tpredicted_fraction\ttrue_fraction\n");
        for i in &self.images {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                i.name, i.label, i.precision, i.recall, i.f, i.predicted_fraction, i.true_fraction
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let count = |l| self.images.iter().filter(|s| s.label == l).count();
        format!(
            "map:             {}\nthreshold:       {}\nCA images:       {}\nCA mean F:       {}\nCA area error:   {}\nNC images:       {}\nNC mean F:       {}\n",
            self.select,
            self.threshold,
            count(1),
            opt(self.ca_mean_f),
            opt(self.ca_area_error),
            count(0),
            opt(self.nc_mean_f),
        )
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("tsv", self.to_tsv()), ("txt", self.summary())] {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Scores one prediction under the protocol for its label.
pub fn score_image(name: &str, label: u8, prediction: &Mask, truth: &Mask) -> Result<ImageScore> {
    let (precision, recall, f) = if label == 1 {
        f_measure(prediction, truth)?
    } else {
        let whole = Mask::filled(truth.height(), truth.width(), true);
        f_measure(&prediction.invert(), &whole)?
    };
    Ok(ImageScore {
        name: name.to_string(),
        label,
        precision,
        recall,
        f,
        predicted_fraction: prediction.fraction(),
        true_fraction: truth.fraction(),
    })
}

/// Probability map selected from a batch-1 forward pass, as a flat `H*W`
/// vector. Bags with superpixel regions get every pixel replaced by its
/// region mean.
pub fn selected_map<S: Scalar>(out: &SideOutputs<S>, select: MapSelect, entry: &DatasetEntry<S>) -> Result<Tensor<S>> {
    let map = match select {
        MapSelect::Fused => &out.fused_map,
        MapSelect::Side(t) => out
            .side_maps
            .get(t)
            .ok_or_else(|| Error::invalid(format!("side output {} of {}", t + 1, out.side_maps.len())))?,
    };
    match entry.bag.regions() {
        None => Ok(map.clone()),
        Some(g) => {
            let means = g.means(&map.to_f64_vec());
            let data = g.labels().iter().map(|&l| S::from_f64_lossy(means[l as usize])).collect();
            Tensor::new(map.dims().to_vec(), data)
        }
    }
}

/// Evaluates several maps from one forward pass per image.
pub fn evaluate_many<S: Scalar>(
    network: &Network<S>,
    entries: &[DatasetEntry<S>],
    threshold: f64,
    selects: &[MapSelect],
) -> Result<Vec<EvalReport>> {
    let per_image: Vec<Vec<ImageScore>> = entries
        .par_iter()
        .map(|e| {
            let name = e.path.display().to_string();
            let truth = e
                .mask
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("no ground-truth mask for image {name}")))?;
            let out = network.forward(e.bag.image())?;
            if truth.dims() != out.fused_map.spatial() {
                return Err(Error::shape(
                    "evaluate",
                    format!("mask {:?} for image {name} vs map {:?}", truth.dims(), out.fused_map.spatial()),
                ));
            }
            selects
                .iter()
                .map(|&s| {
                    let map = selected_map(&out, s, e)?;
                    let pred = threshold_map(&map, threshold)?.remove(0);
                    score_image(&name, e.bag.label(), &pred, truth)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(selects
        .iter()
        .enumerate()
        .map(|(k, &s)| EvalReport::from_scores(threshold, s, per_image.iter().map(|v| v[k].clone()).collect()))
        .collect())
}

pub fn evaluate<S: Scalar>(
    network: &Network<S>,
    entries: &[DatasetEntry<S>],
    threshold: f64,
    select: MapSelect,
) -> Result<EvalReport> {
    Ok(evaluate_many(network, entries, threshold, &[select])?.remove(0))
}

/// Fused map followed by every side output.
pub fn all_maps(sides: usize) -> Vec<MapSelect> {
    std::iter::once(MapSelect::Fused).chain((0..sides).map(MapSelect::Side)).collect()
}

fn colour(p: f64) -> [u8; 3] {
    let p = p.clamp(0.0, 1.0);
    [(255.0 * p).round() as u8, 0, (255.0 * (1.0 - p)).round() as u8]
}

/// Writes a blue (0) to red (1) PNG of the trailing `H x W` plane.
pub fn render_heatmap<S: Scalar>(prob_map: &Tensor<S>, path: &Path) -> Result<()> {
    let (h, w) = prob_map.spatial();
    let rgb: Vec<u8> = prob_map.data()[..h * w].iter().flat_map(|v| colour(v.as_f64())).collect();
    save_rgb(path, w, h, &rgb)
}

/// Input image, heatmap and (when given) mask side by side.
pub fn render_panel<S: Scalar>(image: &Tensor<S>, prob_map: &Tensor<S>, mask: Option<&Mask>, path: &Path) -> Result<()> {
    let (w, h, img) = crate::synth::tensor_to_rgb8(image)?;
    if prob_map.spatial() != (h, w) {
        return Err(Error::shape("render_panel", format!("map {:?} vs image {h}x{w}", prob_map.spatial())));
    }
    let mut panels: Vec<Vec<u8>> = vec![img, prob_map.data()[..h * w].iter().flat_map(|v| colour(v.as_f64())).collect()];
    if let Some(m) = mask {
        if m.dims() != (h, w) {
            return Err(Error::shape("render_panel", format!("mask {:?} vs image {h}x{w}", m.dims())));
        }
        panels.push(m.bits().iter().flat_map(|&b| [if b { 255 } else { 0 }; 3]).collect());
    }
    let total_w = w * panels.len();
    let mut out = Vec::with_capacity(total_w * h * 3);
    for y in 0..h {
        for p in &panels {
            out.extend_from_slice(&p[y * w * 3..(y + 1) * w * 3]);
        }
    }
    save_rgb(path, total_w, h, &out)
}

fn save_rgb(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    image::save_buffer(path, rgb, w as u32, h as u32, image::ColorType::Rgb8).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(len: usize, on: impl Fn(usize) -> bool) -> Mask {
        Mask::new(1, len, (0..len).map(on).collect()).unwrap()
    }

    #[test]
    fn counting_example() {
        // |H| = 100, |G| = 75, overlap 50
        let h = mask_from(200, |i| i < 100);
        let g = mask_from(200, |i| (50..125).contains(&i));
        let (p, r, f) = f_measure(&h, &g).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert!((f - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn edge_conventions() {
        let a = mask_from(10, |i| i < 4);
        let b = mask_from(10, |i| i >= 6);
        let e = Mask::empty(1, 10);
        assert_eq!(f_measure(&a, &a).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(f_measure(&a, &b).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(f_measure(&e, &e).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(f_measure(&e, &a).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(f_measure(&a, &e).unwrap(), (0.0, 0.0, 0.0));
        assert!(f_measure(&a, &Mask::empty(2, 5)).is_err());
    }

    #[test]
    fn negative_image_protocol() {
        let truth = Mask::empty(10, 10);
        let clean = score_image("n", 0, &Mask::empty(10, 10), &truth).unwrap();
        assert_eq!(clean.f, 1.0);
        let noisy = Mask::new(10, 10, (0..100).map(|i| i < 10).collect()).unwrap();
        let s = score_image("n", 0, &noisy, &truth).unwrap();
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 0.9).abs() < 1e-15);
        assert!((s.f - 18.0 / 19.0).abs() < 1e-12);
        let ann = Mask::new(10, 10, (0..100).map(|i| i % 3 == 0).collect()).unwrap();
        assert_eq!(score_image("p", 1, &ann, &ann).unwrap().f, 1.0);
    }

    #[test]
    fn report_aggregates_are_means() {
        let mk = |label, f, pf, tf| ImageScore {
            name: String::new(),
            label,
            precision: f,
            recall: f,
            f,
            predicted_fraction: pf,
            true_fraction: tf,
        };
        let r = EvalReport::from_scores(
            0.5,
            MapSelect::Fused,
            vec![mk(1, 0.5, 0.2, 0.3), mk(1, 1.0, 0.4, 0.3), mk(0, 0.25, 0.0, 0.0)],
        );
        assert_eq!(r.ca_mean_f, Some(0.75));
        assert_eq!(r.nc_mean_f, Some(0.25));
        assert!((r.ca_area_error.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.to_tsv().lines().count(), 4);
        assert!(r.summary().contains("CA mean F:       0.750000"));
        let none = EvalReport::from_scores(0.5, MapSelect::Side(0), vec![]);
        assert!(none.summary().contains("NA") && none.summary().contains("side1"));
    }

    #[test]
    fn heatmap_colours_and_size() {
        let dir = tempfile::tempdir().unwrap();
        for (v, rgb) in [(0.0f32, [0u8, 0, 255]), (1.0, [255, 0, 0])] {
            let p = dir.path().join(format!("{v}.png"));
            render_heatmap(&Tensor::full(&[1, 1, 5, 7], v), &p).unwrap();
            let img = image::open(&p).unwrap().into_rgb8();
            assert_eq!(img.dimensions(), (7, 5));
            assert!(img.pixels().all(|px| px.0 == rgb));
        }
        let bad = dir.path().join("missing").join("x.png");
        assert!(render_heatmap(&Tensor::full(&[2, 2], 0.5f32), &bad).is_err());
    }

    #[test]
    fn panel_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("panel.png");
        let img = Tensor::full(&[3, 4, 6], 0.5f32);
        let mask = Mask::filled(4, 6, true);
        render_panel(&img, &Tensor::full(&[1, 1, 4, 6], 1.0f32), Some(&mask), &p).unwrap();
        let out = image::open(&p).unwrap().into_rgb8();
        assert_eq!(out.dimensions(), (18, 4));
        assert_eq!(out.get_pixel(7, 0).0, [255, 0, 0]);
        assert_eq!(out.get_pixel(13, 3).0, [255, 255, 255]);
    }
}
