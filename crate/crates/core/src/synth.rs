//! Two-texture synthetic bags with known lesion masks.
//!
//! Positive images carry one or more smooth blobs of a lesion texture over a
//! background texture; negatives are background only. Blob masks come from
//! thresholding low-frequency value noise at the quantile that yields the
//! drawn target area. Pixels are quantized to 8 bits at generation time so
//! the PNG dataset format round-trips exactly.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::objective::Bag;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    /// Mean RGB colour in [0, 1].
    pub base: [f64; 3],
    /// Stripe frequency in cycles per pixel.
    pub frequency: f64,
    pub amplitude: f64,
    /// Stripe orientation in radians.
    pub orientation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub positive_count: usize,
    pub negative_count: usize,
    pub background: Texture,
    pub lesion: Texture,
    pub area_range: (f64, f64),
    pub area_step: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            positive_count: 40,
            negative_count: 80,
            // The two textures differ mostly in stripe frequency and
            // orientation; the base colours are close enough that a single
            // pixel is ambiguous and a prediction needs spatial context.
            background: Texture {
                base: [0.86, 0.62, 0.76],
                frequency: 0.11,
                amplitude: 0.12,
                orientation: 0.6,
            },
            lesion: Texture {
                base: [0.74, 0.52, 0.72],
                frequency: 0.23,
                amplitude: 0.16,
                orientation: 2.1,
            },
            area_range: (0.1, 0.4),
            area_step: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_range;
        if self.image_size < 4 {
            return Err(Error::invalid(format!("image size {} too small", self.image_size)));
        }
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::invalid(format!(
                "area range [{lo}, {hi}] must satisfy 0 < lo < hi < 1"
            )));
        }
        let q = self.area_step;
        if !(q > 0.0 && q <= hi) {
            return Err(Error::invalid(format!("area step {q} must be in (0, hi]")));
        }
        let on_grid = |v: f64| ((v / q) - (v / q).round()).abs() < 1e-9;
        if !on_grid(lo) || !on_grid(hi) {
            return Err(Error::invalid(format!(
                "area step {q} does not divide the range endpoints {lo}, {hi}"
            )));
        }
        let pixels = (self.image_size * self.image_size) as f64;
        if lo * pixels < 1.0 {
            return Err(Error::invalid(format!(
                "area {lo} is below one pixel at image size {}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Quantization levels `lo, lo + q, .., hi`.
    pub fn levels(&self) -> Vec<f64> {
        let (lo, hi) = self.area_range;
        let q = self.area_step;
        let n = ((hi - lo) / q).round() as usize;
        (0..=n).map(|i| snap(lo + i as f64 * q)).collect()
    }
}

fn snap(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

/// A generated bag with its pixel-level ground truth.
#[derive(Clone, Debug)]
pub struct SynthBag<S> {
    pub bag: Bag<S>,
    pub mask: Mask,
    pub true_area: f64,
}

/// Smooth random field on a `cells x cells` lattice, bilinear with
/// smoothstep easing.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>()).collect();
    let scale = cells as f64 / size as f64;
    let ease = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 * scale;
        let (iy, ty) = (fy.floor() as usize, ease(fy.fract()));
        for x in 0..size {
            let fx = x as f64 * scale;
            let (ix, tx) = (fx.floor() as usize, ease(fx.fract()));
            let at = |a: usize, b: usize| lattice[a * g + b];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn render_texture(rng: &mut ChaCha8Rng, size: usize, tex: &Texture) -> Vec<[f64; 3]> {
    let phase = rng.gen::<f64>() * 2.0 * PI;
    let grain = value_noise(rng, size, (size / 4).max(2));
    let (c, s) = (tex.orientation.cos(), tex.orientation.sin());
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let stripe = (2.0 * PI * tex.frequency * (x * c + y * s) + phase).sin();
            let v = tex.amplitude * (0.6 * stripe + 0.8 * (grain[i] - 0.5));
            let jitter = 0.02 * (rng.gen::<f64>() - 0.5);
            [
                tex.base[0] + v + jitter,
                tex.base[1] + 0.8 * v + jitter,
                tex.base[2] + 0.9 * v + jitter,
            ]
        })
        .collect()
}

/// Top-`count` pixels of a blob field; the field has no exact ties.
fn blob_mask(rng: &mut ChaCha8Rng, size: usize, count: usize) -> Vec<bool> {
    let coarse = value_noise(rng, size, 3);
    let fine = value_noise(rng, size, 6);
    let field: Vec<f64> = coarse.iter().zip(&fine).map(|(a, b)| a + 0.35 * b).collect();
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut bits = vec![false; field.len()];
    for &i in &order[..count] {
        bits[i] = true;
    }
    bits
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Image tensor `[3, H, W]` with values `v / 255`.
pub fn rgb8_to_tensor<S: Scalar>(width: usize, height: usize, rgb: &[u8]) -> Tensor<S> {
    let n = width * height;
    let mut data = vec![S::zero(); 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = S::from_f64_lossy(rgb[3 * i + c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, height, width], data).expect("consistent dims")
}

/// Inverse of [`rgb8_to_tensor`]; values are rounded to the nearest level.
pub fn tensor_to_rgb8<S: Scalar>(image: &Tensor<S>) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = match *image.dims() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::shape("image", format!("expected [C,H,W], got {:?}", image.dims()))),
    };
    if c != 3 {
        return Err(Error::shape("image", format!("expected 3 channels, got {c}")));
    }
    let n = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        for ch in 0..3 {
            out.push(to_u8(d[ch * n + i].as_f64()));
        }
    }
    Ok((w, h, out))
}

fn generate_one<S: Scalar>(spec: &SynthSpec, index: usize, positive: bool) -> Result<SynthBag<S>> {
    let size = spec.image_size;
    let n = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let background = render_texture(&mut rng, size, &spec.background);
    let (mask_bits, true_area, area) = if positive {
        let (lo, hi) = spec.area_range;
        let target = rng.gen_range(lo..=hi);
        let count = ((target * n as f64).round() as usize).clamp(1, n - 1);
        let bits = blob_mask(&mut rng, size, count);
        let true_area = count as f64 / n as f64;
        let area = snap((true_area / spec.area_step).round() * spec.area_step);
        (bits, true_area, area)
    } else {
        (vec![false; n], 0.0, 0.0)
    };
    let lesion = positive.then(|| render_texture(&mut rng, size, &spec.lesion));
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        let px = match (&lesion, mask_bits[i]) {
            (Some(l), true) => l[i],
            _ => background[i],
        };
        rgb.extend(px.iter().map(|&v| to_u8(v)));
    }
    let image = rgb8_to_tensor(size, size, &rgb);
    Ok(SynthBag {
        bag: Bag::new(image, positive as u8, area)?,
        mask: Mask::new(size, size, mask_bits)?,
        true_area,
    })
}

/// Positives first, then negatives; each image uses its own derived seed.
pub fn generate<S: Scalar>(spec: &SynthSpec) -> Result<Vec<SynthBag<S>>> {
    spec.validate()?;
    let total = spec.positive_count + spec.negative_count;
    (0..total)
        .into_par_iter()
        .map(|i| generate_one(spec, i, i < spec.positive_count))
        .collect()
}

/// One manifest record with its loaded image and, optionally, mask.
#[derive(Clone, Debug)]
pub struct DatasetEntry<S> {
    pub path: PathBuf,
    pub bag: Bag<S>,
    pub mask: Option<Mask>,
}

pub const MANIFEST: &str = "manifest.tsv";

fn img_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.into(),
        source,
    }
}

pub fn write_rgb_png<S: Scalar>(image: &Tensor<S>, path: &Path) -> Result<()> {
    let (w, h, rgb) = tensor_to_rgb8(image)?;
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| img_err(path, e))
}

pub fn read_rgb_png<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    let img = image::open(path).map_err(|e| img_err(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(rgb8_to_tensor(w as usize, h as usize, img.as_raw()))
}

pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::save_buffer(path, &bytes, mask.width() as u32, mask.height() as u32, image::ColorType::L8)
        .map_err(|e| img_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Mask::new(h as usize, w as usize, img.as_raw().iter().map(|&v| v >= 128).collect())
}

/// Writes `images/`, `masks/` and `manifest.tsv` under `dir`.
pub fn write_dataset<S: Scalar>(bags: &[SynthBag<S>], dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::new();
    for (i, sb) in bags.iter().enumerate() {
        let name = format!("{i:05}.png");
        write_rgb_png(sb.bag.image(), &dir.join("images").join(&name))?;
        write_mask_png(&sb.mask, &dir.join("masks").join(&name))?;
        let area = if sb.bag.is_positive() {
            sb.bag.area().to_string()
        } else {
            "0".to_string()
        };
        let _ = writeln!(manifest, "images/{name}\t{}\t{area}", sb.bag.label());
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Parsed manifest line: relative image path, label, area.
pub fn parse_manifest(text: &str, manifest_path: &Path) -> Result<Vec<(PathBuf, u8, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Manifest {
            path: manifest_path.into(),
            line: i + 1,
            msg,
        };
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let label = match fields[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        let area: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad area {:?}", fields[2])))?;
        if !(0.0..=1.0).contains(&area) {
            return Err(err(format!("area {area} outside [0, 1]")));
        }
        if label == 0 && area != 0.0 {
            return Err(err(format!("negative image with area {area}")));
        }
        out.push((PathBuf::from(fields[0]), label, area));
    }
    Ok(out)
}

/// Reads a dataset directory. Masks are only loaded when `with_masks` is
/// set; training never asks for them.
pub fn read_dataset<S: Scalar>(dir: &Path, with_masks: bool) -> Result<Vec<DatasetEntry<S>>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    parse_manifest(&text, &manifest_path)?
        .into_iter()
        .map(|(rel, label, area)| {
            let image = read_rgb_png(&dir.join(&rel))?;
            let mask = if with_masks {
                let name = rel.file_name().ok_or_else(|| Error::invalid(format!("bad image path {rel:?}")))?;
                let mp = dir.join("masks").join(name);
                if mp.exists() {
                    Some(read_mask_png(&mp)?)
                } else {
                    None
                }
            } else {
                None
            };
            Ok(DatasetEntry {
                bag: Bag::new(image, label, area)?,
                path: rel,
                mask,
            })
        })
        .collect()
}
