//! Loss terms of the constrained deep weak supervision objective.
//!
//! For every side map `t` and for the fused map, a bag probability is pooled
//! from the instance probabilities with the generalized mean and scored by
//! cross-entropy against the image label; positive bags additionally pay
//! `(v - a)^2`, where `v` is the mean instance probability and `a` the
//! annotated area fraction. All terms are summed over bags:
//!
//! ```text
//! L = Σ_t (l_mil(t) + η_t l_ac(t)) + l_mil(fuse) + η_fuse l_ac(fuse)
//! ```

use std::sync::Arc;

use crate::autodiff::{RegionGroups, Tape, Var};
use crate::backbone::{SideOutputs, SideVars};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::pooling::{self, InstanceVector, DEFAULT_R};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One weakly labelled training image.
#[derive(Clone, Debug)]
pub struct Bag<S> {
    image: Tensor<S>,
    label: u8,
    area: f64,
    regions: Option<Arc<RegionGroups>>,
}

impl<S: Scalar> Bag<S> {
    /// `image` is `[C, H, W]`; `area` must be 0 for negative bags.
    pub fn new(image: Tensor<S>, label: u8, area: f64) -> Result<Self> {
        if image.dims().len() != 3 {
            return Err(Error::shape("bag", format!("image must be [C,H,W], got {:?}", image.dims())));
        }
        if label > 1 {
            return Err(Error::invalid(format!("bag label must be 0 or 1, got {label}")));
        }
        if !(0.0..=1.0).contains(&area) {
            return Err(Error::invalid(format!("area fraction {area} outside [0, 1]")));
        }
        if label == 0 && area != 0.0 {
            return Err(Error::invalid(format!("negative bag with nonzero area {area}")));
        }
        Ok(Self {
            image,
            label,
            area,
            regions: None,
        })
    }

    /// Uses superpixel regions instead of single pixels as instances.
    pub fn with_regions(mut self, regions: Arc<RegionGroups>) -> Result<Self> {
        let (h, w) = self.image.spatial();
        if regions.labels().len() != h * w {
            return Err(Error::shape(
                "bag",
                format!("regions cover {} pixels, image has {}", regions.labels().len(), h * w),
            ));
        }
        self.regions = Some(regions);
        Ok(self)
    }

    pub fn image(&self) -> &Tensor<S> {
        &self.image
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn regions(&self) -> Option<&Arc<RegionGroups>> {
        self.regions.as_ref()
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Area-constraint weights per side map and for the fused map.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub eta_side: Vec<f64>,
    pub eta_fuse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta_side: vec![2.5, 5.0, 10.0],
            eta_fuse: 10.0,
        }
    }
}

impl LossWeights {
    /// All area constraints off: the unconstrained deep weak supervision loss.
    pub fn unconstrained(sides: usize) -> Self {
        Self {
            eta_side: vec![0.0; sides],
            eta_fuse: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .eta_side
            .iter()
            .chain(std::iter::once(&self.eta_fuse))
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Pooling sharpness plus loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub r: f64,
    pub weights: LossWeights,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            r: DEFAULT_R,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub mil_side: Vec<f64>,
    pub ac_side: Vec<f64>,
    pub mil_fuse: f64,
    pub ac_fuse: f64,
    pub side_total: f64,
    pub fuse_total: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn zeros(sides: usize) -> Self {
        Self {
            mil_side: vec![0.0; sides],
            ac_side: vec![0.0; sides],
            ..Self::default()
        }
    }

    fn finish(&mut self, weights: &LossWeights) {
        self.side_total = self
            .mil_side
            .iter()
            .zip(&self.ac_side)
            .zip(&weights.eta_side)
            .map(|((m, a), e)| m + e * a)
            .sum();
        self.fuse_total = self.mil_fuse + weights.eta_fuse * self.ac_fuse;
        self.total = self.side_total + self.fuse_total;
    }

    /// Adds the per-term values of `other`; totals are recomputed by the caller.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        if self.mil_side.is_empty() {
            *self = Self::zeros(other.mil_side.len());
        }
        for (a, b) in self.mil_side.iter_mut().zip(&other.mil_side) {
            *a += b;
        }
        for (a, b) in self.ac_side.iter_mut().zip(&other.ac_side) {
            *a += b;
        }
        self.mil_fuse += other.mil_fuse;
        self.ac_fuse += other.ac_fuse;
        self.side_total += other.side_total;
        self.fuse_total += other.fuse_total;
        self.total = self.side_total + self.fuse_total;
    }

    pub fn is_finite(&self) -> bool {
        self.mil_side
            .iter()
            .chain(&self.ac_side)
            .chain([&self.mil_fuse, &self.ac_fuse, &self.total])
            .all(|v| v.is_finite())
    }

    pub fn tsv_header(sides: usize) -> String {
        let mut cols = vec!["L".to_string(), "L_side".into(), "L_fuse".into()];
        cols.extend((1..=sides).map(|t| format!("mil_side{t}")));
        cols.extend((1..=sides).map(|t| format!("ac_side{t}")));
        cols.push("mil_fuse".into());
        cols.push("ac_fuse".into());
        cols.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        let mut cols = vec![self.total, self.side_total, self.fuse_total];
        cols.extend(&self.mil_side);
        cols.extend(&self.ac_side);
        cols.push(self.mil_fuse);
        cols.push(self.ac_fuse);
        cols.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join("\t")
    }
}

/// `-[Y log p + (1 - Y) log(1 - p)]` with `p` clamped away from 0 and 1.
pub fn mil_loss(label: u8, bag_prob: f64) -> Result<f64> {
    let p = pooling::clamp_prob(bag_prob);
    match label {
        1 => Ok(-p.ln()),
        0 => Ok(-(1.0 - p).ln()),
        other => Err(Error::invalid(format!("bag label must be 0 or 1, got {other}"))),
    }
}

/// `(v - a)^2` for positive bags, exactly 0 for negative ones.
pub fn area_constraint_loss<S: Scalar>(bag: &Bag<S>, positiveness: f64) -> f64 {
    if bag.is_positive() {
        (positiveness - bag.area).powi(2)
    } else {
        0.0
    }
}

/// `l_mil + η_t l_ac` of side map `t`, each summed over bags.
pub fn side_loss<S: Scalar>(
    t: usize,
    bags: &[Bag<S>],
    side_probs: &[f64],
    positiveness: &[f64],
    weights: &LossWeights,
) -> Result<f64> {
    if bags.len() != side_probs.len() || bags.len() != positiveness.len() {
        return Err(Error::invalid(format!(
            "{} bags, {} bag probabilities, {} positiveness values",
            bags.len(),
            side_probs.len(),
            positiveness.len()
        )));
    }
    let eta = *weights
        .eta_side
        .get(t)
        .ok_or_else(|| Error::invalid(format!("no loss weight for side output {}", t + 1)))?;
    let mut mil = 0.0;
    let mut ac = 0.0;
    for ((bag, &p), &v) in bags.iter().zip(side_probs).zip(positiveness) {
        mil += mil_loss(bag.label, p)?;
        ac += area_constraint_loss(bag, v);
    }
    Ok(mil + eta * ac)
}

fn instances<S: Scalar>(map: &Tensor<S>, regions: Option<&Arc<RegionGroups>>) -> Result<InstanceVector> {
    let pixels = map.to_f64_vec();
    match regions {
        Some(g) => {
            if g.labels().len() != pixels.len() {
                return Err(Error::shape("instances", "region map does not match probability map"));
            }
            InstanceVector::new(g.means(&pixels))
        }
        None => InstanceVector::new(pixels),
    }
}

fn check_outputs<S: Scalar>(bag: &Bag<S>, out: &SideOutputs<S>, objective: &Objective) -> Result<()> {
    let (h, w) = bag.image.spatial();
    if out.side_maps.len() != objective.weights.eta_side.len() {
        return Err(Error::invalid(format!(
            "{} side maps but {} side loss weights",
            out.side_maps.len(),
            objective.weights.eta_side.len()
        )));
    }
    if out.fused_map.dims() != [1, 1, h, w] {
        return Err(Error::shape(
            "total_loss",
            format!("fused map {:?} missing or not at input size {h}x{w}", out.fused_map.dims()),
        ));
    }
    for m in &out.side_maps {
        if m.dims() != [1, 1, h, w] {
            return Err(Error::shape(
                "total_loss",
                format!("side map {:?} not at input size {h}x{w}", m.dims()),
            ));
        }
    }
    Ok(())
}

/// Loss terms of a single bag.
pub fn bag_loss<S: Scalar>(bag: &Bag<S>, out: &SideOutputs<S>, objective: &Objective) -> Result<LossBreakdown> {
    check_outputs(bag, out, objective)?;
    let regions = bag.regions.as_ref();
    let mut b = LossBreakdown::zeros(out.side_maps.len());
    for (t, map) in out.side_maps.iter().enumerate() {
        let iv = instances(map, regions)?;
        b.mil_side[t] = mil_loss(bag.label, pooling::gm_pool(&iv, objective.r)?)?;
        b.ac_side[t] = area_constraint_loss(bag, pooling::positiveness(&iv));
    }
    if out.fusion_layer {
        let iv = instances(&out.fused_map, regions)?;
        b.mil_fuse = mil_loss(bag.label, pooling::gm_pool(&iv, objective.r)?)?;
        b.ac_fuse = area_constraint_loss(bag, pooling::positiveness(&iv));
    }
    b.finish(&objective.weights);
    Ok(b)
}

/// Full objective over a set of bags and their network outputs (one
/// `SideOutputs` of batch size 1 per bag).
pub fn total_loss<S: Scalar>(bags: &[Bag<S>], outputs: &[SideOutputs<S>], objective: &Objective) -> Result<LossBreakdown> {
    objective.weights.validate()?;
    if bags.len() != outputs.len() {
        return Err(Error::invalid(format!("{} bags but {} outputs", bags.len(), outputs.len())));
    }
    let mut acc = LossBreakdown::zeros(objective.weights.eta_side.len());
    for (bag, out) in bags.iter().zip(outputs) {
        acc.accumulate(&bag_loss(bag, out, objective)?);
    }
    acc.finish(&objective.weights);
    Ok(acc)
}

/// Records the per-bag objective on `tape` on top of a forward pass.
pub fn record_bag_objective<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &SideVars,
    bag: &Bag<S>,
    objective: &Objective,
) -> Result<Var> {
    if vars.sides.len() != objective.weights.eta_side.len() {
        return Err(Error::invalid("side outputs do not match side loss weights"));
    }
    let mut terms = Vec::new();
    let maps = vars
        .sides
        .iter()
        .zip(&objective.weights.eta_side)
        .map(|(&v, &eta)| (v, eta))
        .chain(vars.fusion_layer().then_some((vars.fused, objective.weights.eta_fuse)));
    for (map, eta) in maps {
        let inst = match &bag.regions {
            Some(g) => tape.region_mean(map, g.clone())?,
            None => map,
        };
        let prob = tape.gm_pool(inst, objective.r)?;
        terms.push((tape.bce(prob, bag.label)?, S::one()));
        if bag.is_positive() && eta != 0.0 {
            let v = tape.positiveness(inst)?;
            terms.push((tape.sq_diff(v, bag.area)?, S::from_f64_lossy(eta)));
        }
    }
    tape.weighted_sum(&terms)
}

/// Thresholds a `[B, 1, H, W]` probability map; ties at the threshold are negative.
pub fn threshold_map<S: Scalar>(map: &Tensor<S>, threshold: f64) -> Result<Vec<Mask>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let (h, w) = map.spatial();
    Ok(map
        .data()
        .chunks(h * w)
        .map(|plane| {
            let bits = plane.iter().map(|v| v.as_f64() > threshold).collect();
            Mask::new(h, w, bits).expect("plane size")
        })
        .collect())
}

/// Segmentation masks from the fused map, one per image in the batch.
pub fn predict_mask<S: Scalar>(outputs: &SideOutputs<S>, threshold: f64) -> Result<Vec<Mask>> {
    threshold_map(&outputs.fused_map, threshold)
}
