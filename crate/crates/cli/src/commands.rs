use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;
use rayon::prelude::*;

use dwsmil::checkpoint::{load_checkpoint, save_checkpoint};
use dwsmil::eval::{all_maps, evaluate_many, render_heatmap, render_panel, selected_map, EvalReport, MapSelect};
use dwsmil::gradcheck::{check_gm_pool, check_network, check_ops, probe_bags, CheckResult};
use dwsmil::objective::{threshold_map, LossWeights};
use dwsmil::synth::{read_dataset, read_rgb_png, write_dataset, write_mask_png, DatasetEntry};
use dwsmil::train::train_with_observer;
use dwsmil::{build_network, generate, receptive_field_report, slic, Bag, Network32, SlicParams};

use crate::config::RunConfig;

pub const CHECKPOINT: &str = "model.dwsm";
pub const TRAIN_LOG: &str = "train_log.tsv";

#[derive(Debug, thiserror::Error)]
#[error("{failed} of {total} gradient checks failed")]
pub struct GradcheckFailed {
    pub failed: usize,
    pub total: usize,
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| dwsmil::Error::Io {
        path: dir.into(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, body: &str) -> anyhow::Result<()> {
    fs::write(path, body).map_err(|e| dwsmil::Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn attach_superpixels(entries: &mut [DatasetEntry<f32>], params: &SlicParams) -> anyhow::Result<()> {
    entries.par_iter_mut().try_for_each(|e| -> anyhow::Result<()> {
        let sp = slic(e.bag.image(), params).with_context(|| format!("superpixels for {}", e.path.display()))?;
        e.bag = e.bag.clone().with_regions(sp.groups())?;
        Ok(())
    })
}

/// Reads a dataset, attaching superpixel regions when configured. Scoring
/// data gets regions in either superpixel mode, training data only in `train`.
fn load(cfg: &RunConfig, dir: &Path, with_masks: bool) -> anyhow::Result<Vec<DatasetEntry<f32>>> {
    let mut entries = read_dataset::<f32>(dir, with_masks)?;
    let params = if with_masks { cfg.superpixels() } else { cfg.training_superpixels() };
    if let Some(params) = params {
        attach_superpixels(&mut entries, &params)?;
    }
    info!("loaded {} images from {}", entries.len(), dir.display());
    Ok(entries)
}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = cfg.require_path("out")?;
    let spec = cfg.synth();
    let bags = generate::<f32>(&spec)?;
    write_dataset(&bags, &out)?;
    cfg.write_snapshot(&out)?;
    println!(
        "wrote {} positive and {} negative {}x{} images to {}",
        spec.positive_count,
        spec.negative_count,
        spec.image_size,
        spec.image_size,
        out.display()
    );
    Ok(())
}

/// Trains a fresh network and writes checkpoint plus log into `out`.
fn train_into(
    cfg: &RunConfig,
    weights: LossWeights,
    entries: &[DatasetEntry<f32>],
    out: &Path,
) -> anyhow::Result<Network32> {
    create_dir(out)?;
    let mut tc = cfg.train();
    tc.objective.weights = weights;
    let mut network = build_network::<f32>(&cfg.backbone(), cfg.seed())?;
    let bags: Vec<Bag<f32>> = entries.iter().map(|e| e.bag.clone()).collect();
    let every = cfg.log_every();
    let mut log = train_with_observer(&mut network, &bags, &tc, |i, b| {
        if every > 0 && i % every == 0 {
            info!("iteration {i}: L={:.6} L_side={:.6} L_fuse={:.6}", b.total, b.side_total, b.fuse_total);
        }
    })?;
    let ckpt = out.join(CHECKPOINT);
    save_checkpoint(&network, &ckpt)?;
    log.checkpoint = Some(ckpt.clone());
    log.write_tsv(network.config().side_count(), &out.join(TRAIN_LOG))?;
    info!(
        "{} iterations in {:.1}s{}; final loss {}",
        log.entries.len(),
        log.wall_time.as_secs_f64(),
        if log.stopped_early { " (plateau)" } else { "" },
        log.entries.last().map_or("n/a".into(), |b| format!("{:.6}", b.total))
    );
    Ok(network)
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = cfg.require_path("data")?;
    let out = cfg.require_path("out")?;
    let entries = load(cfg, &data, false)?;
    cfg.write_snapshot(&out)?;
    train_into(cfg, cfg.loss_weights(), &entries, &out)?;
    println!("checkpoint: {}", out.join(CHECKPOINT).display());
    Ok(())
}

fn list_images(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| dwsmil::Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn predict(cfg: &RunConfig, images: &[PathBuf]) -> anyhow::Result<()> {
    let ckpt = cfg.require_path("checkpoint")?;
    let out = cfg.require_path("out")?;
    let network: Network32 = load_checkpoint(&ckpt)?;
    let files = list_images(images)?;
    for sub in ["heatmaps", "masks", "panels"] {
        create_dir(&out.join(sub))?;
    }
    cfg.write_snapshot(&out)?;
    let threshold = cfg.threshold();
    let slic_params = cfg.superpixels();
    files.par_iter().try_for_each(|path| -> anyhow::Result<()> {
        let image = read_rgb_png::<f32>(path)?;
        let mut bag = Bag::new(image, 0, 0.0)?;
        if let Some(params) = &slic_params {
            let groups = slic(bag.image(), params)?.groups();
            bag = bag.with_regions(groups)?;
        }
        let entry = DatasetEntry {
            path: path.clone(),
            bag,
            mask: None,
        };
        let outputs = network.forward(entry.bag.image())?;
        let map = selected_map(&outputs, MapSelect::Fused, &entry)?;
        let mask = threshold_map(&map, threshold)?.remove(0);
        let name = format!(
            "{}.png",
            path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned())
        );
        render_heatmap(&map, &out.join("heatmaps").join(&name))?;
        write_mask_png(&mask, &out.join("masks").join(&name))?;
        render_panel(entry.bag.image(), &map, Some(&mask), &out.join("panels").join(&name))?;
        Ok(())
    })?;
    println!("wrote predictions for {} images to {}", files.len(), out.display());
    Ok(())
}

fn report_stem(select: MapSelect) -> String {
    format!("eval_{select}")
}

fn write_reports(reports: &[EvalReport], out: &Path) -> anyhow::Result<()> {
    for r in reports {
        r.write(out, &report_stem(r.select))?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = cfg.require_path("checkpoint")?;
    let data = cfg.require_path("data")?;
    let out = cfg.require_path("out")?;
    let network: Network32 = load_checkpoint(&ckpt)?;
    let entries = load(cfg, &data, true)?;
    create_dir(&out)?;
    cfg.write_snapshot(&out)?;
    let reports = evaluate_many(&network, &entries, cfg.threshold(), &all_maps(network.config().side_count()))?;
    write_reports(&reports, &out)?;
    print!("{}", reports[0].summary());
    for r in &reports[1..] {
        println!(
            "{}: CA mean F {}",
            r.select,
            r.ca_mean_f.map_or("NA".into(), |v| format!("{v:.6}"))
        );
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    let seed = cfg.seed();
    let mut results: Vec<CheckResult> = vec![check_gm_pool(seed, 100)?];
    results.extend(check_ops(seed)?);
    let mut objective = cfg.train().objective;
    objective.weights = cfg.loss_weights();
    results.push(check_network(
        &cfg.backbone(),
        &probe_bags(16, seed)?,
        &objective,
        cfg.gradcheck_samples(),
        seed,
    )?);
    let mut report = String::from("status\tcheck\tsamples\tmax_rel_err\ttolerance\n");
    for r in &results {
        let _ = writeln!(report, "{r}");
    }
    print!("{report}");
    if let Some(out) = cfg.path("out") {
        create_dir(&out)?;
        cfg.write_snapshot(&out)?;
        write_file(&out.join("gradcheck.tsv"), &report)?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(GradcheckFailed {
            failed,
            total: results.len(),
        }
        .into());
    }
    Ok(())
}

pub fn rf(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut table = String::from("layer\trf\tstride\n");
    for row in receptive_field_report(&cfg.backbone())? {
        let _ = writeln!(table, "{row}");
    }
    print!("{table}");
    if let Some(out) = cfg.path("out") {
        create_dir(&out)?;
        cfg.write_snapshot(&out)?;
        write_file(&out.join("rf.tsv"), &table)?;
    }
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub fn sweep_ac(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = cfg.require_path("data")?;
    let out = cfg.require_path("out")?;
    let grid = cfg.ac_grid()?;
    let train_entries = load(cfg, &data, false)?;
    let eval_entries = load(cfg, &cfg.path("eval_data").unwrap_or(data), true)?;
    create_dir(&out)?;
    cfg.write_snapshot(&out)?;
    let mut summary = String::from("run\teta_side\teta_fuse\tca_mean_f\tnc_mean_f\tca_area_error\n");
    let na = |v: Option<f64>| v.map_or("NA".into(), |v| format!("{v:.6}"));
    for (i, weights) in grid.into_iter().enumerate() {
        let dir = out.join(format!("run{i:02}"));
        info!("sweep run {i}: eta_side={} eta_fuse={}", join(&weights.eta_side), weights.eta_fuse);
        let network = train_into(cfg, weights.clone(), &train_entries, &dir)?;
        let reports = evaluate_many(
            &network,
            &eval_entries,
            cfg.threshold(),
            &all_maps(network.config().side_count()),
        )?;
        write_reports(&reports, &dir)?;
        let fused = &reports[0];
        let _ = writeln!(
            summary,
            "run{i:02}\t{}\t{}\t{}\t{}\t{}",
            join(&weights.eta_side),
            weights.eta_fuse,
            na(fused.ca_mean_f),
            na(fused.nc_mean_f),
            na(fused.ca_area_error)
        );
    }
    write_file(&out.join("sweep.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}
