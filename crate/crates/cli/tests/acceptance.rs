//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs with `harness = false` so the lines always show in `cargo test`
//! output. Set `DWSMIL_ACCEPT_ONLY=1,4,9` to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dwsmil::backbone::{BackboneConfig, StageSpec};
use dwsmil::checkpoint::{encode, load_checkpoint, save_checkpoint};
use dwsmil::eval::{all_maps, evaluate_many, EvalReport};
use dwsmil::gradcheck::{check_network, gm_central_difference, probe_bags, rel_err};
use dwsmil::objective::mil_loss;
use dwsmil::synth::{read_rgb_png, DatasetEntry};
use dwsmil::train::train_with_observer;
use dwsmil::{
    build_network, f_measure, generate, gm_pool, gm_pool_grad, positiveness, receptive_field_report, slic, total_loss,
    Bag, InstanceVector, LossWeights, Mask, Network32, Network64, Objective, SlicParams, SynthSpec, Tensor,
    TrainConfig,
};

/// Outcome of one criterion: detail text on success, reason on failure.
type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn e2s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1. receptive field table
fn table_rows() -> Outcome {
    let t = Instant::now();
    let rows = receptive_field_report(&BackboneConfig::default()).map_err(e2s)?;
    let got: Vec<(String, usize, usize)> = rows.iter().map(|r| (r.layer.clone(), r.rf, r.stride)).collect();
    let want = vec![
        ("c1_2".to_string(), 5, 1),
        ("c2_2".to_string(), 14, 2),
        ("c3_3".to_string(), 40, 4),
    ];
    ensure(got == want, || format!("got {got:?}"))?;
    within(t.elapsed(), 1.0, "report")?;
    Ok(format!("{got:?}"))
}

// 2. generalized-mean pooling
fn gm_pooling() -> Outcome {
    let t = Instant::now();
    // ((0.1^4 + 0.9^4) / 2)^(1/4) evaluated with 40 significant digits
    let reference = 0.756_835_609_405_891_684_863_f64;
    let two = gm_pool(&InstanceVector::new([0.1, 0.9]).map_err(e2s)?, 4.0).map_err(e2s)?;
    ensure((two - reference).abs() <= 1e-12, || format!("two-point value {two}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = if i == 0 { 4096 } else { rng.gen_range(2..=4096) };
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let iv = InstanceVector::new(p.iter().copied()).map_err(e2s)?;
        let (lo, hi) = p.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let mut prev = f64::NEG_INFINITY;
        for r in [1.0, 2.0, 4.0, 8.0] {
            let g = gm_pool(&iv, r).map_err(e2s)?;
            ensure(lo <= g && g <= hi, || format!("vector {i} r={r}: {g} outside [{lo}, {hi}]"))?;
            ensure(g >= prev, || format!("vector {i}: r={r} gives {g} below {prev}"))?;
            prev = g;
            if r == 1.0 {
                ensure(g == positiveness(&iv), || format!("vector {i}: r=1 is not the mean"))?;
                let naive = p.iter().sum::<f64>() / n as f64;
                ensure((g - naive).abs() <= 1e-12, || format!("vector {i}: mean {g} vs {naive}"))?;
            }
            let grad = gm_pool_grad(&iv, r).map_err(e2s)?;
            for _ in 0..4 {
                let k = rng.gen_range(0..n);
                let numeric = gm_central_difference(&p, k, 1e-5 * p[k], r);
                worst = worst.max(rel_err(grad[k], numeric));
            }
        }
    }
    ensure(worst <= 1e-5, || format!("gradient rel err {worst:.2e}"))?;
    within(t.elapsed(), 10.0, "pooling checks")?;
    Ok(format!("two-point {two:.15}, max grad rel err {worst:.2e}"))
}

// 3. end-to-end gradient check
fn network_gradients() -> Outcome {
    let t = Instant::now();
    let cfg = BackboneConfig::with_widths([2, 3, 4]);
    let r = check_network(&cfg, &probe_bags(16, 3).map_err(e2s)?, &Objective::default(), 10, 3).map_err(e2s)?;
    ensure(r.passed(), || r.to_string())?;
    within(t.elapsed(), 60.0, "gradient check")?;
    Ok(format!("10 parameters, max rel err {:.2e}", r.max_rel_err))
}

// 4. single output, no area constraint: plain MIL loss
fn baseline_reduction() -> Outcome {
    let cfg = BackboneConfig {
        stages: vec![StageSpec::new(2, 4)],
        fusion_weights: vec![1.0],
        ..BackboneConfig::default()
    };
    let obj = Objective {
        r: 4.0,
        weights: LossWeights {
            eta_side: vec![0.0],
            eta_fuse: 0.0,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let net: Network64 = build_network(&cfg, trial).map_err(e2s)?;
        let size = rng.gen_range(4..20);
        let img: Vec<f64> = (0..3 * size * size).map(|_| rng.gen()).collect();
        let label = (trial % 2) as u8;
        let area = if label == 1 { rng.gen_range(0.05..0.5) } else { 0.0 };
        let bag = Bag::new(Tensor::new(vec![3, size, size], img).map_err(e2s)?, label, area).map_err(e2s)?;
        let out = net.forward(bag.image()).map_err(e2s)?;
        let probs = InstanceVector::new(out.side_maps[0].to_f64_vec()).map_err(e2s)?;
        let plain = mil_loss(label, gm_pool(&probs, 4.0).map_err(e2s)?).map_err(e2s)?;
        let total = total_loss(&[bag], &[out], &obj).map_err(e2s)?.total;
        worst = worst.max((total - plain).abs());
    }
    ensure(worst <= 1e-12, || format!("max |total - mil| = {worst:.2e}"))?;
    Ok(format!("20 random bags, max |total - mil| = {worst:.1e}"))
}

// 5. area-constraint gating on negatives
fn ac_gating() -> Outcome {
    let spec = SynthSpec {
        image_size: 32,
        positive_count: 0,
        negative_count: 8,
        seed: 5,
        ..SynthSpec::default()
    };
    let bags: Vec<Bag<f32>> = generate::<f32>(&spec).map_err(e2s)?.into_iter().map(|s| s.bag).collect();
    let mut net: Network32 = build_network(&BackboneConfig::with_widths([4, 4, 4]), 5).map_err(e2s)?;
    // default schedule: 1000 iterations or until the plateau rule fires
    let cfg = TrainConfig::default();
    let mut nonzero = 0usize;
    let log = train_with_observer(&mut net, &bags, &cfg, |_, b| {
        nonzero += b.ac_side.iter().chain([&b.ac_fuse]).filter(|&&v| v != 0.0).count();
    })
    .map_err(e2s)?;
    ensure(!log.entries.is_empty(), || "no iterations logged".into())?;
    ensure(nonzero == 0, || format!("{nonzero} nonzero area terms"))?;
    Ok(format!("{} iterations, every area term exactly 0", log.entries.len()))
}

/// Training setup shared by the ablation and side-output checks.
const ABLATION_SIZE: usize = 128;
const ABLATION_WIDTHS: [usize; 3] = [8, 16, 32];
const ABLATION_ITERATIONS: usize = 200;

struct Ablation {
    with_ac: Vec<EvalReport>,
    without_ac: Vec<EvalReport>,
    seconds: f64,
}

fn run_ablation() -> Result<Ablation, String> {
    let t = Instant::now();
    let spec = SynthSpec {
        image_size: ABLATION_SIZE,
        positive_count: 40,
        negative_count: 80,
        seed: 0,
        ..SynthSpec::default()
    };
    let data = generate::<f32>(&spec).map_err(e2s)?;
    let bags: Vec<Bag<f32>> = data.iter().map(|s| s.bag.clone()).collect();
    let entries: Vec<DatasetEntry<f32>> = data
        .iter()
        .enumerate()
        .map(|(i, s)| DatasetEntry {
            path: format!("{i:05}.png").into(),
            bag: s.bag.clone(),
            mask: Some(s.mask.clone()),
        })
        .collect();
    let backbone = BackboneConfig::with_widths(ABLATION_WIDTHS);
    let mut reports = Vec::new();
    for weights in [LossWeights::default(), LossWeights::unconstrained(3)] {
        let mut net: Network32 = build_network(&backbone, 0).map_err(e2s)?;
        let cfg = TrainConfig {
            iterations: ABLATION_ITERATIONS,
            objective: Objective {
                weights,
                ..Objective::default()
            },
            ..TrainConfig::default()
        };
        train_with_observer(&mut net, &bags, &cfg, |_, _| {}).map_err(e2s)?;
        reports.push(evaluate_many(&net, &entries, 0.5, &all_maps(3)).map_err(e2s)?);
    }
    let without_ac = reports.pop().expect("two runs");
    Ok(Ablation {
        with_ac: reports.pop().expect("two runs"),
        without_ac,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn get(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

// 6. area constraint helps on synthetic data
fn ablation(a: &Ablation) -> Outcome {
    let (c, d) = (&a.with_ac[0], &a.without_ac[0]);
    let (cf, df) = (get(c.ca_mean_f), get(d.ca_mean_f));
    let (ce, de) = (get(c.ca_area_error), get(d.ca_area_error));
    let (cn, dn) = (get(c.nc_mean_f), get(d.nc_mean_f));
    let detail = format!(
        "CA F {cf:.4} vs {df:.4}, area err {ce:.4} vs {de:.4}, NC F {cn:.4} / {dn:.4} (with / without AC, {:.0}s)",
        a.seconds
    );
    ensure(cf - df >= 0.02, || format!("(a) CA margin below 0.02: {detail}"))?;
    ensure(ce < de, || format!("(b) area error not reduced: {detail}"))?;
    ensure(cn >= 0.95 && dn >= 0.95, || format!("(c) NC F below 0.95: {detail}"))?;
    ensure(a.seconds <= 30.0 * 60.0, || format!("runtime over 30 minutes: {detail}"))?;
    Ok(detail)
}

// 7. fused output at least as good as the sides, deeper sides better
fn side_trend(a: &Ablation) -> Outcome {
    let f: Vec<f64> = a.with_ac.iter().map(|r| get(r.ca_mean_f)).collect();
    let detail = format!("fused {:.4}, sides {:.4} {:.4} {:.4}", f[0], f[1], f[2], f[3]);
    for (t, &side) in f[1..].iter().enumerate() {
        ensure(f[0] >= side - 0.01, || format!("fused below side{}: {detail}", t + 1))?;
    }
    ensure(f[3] >= f[1], || format!("side3 below side1: {detail}"))?;
    Ok(detail)
}

// 8. superpixel partitions
fn superpixels() -> Outcome {
    let t = Instant::now();
    let mut images: Vec<(String, Tensor<f32>)> = generate::<f32>(&SynthSpec {
        image_size: 96,
        positive_count: 12,
        negative_count: 8,
        seed: 8,
        ..SynthSpec::default()
    })
    .map_err(e2s)?
    .into_iter()
    .enumerate()
    .map(|(i, s)| (format!("synthetic {i}"), s.bag.image().clone()))
    .collect();
    let photos = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/photos");
    for name in ["astronaut", "coffee", "chelsea", "rocket", "retina"] {
        let img = read_rgb_png::<f32>(&photos.join(format!("{name}.png"))).map_err(e2s)?;
        images.push((name.to_string(), img));
    }
    let mut worst: f64 = 0.0;
    for (name, img) in &images {
        for k in [16, 64, 256] {
            let sp = slic(img, &SlicParams::new(k)).map_err(e2s)?;
            ensure(sp.is_connected(), || format!("{name} k={k}: disconnected region"))?;
            let dev = (sp.region_count() as f64 - k as f64).abs() / k as f64;
            ensure(dev <= 0.2, || format!("{name} k={k}: {} regions", sp.region_count()))?;
            worst = worst.max(dev);
        }
    }
    within(t.elapsed(), 30.0, "superpixels")?;
    Ok(format!("{} images x 3 k values, max count deviation {:.1}%", images.len(), worst * 100.0))
}

// 9. F-measure against direct set counting
fn f_measure_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let dh = rng.gen_range(0.0..1.0);
        let dg = rng.gen_range(0.0..1.0);
        let hb: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(dh)).collect();
        let gb: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(dg)).collect();
        let hm = Mask::new(h, w, hb.clone()).map_err(e2s)?;
        let gm = Mask::new(h, w, gb.clone()).map_err(e2s)?;
        let got = f_measure(&hm, &gm).map_err(e2s)?;
        let hs: std::collections::HashSet<usize> = (0..h * w).filter(|&j| hb[j]).collect();
        let gs: std::collections::HashSet<usize> = (0..h * w).filter(|&j| gb[j]).collect();
        let inter = hs.intersection(&gs).count() as f64;
        let want = if hs.is_empty() && gs.is_empty() {
            (1.0, 1.0, 1.0)
        } else {
            let p = if hs.is_empty() { 0.0 } else { inter / hs.len() as f64 };
            let r = if gs.is_empty() { 0.0 } else { inter / gs.len() as f64 };
            (p, r, if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        };
        for (a, b) in [(got.0, want.0), (got.1, want.1), (got.2, want.2)] {
            worst = worst.max((a - b).abs());
        }
        ensure(worst <= 1e-12, || format!("pair {i}: {got:?} vs {want:?}"))?;
    }
    within(t.elapsed(), 5.0, "f-measure")?;
    Ok(format!("1000 pairs, max deviation {worst:.1e}"))
}

fn dwsmil(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dwsmil"))
        .args(args)
        .output()
        .map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

// 10. identical seeds give identical training runs
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let p = |s: &str| dir.path().join(s).to_str().expect("utf-8 path").to_string();
    let common = ["--set", "stages=2x4,2x6,3x8", "--set", "iterations=8", "--seed", "10", "--set", "log_every=0"];
    let mut synth = vec!["synth", "--out"];
    let data = p("data");
    synth.push(&data);
    synth.extend(["--set", "image_size=32", "--set", "positive_count=4", "--set", "negative_count=4"]);
    dwsmil(&synth)?;
    for run in ["a", "b"] {
        let out = p(run);
        let mut args = vec!["train", "--data", data.as_str(), "--out", out.as_str()];
        args.extend(common);
        dwsmil(&args)?;
    }
    for f in ["model.dwsm", "train_log.tsv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).map_err(e2s)?;
        let b = std::fs::read(dir.path().join("b").join(f)).map_err(e2s)?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok("checkpoints and logs bit-identical".into())
}

// 11. checkpoint round trip
fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let net: Network32 = build_network(&BackboneConfig::default(), 11).map_err(e2s)?;
    let (a, b) = (dir.path().join("a.dwsm"), dir.path().join("b.dwsm"));
    save_checkpoint(&net, &a).map_err(e2s)?;
    let back: Network32 = load_checkpoint(&a).map_err(e2s)?;
    save_checkpoint(&back, &b).map_err(e2s)?;
    let (x, y) = (std::fs::read(&a).map_err(e2s)?, std::fs::read(&b).map_err(e2s)?);
    ensure(x == y && x == encode(&net), || "saved files differ".into())?;
    Ok(format!("{} bytes, byte-identical", x.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    })
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("DWSMIL_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let simple: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "receptive field table", table_rows),
        (2, "generalized mean pooling", gm_pooling),
        (3, "end-to-end gradient check", network_gradients),
        (4, "baseline reduction", baseline_reduction),
        (5, "area constraint gating", ac_gating),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            results.push((n, name, guarded(f)));
        }
    }
    if wanted(6) || wanted(7) {
        let mut ab = None;
        let setup = guarded(|| {
            ab = Some(run_ablation()?);
            Ok(String::new())
        });
        for (n, name, check) in [
            (6, "area constraint ablation", ablation as fn(&Ablation) -> Outcome),
            (7, "side output trend", side_trend),
        ] {
            if wanted(n) {
                let r = match (&ab, &setup) {
                    (Some(a), _) => guarded(|| check(a)),
                    (None, Err(e)) => Err(format!("training failed: {e}")),
                    (None, Ok(_)) => Err("no result".into()),
                };
                results.push((n, name, r));
            }
        }
    }
    let rest: [(usize, &str, fn() -> Outcome); 4] = [
        (8, "superpixel partitions", superpixels),
        (9, "f-measure oracle", f_measure_oracle),
        (10, "training determinism", determinism),
        (11, "checkpoint round trip", checkpoint_round_trip),
    ];
    for (n, name, f) in rest {
        if wanted(n) {
            results.push((n, name, guarded(f)));
        }
    }

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("PASS  criterion {n:>2}  {name}: {d}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  criterion {n:>2}  {name}: {e}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
