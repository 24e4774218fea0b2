//! Trains with and without the area constraint on a synthetic set and
//! prints per-map F-measures.
//!
//! usage: ablation [size] [iterations] [w1,w2,w3] [lr]

use dwsmil::eval::{all_maps, evaluate_many};
use dwsmil::synth::DatasetEntry;
use dwsmil::{build_network, generate, BackboneConfig, LossWeights, Objective, SynthSpec, TrainConfig};

fn main() -> dwsmil::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).map_or(128, |s| s.parse().unwrap());
    let iterations: usize = args.get(2).map_or(200, |s| s.parse().unwrap());
    let widths: Vec<usize> = args
        .get(3)
        .map_or("8,16,32".into(), |s| s.clone())
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let lr: f64 = args.get(4).map_or(1e-3, |s| s.parse().unwrap());
    let spec = SynthSpec { image_size: size, ..SynthSpec::default() };
    let data = generate::<f32>(&spec)?;
    let bags: Vec<_> = data.iter().map(|s| s.bag.clone()).collect();
    let entries: Vec<DatasetEntry<f32>> = data
        .iter()
        .enumerate()
        .map(|(i, s)| DatasetEntry { path: format!("{i:05}").into(), bag: s.bag.clone(), mask: Some(s.mask.clone()) })
        .collect();
    let cfg = BackboneConfig::with_widths([widths[0], widths[1], widths[2]]);
    for (name, weights) in [("ac", LossWeights::default()), ("no_ac", LossWeights::unconstrained(3))] {
        let mut net = build_network::<f32>(&cfg, 0)?;
        let tc = TrainConfig {
            iterations,
            learning_rate: lr,
            objective: Objective { weights, ..Objective::default() },
            ..TrainConfig::default()
        };
        let t = std::time::Instant::now();
        let log = dwsmil::train::train_with_observer(&mut net, &bags, &tc, |i, b| {
            if i % 25 == 0 {
                eprintln!("{name} it {i} L {:.4} mil_fuse {:.4} ac_fuse {:.5} ({:.1}s)", b.total, b.mil_fuse, b.ac_fuse, t.elapsed().as_secs_f64());
            }
        })?;
        let reports = evaluate_many(&net, &entries, 0.5, &all_maps(3))?;
        println!("{name}: {} iterations in {:.1}s (early stop: {})", log.entries.len(), log.wall_time.as_secs_f64(), log.stopped_early);
        for r in reports {
            println!(
                "  {}\tCA F {:.4}\tNC F {:.4}\tarea err {:.4}",
                r.select,
                r.ca_mean_f.unwrap(),
                r.nc_mean_f.unwrap(),
                r.ca_area_error.unwrap()
            );
        }
    }
    Ok(())
}
