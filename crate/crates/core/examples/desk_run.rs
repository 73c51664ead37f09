//! Trains the desk-scale recipe and prints the evaluation report.
//!
//! `cargo run --release -p m2dt-core --example desk_run -- [key=value ...]`

use std::time::Instant;

use m2dt_core::checkpoint;
use m2dt_core::diffusion::make_zero_snr_schedule;
use m2dt_core::model::ModelParams;
use m2dt_core::eval::{evaluate, EvalConfig};
use m2dt_core::sampling::Denoiser;
use m2dt_core::synthetic::make_prototypes;
use m2dt_core::training::{train_with, TrainingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainingConfig { out_dir: std::env::temp_dir().join("m2dt-desk"), ..Default::default() };
    let mut eval = EvalConfig::default();
    let mut load = None;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k {
            "eval_samples" => eval.samples = v.parse()?,
            "sampler_steps" => eval.sampler_steps = v.parse()?,
            "eval_seed" => eval.seed = v.parse()?,
            "load" => load = Some(std::path::PathBuf::from(v)),
            _ => cfg.set(k, v)?,
        }
    }
    let params = match load {
        Some(path) => ModelParams::from_tensors(&checkpoint::load(&path)?)?,
        None => {
            let start = Instant::now();
            let mut window = 0.0f32;
            let outcome = train_with(&cfg, |m| {
                window += m.loss;
                if m.step % 100 == 0 {
                    let secs = start.elapsed().as_secs_f32();
                    println!("step {:5} {:8} loss {:.4} grad {:.3} [{secs:.0}s]", m.step, m.stage, window / 100.0, m.grad_norm);
                    window = 0.0;
                }
            })?;
            println!("trained in {:.1}s", start.elapsed().as_secs_f32());
            outcome.state.params
        }
    };

    let bank = make_prototypes(&cfg.data)?;
    let sched = make_zero_snr_schedule(cfg.diffusion_steps)?;
    let model = Denoiser::new(params, cfg.layout(), cfg.variant);
    let t = Instant::now();
    let report = evaluate(&model, &bank, &sched, &eval)?;
    print!("{report}");
    println!("evaluated in {:.1}s", t.elapsed().as_secs_f32());
    Ok(())
}
