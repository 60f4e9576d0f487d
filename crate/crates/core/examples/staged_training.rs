//! Runs the staged commands on a small benchmark in a scratch directory:
//! data generation, the three training stages and evaluation of every
//! head.
//!
//! Usage: `staged_training [OUT_DIR]`

use std::path::PathBuf;

use ddn::cli::{cmd_eval, cmd_gen_data, cmd_train, EvalOptions, TrainOptions};
use ddn::config::RunConfig;
use ddn::network::TransformKind;
use ddn::pipeline::Head;
use ddn::trainer::Stage;

const SMALL: &str = "seed = 5
[trainer]
epochs_frozen = 8
epochs_unfrozen = 6
[dataset]
train_count = 400
test_count = 100
";

fn main() -> ddn::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "staged_run".into()));
    let (data, out) = (root.join("data"), root.join("out"));
    let cfg = RunConfig::from_toml(SMALL)?;
    let manifest = cmd_gen_data(&cfg, &data)?;
    println!("dataset {}", manifest.dataset_hash);

    let mut last = None;
    for stage in [Stage::Sbn, Stage::Ptn, Stage::Joint] {
        let opts = TrainOptions {
            stage,
            transform: TransformKind::Tps,
            data: data.clone(),
            out: out.clone(),
            resume: None,
            max_epochs: None,
        };
        let o = cmd_train(&cfg, &opts, |line| println!("  {line}"))?;
        println!("{} -> {}", stage.as_str(), o.checkpoint.display());
        last = Some(o.checkpoint);
    }

    let joint = last.expect("three stages ran");
    for head in [Head::Sbn, Head::Ptn, Head::Full] {
        let e = cmd_eval(
            &cfg,
            &EvalOptions {
                checkpoint: joint.clone(),
                data: data.clone(),
                head,
                out: out.clone(),
                force_truth: false,
            },
        )?;
        println!("{:<4} PCK@0.1 {:.1}%  error {:.2}%", head.as_str(), 100.0 * e.report.mean_at(0.1).unwrap_or(0.0), e.mean_error);
    }
    Ok(())
}
