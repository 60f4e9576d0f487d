//! Trains all stages on the synthetic benchmark and prints the ablation
//! table.
//!
//! Usage: `ablation [CONFIG.toml] [--curves]`

use ddn::config::RunConfig;
use ddn::dataset::generate_synthetic;
use ddn::pipeline::run_ablation;

fn main() -> ddn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let show_curves = args.iter().any(|a| a == "--curves");
    let cfg = match args.iter().find(|a| !a.starts_with("--")) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::default(),
    };
    let (train, test) = generate_synthetic(&cfg.dataset)?;
    let ablation = run_ablation(&cfg, &train, &test, |line| eprintln!("{line}"))?;
    if show_curves {
        for (stage, curve) in &ablation.curves {
            let losses: Vec<String> = curve.iter().map(|r| format!("{:.2}", r.train_loss)).collect();
            println!("{stage}: {}", losses.join(" "));
        }
    }
    print!("{}", ablation.table());
    for row in &ablation.rows {
        println!("{:<6} mean normalized error {:.2}%", row.method, row.mean_error);
    }
    println!("total {:.1}s", ablation.seconds);
    Ok(())
}
