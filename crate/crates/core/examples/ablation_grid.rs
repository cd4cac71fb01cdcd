//! Trains and tests ablation rows on the synthetic corpus and prints the
//! table.
//!
//! cargo run --release --example ablation_grid -- --grid components --seeds 0,1,2

use clap::Parser;
use dualcap::sfn::FusionMode;
use dualcap::synthdata::GenConfig;
use dualcap::trainer::{fusion_rows, run_ablation, component_rows, AblationRow, Toggles, TrainConfig, Workspace};

#[derive(Parser)]
struct Args {
    /// components, fusion, both, full, or accept
    #[arg(long, default_value = "components")]
    grid: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    sfn_heads: usize,
    #[arg(long, default_value_t = 16)]
    sfn_d_k: usize,
}

fn main() -> dualcap::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let gen = GenConfig {
        train: a.train,
        ..GenConfig::default()
    };
    let base = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        pretrain_epochs: a.pretrain_epochs,
        sfn_heads: a.sfn_heads,
        sfn_d_k: a.sfn_d_k,
        ..TrainConfig::default()
    };
    let ws = Workspace::generate(a.data_seed, &gen, base.d_text)?;
    let rows: Vec<AblationRow> = match a.grid.as_str() {
        "fusion" => fusion_rows(),
        "both" => component_rows().into_iter().chain(fusion_rows()).collect(),
        "full" => component_rows().into_iter().filter(|r| r.toggles == Toggles::FULL).collect(),
        "accept" => {
            let mut rows: Vec<AblationRow> = component_rows().into_iter().filter(|r| r.name != "I2T+I2I").collect();
            rows.extend(fusion_rows().into_iter().filter(|r| r.fusion_mode == FusionMode::ConcatMlp));
            rows
        }
        _ => component_rows(),
    };
    let table = run_ablation(&base, &ws, &rows, &a.seeds)?;
    print!("{}", table.render());
    print!("{}", table.to_tsv());
    for r in &table.rows {
        println!("{}: {:.1}s", r.row.name, r.wall_seconds);
    }
    Ok(())
}
