use std::fs;

use geonew::data::{generate_dataset, DatasetConfig, Split};

use crate::config::{load_json, sha256_hex, write_json};
use crate::error::NumericalExt;
use crate::GenerateArgs;

pub fn run(args: &GenerateArgs) -> anyhow::Result<()> {
    let mut cfg: DatasetConfig = match &args.config {
        Some(p) => load_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let manifest = generate_dataset(&cfg, &args.out).classify()?;
    write_json(&args.out.join("config.json"), &cfg)?;

    let path = args.out.join("manifest.json");
    let bytes = fs::read(&path)?;
    println!("manifest: {}", path.display());
    for split in Split::ALL {
        println!("{split}: {}", manifest.count(split));
    }
    println!("sha256: {}", sha256_hex(&bytes));
    Ok(())
}
