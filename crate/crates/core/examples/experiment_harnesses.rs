//! Part subsets, truncation lengths and cross-corpus transfer, each
//! expressed only through PipelineConfig, on a small corpus.
//!
//! cargo run --release --example experiment_harnesses -- [work-dir]

use std::path::PathBuf;

use gaitflow::nets::NetworkSpec;
use gaitflow::pipeline::{cmd_evaluate, cmd_extract, cmd_synth, cmd_train, cmd_transfer, PipelineConfig, STORE_FILE};
use gaitflow::posepatch::Part;

fn small(work: &std::path::Path, tag: &str, seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.seed = seed;
    c.corpus_root = work.join(tag).join("corpus");
    c.flow_cache = Some(work.join(tag).join("flow"));
    c.corpus.subjects = 8;
    c.corpus.frames = 48;
    c.network = NetworkSpec::tiny_wrn(4);
    c.train.batch_size = 32;
    c.train.batches_per_epoch = Some(40);
    c.train.max_epochs = 6;
    c.train.learning_rate = 0.05;
    c
}

fn main() -> gaitflow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/harnesses".into()));
    let base = small(&work, "a", 1);
    if !base.corpus_root.join("manifest.toml").is_file() {
        cmd_synth(&base, false)?;
    }

    println!("part subsets");
    for (name, parts) in [
        ("full body", vec![Part::FullBody]),
        ("upper+lower", vec![Part::UpperBody, Part::LowerBody]),
        ("all five", Part::ALL.to_vec()),
    ] {
        let cfg = PipelineConfig { parts, ..base.clone() };
        let dir = work.join("parts").join(name.replace(['+', ' '], "_"));
        cmd_train(&cfg, &dir.join("checkpoint"))?;
        cmd_extract(&cfg, &dir.join("checkpoint"), &dir.join(STORE_FILE))?;
        let r = cmd_evaluate(&cfg, &dir.join(STORE_FILE), &dir.join("report"))?;
        println!("  {name:<12} rank1 {:.3} eer {:.3}", r.rank1, r.eer);
    }

    println!("truncation");
    let ck = work.join("parts").join("all_five").join("checkpoint");
    for l in [16, 32, 48] {
        let cfg = PipelineConfig { truncation: Some(l), ..base.clone() };
        let dir = work.join("trunc").join(l.to_string());
        cmd_extract(&cfg, &ck, &dir.join(STORE_FILE))?;
        let r = cmd_evaluate(&cfg, &dir.join(STORE_FILE), &dir.join("report"))?;
        println!("  {l:>3} frames rank1 {:.3} eer {:.3}", r.rank1, r.eer);
    }

    println!("transfer");
    let mut other = small(&work, "b", 2);
    other.corpus.ranges.height = (60.0, 90.0);
    if !other.corpus_root.join("manifest.toml").is_file() {
        cmd_synth(&other, false)?;
    }
    let r = cmd_transfer(&base, &other, &work.join("transfer"))?;
    println!("  train a, evaluate b: rank1 {:.3} eer {:.3}", r.rank1, r.eer);
    Ok(())
}
