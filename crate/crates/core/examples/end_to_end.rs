//! Synthesize the default corpus, train a tiny WRN, extract concat
//! descriptors and report identification and verification scores.
//!
//! cargo run --release --example end_to_end -- [work-dir] [config.toml]

use std::path::PathBuf;
use std::time::Instant;

use gaitflow::nets::NetworkSpec;
use gaitflow::pipeline::{cmd_evaluate, cmd_extract, cmd_synth, cmd_train, PipelineConfig, STORE_FILE};

fn main() -> gaitflow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "target/end_to_end".into()));
    let mut cfg = match args.next() {
        Some(p) => PipelineConfig::load(Some(p.as_ref()))?,
        None => {
            let mut c = PipelineConfig::load(None)?;
            c.network = NetworkSpec::tiny_wrn(10);
            c.train.batch_size = 32;
            c.train.batches_per_epoch = Some(100);
            c.train.max_epochs = 20;
            c.train.learning_rate = 0.05;
            c
        }
    };
    cfg.corpus_root = work.join("corpus");
    cfg.flow_cache = Some(work.join("flow"));

    let t = Instant::now();
    if !cfg.corpus_root.join("manifest.toml").is_file() {
        cmd_synth(&cfg, false)?;
    }
    println!("corpus ready after {:.1?}", t.elapsed());
    let outcome = cmd_train(&cfg, &work.join("checkpoint"))?;
    print!("{}", outcome.log_text());
    println!("trained after {:.1?}", t.elapsed());
    let store = work.join("descriptors").join(STORE_FILE);
    cmd_extract(&cfg, &work.join("checkpoint"), &store)?;
    let report = cmd_evaluate(&cfg, &store, &work.join("report"))?;
    println!("rank1 {:.4} rank5 {:.4} eer {:.4} total {:.1?}", report.rank1, report.rank5, report.eer, t.elapsed());
    Ok(())
}
