//! Synthesizes the 10-speaker corpus, fine-tunes the toy model with the
//! chosen pooling and prints per-epoch accuracy.
//!
//! `cargo run --release --example desk_run -p tgp-sid -- [pooling] [epochs]`

use std::time::Instant;

use tgp_sid::config::RunConfig;
use tgp_sid::corpus::{self, FeatureSet, Split, SynthSpec};
use tgp_sid::pooling::{PoolingConfig, PoolingKind};
use tgp_sid::train::loops::Finetuner;

fn main() -> tgp_sid::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = PoolingKind::parse(args.first().map_or("tgp", String::as_str))?;
    let mut cfg = RunConfig::default();
    cfg.pooling = PoolingConfig::new(kind, 1);
    if let Some(e) = args.get(1) {
        cfg.finetune.epochs = e.parse().expect("epochs");
    }
    let dir = std::env::temp_dir().join("tgp-sid-desk-run");
    let manifest = corpus::synth_corpus(&SynthSpec::default(), &dir)?;
    let manifest = corpus::read_manifest(manifest)?;
    let vocab = manifest.vocabulary();
    let t0 = Instant::now();
    let train = FeatureSet::load(&manifest.split(Split::Train), &vocab, &cfg.frontend)?;
    let test = FeatureSet::load(&manifest.split(Split::Test), &vocab, &cfg.frontend)?;
    println!("features: {} train, {} test in {:.1?}", train.len(), test.len(), t0.elapsed());
    let frames = train.frames[0].num_frames();
    let mut ft = Finetuner::new(cfg, vocab, frames, None)?;
    while ft.epoch < ft.config.finetune.epochs {
        let steps = ft.train_epoch(&train)?;
        let last = steps.last().unwrap();
        println!(
            "epoch {:>2} loss {:.3} train {:.3} test {:.3} [{:.1?}]",
            ft.epoch,
            last.loss,
            ft.evaluate(&train)?,
            ft.evaluate(&test)?,
            t0.elapsed()
        );
    }
    Ok(())
}
