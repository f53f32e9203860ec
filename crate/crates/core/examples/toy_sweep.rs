//! Trains the toy SEViT model and prints per-member accuracy under PGD.
//!
//! Knobs: SIGNAL, NOISE, FREQUENCY and EPOCHS environment variables.
//!
//! `cargo run --release -p sevit-core --example toy_sweep -- [depth] [random_start] [seed] [flatten|mean]`

use sevit_core::analysis::{build_conditions, head_accuracy_sweep};
use sevit_core::attacks::{input_gradient, AttackConfig, AttackTarget, GrayBoxTarget};
use sevit_core::backbone::{train_backbone, Backbone, BackboneConfig, BackboneTrainConfig};
use sevit_core::data::{generate_synthetic, SyntheticConfig};
use sevit_core::ensemble::{train_heads, FusionStrategy, HeadConfig, HeadInput, SevitModel, TieBreak};
use sevit_core::nn::OptimizerConfig;

fn main() -> sevit_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let depth: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let random_start = args.get(2).is_none_or(|a| a != "false");
    let seed: u64 = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(0);
    let input = match args.get(4).map(String::as_str) {
        Some("mean") => HeadInput::MeanPool,
        _ => HeadInput::Flatten,
    };
    let knob = |name: &str, default: f64| std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default);
    let synth = SyntheticConfig {
        signal: knob("SIGNAL", 0.1),
        noise: knob("NOISE", 0.2),
        frequency: knob("FREQUENCY", 2.4),
        ..Default::default()
    };
    let data = |n, seed| generate_synthetic(&SyntheticConfig { samples_per_class: n, ..synth }, seed);
    let (train, test) = (data(1000, 1)?, data(250, 2)?);
    let mut backbone = Backbone::new(BackboneConfig { depth, ..Default::default() }, seed)?;
    let cfg = BackboneTrainConfig { optimizer: OptimizerConfig { epochs: knob("EPOCHS", 8.0) as usize, seed, ..Default::default() }, ..Default::default() };
    train_backbone(&mut backbone, &train, &cfg)?;
    let blocks: Vec<usize> = (1..depth).collect();
    let heads = train_heads(&backbone, &train, None, &blocks, &HeadConfig { input, ..Default::default() }, seed)?;
    let model = SevitModel::new(backbone, heads.heads, FusionStrategy::default())?;
    let suite: Vec<AttackConfig> = [0.003, 0.01, 0.03]
        .into_iter()
        .map(|e| AttackConfig { random_start, ..AttackConfig::pgd(e) })
        .collect();
    let (conditions, _) = build_conditions(&model, &test, &suite, 250)?;
    let target = GrayBoxTarget::new(model.backbone());
    let mut zero = 0;
    let mut margins = Vec::new();
    for batch in test.batches(250) {
        let batch = batch?;
        let grad: Vec<Vec<f32>> = input_gradient(&target, &batch)?.flatten_from(1)?.to_vec2()?;
        zero += grad.iter().filter(|g| g.iter().all(|v| *v == 0.0)).count();
        let logits: Vec<Vec<f32>> = target.logits(batch.pixels())?.to_vec2()?;
        for (l, y) in logits.iter().zip(batch.labels().unwrap()) {
            margins.push(l[*y as usize] - l[1 - *y as usize]);
        }
    }
    margins.sort_by(|a, b| a.total_cmp(b));
    println!(
        "zero-gradient samples {zero}/{}; clean margin median {:.1}, p90 {:.1}, max {:.1}",
        test.len(),
        margins[margins.len() / 2],
        margins[margins.len() * 9 / 10],
        margins[margins.len() - 1]
    );
    for cond in &conditions {
        let heads: Vec<String> = head_accuracy_sweep(cond)?.iter().map(|h| format!("{:.1}", h.accuracy)).collect();
        println!(
            "{:<14} vanilla {:5.1}  sevit {:5.1}  heads [{}]",
            cond.name,
            cond.vanilla_accuracy()?,
            cond.vote_accuracy(model.num_heads(), TieBreak::FinalClassifier)?,
            heads.join(" ")
        );
    }
    Ok(())
}
