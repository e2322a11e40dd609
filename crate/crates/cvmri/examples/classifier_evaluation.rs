//! Trains the squeeze-and-excitation classifier on toy latent images
//! and walks through the evaluation conventions: patch AUROC, top-5%
//! volume aggregation, and model selection.
//!
//! ```bash
//! cargo run --example classifier_evaluation
//! ```

use cvmri::evalharness::{
    aggregate_volume, evaluate_auroc, evaluate_volume_auroc, select_model, train_classifier,
    ClassifierConfig, ClassifierSample, InputKind, SelectCriterion,
};
use cvmri::field::ComplexField;
use cvmri::rng::substream;
use cvmri::Result;
use rand::Rng;
use rand_distr::StandardNormal;

/// Noise images whose real channel carries a class-dependent bias.
fn toy_samples(n: usize, label: f64, volume_id: &str, seed: u64) -> Vec<ClassifierSample> {
    let mut rng = substream(seed, volume_id);
    (0..n)
        .map(|_| {
            let bias = 0.6 * label;
            let field = ComplexField::from_fn(48, 48, |_, _| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                num_complex::Complex64::new(re + bias, im)
            });
            ClassifierSample { field, label, volume_id: volume_id.to_string() }
        })
        .collect()
}

fn main() -> Result<()> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for v in 0..6 {
        let label = (v % 2) as f64;
        train.extend(toy_samples(24, label, &format!("train-{v:02}"), 0));
        test.extend(toy_samples(24, label, &format!("test-{v:02}"), 1));
    }

    let config = ClassifierConfig { epochs: 4, seeds: vec![0, 1], ..ClassifierConfig::default() };
    let mut patch_aurocs = Vec::new();
    let mut models = Vec::new();
    for &seed in &config.seeds {
        let model = train_classifier(&train, InputKind::Latent, &config, seed)?;
        let auroc = evaluate_auroc(&model, &test)?;
        println!("seed {seed}: {} parameters, patch AUROC {auroc:.3}", model.param_count());
        patch_aurocs.push(auroc);
        models.push(model);
    }

    let best = select_model(&patch_aurocs, SelectCriterion::Highest)?;
    println!("selected seed {} (highest AUROC)", config.seeds[best]);
    println!("volume AUROC: {:.3}", evaluate_volume_auroc(&models[best], &test)?);

    // Volume scores are the mean of the top 5% of patch probabilities,
    // so a single hot patch dominates a quiet volume.
    let quiet = vec![0.1; 40];
    let mut hot = quiet.clone();
    hot[7] = 0.95;
    hot[21] = 0.90;
    println!(
        "aggregation: quiet volume {:.3}, volume with two hot patches {:.3}",
        aggregate_volume(&quiet)?,
        aggregate_volume(&hot)?
    );
    Ok(())
}
