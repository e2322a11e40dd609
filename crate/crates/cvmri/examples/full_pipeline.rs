//! Runs the whole pipeline end to end on a tiny phantom configuration:
//! dataset preparation, autoencoder and flow training, sampling,
//! decoding, both evaluations, and the final report.
//!
//! The same steps are available from the command line:
//!
//! ```bash
//! cvmri prepare   --config cfg.toml --out run
//! cvmri train-ae  --config cfg.toml --out run
//! cvmri encode    --config cfg.toml --out run
//! cvmri train-fm  --config cfg.toml --out run
//! cvmri finetune-fm --config cfg.toml --out run
//! cvmri sample    --config cfg.toml --out run --sequence FLAIR --class abnormal
//! cvmri decode    --config cfg.toml --out run
//! cvmri eval-latent --config cfg.toml --out run
//! cvmri eval-downstream --config cfg.toml --out run
//! cvmri report    --config cfg.toml --out run
//! ```
//!
//! ```bash
//! cargo run --example full_pipeline            # writes ./pipeline-demo
//! ```

use std::path::Path;

use cvmri::cli::{self, SampleArgs};
use cvmri::config::ExperimentConfig;
use cvmri::Result;

fn main() -> Result<()> {
    let out = Path::new("pipeline-demo");
    let mut cfg = ExperimentConfig::desk_small();
    cfg.phantom.labeled_volumes_per_cell = 3;
    cfg.phantom.unlabeled_volumes_per_cell = 3;
    cfg.cvae.epochs = 1;
    cfg.flow.epochs = 1;
    cfg.finetune.epochs = 1;
    cfg.classifier.epochs = 1;
    cfg.sampler.n_steps = 4;
    cfg.eval.synth_pool_per_stratum = 8;

    println!("preparing dataset...");
    cli::cmd_prepare(&cfg, out, true, 2)?;
    println!("training autoencoder...");
    cli::cmd_train_ae(&cfg, out, true)?;
    println!("encoding latents...");
    cli::cmd_encode(&cfg, out, true)?;
    println!("training Stage-1 flow...");
    cli::cmd_train_fm(&cfg, out, true)?;
    println!("finetuning Stage 2...");
    cli::cmd_finetune_fm(&cfg, out, true)?;

    println!("sampling 8 abnormal FLAIR latents...");
    let args = SampleArgs {
        count: 8,
        sequence: "FLAIR".into(),
        class: Some("abnormal".into()),
        guidance: None,
    };
    cli::cmd_sample(&cfg, out, true, &args)?;
    cli::cmd_decode(&cfg, out, true)?;

    println!("evaluating latent fidelity...");
    cli::cmd_eval_latent(&cfg, out, true)?;
    println!("running downstream experiments...");
    cli::cmd_eval_downstream(&cfg, out, true)?;
    cli::cmd_report(&cfg, out, true)?;

    println!("done; see {}", cli::report_dir(out).display());
    Ok(())
}
