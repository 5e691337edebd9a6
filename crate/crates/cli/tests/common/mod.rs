#![allow(dead_code)]

use eegvae_cli::ExperimentConfig;

/// Smallest corpus the fold scheme accepts (three folds), with every stage
/// cut down to a few seconds of work.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
pipelines = ["vae+cnn1d", "raw+eegnet"]
[corpus.synth]
n_per_class = 9
duration_s = 15.0
class_snr = 2.0
[preprocess]
target_rate_hz = 64.0
hi_hz = 30.0
epoch_s = 2.0
[vae]
max_epochs = 2
pool = 2
[cnn1d.train]
max_epochs = 2
[eegnet.train]
max_epochs = 2
[mlp.train]
max_epochs = 2
[visualize]
subjects_per_class = 2
[visualize.tsne]
perplexity = 5.0
n_iter = 120
exaggeration_iters = 50
"#,
    )
    .expect("tiny config parses")
}
