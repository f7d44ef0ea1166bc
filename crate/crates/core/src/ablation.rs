//! Modality × compressor-depth sweep over one fixed dataset.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::model::{load_checkpoint, CompressorConfig, ModelConfig, ModelParams};
use crate::pose::synth::synth_generate;
use crate::pose::{dataset::MANIFEST_FILE, Modality, Split};
use crate::training::{evaluate_checkpoint, run_training, Result, TrainError};

/// Compressor depths swept; 0 is the per-frame linear projection.
pub const ABLATION_DEPTHS: [usize; 4] = [0, 1, 2, 3];

pub const ABLATION_HEADER: &str = "modality\tcompressor_layers\tinput_dim\tparams\tepochs\tdev_wer\ttest_wer";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub modality: Modality,
    pub compressor_layers: usize,
}

impl AblationArm {
    pub fn name(&self) -> String {
        format!("{}_c{}", self.modality, self.compressor_layers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub input_dim: usize,
    pub params: usize,
    pub epochs: usize,
    pub dev_wer: f64,
    pub test_wer: f64,
}

/// Every modality crossed with every depth, modality-major.
pub fn ablation_grid() -> Vec<AblationArm> {
    Modality::ALL
        .iter()
        .flat_map(|&modality| ABLATION_DEPTHS.iter().map(move |&compressor_layers| AblationArm { modality, compressor_layers }))
        .collect()
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.arm.modality, r.arm.compressor_layers, r.input_dim, r.params, r.epochs, r.dev_wer, r.test_wer
        )
        .unwrap();
    }
    out
}

fn arm_model(base: &ModelConfig, arm: &AblationArm) -> ModelConfig {
    ModelConfig {
        compressor: CompressorConfig { n_layers: arm.compressor_layers, ..base.compressor.clone() },
        ..base.clone()
    }
}

fn run_arm(cfg: &RunConfig, arm: &AblationArm, out_dir: &Path) -> Result<AblationRow> {
    let train = crate::training::TrainConfig { modality: arm.modality, ..cfg.train.clone() };
    let model = arm_model(&cfg.model, arm);
    let dir = out_dir.join(arm.name());
    log::info!("ablation arm {}", arm.name());
    let outcome = run_training(&train, &model, &cfg.data_root, &dir)?;
    let ck = load_checkpoint(&outcome.best_checkpoint)?;
    let test = evaluate_checkpoint(&ck, &cfg.data_root, Split::Test, train.max_decode_len, train.beam_size)?;
    Ok(AblationRow {
        arm: arm.clone(),
        input_dim: ck.config().input_dim,
        params: ck.params.count(),
        epochs: outcome.history.len(),
        dev_wer: outcome.state.best_dev_wer,
        test_wer: test.wer,
    })
}

/// Trains and scores every arm of the grid. The dataset at `cfg.data_root`
/// is generated from `cfg.synth` first when absent. Arms are independent,
/// so `parallel` changes only wall time, never the rows.
pub fn run_ablation(cfg: &RunConfig, parallel: bool) -> Result<Vec<AblationRow>> {
    if !cfg.data_root.join(MANIFEST_FILE).exists() {
        log::info!("generating synthetic dataset at {}", cfg.data_root.display());
        synth_generate(&cfg.synth, cfg.seed, &cfg.data_root)?;
    }
    let out_dir = cfg.out_dir.join("ablate");
    let grid = ablation_grid();
    let rows: Vec<Result<AblationRow>> = if parallel {
        grid.par_iter().map(|arm| run_arm(cfg, arm, &out_dir)).collect()
    } else {
        grid.iter().map(|arm| run_arm(cfg, arm, &out_dir)).collect()
    };
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let path = out_dir.join("ablation.tsv");
    std::fs::write(&path, ablation_tsv(&rows)).map_err(|source| TrainError::Io { path, source })?;
    Ok(rows)
}

/// Parameter count of an arm without training it.
pub fn arm_param_count(base: &ModelConfig, arm: &AblationArm, vocab_size: usize) -> Result<usize> {
    let cfg = ModelConfig { input_dim: arm.modality.feature_dim(), vocab_size, ..arm_model(base, arm) };
    Ok(ModelParams::init(&cfg, 0)?.count())
}
