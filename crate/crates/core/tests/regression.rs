//! Recorded end-to-end fixture: pre-training on the reference configuration
//! must keep reaching the masked-prediction loss it reached when recorded.

use sgcb_core::pipeline::{run_pipeline, CodebookMethod, PipelineConfig, RunOptions};

const REFERENCE: &str = include_str!("../../../configs/reference.cfg");

// Mean of the last 20 pre-training losses, ground-truth targets, seed 1.
const RECORDED_LOSS: f64 = 1.929123;

#[test]
fn reference_pretraining_reaches_recorded_loss() {
    let mut config = PipelineConfig::parse(REFERENCE).unwrap();
    config.seed = 1;
    config.codebook_method = CodebookMethod::GroundTruth;
    config.finetune_steps = 1;
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&config, &dir.path().join("run"), RunOptions { force: false }).unwrap();
    let loss = report.stage("pretrain-1").unwrap().metric("loss_last").unwrap();
    println!("pre-training loss {loss:.6} (recorded {RECORDED_LOSS:.6})");
    assert!(
        (loss - RECORDED_LOSS).abs() <= 0.05 * RECORDED_LOSS,
        "loss {loss} vs recorded {RECORDED_LOSS}"
    );
}
