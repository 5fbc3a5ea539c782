//! A miniature end-to-end fluid run through the same command layer the
//! `mpdiff` binary uses: generate multi-resolution trajectories, train the
//! conditional denoiser, sample with and without expensive-simulation
//! guidance, and score everything.
//!
//! Desk-scale but deliberately small (a couple of minutes); the acceptance
//! suite runs the full-size version.
//!
//! ```text
//! cargo run --release --example fluid_pipeline
//! ```

use mpdiff::cli::*;
use mpdiff::diffusion::Split;
use mpdiff::fluidsim::FluidDatasetSpec;

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        kind: ExperimentKind::Fluid,
        schedule: ScheduleSpec::default(),
        denoiser: DenoiserSpec::default(),
        fluid: Some(FluidDatasetSpec {
            n_trajectories: 30,
            seed: 7,
            fine: 32,
            mid: 16,
            coarse: 8,
            horizon_steps: 120,
            dt: 0.05,
        }),
        thermal: None,
        training: Some(TrainingSpec { epochs: 1, steps_per_epoch: 600, lr: 1e-3, seed: 42 }),
        guidance: GuidanceSpec::default(),
        sampling: Some(SamplingSpec { seed: 17, clamp_denoised: true }),
        ensemble: Some(EnsembleSpec { size: 8, base_seed: 23 }),
        theory: None,
        out_dir: tmp.path().join("out"),
    };
    let hash = "fluid-pipeline-example".to_string();

    println!("generating 30 trajectories at 32/16/8 ...");
    cmd_gen_data(&cfg, &hash).unwrap();

    println!("training conditional and unconditional denoisers ...");
    let ck_c1 = cmd_train(&cfg, &hash, MethodTag::C1, None).unwrap();
    let ck_sd = cmd_train(&cfg, &hash, MethodTag::SDdim, None).unwrap();

    let (records, _) = load_dataset(&cfg.dataset_dir()).unwrap();
    let ids: Vec<String> =
        records.iter().filter(|r| r.split == Split::Test).map(|r| r.id.clone()).collect();
    println!("sampling {} test records with three methods ...", ids.len());
    cmd_sample(&cfg, &hash, &ck_sd, 1, &ids, None, false).unwrap();
    cmd_sample(&cfg, &hash, &ck_c1, 1, &ids, None, false).unwrap();
    cmd_sample(&cfg, &hash, &ck_c1, 2, &ids, None, false).unwrap();

    let (_, summary) = cmd_evaluate(&cfg, &hash, None, None).unwrap();
    println!("\nmean test MSE by method:");
    for (tag, m) in &summary.methods {
        println!("  {tag:>7}: mse {:.5}  ssim {:.4}", m.mse.mean, m.ssim.mean);
    }
    if let Some(ordering) = summary.mse_ordering_holds {
        println!("ordering c2 <= c1 <= s-ddim holds: {ordering}");
    }
}
