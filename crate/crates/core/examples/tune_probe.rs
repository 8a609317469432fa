// variance-reduction bundle: warmup 0.15 + L2 loss + val_subset 16
use sen4x_core::harness::*;
use sen4x_core::model::{FusionMode, ModelConfig};
use sen4x_core::synthdata::DegradeSpec;
use sen4x_core::train::TrainConfig;
use std::time::Instant;

fn main() {
    let model_cfg = ModelConfig {
        mode: FusionMode::HybridEarly,
        in_channels: 4, out_channels: 4, n_views: 8,
        embed_dim: 32, n_rstb: 2, heads: 4, window: 4,
        rstb_depth: 2, mlp_ratio: 2, scale: 4, residual_anchor: true,
    };
    let spec = ExperimentSpec {
        n_train: 200, n_val: 40, hr_size: 96,
        degrade: DegradeSpec::default(), data_seed: 7,
    };
    let data = prepare_synth_data(&spec).unwrap();
    println!("data ready");
    for seed in [1u64, 2, 3] {
        let mut gap = 0.0;
        for mode in [FusionMode::HybridEarly, FusionMode::SisrOnly] {
            let cfg = TrainConfig {
                lr0: 1e-3, epochs: 100, batches_per_epoch: 4, batch_size: 3,
                seed, val_subset: Some(16), ..Default::default()
            };
            let t = Instant::now();
            let out = run_sr_experiment(&data, mode, model_cfg.clone(), cfg).unwrap();
            gap += match mode { FusionMode::HybridEarly => out.model_psnr, _ => -out.model_psnr };
            println!(
                "seed {seed} {:?}: model {:.3} bicubic {:.3} gain {:+.3} [{:.0}s]",
                mode, out.model_psnr, out.bicubic_psnr,
                out.model_psnr - out.bicubic_psnr, t.elapsed().as_secs_f64()
            );
        }
        println!("seed {seed}: GAP {gap:+.3} dB");
    }
}
