use droopstab::dataset::*;
use droopstab::evalbench::accuracy;
use droopstab::gan::*;
use droopstab::netmodel::*;
use droopstab::nnkernel::Optimizer;

fn main() {
    let layout = FeatureLayout::for_nodes(5);
    let adm = build_admittance(&NetworkConfig::ring5()).unwrap();
    let droops = DroopSetting::uniform(5, 0.1, 1.0, 31.41, 50.0, 4160.0);
    let raw = encode_raw(&adm, &droops, &layout);
    let scaling = fit_scaling(&[raw], &layout).unwrap();
    let row = encode(&adm, &droops, &layout, &scaling).unwrap();
    let network = row[..layout.condition_width()].to_vec();
    let data = TrainingSet {
        rows: vec![row; 64],
        condition_idx: vec![0; 64],
        conditions: vec![ConditionEntry { id: "ring5".into(), vector: network }],
        layout,
        scaling,
        ctx: DecodeContext { rho: 1.0, z_base: 17.3056, omega_c: 31.41, f0: 50.0, v0: 4160.0 },
        seed: 0,
        acceptance_ratio: 1.0,
    };
    for seed in [3u64] {
        let hyper = GanHyper {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 4000,
            epsilon: 0.05,
            eval_every: 25,
            noise_dim: 4,
            seed,
            d_eval_batch: 64,
            run_to_max: false,
            optimizer: Optimizer::default(),
        };
        let specs = GanSpecs {
            generator_hidden: vec![32, 32],
            discriminator_hidden: vec![16],
            leaky_slope: 0.2,
            generator_batchnorm: false,
        };
        let t = std::time::Instant::now();
        let (model, trace) = train_gan(&data, &hyper, &specs).unwrap();
        let report = accuracy(&model, None, 50, 7, RepairMode::Laplacian).unwrap();
        println!(
            "seed {seed}: stop {:?} dc {:.4} accuracy {:.3} nonphys {} ({:.1} s)",
            trace.stop_epoch,
            model.final_dc,
            report.accuracy,
            report.n_nonphysical,
            t.elapsed().as_secs_f64()
        );
        for cp in trace.dc_checkpoints.iter().step_by(20) {
            println!(
                "   epoch {:4} dc {:8.4} real {:.4} fake {:.4} g {:.4}",
                cp.epoch, cp.max_dc,
                trace.real_loss[cp.epoch - 1], trace.fake_loss[cp.epoch - 1], trace.g_loss[cp.epoch - 1]
            );
        }
        break;
    }
}
