use droopstab::dataset::*;
use droopstab::gan::*;
use droopstab::netmodel::*;
use droopstab::oracle;
use droopstab::smallsignal::classify_point;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let max_epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let beta1: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.9);

    let t = Instant::now();
    let config = NetworkConfig::ring5();
    let data = sample_stable_dataset(
        &[config.clone()],
        &DroopRanges::single_inverter(5),
        4000,
        seed,
    )
    .unwrap();
    println!(
        "dataset: {} rows, acceptance {:.3}, {:.1} s",
        data.n_rows(),
        data.acceptance_ratio,
        t.elapsed().as_secs_f64()
    );

    let hyper = GanHyper {
        learning_rate: lr,
        batch_size: 100,
        max_epochs,
        epsilon: 0.05,
        eval_every: 20,
        noise_dim: 16,
        seed,
        d_eval_batch: 1000,
        run_to_max: false,
        optimizer: droopstab::nnkernel::Optimizer::Adam { beta1, beta2: 0.999, epsilon: 1e-8 },
    };
    let t = Instant::now();
    let (model, trace) = train_gan(&data, &hyper, &GanSpecs::default()).unwrap();
    let train_time = t.elapsed().as_secs_f64();
    println!(
        "train: {} epochs in {:.1} s ({:.0} ms/epoch), stop {:?}, final dc {:.4}",
        trace.epochs_run(),
        train_time,
        1e3 * train_time / trace.epochs_run() as f64,
        trace.stop_epoch,
        model.final_dc
    );
    for cp in trace.dc_checkpoints.iter().step_by(8) {
        println!(
            "  epoch {:4}: dc {:.4} (losses {:.3}/{:.3}/{:.3})",
            cp.epoch,
            cp.max_dc,
            trace.real_loss[cp.epoch - 1],
            trace.fake_loss[cp.epoch - 1],
            trace.g_loss[cp.epoch - 1]
        );
    }
    let w = 50.min(trace.epochs_run());
    println!(
        "trailing-{w} means: real {:.3} fake {:.3} g {:.3}",
        LossTrace::trailing_mean(&trace.real_loss, w),
        LossTrace::trailing_mean(&trace.fake_loss, w),
        LossTrace::trailing_mean(&trace.g_loss, w),
    );

    // Accuracy: generate 2000, decode laplacian, oracle-classify.
    let t = Instant::now();
    let samples = generate_samples(&model, None, 2000, seed + 1000, RepairMode::Laplacian).unwrap();
    let mut stable = 0;
    let mut nonphys = 0;
    let mut floor_bad = 0;
    for (sys, row) in samples.systems.iter().zip(&samples.droop_rows) {
        match sys {
            Some((adm, droops)) => {
                if classify_point(adm, droops).unwrap().stable {
                    stable += 1;
                }
            }
            None => {
                nonphys += 1;
                if row.iter().any(|&k| k < 1e-4) {
                    floor_bad += 1;
                }
            }
        }
    }
    println!("nonphysical from droop floor: {floor_bad}");
    println!(
        "laplacian accuracy: {:.4} ({} stable, {} nonphysical) in {:.1} s",
        stable as f64 / 2000.0,
        stable,
        nonphys,
        t.elapsed().as_secs_f64()
    );
    // raw accuracy for reference
    let samples = generate_samples(&model, None, 2000, seed + 1000, RepairMode::Raw).unwrap();
    let mut stable = 0;
    for sys in samples.systems.iter().flatten() {
        if classify_point(&sys.0, &sys.1).unwrap().stable {
            stable += 1;
        }
    }
    println!("raw accuracy: {:.4}", stable as f64 / 2000.0);
    let _ = oracle::classify_samples; // silence unused import path
}
