use droopstab::netmodel::NetworkConfig;
use droopstab::oracle::{sweep, GridSpec};
use std::time::Instant;

fn main() {
    let config = NetworkConfig::ring5();
    let grid = GridSpec::paper_single_inverter((100, 100));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t = Instant::now();
    let region = pool.install(|| sweep(&config, &grid)).unwrap();
    let dt1 = t.elapsed().as_secs_f64();
    println!(
        "single-thread: {:.2} s, {} stable / {} cells",
        dt1,
        region.n_stable(),
        region.labels.len()
    );
    let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let t = Instant::now();
    let region4 = pool4.install(|| sweep(&config, &grid)).unwrap();
    println!("4 threads: {:.2} s, identical: {}", t.elapsed().as_secs_f64(), region4 == region);
}
