use astlb_core::cavity::{fixed_point, FixedPointOptions};
use astlb_core::metrics::mean_metrics;
use astlb_core::phasetype::fit_merlang;
use astlb_core::policies::{LayerGrid, Policy};
use std::time::Instant;

fn main() {
    let ph = fit_merlang(10.0, 0.5, 1).unwrap();
    let grid = LayerGrid::uniform(0.1, 400).unwrap();
    let mut opts = FixedPointOptions::default();
    opts.clean_history = false;
    for lambda in [0.9, 0.95] {
        for (name, policy) in [
            ("las-qtb", Policy::LasQtb),
            ("lew", Policy::Lew { ph: ph.clone() }),
            ("sq-rtb", Policy::SqRtb),
            ("las", Policy::Las),
            ("re:2", Policy::Re { s: 20 }),
        ] {
            let t0 = Instant::now();
            match fixed_point(&policy, lambda, &ph, &grid, 5, &opts) {
                Ok(res) => println!(
                    "{name:<8} lam={lambda}: ew={:<10.5} iters={} B={} {:?}",
                    mean_metrics(&res.pi, lambda).ew,
                    res.iterations,
                    res.buffer,
                    t0.elapsed()
                ),
                Err(e) => println!("{name:<8} lam={lambda}: ERROR {e}"),
            }
        }
    }
}
