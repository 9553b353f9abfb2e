use platoon_ctm::scenario::{ControlCase, Scenario};
use platoon_ctm::sim::Engine;
use std::time::Instant;

fn main() {
    let diag = std::env::args().any(|a| a == "--diag");
    for case in ControlCase::ALL {
        let t0 = Instant::now();
        let out = Engine::new(Scenario::reference(case), 7).run().unwrap();
        let (per, total) = out.tts();
        println!(
            "{:6} {:7.2} veh*h (classes {:?}) in {:?}",
            case.label(),
            total,
            per.map(|x| (x * 100.0).round() / 100.0),
            t0.elapsed()
        );
        if diag && case == ControlCase::None {
            // Outflow at the lane drop averaged over 2.4-minute bins, plus the
            // total vehicle count, to see when congestion forms and drains.
            let bin = 200usize;
            for (k, chunk) in out.bottleneck_outflow.chunks(bin).enumerate() {
                let q: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
                let i0 = k * bin;
                let mass: f64 = out.counts[i0].iter().sum();
                println!("t={:5.2} h  q_b={:7.1} veh/h  mass={:7.1} veh", i0 as f64 * out.dt_h, q, mass);
            }
        }
    }
}
