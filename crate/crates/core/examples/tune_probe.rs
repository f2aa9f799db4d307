use apjko_core::field::VelocityField;
use apjko_core::heatlab::*;
use apjko_core::jko::TrainingSchedule;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    if which == "heat100" {
        for (n, tmax, emax, emin, t0) in [
            (3000usize, 400usize, 2e-2f64, 1e-4f64, 400usize),
            (3000, 400, 5e-2, 1e-4, 400),
            (3000, 600, 5e-2, 1e-4, 200),
            (3000, 600, 1e-1, 1e-4, 600),
        ] {
            let t = Instant::now();
            let mut e = gaussian_particles(n, 1, 1.0, 7);
            let mut field = lab_field(1, 2);
            let cfg = HeatTrainCfg {
                schedule: TrainingSchedule { eta_max: emax, eta_min: emin, t0, t_max: tmax },
                ..HeatTrainCfg::default()
            };
            let report = heat_jko_step(&mut e, &mut field, 100.0, 5, &cfg).unwrap();
            let oracle = gaussian_jko_std_oracle(1.0, 100.0);
            println!(
                "alpha=100 n={n} tmax={tmax} lr=({emax},{emin},{t0}): std={:.4} oracle={:.4} rel={:.4} [{:.1}s]",
                report.post_std, oracle, (report.post_std - oracle).abs() / oracle, t.elapsed().as_secs_f64()
            );
        }
    } else if which == "heat001" {
        for (tmax, emax) in [(400usize, 2e-2f64), (300, 1e-2)] {
            let t = Instant::now();
            let mut e = gaussian_particles(3000, 1, 1.0, 7);
            let mut field = lab_field(1, 2);
            let cfg = HeatTrainCfg {
                schedule: TrainingSchedule { eta_max: emax, eta_min: 1e-4, t0: tmax, t_max: tmax },
                ..HeatTrainCfg::default()
            };
            let report = heat_jko_step(&mut e, &mut field, 0.01, 5, &cfg).unwrap();
            let oracle = gaussian_jko_std_oracle(1.0, 0.01);
            println!(
                "alpha=0.01 tmax={tmax} lr={emax}: std={:.5} oracle={:.5} rel={:.5} [{:.1}s]",
                report.post_std, oracle, (report.post_std - oracle).abs() / oracle, t.elapsed().as_secs_f64()
            );
        }
    }
}
