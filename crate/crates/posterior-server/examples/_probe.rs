use posterior_server::expfam::*;
use posterior_server::models::*;
use posterior_server::runtime::*;
use posterior_server::harness::*;
use posterior_server::snep::*;
use posterior_server::samplers::SgldConfig;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mut data = generate_logistic_data(5000, 10, 42);
    data.assign_shards(3, 42);
    let model = Arc::new(ModelSpec::logistic(10, Family::Full, 10.0));
    let data = Arc::new(data);
    let cfg = ExperimentConfig { model: ModelKind::Logistic, dim: 10, family: Family::Full, seed: 42, ..Default::default() };
    let reference = reference_posterior(&cfg, &model, &data, None).unwrap();
    println!("[{:.0?}] reference ready", t0.elapsed());
    let ref_mean = reference.mean.clone();

    let budget = 120_000u64;
    for (m, snep_eps) in [(1usize, 0.02), (10, 0.05), (100, 0.1)] {
        let iters = budget / m as u64;
        let mut rels = Vec::new();
        for seed in 0..5u64 {
            let exp = Experiment {
                model: model.clone(), data: data.clone(), n_workers: 3,
                algorithm: Algorithm::Snep,
                snep: SnepConfig { eps: snep_eps,
                    schedule: StepSchedule::InverseT { t0: iters as f64 / 6.0 },
                    n_sync: 1, n_outer: 1,
                    min_variance: 1e-4, samples_per_iter: m, site_init_variance: 10.0,
                    ..SnepConfig::default() },
                sgld: SgldConfig { eps: 0.01, noise_cap: f64::INFINITY, minibatch_size: 500, ..SgldConfig::default() },
                kernel: KernelKind::Sgld,
                max_worker_iters: iters,
                eval_every: 0, seed: 100 + seed,
            };
            let out = run_simulation(&exp, SchedulerMode::Deterministic { delay: 0 }, None, false).unwrap();
            let pm = out.server.theta_posterior.to_mean().unwrap();
            rels.push(metric_rel_mean_diff(pm.first_order(), &ref_mean).unwrap());
        }
        let mean = rels.iter().sum::<f64>() / rels.len() as f64;
        println!("[{:.0?}] SNEP M={m}: mean={mean:.4} rels={:?}", t0.elapsed(),
            rels.iter().map(|r| (r*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
    // SMS at 1 sample per round, equal budget.
    let mut rels = Vec::new();
    for seed in 0..5u64 {
        let exp = Experiment {
            model: model.clone(), data: data.clone(), n_workers: 3,
            algorithm: Algorithm::Sms { damping: 0.5 },
            snep: SnepConfig { samples_per_iter: 1, site_init_variance: 10.0, min_variance: 1e-4, ..SnepConfig::default() },
            sgld: SgldConfig { eps: 0.01, noise_cap: f64::INFINITY, minibatch_size: 500, ..SgldConfig::default() },
            kernel: KernelKind::Sgld,
            max_worker_iters: budget,
            eval_every: 0, seed: 100 + seed,
        };
        let out = run_simulation(&exp, SchedulerMode::Deterministic { delay: 0 }, None, false).unwrap();
        let pm = out.server.theta_posterior.to_mean().unwrap();
        rels.push(metric_rel_mean_diff(pm.first_order(), &ref_mean).unwrap());
    }
    let mean = rels.iter().sum::<f64>() / rels.len() as f64;
    println!("[{:.0?}] SMS M=1: mean={mean:.4} rels={:?}", t0.elapsed(),
        rels.iter().map(|r| (r*1000.0).round()/1000.0).collect::<Vec<_>>());
}
