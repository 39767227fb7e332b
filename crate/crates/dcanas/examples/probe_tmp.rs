// scratch probe for desk-scale calibration (removed before release)
use dcanas::cost::{CostMetric, TargetNetConfig};
use dcanas::data::{make_synthetic, SyntheticKind};
use dcanas::eval::{train_eval, EvalConfig};
use dcanas::lug::{build_lug, LugBuildConfig};
use dcanas::search::{run_search, ConstraintSpec, ConstraintSource, FeatureFlags, SearchRunConfig};

fn lug_lookup_spec(lug: &dcanas::lug::LookupGraph, kd: f64) -> ConstraintSpec {
    let q = lug.lookup(kd).unwrap();
    ConstraintSpec {
        metric: CostMetric::Params,
        kd,
        kd_prime: q.kd_prime,
        source: ConstraintSource::Lug,
        penalty_scale: 1.0 / q.kd_prime,
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "c3".into());
    match which.as_str() {
        "c3" => c3(),
        "c7" => c7(),
        "c8" => c8(),
        _ => {}
    }
}

fn c3() {
    let ds = make_synthetic(SyntheticKind::Spiral, 700, 2, 0.08, 7).unwrap();
    let target = TargetNetConfig { layers: 3, channels: 3, ..TargetNetConfig::desk(2) };
    let base = |seed: u64| SearchRunConfig {
        seed, epochs: 18, warmup_epochs: 5, track_val_accuracy: false,
        target: target.clone(), ..SearchRunConfig::desk(2)
    };
    let mut cfg = base(40);
    cfg.flags = FeatureFlags { resource_constraint: false, ..FeatureFlags::all_on() };
    let anchor = run_search(cfg, None, &ds).unwrap();
    let ks0 = anchor.epochs.last().unwrap().ks;
    println!("c3 anchor ks={ks0:.0} derived={}", anchor.derived_cost);
    let n = 5;
    let ratio = (1.5f64/0.25).powf(1.0/(n-1) as f64);
    let grid: Vec<f64> = (0..n).map(|i| 0.25*ks0*ratio.powi(i as i32)).collect();
    let lug = build_lug(&LugBuildConfig { grid, repeats: 3, parallelism: 2, base: base(100) }, &ds).unwrap();
    println!("c3 lug: {:?}", lug.points().iter().map(|p| (p.kd_prime as i64, p.kd_measured as i64)).collect::<Vec<_>>());
    for kd in [2000.0f64, 4000.0, 8000.0] {
        let spec = lug_lookup_spec(&lug, kd);
        let mut costs = Vec::new();
        for seed in [1u64, 2, 3, 4, 5] {
            let res = run_search(base(seed), Some(spec.clone()), &ds).unwrap();
            costs.push(res.derived_cost);
        }
        let ok = costs.iter().filter(|&&c| (c as f64) <= 1.1*kd).count();
        println!("c3 K_d={kd}: K'={:.0} derived={:?} pass={}/5", spec.kd_prime, costs, ok);
    }
}

fn c7() {
    let ds = make_synthetic(SyntheticKind::Spiral, 800, 2, 0.05, 7).unwrap();
    let target = TargetNetConfig { layers: 3, channels: 8, ..TargetNetConfig::desk(2) };
    // Tight direct constraint: all seeds should collapse to cheap genotypes.
    let spec = ConstraintSpec::direct(CostMetric::Params, 1200.0, 1200.0).unwrap().normalized();
    let mut accs = Vec::new();
    for seed in [1u64, 2, 3, 4, 5] {
        let cfg = SearchRunConfig {
            seed, epochs: 18, warmup_epochs: 5, track_val_accuracy: false,
            target: target.clone(), ..SearchRunConfig::desk(2)
        };
        let res = run_search(cfg, Some(spec.clone()), &ds).unwrap();
        let ecfg = EvalConfig { epochs: 15, batch_size: 64, dropout: 0.0, seed, target: target.clone(), ..EvalConfig::desk(2) };
        let ev = train_eval(&res.genotype, &ds, &ecfg).unwrap();
        accs.push(ev.final_test_accuracy);
        println!("c7 seed={seed} derived={} final={:.3} best={:.3}", res.derived_cost, ev.final_test_accuracy, ev.best_test_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let std = (accs.iter().map(|a| (a-mean)*(a-mean)).sum::<f64>() / accs.len() as f64).sqrt();
    println!("c7 acc mean={mean:.3} std={:.1}pts", std*100.0);
}

fn c8() {
    let ds = make_synthetic(SyntheticKind::Spiral, 800, 2, 0.05, 7).unwrap();
    let target = TargetNetConfig { layers: 3, channels: 8, ..TargetNetConfig::desk(2) };
    let base = |seed: u64| SearchRunConfig {
        seed, epochs: 18, warmup_epochs: 5, track_val_accuracy: false,
        target: target.clone(), ..SearchRunConfig::desk(2)
    };
    let mut cfg = base(40);
    cfg.flags = FeatureFlags { resource_constraint: false, ..FeatureFlags::all_on() };
    let anchor = run_search(cfg, None, &ds).unwrap();
    let ks0 = anchor.epochs.last().unwrap().ks;
    println!("c8 anchor ks={ks0:.0} derived={}", anchor.derived_cost);
    let n = 5;
    let ratio = (1.5f64/0.25).powf(1.0/(n-1) as f64);
    let grid: Vec<f64> = (0..n).map(|i| 0.25*ks0*ratio.powi(i as i32)).collect();
    let lug = build_lug(&LugBuildConfig { grid, repeats: 3, parallelism: 2, base: base(100) }, &ds).unwrap();
    println!("c8 lug: {:?}", lug.points().iter().map(|p| (p.kd_prime as i64, p.kd_measured as i64)).collect::<Vec<_>>());
    for kd in [4000.0f64, 9000.0, 20000.0] {
        let spec = lug_lookup_spec(&lug, kd);
        let mut costs = Vec::new();
        let mut accs = Vec::new();
        for seed in [1u64, 2, 3] {
            let res = run_search(base(seed), Some(spec.clone()), &ds).unwrap();
            let ecfg = EvalConfig { epochs: 15, batch_size: 64, dropout: 0.0, seed, target: target.clone(), ..EvalConfig::desk(2) };
            let ev = train_eval(&res.genotype, &ds, &ecfg).unwrap();
            costs.push(res.derived_cost);
            accs.push((ev.best_test_accuracy*1000.0).round() as i64);
        }
        let cmean = costs.iter().sum::<u64>() as f64 / 3.0;
        let amean = accs.iter().sum::<i64>() as f64 / 3.0;
        println!("c8 K_d={kd}: K'={:.0} costs={:?} cmean={cmean:.0} accs={:?} amean={amean:.0}", spec.kd_prime, costs, accs);
    }
}
