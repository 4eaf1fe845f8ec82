// scratch diagnostics (removed before release)
use dinewton::dnewton::{run, AlgorithmVariant, RunConfig, StepMode};
use dinewton::linalg;
use dinewton::netgraph::{power_estimate_lambda2, spectral_params, Topology};
use dinewton::objectives::{centralized_newton, LocalizationInstance};
use dinewton::rng::PortableRng;
use dinewton::spectral::{build_gamma, build_local_rate_model, deflated_radius, verify_theorem2};
use dinewton::stepsize;
use nalgebra::{DMatrix, DVector};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "vzcps" => vzcps(),
        "metro" => metro(),
        "rate" => rate(),
        "dev" => dev(),
        "crit3" => crit3(),
        _ => println!("unknown"),
    }
}

fn crit3() {
    let topo = Topology::build_ring(30, 0.7, 0.15, 0.15).unwrap();
    let sp = spectral_params(&topo).unwrap();
    let alpha_offline = stepsize::offline_alpha(sp.lambda2).unwrap();
    println!("lambda2 {} offline {alpha_offline}", sp.lambda2);
    for seed in 1..=5u64 {
        let t0 = std::time::Instant::now();
        let inst =
            LocalizationInstance::generate(30, DVector::from_vec(vec![0.0, 0.0]), 0.01, seed);
        let objs = inst.objective_set();
        let x_star = centralized_newton(&objs, &inst.x_true, 1e-11, 100).unwrap();
        let hessians: Vec<DMatrix<f64>> =
            (0..30).map(|i| objs.local(i).hessian(&x_star)).collect();
        let (_, _, h_star) = objs.global_aggregate(&x_star);
        let r = dinewton::spectral::rmatrix_weighted(&hessians, &h_star, &sp.node_weights().unwrap()).unwrap();
        let s = stepsize::s_estimate(&r).unwrap();
        let alpha_star = stepsize::adaptive_alpha(sp.lambda2, s).unwrap();
        let model = build_gamma(&topo, &hessians, &h_star).unwrap();
        let grid: Vec<f64> = (1..=100).map(|k| k as f64 * 2e-4).collect();
        let scan = dinewton::spectral::scan_alpha_opt(&model, &grid, sp.lambda2, s).unwrap();
        println!(
            "seed {seed}: s {s:.4} alpha_star {alpha_star:.6} alpha_opt {:.6} gap {:.2}% ({:?})",
            scan.alpha_opt,
            100.0 * (alpha_star - scan.alpha_opt).abs() / scan.alpha_opt,
            t0.elapsed()
        );
    }
}

fn vzcps() {
    let topo = Topology::build_ring(30, 0.7, 0.15, 0.15).unwrap();
    let sp = spectral_params(&topo).unwrap();
    println!("lambda2 = {} (modulus {})", sp.lambda2, sp.lambda2_modulus);
    for seed in [4u64, 7, 42] {
        let inst =
            LocalizationInstance::generate(30, DVector::from_vec(vec![0.0, 0.0]), 0.01, seed);
        let objs = inst.objective_set();
        let x0 = inst.initial_states();
        let x_star = centralized_newton(&objs, &inst.x_true, 1e-11, 100).unwrap();
        let alpha = 6.2e-3;
        for variant in [
            AlgorithmVariant::Proposed,
            AlgorithmVariant::Vzcps,
            AlgorithmVariant::AlgA,
        ] {
            let t0 = std::time::Instant::now();
            let cfg = RunConfig::new(
                variant,
                &topo,
                &objs,
                0.1,
                5000,
                &x0,
                &x_star,
                StepMode::Fixed(alpha),
            );
            let out = run(&cfg).unwrap();
            let series = out.trace.max_err_series();
            let reach = series.iter().find(|(_, e)| *e < 1e-6).map(|(k, _)| *k);
            let cons = out.trace.max_consensus_series();
            let min_cons = cons.iter().map(|&(_, c)| c).fold(f64::INFINITY, f64::min);
            println!(
                "seed {seed} {variant:?}: reach1e-6={reach:?} final={:.3e} min_cons={min_cons:.3e} ({:?})",
                series.last().unwrap().1,
                t0.elapsed()
            );
        }
    }
}

fn metro() {
    for seed in 0..5u64 {
        let mut rng = PortableRng::new(seed, 17);
        let n = 10;
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        edges.push((0, n - 1));
        for _ in 0..6 {
            let a = (rng.uniform_oc() * n as f64) as usize % n;
            let b = (rng.uniform_oc() * n as f64) as usize % n;
            if a != b && !edges.contains(&(a.min(b), a.max(b))) {
                edges.push((a.min(b), a.max(b)));
            }
        }
        let topo = Topology::metropolis(n, &edges).unwrap();
        let (lam, _) = linalg::jacobi_eigen_sorted(topo.weights()).unwrap();
        let sp = spectral_params(&topo).unwrap();
        let est = power_estimate_lambda2(&topo, seed, 1000).unwrap();
        println!(
            "seed {seed}: eigs {:?} lambda2 {} est {} rel {}",
            lam.as_slice()
                .iter()
                .map(|v| (v * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            sp.lambda2_modulus,
            est.lambda2,
            (est.lambda2 - sp.lambda2_modulus).abs() / sp.lambda2_modulus
        );
    }
}

fn rate() {
    let n = 8;
    let topo = Topology::build_ring(n, 0.7, 0.15, 0.15).unwrap();
    let inst = LocalizationInstance::generate(n, DVector::from_vec(vec![0.0, 0.0]), 0.01, 19);
    let objs = inst.objective_set();
    let x_star = centralized_newton(&objs, &inst.x_true, 1e-11, 100).unwrap();
    let hessians: Vec<DMatrix<f64>> = (0..n).map(|i| objs.local(i).hessian(&x_star)).collect();
    let (_, _, h_star) = objs.global_aggregate(&x_star);
    let gamma = build_gamma(&topo, &hessians, &h_star).unwrap();
    let reduced = build_local_rate_model(&topo, &hessians, &h_star).unwrap();
    for alpha in [2e-3, 6e-3, 1.2e-2] {
        let eigs = linalg::dense_eigenvalues(&gamma.at(alpha));
        let (radius, sep) = deflated_radius(&eigs, gamma.dim);
        let rate = reduced.rate(alpha);
        println!("alpha {alpha}: gamma-radius {radius} (sep {sep}) reduced-rate {rate} diff {}", (radius - rate).abs());
    }
    // where do the reduced model's eigенvalues sit?
    let eigs_r = linalg::dense_eigenvalues(&reduced.at(6e-3));
    let mut mods: Vec<f64> = eigs_r.iter().map(|z| z.norm()).collect();
    mods.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("reduced top-6 moduli: {:?}", &mods[..6]);
    let eigs_g = linalg::dense_eigenvalues(&gamma.at(6e-3));
    let mut mods_g: Vec<f64> = eigs_g.iter().map(|z| z.norm()).collect();
    mods_g.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("gamma top-6 moduli:   {:?}", &mods_g[..6]);
}

fn dev() {
    let n = 10;
    let topo = Topology::build_ring(n, 0.7, 0.15, 0.15).unwrap();
    let sp = spectral_params(&topo).unwrap();
    let inst = LocalizationInstance::generate(n, DVector::from_vec(vec![0.0, 0.0]), 0.01, 7);
    let objs = inst.objective_set();
    let x_star = centralized_newton(&objs, &inst.x_true, 1e-11, 100).unwrap();
    let hessians: Vec<DMatrix<f64>> = (0..n).map(|i| objs.local(i).hessian(&x_star)).collect();
    let (_, _, h_star) = objs.global_aggregate(&x_star);
    let r = dinewton::spectral::rmatrix_weighted(&hessians, &h_star, &sp.node_weights().unwrap()).unwrap();
    let s = stepsize::s_estimate(&r).unwrap();
    println!("lambda2 {} s {}", sp.lambda2, s);
    let model = build_gamma(&topo, &hessians, &h_star).unwrap();
    let report = verify_theorem2(&model, sp.lambda2, s, &[1e-3, 2e-3, 4e-3, 8e-3]);
    for (a, d) in &report.deviations {
        println!("alpha {a}: deviation {d}");
    }
}
