//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines are printed even when everything passes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use supremal::calculus::{normal_from, system_from, system_residual, tangential_from, Derivatives, ResidualKind};
use supremal::gallery::{self, complex_exp, cone, one_d_pair, NAMES};
use supremal::grid::{GridDomain, GridField, SubdomainMask};
use supremal::hamiltonian::{
    check_rank_one_level_convexity, sample_psi_level_convexity, ConvexityOptions, Hamiltonian, PointSampler,
    VerdictStatus,
};
use supremal::mollify::{self, PiecewiseAffine};
use supremal::run::{self, fitted_order, Check, ConfigFile, MaskSpec};
use supremal::tensor::{outer, rank};
use supremal::verify::{self, Competitor, FalsifyOptions};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    Verdict { ok, detail }
}

fn minimality_config() -> run::RunConfig {
    ConfigFile { check: Some(Check::Minimality), seed: Some(7), ..Default::default() }.resolve().unwrap()
}

fn c1_minimality() -> Verdict {
    let start = Instant::now();
    let out = run::run(&minimality_config()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let r = &out.report.result;
    let h = 0.02;
    let margins: Vec<f64> = r["reports"].as_array().unwrap().iter().map(|t| t["margin"].as_f64().unwrap()).collect();
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let within = margins.iter().filter(|&&m| m >= -2.0 * h).count() as f64 / margins.len() as f64;
    let ok = margins.len() == 200 && worst >= -0.16 && within >= 0.95 && secs < 30.0;
    verdict(ok, format!("200 trials, worst margin {worst:.3e}, {:.1}% ≥ −2h, {secs:.1} s", 100.0 * within))
}

fn c2_cone() -> Verdict {
    let start = Instant::now();
    let domain = GridDomain::cube(-1.2, 1.2, 0.02, 2).unwrap();
    let mask = MaskSpec::Ball { center: vec![0.0, 0.0], radius: 1.0 }.build(&domain).unwrap();
    let u = cone(2).unwrap().sample(&domain).unwrap();
    let h = Hamiltonian::euclidean(1, 2).unwrap();
    let gate = verify::hypothesis_gate(&h, &u, &mask, 1.0, None).unwrap();
    let origin_dist = gate.c1_worst_point.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out = verify::falsify(&h, &u, &mask, &FalsifyOptions { budget: 200, seed: 7, ..Default::default() }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (gap, constant) = match &out.witness {
        Some(w) => (w.gap, matches!(w.competitor, Competitor::ConstantExtension)),
        None => (f64::NAN, false),
    };
    let ok = !gate.c1_proxy_ok && origin_dist <= 2.0 * 0.02 && constant && gap >= 0.9 && secs < 30.0;
    verdict(
        ok,
        format!(
            "C¹ jump {:.3} at distance {origin_dist:.3} from 0, constant-extension gap {gap:.4}, {secs:.1} s",
            gate.c1_max_jump
        ),
    )
}

fn c3_complex_exp() -> Verdict {
    let f = complex_exp();
    let domain = GridDomain::cube(-1.0, 1.0, 0.1, 2).unwrap();
    let u = f.sample(&domain).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut analytic = 0.0f64;
    for _ in 0..100 {
        let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let r = system_from(&Derivatives::analytic(&u, &x).unwrap(), None).unwrap();
        analytic = analytic.max(r.iter().map(|v| v * v).sum::<f64>().sqrt());
    }

    let hs = [0.1, 0.05, 0.025];
    let sups: Vec<f64> = hs
        .iter()
        .map(|&h| {
            let d = GridDomain::cube(-1.0, 1.0, h, 2).unwrap();
            let v = GridField::from_fn(d.clone(), 2, |x| f.value(x)).unwrap();
            system_residual(&v, &SubdomainMask::interior(&d, 1), ResidualKind::System, None).unwrap().sup
        })
        .collect();
    let order = fitted_order(&hs, &sups).unwrap_or(f64::NAN);

    // Rank 1 near the diagonal at tolerance h, 2 well away from it.
    let h = 0.1;
    let mut diag_ok = true;
    for i in 0..domain.len() {
        let x = domain.point(i);
        if (x[0] - x[1]).abs() <= h {
            diag_ok &= rank(&f.gradient(&x).unwrap(), Some(h)).unwrap() == 1;
        }
    }
    let mut off = 0;
    let mut off_ok = true;
    while off < 50 {
        let x: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if (x[0] - x[1]).abs() > 2.0 * h {
            off_ok &= rank(&f.gradient(&x).unwrap(), None).unwrap() == 2;
            off += 1;
        }
    }
    let ok = analytic <= 1e-10 && order >= 1.8 && diag_ok && off_ok;
    verdict(
        ok,
        format!(
            "analytic {analytic:.2e}; FD sups {:.2e}, {:.2e}, {:.2e}, order {order:.2}; rank map diag {diag_ok}, off-diagonal {off_ok}",
            sups[0], sups[1], sups[2]
        ),
    )
}

fn c4_decomposition() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    let mut count = 0;
    for name in NAMES {
        let f = gallery::get(name).unwrap();
        let u = f.sample(&GridDomain::cube(-1.0, 1.0, 0.5, f.dim).unwrap()).unwrap();
        let mut k = 0;
        while k < 1000 {
            let x: Vec<f64> = (0..f.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if f.singular_distance(&x) < 1e-3 {
                continue;
            }
            let d = Derivatives::analytic(&u, &x).unwrap();
            let sys = system_from(&d, None).unwrap();
            let t = tangential_from(&d);
            let n = normal_from(&d, None).unwrap();
            for a in 0..sys.len() {
                worst = worst.max((sys[a] - t[a] - n[a]).abs());
            }
            k += 1;
            count += 1;
        }
    }
    verdict(worst <= 1e-12, format!("{count} points over {} fields, worst {worst:.2e}", NAMES.len()))
}

fn c5_convexity() -> Verdict {
    let euclid = Hamiltonian::euclidean(2, 2).unwrap();
    let points = PointSampler::Box { lower: vec![-1.0, -1.0], upper: vec![1.0, 1.0] };
    let opts = ConvexityOptions { segments: 100_000, seed: 5, ..Default::default() };
    let pass = check_rank_one_level_convexity(&euclid, &points, &opts).unwrap();

    let annulus = Hamiltonian::annulus(2, 2).unwrap();
    let a = outer(&[0.6, 0.8], &[1.0, 0.0]);
    let b = -a.clone();
    let x = vec![0.0, 0.0];
    // Direct evaluation at λ = ½.
    let mid = annulus.eval(&x, &(&a * 0.5 + &b * 0.5)).unwrap();
    let ends = annulus.eval(&x, &a).unwrap().max(annulus.eval(&x, &b).unwrap());
    let opts = ConvexityOptions { segments: 0, seed: 5, extra_segments: vec![(x, a, b)], ..Default::default() };
    let fail = check_rank_one_level_convexity(&annulus, &PointSampler::origin(2), &opts).unwrap();
    let margin = fail.witness.as_ref().map_or(f64::NAN, |w| w.margin);
    let ok = pass.status == VerdictStatus::Pass
        && pass.samples_used >= 100_000
        && fail.status == VerdictStatus::Fail
        && margin >= 0.99
        && mid - ends >= 0.99;
    verdict(
        ok,
        format!(
            "euclidean {:?} over {} samples; annulus {:?}, witness margin {margin:.4}, explicit margin {:.4}",
            pass.status,
            pass.samples_used,
            fail.status,
            mid - ends
        ),
    )
}

fn c6_psi() -> Verdict {
    let cases = [
        Hamiltonian::euclidean(2, 2).unwrap(),
        Hamiltonian::parse("norm(P)^2 + x1^2", 2, 2).unwrap(),
        Hamiltonian::parse("exp(max(abs(P11) + abs(P12), norm(P21, P22))) * (1 + x2^2)", 2, 2).unwrap(),
    ];
    let points = PointSampler::Box { lower: vec![-1.0, -1.0], upper: vec![1.0, 1.0] };
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for (i, h) in cases.iter().enumerate() {
        let r = sample_psi_level_convexity(h, &points, 10_000, 60 + i as u64, 1e-10).unwrap();
        ok &= r.passed && r.trials == 10_000;
        worst = worst.max(r.worst_margin);
    }
    verdict(ok, format!("3 Hamiltonians × 10⁴ samples, worst excess {worst:.2e}"))
}

fn c7_jensen() -> Verdict {
    // Φ(v) = 1 − exp(−|v|²) has ball sublevel sets but is not convex.
    let phi = |v: &[f64]| 1.0 - (-v.iter().map(|a| a * a).sum::<f64>()).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut ok = true;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let values: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let r = verify::jensen_check(phi, &w, &values).unwrap();
        // Oracle: mean by explicit loops, max over all atoms.
        let mut mean = [0.0; 3];
        for (wi, v) in w.iter().zip(&values) {
            for j in 0..3 {
                mean[j] += wi * v[j];
            }
        }
        let lhs = phi(&mean);
        let rhs = values.iter().map(|v| phi(v)).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((r.lhs - lhs).abs()).max((r.rhs - rhs).abs());
        ok &= r.pass && lhs <= rhs + 1e-12;
    }
    let annulus = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() - 1.0).abs();
    let control = verify::jensen_check(annulus, &[0.5, 0.5], &[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let ok = ok && worst <= 1e-12 && control.lhs == 1.0 && control.rhs == 0.0 && !control.pass;
    verdict(ok, format!("10³ measures, oracle deviation {worst:.1e}; control lhs {} rhs {}", control.lhs, control.rhs))
}

fn c8_mollify() -> Verdict {
    let h = 0.005;
    let domain = GridDomain::cube(-0.2, 1.2, h, 2).unwrap();
    let mask = MaskSpec::Box { lower: vec![0.0, 0.0], upper: vec![1.0, 1.0] }.build(&domain).unwrap();
    let slope = 2.0;
    let g = PiecewiseAffine::random(vec![0.0, 0.0], vec![1.0, 1.0], slope, 3, 11);
    let psi = GridField::scalar_from_fn(domain.clone(), |x| g.value(x)).unwrap();
    let d0 = mollify::default_d0(&domain, &mask);
    let eps = [d0 / 2.0, d0 / 4.0, d0 / 8.0];
    let shells = mollify::build_shells(&domain, &mask, d0, Some((eps[2] / (2.0 * h)).floor() as usize)).unwrap();
    let partition = mollify::build_partition(&shells).unwrap();
    let table = mollify::convergence_check(&psi, &mask, &[1.0], &eps, &shells, &partition).unwrap();

    let mut bounds_ok = true;
    for (j, &e) in eps.iter().enumerate() {
        let smoothed = mollify::smooth(&psi, &[1.0], e, &shells, &partition).unwrap();
        for l in 1..=shells.k {
            let measured =
                shells.ring_points(l).iter().map(|&i| (smoothed.value(i, 0) - psi.value(i, 0)).abs()).fold(0.0, f64::max);
            let t = if l == 1 { e } else { e / (l - 1) as f64 };
            let bound = (if l == 1 { 2.0 } else { 3.0 }) * table.modulus.omega(t);
            let row = &table.rows[j * shells.k + l - 1];
            bounds_ok &= measured <= bound + 1e-10
                && (row.measured - measured).abs() <= 1e-14
                && measured <= (if l == 1 { 2.0 } else { 3.0 }) * slope * t + 1e-10;
        }
    }
    let monotone = table.sup_by_eps.windows(2).all(|w| w[1] <= w[0]);

    // Partition of unity, point by point.
    let mut pou_ok = true;
    let mut sum_err = 0.0f64;
    for i in mask.indices() {
        let s: f64 = (1..=shells.k).map(|k| partition.zeta(k, i)).sum();
        sum_err = sum_err.max((s - 1.0).abs());
        let r = shells.ring[i];
        for k in 1..=shells.k {
            let z = partition.zeta(k, i);
            pou_ok &= z >= 0.0 && (z == 0.0 || k.abs_diff(r) <= 1);
        }
    }
    let ok = bounds_ok && monotone && pou_ok && sum_err <= 1e-12 && partition.audit(&shells).ok();
    verdict(
        ok,
        format!(
            "K = {}{}, sups {:.3e} > {:.3e} > {:.3e}, bounds {bounds_ok}, Σζ error {sum_err:.1e}",
            shells.k,
            if shells.truncated { " (truncated)" } else { "" },
            table.sup_by_eps[0],
            table.sup_by_eps[1],
            table.sup_by_eps[2]
        ),
    )
}

fn c9_one_d() -> Verdict {
    let f = one_d_pair();
    let u = f.sample(&GridDomain::cube(-1.0, 1.0, 0.1, 1).unwrap()).unwrap();
    let mut worst = 0.0f64;
    for k in 0..100 {
        let t = -1.0 + 2.0 * (k as f64 + 0.5) / 100.0;
        let r = system_from(&Derivatives::analytic(&u, &[t]).unwrap(), None).unwrap();
        // |u′|² u″ with u′ = (2t, 1), u″ = (2, 0).
        let s = 4.0 * t * t + 1.0;
        worst = worst.max((r[0] - 2.0 * s).abs()).max(r[1].abs());
    }
    verdict(worst <= 1e-12, format!("100 points, worst {worst:.2e}"))
}

fn c10_reproducible() -> Verdict {
    let a = run::run(&minimality_config()).unwrap().report.to_json().unwrap();
    let b = run::run(&minimality_config()).unwrap().report.to_json().unwrap();
    verdict(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let checks: [Criterion; 10] = [
        ("affine minimality", c1_minimality),
        ("cone counterexample", c2_cone),
        ("complex-exp residual and rank", c3_complex_exp),
        ("system decomposition", c4_decomposition),
        ("rank-one level-convexity", c5_convexity),
        ("Ψ-section", c6_psi),
        ("Jensen", c7_jensen),
        ("mollification bounds", c8_mollify),
        ("one-dimensional reduction", c9_one_d),
        ("reproducible report", c10_reproducible),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let v = f();
        failed += !v.ok as usize;
        println!("{} criterion {:>2} {name}: {}", if v.ok { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("{} of 10 criteria pass", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
