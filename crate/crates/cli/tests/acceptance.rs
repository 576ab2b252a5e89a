//! Acceptance checks. Runs as a plain binary (`harness = false`) so every
//! criterion prints one PASS/FAIL line even when an earlier one fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use fmpa_core::aggregation::{afa, bulyan, centered_clip, coordinate_median, dnc, faba, fedavg, krum, mkrum, norm_bounding, trimmed_mean, DncParams};
use fmpa_core::attacks::{craft_f_fmpa_with_reference, known_rho, search_lambda, AttackerView, RhoMode};
use fmpa_core::data::{partition, synth_blobs};
use fmpa_core::engine::{run_seed, SeedRun};
use fmpa_core::model::TrainConfig;
use fmpa_core::{
    AggregatorSpec, AttackKind, AttackPlan, Dataset, FlConfig, FmpaConfig, LabeledBatch, MlpArchitecture, ParamVector, PartitionSpec, ReferenceMode,
    Schedule, SmoothingState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Check {
    let took = start.elapsed();
    ensure(took < limit, format!("{detail}, {:.1}s (limit {}s)", took.as_secs_f64(), limit.as_secs()))
}

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

fn random_updates(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<ParamVector> {
    (0..n).map(|_| pv((0..d).map(|_| rng.random_range(-scale..scale)).collect())).collect()
}

// 1 -------------------------------------------------------------------------

fn column(u: &[ParamVector], j: usize) -> Vec<f64> {
    let mut c: Vec<f64> = u.iter().map(|v| v.as_slice()[j]).collect();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c
}

fn median_oracle(u: &[ParamVector]) -> Vec<f64> {
    (0..u[0].dim())
        .map(|j| {
            let c = column(u, j);
            let n = c.len();
            if n % 2 == 1 {
                c[n / 2]
            } else {
                (c[n / 2 - 1] + c[n / 2]) / 2.0
            }
        })
        .collect()
}

fn trmean_oracle(u: &[ParamVector], beta: usize) -> Vec<f64> {
    (0..u[0].dim())
        .map(|j| {
            let c = column(u, j);
            let inner = &c[beta..c.len() - beta];
            inner.iter().sum::<f64>() / inner.len() as f64
        })
        .collect()
}

fn same(a: &ParamVector, b: &[f64]) -> bool {
    a.as_slice().iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
}

fn sqd(a: &ParamVector, b: &ParamVector) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Repeated Krum: score = sum of squared distances to the n−m−2 nearest others.
fn krum_select(u: &[ParamVector], m: usize, size: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..u.len()).collect();
    let mut out = Vec::new();
    while out.len() < size {
        let n = pool.len();
        let k = if n == 1 { 0 } else { n.saturating_sub(m + 2).clamp(1, n - 1) };
        let scores: Vec<f64> = pool
            .iter()
            .map(|&i| {
                let mut ds: Vec<f64> = pool.iter().filter(|&&j| j != i).map(|&j| sqd(&u[i], &u[j])).collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ds[..k].iter().sum()
            })
            .collect();
        let pos = (0..n).fold(0, |b, p| if scores[p] < scores[b] { p } else { b });
        out.push(pool.remove(pos));
    }
    out.sort_unstable();
    out
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..200 {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=50);
        let u = random_updates(&mut rng, n, d, 3.0);
        if !same(&coordinate_median(&u).unwrap().update, &median_oracle(&u)) {
            return Err(format!("median differs on instance {case}"));
        }
        let beta = rng.random_range(0..=(n - 1) / 2);
        if !same(&trimmed_mean(&u, beta).unwrap().update, &trmean_oracle(&u, beta)) {
            return Err(format!("trimmed mean differs on instance {case}"));
        }
    }
    for case in 0..100 {
        let n = rng.random_range(3..=12);
        let d = rng.random_range(1..=20);
        let u = random_updates(&mut rng, n, d, 3.0);
        let m = rng.random_range(0..=n - 3);
        let size = rng.random_range(1..=n - m);
        let bm = (n - 3) / 4;
        let ok = krum(&u, m).unwrap().kept == krum_select(&u, m, 1)
            && mkrum(&u, m, size).unwrap().kept == krum_select(&u, m, size)
            && bulyan(&u, bm, None).unwrap().kept == krum_select(&u, bm, n - 2 * bm);
        if !ok {
            return Err(format!("krum family selection differs on instance {case}"));
        }
    }
    within(Duration::from_secs(10), start, "200 median/trmean + 100 krum/mkrum/bulyan instances agree".into())
}

// 2 -------------------------------------------------------------------------

fn max_rel_err(f: impl Fn(&ParamVector) -> f64, at: &ParamVector, analytic: &ParamVector) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..at.dim() {
        let mut plus = at.clone().into_inner();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let num = (f(&pv(plus)) - f(&pv(minus))) / (2.0 * h);
        let a = analytic.as_slice()[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst, mut nets) = (0.0f64, 0);
    while nets < 20 {
        let mut sizes = vec![rng.random_range(2..=8)];
        for _ in 0..rng.random_range(0..=2) {
            sizes.push(rng.random_range(2..=12));
        }
        sizes.push(rng.random_range(2..=5));
        let arch = MlpArchitecture::new(sizes).unwrap();
        let d = arch.param_count();
        if d > 500 {
            continue;
        }
        nets += 1;
        let params = pv((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let reference = pv(params.iter().map(|p| p + rng.random_range(-0.5..0.5)).collect());
        let n = rng.random_range(1..=6);
        let inputs: Vec<f64> = (0..n * arch.input_dim()).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..arch.classes())).collect();
        let batch = LabeledBatch::new(&inputs, &labels, arch.input_dim()).unwrap();
        let lambda = rng.random_range(0.0..0.5);
        let (_, g) = arch.ce_loss_and_grad(&params, &batch).unwrap();
        worst = worst.max(max_rel_err(|p| arch.ce_loss_and_grad(p, &batch).unwrap().0, &params, &g));
        let (_, g) = arch.poison_objective(&params, &reference, &batch, lambda).unwrap();
        worst = worst.max(max_rel_err(|p| arch.poison_objective(p, &reference, &batch, lambda).unwrap().0, &params, &g));
    }
    let detail = format!("max relative error {worst:.2e} over 20 nets (limit 1e-4)");
    if worst > 1e-4 {
        return Err(detail);
    }
    within(Duration::from_secs(10), start, detail)
}

// shared desk-scale task ----------------------------------------------------

const N: usize = 30;
const M: usize = 6;

fn blobs(per_class: usize, seed: u64) -> (Dataset, Dataset) {
    synth_blobs(4, per_class, 16, 0.15, seed).unwrap()
}

fn arch() -> MlpArchitecture {
    MlpArchitecture::new(vec![16, 32, 4]).unwrap()
}

fn desk_cfg(attackers: usize, rounds: usize, kind: AttackKind, aggregator: AggregatorSpec) -> FlConfig {
    let mut attack = AttackPlan::of(kind);
    attack.tau = Some(0.25);
    attack.fmpa.attacker_lr = 0.05;
    attack.fmpa.attacker_epochs = 20;
    FlConfig {
        clients: N,
        attackers,
        rounds,
        global_lr: 0.25,
        sample_rate: 1.0,
        train: TrainConfig { epochs: 3, batch_size: 16, learning_rate: 0.01 },
        aggregator,
        attack,
        schedule: Schedule::FixedAttackers,
    }
}

// 3 -------------------------------------------------------------------------

fn criterion_3() -> Check {
    let (train, test) = blobs(150, 11);
    let cfg = desk_cfg(M, 60, AttackKind::IFmpa, AggregatorSpec::Fedavg);
    let run = run_seed(&cfg, &arch(), &train, &test, &PartitionSpec::iid(N, 0), 1).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut violations = 0;
    for t in run.attacked.traces.iter().filter(|t| t.attacked) {
        checked += 1;
        match (t.reference_distance, t.radius) {
            (Some(dist), Some(r)) if dist <= r * (1.0 + 1e-12) => {}
            _ => violations += 1,
        }
    }
    ensure(violations == 0 && checked == 59, format!("{violations} violations over {checked} attacked rounds"))
}

// 4 -------------------------------------------------------------------------

fn criterion_4() -> Check {
    let (train, test) = blobs(150, 11);
    let cfg = desk_cfg(0, 100, AttackKind::None, AggregatorSpec::Fedavg);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let run = pool.install(|| run_seed(&cfg, &arch(), &train, &test, &PartitionSpec::iid(N, 0), 1)).map_err(|e| e.to_string())?;
    let acc = run.benign.final_accuracy;
    if acc < 0.95 {
        return Err(format!("final accuracy {acc:.3} (need >= 0.95)"));
    }
    within(Duration::from_secs(60), start, format!("final accuracy {acc:.3}"))
}

// 5 -------------------------------------------------------------------------

fn criterion_5() -> Check {
    let (train, test) = blobs(150, 11);
    let seeds = [1u64, 2, 3];
    let rules = [
        AggregatorSpec::Fedavg,
        AggregatorSpec::Mkrum { m: M, selection: None },
        AggregatorSpec::Trmean { beta: M },
    ];
    let kinds = [AttackKind::IFmpa, AttackKind::Lie, AttackKind::Ipm];
    let jobs: Vec<(usize, usize, u64)> = (0..rules.len()).flat_map(|r| (0..kinds.len()).flat_map(move |k| seeds.map(|s| (r, k, s)))).collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(r, k, s)| {
            let cfg = desk_cfg(M, 100, kinds[k], rules[r].clone());
            run_seed(&cfg, &arch(), &train, &test, &PartitionSpec::iid(N, 0), s).unwrap()
        })
        .collect();
    let at = |r: usize, k: usize, si: usize| &runs[(r * kinds.len() + k) * seeds.len() + si];

    let mut ok = true;
    let best: Vec<f64> = (0..seeds.len()).map(|si| at(0, 0, si).attacked.best_accuracy).collect();
    let dos = best.iter().all(|&b| b <= 0.40);
    ok &= dos;
    let mut parts = vec![format!("I-FMPA/FedAvg best attacked accuracy {best:.3?} (need <= 0.40)")];
    for (r, rule) in rules.iter().enumerate() {
        let wins = (0..seeds.len()).filter(|&si| (1..kinds.len()).all(|k| at(r, 0, si).phi >= at(r, k, si).phi)).count();
        let phis: Vec<[f64; 3]> = (0..seeds.len()).map(|si| [0, 1, 2].map(|k| (at(r, k, si).phi * 10.0).round() / 10.0)).collect();
        ok &= wins >= 2;
        parts.push(format!("{}: ordering on {wins}/3 seeds, phi[fmpa,lie,ipm] {phis:?}", rule.name()));
    }
    ensure(ok, parts.join("; "))
}

// 6 -------------------------------------------------------------------------

fn criterion_6() -> Check {
    let start = Instant::now();
    let (train, test) = blobs(1000, 11);
    let mut cfg = desk_cfg(M, 150, AttackKind::FFmpa, AggregatorSpec::Fedavg);
    cfg.global_lr = 0.1;
    cfg.train = TrainConfig { epochs: 3, batch_size: 16, learning_rate: 0.003 };
    cfg.attack.tau = None;
    cfg.attack.fmpa = FmpaConfig {
        attacker_epochs: 20,
        attacker_lr: 0.003,
        val_fraction: 0.5,
        reference: ReferenceMode::Prm,
        ..FmpaConfig::default()
    };
    cfg.attack.precise.xi = 0.10;
    cfg.attack.precise.rho = RhoMode::Known;
    let devs: Vec<f64> = [1u64, 2, 3]
        .par_iter()
        .map(|&s| run_seed(&cfg, &arch(), &train, &test, &PartitionSpec::iid(N, 0), s).unwrap().deviation.unwrap())
        .collect();
    let mean = devs.iter().sum::<f64>() / devs.len() as f64;
    let detail = format!("mean deviation {mean:.2} pp (need <= 2.0), per seed {devs:.2?}");
    if mean > 2.0 {
        return Err(detail);
    }
    within(Duration::from_secs(300), start, detail)
}

// 7 -------------------------------------------------------------------------

fn criterion_7() -> Check {
    let (train, _) = blobs(40, 7);
    let arch = arch();
    let (n, m, eta) = (10, 3, 0.4);
    let shards = partition(&train, &PartitionSpec::iid(n, 7)).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 8, learning_rate: 0.01 };
    let global = arch.local_train(&arch.init_params(7), &train.batch(), &tc, 0).unwrap();
    let honest: Vec<ParamVector> = shards.iter().enumerate().map(|(i, s)| arch.local_train(&global, &s.batch(), &tc, 10 + i as u64).unwrap().sub(&global)).collect();

    // the oracle hands the attackers the true benign next global model
    let truth = global.add_scaled(eta, &fedavg(&honest, None).unwrap().update);
    let pooled: Vec<&Dataset> = shards[..m].iter().collect();
    let data = Dataset::concat(&pooled).unwrap();
    let view = AttackerView { arch: &arch, global: &global, round: 1, honest_updates: &honest[..m], data: &data, seed: 7 };
    let fcfg = FmpaConfig { tau: 0.5, lambda: 1e-3, ..FmpaConfig::default() };
    let rho = known_rho(n, eta, m).unwrap();
    let crafted = craft_f_fmpa_with_reference(&view, &truth, &fcfg, rho).map_err(|e| e.to_string())?;

    let mut submitted = honest.clone();
    for u in &mut submitted[..m] {
        *u = crafted.update.clone();
    }
    let next = global.add_scaled(eta, &fedavg(&submitted, None).unwrap().update);
    let rel = next.sub(&crafted.model).norm() / crafted.model.norm();
    ensure(rel <= 1e-6 && crafted.model != truth, format!("relative gap {rel:.2e} (limit 1e-6)"))
}

// 8 -------------------------------------------------------------------------

fn criterion_8() -> Check {
    let c = pv(vec![0.3, -1.7, 2.5, 0.0]);
    let mut st = SmoothingState::new(0.7).unwrap();
    for _ in 0..25 {
        st.update(&c).unwrap();
    }
    let const_err = st.predict().unwrap().sub(&c).norm();

    let a = pv(vec![1.0, -2.0, 0.5]);
    let b = pv(vec![0.1, 0.05, -0.3]);
    let g = |t: usize| a.add_scaled(t as f64, &b);
    let mut st = SmoothingState::new(0.7).unwrap();
    let mut errs = Vec::new();
    for t in 1..=100 {
        st.update(&g(t)).unwrap();
        errs.push(st.predict().unwrap().sub(&g(t + 1)).norm());
    }
    let (e10, e100) = (errs[9], errs[99]);
    ensure(const_err == 0.0 && e100 < e10, format!("constant-history error {const_err}, linear-trend error {e10:.3e} at 10 vs {e100:.3e} at 100"))
}

// 9 -------------------------------------------------------------------------

fn criterion_9() -> Check {
    let mut calls = 0;
    let res = search_lambda(
        |l| {
            calls += 1;
            Ok(l <= 0.5)
        },
        1.0,
        0.01,
    )
    .map_err(|e| e.to_string())?;
    ensure(
        (res.lambda - 0.5).abs() <= 0.01 && calls <= 30 && res.calls == calls,
        format!("lambda {} after {calls} oracle calls", res.lambda),
    )
}

// 10 ------------------------------------------------------------------------

fn criterion_10() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for case in 0..1000 {
        let n = rng.random_range(2..16);
        let d = rng.random_range(1..24);
        let u: Vec<ParamVector> = (0..n)
            .map(|_| {
                let s = if rng.random_bool(0.2) { rng.random_range(10.0..1e4) } else { 1.0 };
                pv((0..d).map(|_| s * rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        let bound = u.iter().map(|x| x.norm()).sum::<f64>() / n as f64;
        if norm_bounding(&u).unwrap().update.norm() > bound * (1.0 + 1e-12) {
            return Err(format!("norm bounding exceeds M on input {case}"));
        }
        let r = rng.random_range(0.01..50.0);
        let mut v = pv((0..d).map(|_| rng.random_range(-5.0..5.0)).collect());
        for _ in 0..3 {
            let next = centered_clip(&u, 1, r, &v).unwrap().update;
            if next.sub(&v).norm() > r * (1.0 + 1e-12) {
                return Err(format!("centered clip moves more than r on input {case}"));
            }
            v = next;
        }
        let m = rng.random_range(0..n);
        if faba(&u, m).unwrap().kept.len() != n - m {
            return Err(format!("faba does not remove exactly m on input {case}"));
        }
        let c = rng.random_range(0.5..2.0);
        let dm = rng.random_range(0..n);
        let remove = (c * dm as f64).ceil() as usize;
        if n > remove {
            let p = DncParams { m: dm, subsample_dim: rng.random_range(1..=d), filter_coef: c, power_iters: 50, seed: case };
            if dnc(&u, &p).unwrap().kept.len() != n - remove {
                return Err(format!("dnc does not remove exactly ceil(c*m) on input {case}"));
            }
        }
        let prev = pv((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        if afa(&u, &prev, rng.random_range(0.0..2.0), rng.random_range(1..20)).unwrap().kept.is_empty() {
            return Err(format!("afa removed every update on input {case}"));
        }
    }
    Ok("1000 inputs, no violations".into())
}

// 11 ------------------------------------------------------------------------

fn criterion_11() -> Check {
    let (train, test) = blobs(150, 11);
    let qs = [0.25, 0.5, 0.75];
    let seeds = [1u64, 2, 3];
    let jobs: Vec<(usize, u64)> = (0..qs.len()).flat_map(|q| seeds.map(|s| (q, s))).collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(q, s)| {
            let cfg = desk_cfg(M, 100, AttackKind::IFmpa, AggregatorSpec::Fedavg);
            run_seed(&cfg, &arch(), &train, &test, &PartitionSpec::bias(N, qs[q], 0), s).unwrap()
        })
        .collect();
    let at = |q: usize, si: usize| &runs[q * seeds.len() + si];
    let benign: Vec<f64> = (0..qs.len()).map(|q| (0..seeds.len()).map(|si| at(q, si).benign.final_accuracy).sum::<f64>() / seeds.len() as f64).collect();
    let monotone = benign.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let wins = (0..seeds.len()).filter(|&si| at(2, si).phi >= at(0, si).phi).count();
    let phi = |q: usize| (0..seeds.len()).map(|si| (at(q, si).phi * 10.0).round() / 10.0).collect::<Vec<_>>();
    ensure(
        monotone && wins >= 2,
        format!("mean benign final accuracy {benign:.3?}; phi at q=0.75 {:?} vs q=0.25 {:?} ({wins}/3 seeds)", phi(2), phi(0)),
    )
}

// 12 ------------------------------------------------------------------------

fn criterion_12() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("exp.toml");
    let body = "seeds = [7]\n[data]\nclasses = 4\nper_class = 60\ndim = 16\n[model]\nhidden = [16]\n[fl]\nclients = 20\nattackers = 4\nrounds = 15\nglobal_lr = 0.25\n\
                [sweep]\nattacks = [\"i_fmpa\", \"lie\", \"min_max\"]\naggregators = [\"fedavg\", \"mkrum\", \"dnc\"]\n";
    fs::write(&cfg, body).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for out in ["first", "second"] {
        let status = Command::new(env!("CARGO_BIN_EXE_fmpa"))
            .args(["run".as_ref(), cfg.as_os_str(), "--out".as_ref(), dir.path().join(out).as_os_str()])
            .env_remove("FMPA_DATA_DIR")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("fmpa run failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outputs.push(fs::read(dir.path().join(out).join("summary.csv")).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], format!("summary.csv {} bytes, identical across runs: {}", outputs[0].len(), outputs[0] == outputs[1]))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("aggregator oracle equivalence", criterion_1),
        ("gradient correctness", criterion_2),
        ("certified-radius invariant", criterion_3),
        ("baseline convergence", criterion_4),
        ("I-FMPA denial of service and ordering", criterion_5),
        ("F-FMPA precision", criterion_6),
        ("F-FMPA closed-loop identity", criterion_7),
        ("predictor sanity", criterion_8),
        ("lambda search", criterion_9),
        ("defense post-conditions", criterion_10),
        ("non-IID sweep direction", criterion_11),
        ("end-to-end determinism", criterion_12),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match res {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
