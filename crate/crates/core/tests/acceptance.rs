//! Acceptance suite: one PASS/FAIL line per criterion, with measured values.
//!
//! Runs as a plain binary. The process exits non-zero on a failed criterion
//! only when `ACCEPTANCE_STRICT=1` is set.

use std::process::Command;
use std::time::Instant;

use svrpf::checks::{self, KalmanSetup, MixtureSetup};
use svrpf::harness::{parse_config_text, run_experiment, ExperimentConfig};
use svrpf::metrics::paired_sign_test;
use svrpf::resampling::ResamplingScheme;
use svrpf::rng::RandomStream;

const SEED: u64 = 20_240_601;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn line(o: &Outcome) {
    println!(
        "{} [{}] {}: {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail
    );
}

fn info(msg: String) {
    println!("     {msg}");
}

fn kalman_oracle() -> Outcome {
    let start = Instant::now();
    let setup = KalmanSetup {
        n: 5000,
        m: 10_000,
        reps: 20,
        horizon: 50,
    };
    let fractions = checks::kalman_agreement(&setup, SEED).expect("kalman agreement run");
    let secs = start.elapsed().as_secs_f64();
    for (name, f) in &fractions {
        info(format!("{name}: {:.1}% of (run, step) pairs within 3 MC SE", 100.0 * f));
    }
    let accurate = fractions.iter().all(|(_, f)| *f >= 0.95);
    Outcome {
        id: 1,
        name: "Kalman-oracle equivalence",
        passed: accurate && secs <= 300.0,
        detail: format!(
            "min fraction {:.3} (need >= 0.95), runtime {secs:.1} s (need <= 300 s)",
            fractions.iter().map(|(_, f)| *f).fold(1.0, f64::min)
        ),
    }
}

fn resampling() -> Outcome {
    let start = Instant::now();
    let mut all_ok = true;
    let mut worst_z = 0.0f64;
    let mut minvar_single = f64::NAN;
    for (k, scheme) in [
        ResamplingScheme::Systematic,
        ResamplingScheme::MinimumVariance,
        ResamplingScheme::Residual,
        ResamplingScheme::DEFAULT_BRANCHING,
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = RandomStream::new(SEED, 100 + k as u64);
        let u = checks::resampling_unbiasedness(scheme, 100, 100, 10_000, &mut rng).expect("resampling run");
        info(format!(
            "{scheme}: max |mean count - N w| / sigma = {:.3} ({} of {} checks above 3), max single-replication deviation {:.4}",
            u.max_z, u.exceedances, u.checks, u.max_single_deviation
        ));
        all_ok &= u.max_z <= 3.0;
        worst_z = worst_z.max(u.max_z);
        if scheme == ResamplingScheme::MinimumVariance {
            minvar_single = u.max_single_deviation;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    info("an unbiased count with exactly binomial spread exceeds 3 sigma in about 27 of 10000 checks".into());
    let single_ok = minvar_single < 1.0;
    Outcome {
        id: 2,
        name: "resampling unbiasedness",
        passed: all_ok && single_ok && secs <= 120.0,
        detail: format!(
            "worst z {worst_z:.3} (need <= 3 for every i), min-variance max |count - N w| {minvar_single:.4} (need < 1), runtime {secs:.1} s (need <= 120 s)"
        ),
    }
}

fn migration_properties() -> (Outcome, Outcome) {
    let setup = MixtureSetup::default();
    let trials: Vec<_> = (0..100u64)
        .map(|k| checks::migration_trial(&setup, &mut RandomStream::new(SEED, 1000 + k)).expect("migration trial"))
        .collect();
    let frac = |f: &dyn Fn(&checks::MigrationTrial) -> f64| {
        trials.iter().filter(|t| f(t) <= 0.05).count() as f64 / trials.len() as f64
    };
    let max = |f: &dyn Fn(&checks::MigrationTrial) -> f64| trials.iter().map(f).fold(0.0, f64::max);
    let t1 = frac(&|t| t.ks_prior);
    let t2 = frac(&|t| t.ks_likelihood);
    let t3 = frac(&|t| t.ks_posterior);
    info(format!(
        "likelihood-only weighting: {:.0}% of trials with KS <= 0.05 (max {:.4})",
        100.0 * t2,
        max(&|t| t.ks_likelihood)
    ));
    (
        Outcome {
            id: 3,
            name: "migrated particles keep the source distribution",
            passed: t1 >= 0.95,
            detail: format!(
                "{:.0}% of 100 trials with KS <= 0.05 (need >= 95%), max KS {:.4}",
                100.0 * t1,
                max(&|t| t.ks_prior)
            ),
        },
        Outcome {
            id: 4,
            name: "mixed weights reproduce the Bayes posterior",
            passed: t3 >= 0.90,
            detail: format!(
                "{:.0}% of 100 trials with KS <= 0.05 (need >= 90%), max KS {:.4}, likelihood N({}, {}^2)",
                100.0 * t3,
                max(&|t| t.ks_posterior),
                setup.likelihood_center,
                setup.likelihood_sd
            ),
        },
    )
}

fn growth_config(r: f64) -> ExperimentConfig {
    let text = format!(
        "model.name = growth\nmodel.q = 10\nmodel.r = {r}\nexperiment.t = 100\nexperiment.runs = 100\nexperiment.n = 100\nfilter.svrpf.m = 200\nexperiment.filters = gpf,svrpf\nexperiment.seed = {SEED}"
    );
    ExperimentConfig::from_pairs(&parse_config_text(&text).unwrap()).unwrap()
}

fn rmse_and_coverage() -> (Outcome, Outcome) {
    let start = Instant::now();
    let narrow = run_experiment(&growth_config(0.1)).expect("narrow-noise run");
    let normal = run_experiment(&growth_config(5.0)).expect("normal-noise run");
    let secs = start.elapsed().as_secs_f64();
    let (g1, s1) = (&narrow.summaries[0], &narrow.summaries[1]);
    let (g5, s5) = (&normal.summaries[0], &normal.summaries[1]);
    for (label, s) in [("r=0.1", &narrow), ("r=5", &normal)] {
        for f in &s.summaries {
            info(format!(
                "{label} {}: RMSE {:.4} +- {:.4}, coverage {:.4}, {:.3} ms/step, {} failed runs",
                f.filter, f.rmse_mean, f.rmse_sd, f.coverage, f.ms_mean, f.failures
            ));
        }
    }
    let paired = g1.failures == 0 && s1.failures == 0;
    let p = if paired {
        paired_sign_test(&s1.rmse, &g1.rmse).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let narrow_ok = s1.rmse_mean < g1.rmse_mean && p < 0.05;
    let normal_ok = s5.rmse_mean <= g5.rmse_mean + 0.05;
    let directional = Outcome {
        id: 5,
        name: "SVRPF RMSE against GPF",
        passed: narrow_ok && normal_ok && secs <= 600.0,
        detail: format!(
            "r=0.1: {:.4} vs {:.4}, sign-test p {p:.3e} (need lower and p < 0.05); r=5: {:.4} vs {:.4} (need <= GPF + 0.05); runtime {secs:.1} s (need <= 600 s)",
            s1.rmse_mean, g1.rmse_mean, s5.rmse_mean, g5.rmse_mean
        ),
    };
    let coverage = Outcome {
        id: 6,
        name: "SVR-IR coverage",
        passed: s1.coverage >= 0.95 && s1.coverage >= g1.coverage,
        detail: format!(
            "SVRPF {:.4} (need >= 0.95), GPF {:.4} (need SVRPF >= GPF)",
            s1.coverage, g1.coverage
        ),
    };
    (directional, coverage)
}

fn svr_soundness() -> Outcome {
    let s = checks::svr_soundness(200, &mut RandomStream::new(SEED, 7)).expect("svr fit");
    let passed = s.beta_sum_error <= 1e-9 && s.mass_error <= 1e-3 && s.max_residual <= s.epsilon && s.l1 <= 0.15;
    Outcome {
        id: 7,
        name: "SVR density soundness",
        passed,
        detail: format!(
            "|sum beta - 1| {:.2e} (<= 1e-9), |mass - 1| {:.2e} (<= 1e-3), max CDF residual {:.4} (<= eps {:.4}), L1 {:.4} (<= 0.15)",
            s.beta_sum_error, s.mass_error, s.max_residual, s.epsilon, s.l1
        ),
    }
}

fn mask_ms(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn mask_summary(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            [&f[..4], &f[5..]].concat().join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let conf = dir.path().join("exp.conf");
    std::fs::write(
        &conf,
        "experiment.t = 30\nexperiment.runs = 6\nexperiment.n = 80\nexperiment.filters = gpf,epf,upf,svrpf,gpf-residual\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_svrpf"))
            .args(["run", "--seed", "17", "--config"])
            .arg(&conf)
            .arg("--out")
            .arg(&out)
            .output()
            .expect("spawn svrpf");
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let steps = std::fs::read_to_string(out.join("steps.csv")).unwrap();
        let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
        outputs.push((steps, summary));
    }
    let steps_equal = mask_ms(&outputs[0].0) == mask_ms(&outputs[1].0);
    let summary_equal = mask_summary(&outputs[0].1) == mask_summary(&outputs[1].1);
    Outcome {
        id: 8,
        name: "reproducibility",
        passed: steps_equal && summary_equal,
        detail: format!(
            "steps.csv identical {steps_equal} ({} rows), summary.csv identical {summary_equal} (runtime columns masked)",
            outputs[0].0.lines().count() - 1
        ),
    }
}

fn main() {
    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        line(&o);
        outcomes.push(o.passed);
    };
    record(kalman_oracle());
    record(resampling());
    let (t1, t3) = migration_properties();
    record(t1);
    record(t3);
    let (rmse, cov) = rmse_and_coverage();
    record(rmse);
    record(cov);
    record(svr_soundness());
    record(reproducibility());
    let passed = outcomes.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    if passed < outcomes.len() && std::env::var("ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
