//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Criteria 6–8 train nine desk-scale models (2000 iterations at 64×64);
//! expect roughly ten minutes on one core.

mod common;

use std::time::{Duration, Instant};

use stnhcl::config::RunConfig;
use stnhcl::eval::{evaluate, EvalReport};
use stnhcl::suite::{run_suite, SuiteOptions};
use stnhcl::train::train;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn gradient_suite() -> Verdict {
    let r = run_suite(&SuiteOptions::default()).expect("suite runs");
    let worst = r.entries.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max);
    let probes: usize = r.entries.iter().map(|e| e.report.probes).sum();
    let failed: Vec<&str> = r
        .entries
        .iter()
        .filter(|e| !e.passed)
        .map(|e| e.name.as_str())
        .collect();
    Verdict {
        id: 1,
        name: "gradient suite",
        pass: r.passed() && r.elapsed < Duration::from_secs(300),
        detail: format!(
            "{} checks, {probes} probes, worst rel err {worst:.2e} (< 1e-4), {:.1}s (< 300s){}",
            r.entries.len(),
            r.elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {failed:?}")
            }
        ),
    }
}

fn oracle_equivalence() -> Verdict {
    let gaps = common::oracle_gaps(200, 2);
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    Verdict {
        id: 2,
        name: "scalar oracle equivalence",
        pass: worst < 1e-10,
        detail: format!(
            "200 instances, K ≤ 6: hypergraph {:.1e}, monce {:.1e}, normal-weighted {:.1e}, tissue+background {:.1e} (< 1e-10)",
            gaps[0], gaps[1], gaps[2], gaps[3]
        ),
    }
}

fn weight_laws() -> Verdict {
    let [mean, rows, flat] = common::weight_law_gaps(1000, 3);
    Verdict {
        id: 3,
        name: "weight laws",
        pass: mean < 1e-12 && rows < 1e-6 && flat < 1e-6,
        detail: format!(
            "1000 trials: normal mean gap {mean:.1e} (< 1e-12), monce row gap {rows:.1e} (< 1e-6), sigma=1e4 gap {flat:.1e} (< 1e-6)"
        ),
    }
}

fn hypergraph_laws() -> Verdict {
    let r = common::hypergraph_laws(1000, 4);
    Verdict {
        id: 4,
        name: "hypergraph laws",
        pass: r.membership_gap < 1e-6 && r.isolated_nodes == 0 && r.equivariance_gap < 1e-12 && r.bound_violations == 0,
        detail: format!(
            "1000 trials: membership gap {:.1e}, isolated nodes {}, permutation gap {:.1e}, bound violations {}",
            r.membership_gap, r.isolated_nodes, r.equivariance_gap, r.bound_violations
        ),
    }
}

fn optimization_sanity() -> Verdict {
    let seeds = 0..10u64;
    let mut ok = 0;
    let mut span = Vec::new();
    for s in seeds.clone() {
        let t = common::descent_trace(s, 50, 0.01);
        if common::strictly_decreasing(&t) && t == common::descent_trace(s, 50, 0.01) {
            ok += 1;
        }
        span.push(format!("{:.2}→{:.2}", t[0], t[50]));
    }
    let n = seeds.count();
    Verdict {
        id: 5,
        name: "optimization sanity",
        pass: ok == n,
        detail: format!(
            "{ok}/{n} seeds strictly decreasing over 50 steps and reproducible; loss {}",
            span.join(", ")
        ),
    }
}

struct Run {
    report: EvalReport,
    wall: Duration,
}

impl Run {
    fn mean_css(&self) -> f64 {
        self.report.summary.iter().map(|s| s.css).sum::<f64>() / self.report.summary.len() as f64
    }
}

fn run(cfg: &RunConfig, label: &str) -> Run {
    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let out = train(cfg, dir.path()).expect("training completes");
    let wall = start.elapsed();
    let report = evaluate(&out.trainer.models, cfg).expect("evaluation");
    let r = Run { report, wall };
    eprintln!(
        "  {label} seed {}: {:.0}s, mean CSS {:.3}",
        cfg.seed,
        wall.as_secs_f64(),
        r.mean_css()
    );
    r
}

fn smoke_cfg(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        eval_samples: 50,
        ..RunConfig::default()
    }
}

fn smoke(r: &Run, cfg: &RunConfig) -> Verdict {
    let per: Vec<String> = r
        .report
        .summary
        .iter()
        .map(|s| format!("{} CSS {:.3} white {:.3}", s.domain.name(), s.css, s.whiteness))
        .collect();
    let quality = r.report.summary.iter().all(|s| s.css >= 0.7 && s.whiteness >= 0.8);
    Verdict {
        id: 6,
        name: "smoke training",
        pass: quality && r.wall < Duration::from_secs(30 * 60),
        detail: format!(
            "{} iterations at {}×{}, {} threads: {} (≥ 0.7 / ≥ 0.8), wall {:.0}s (< 1800s)",
            cfg.iterations,
            cfg.image_size,
            cfg.image_size,
            rayon::current_num_threads(),
            per.join("; "),
            r.wall.as_secs_f64()
        ),
    }
}

fn heatmap(r: &Run, cfg: &RunConfig) -> Verdict {
    let per: Vec<String> = r
        .report
        .summary
        .iter()
        .map(|s| format!("{} {:.2}", s.domain.name(), s.heat_separation))
        .collect();
    Verdict {
        id: 7,
        name: "heatmap separation",
        pass: r.report.summary.iter().all(|s| s.heat_separation >= 0.8),
        detail: format!(
            "fraction of {} held-out samples with tissue > background: {} (≥ 0.80 per domain)",
            cfg.eval_samples,
            per.join(", ")
        ),
    }
}

fn ablation(full: &[Run]) -> Verdict {
    let mut rows = Vec::new();
    let mut monotone = 0;
    for (i, c) in full.iter().enumerate() {
        let seed = i as u64;
        let a = run(
            &RunConfig {
                use_patchnce: false,
                use_hcl: false,
                ..smoke_cfg(seed)
            },
            "adv only",
        );
        let b = run(
            &RunConfig {
                use_hcl: false,
                ..smoke_cfg(seed)
            },
            "adv+patchnce",
        );
        let (a, b, c) = (a.mean_css(), b.mean_css(), c.mean_css());
        let ok = a <= b && b <= c;
        monotone += usize::from(ok);
        rows.push(format!(
            "seed {seed}: {a:.3} ≤ {b:.3} ≤ {c:.3} {}",
            if ok { "yes" } else { "no" }
        ));
    }
    Verdict {
        id: 8,
        name: "ablation monotonicity",
        pass: 2 * monotone > full.len(),
        detail: format!(
            "mean CSS (a) adv, (b) +patchnce, (c) +hypergraph; {}; {monotone}/{} seeds",
            rows.join("; "),
            full.len()
        ),
    }
}

fn main() {
    let mut verdicts = vec![
        gradient_suite(),
        oracle_equivalence(),
        weight_laws(),
        hypergraph_laws(),
        optimization_sanity(),
    ];
    for v in &verdicts {
        println!(
            "{} criterion {}: {} — {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }

    eprintln!("training full models (3 seeds)");
    let full: Vec<Run> = (0..3).map(|s| run(&smoke_cfg(s), "full")).collect();
    let cfg = smoke_cfg(0);
    let tail = [smoke(&full[0], &cfg), heatmap(&full[0], &cfg)];
    for v in &tail {
        println!(
            "{} criterion {}: {} — {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }
    eprintln!("training ablations (3 seeds × 2 variants)");
    let abl = ablation(&full);
    println!(
        "{} criterion {}: {} — {}",
        if abl.pass { "PASS" } else { "FAIL" },
        abl.id,
        abl.name,
        abl.detail
    );
    verdicts.extend(tail);
    verdicts.push(abl);

    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!(
        "acceptance: {}/{} criteria passed",
        verdicts.len() - failed,
        verdicts.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
