//! Acceptance criteria 1–10. Prints one PASS/FAIL line per criterion with the
//! measured values and exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use sheaf_dmfl::config;
use sheaf_dmfl::verify::{self, PropertyResult};

struct Criterion {
    id: usize,
    title: &'static str,
    parts: Vec<PropertyResult>,
    elapsed: Duration,
    limit: Option<Duration>,
}

impl Criterion {
    fn passed(&self) -> bool {
        self.parts.iter().all(|p| p.passed) && self.limit.is_none_or(|l| self.elapsed < l)
    }

    fn print(&self) {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let limit = self.limit.map_or(String::new(), |l| format!(" (limit {}s)", l.as_secs()));
        println!("criterion {:>2} [{status}] {} — {:.1}s{limit}", self.id, self.title, self.elapsed.as_secs_f64());
        for p in &self.parts {
            println!("    {p}");
        }
    }
}

fn timed(id: usize, title: &'static str, limit: Option<u64>, f: impl FnOnce() -> Vec<PropertyResult>) -> Criterion {
    let t = Instant::now();
    let parts = f();
    Criterion { id, title, parts, elapsed: t.elapsed(), limit: limit.map(Duration::from_secs) }
}

fn main() {
    // `cargo test -- --list` and filters from the libtest harness
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let reference = config::reference();
    let seeds: Vec<u64> = (0..5).collect();
    let mut out = Vec::new();

    out.push(timed(1, "gradient blocks vs central differences", Some(30), || {
        vec![verify::check_gradients(50), verify::check_gradients_at_init(&reference)]
    }));
    out.push(timed(2, "sheaf algebra", Some(10), || vec![verify::check_sheaf_algebra(100)]));
    out.push(timed(3, "mixing-matrix assumptions", Some(10), || vec![verify::check_mixing(50, None)]));

    let t = Instant::now();
    let r = verify::reference_checks(&reference);
    let ref_elapsed = t.elapsed();
    out.push(Criterion {
        id: 4,
        title: "averaged-encoder identity on the reference run",
        parts: vec![r.lemma1],
        elapsed: ref_elapsed,
        limit: None,
    });
    out.push(Criterion {
        id: 5,
        title: "monotone descent and one-round descent inequality",
        parts: vec![r.monotone, r.lemma2, r.head_bound],
        elapsed: ref_elapsed,
        limit: None,
    });
    out.push(Criterion {
        id: 6,
        title: "averaged squared-gradient bound",
        parts: vec![r.theorem],
        elapsed: ref_elapsed,
        limit: Some(Duration::from_secs(300)),
    });

    out.push(timed(7, "degeneration equivalences", None, || {
        vec![
            verify::check_lambda_zero_equals_dsgd(&reference),
            verify::check_identity_consensus(100),
            verify::check_local_no_comm(&reference),
        ]
    }));
    out.push(timed(8, "accuracy ordering on the synthetic scenario", Some(600), || {
        verify::check_accuracy_ordering(&reference, &seeds)
    }));
    out.push(timed(9, "γ ablation with identity maps", None, || {
        vec![verify::check_gamma_ablation(&reference, &seeds)]
    }));
    out.push(timed(10, "byte-identical runlog across repeats and thread counts", None, || {
        let mut hetero = reference.clone();
        hetero.data.heterogeneity = 0.8;
        let mut dsgd = reference.clone();
        dsgd.train.algorithm = sheaf_dmfl::trainer::Algorithm::Dsgd;
        dsgd.model.fusion = None;
        vec![
            verify::check_determinism(&reference),
            verify::check_determinism(&hetero),
            verify::check_determinism(&dsgd),
        ]
    }));

    println!();
    for c in &out {
        c.print();
    }
    let failed: Vec<usize> = out.iter().filter(|c| !c.passed()).map(|c| c.id).collect();
    println!();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", out.len());
    } else {
        println!("acceptance: {} of {} passed; failed {failed:?}", out.len() - failed.len(), out.len());
        std::process::exit(1);
    }
}
