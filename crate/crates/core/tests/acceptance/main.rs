//! Acceptance suite. Runs every criterion in order and prints one result line
//! per criterion; the process fails if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=3,5` restricts the run to the listed criteria.

mod credit;
mod experiments;
mod ladder;
mod scheduler;

use std::time::{Duration, Instant};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn criteria() -> Vec<Criterion> {
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    vec![
        Criterion { id: 1, name: "scheduler statistics exactness", limit: Some(Duration::from_secs(10)), run: scheduler::exactness },
        Criterion { id: 2, name: "anti-chatter bound", limit: Some(Duration::from_secs(30)), run: scheduler::anti_chatter },
        Criterion { id: 3, name: "counterfactual oracle equivalence", limit: mins(1), run: credit::counterfactual_oracle },
        Criterion { id: 4, name: "gradients and monotonicity", limit: mins(5), run: credit::gradients_and_monotonicity },
        Criterion { id: 5, name: "lambda=0 reduction", limit: mins(1), run: credit::plain_reduction },
        Criterion { id: 6, name: "difficulty ladder audit", limit: mins(10), run: ladder::audit },
        Criterion { id: 7, name: "curriculum benefit", limit: mins(45), run: experiments::curriculum_benefit },
        Criterion { id: 8, name: "stabilization after promotions", limit: None, run: experiments::stabilization },
        Criterion { id: 9, name: "sweep plumbing", limit: mins(180), run: experiments::sweep_plumbing },
        Criterion { id: 10, name: "determinism", limit: None, run: experiments::determinism },
    ]
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for c in criteria() {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let in_time = c.limit.is_none_or(|l| took <= l);
        let pass = outcome.pass && in_time;
        let limit = c.limit.map_or_else(String::new, |l| format!(", limit {}s", l.as_secs()));
        println!(
            "criterion {:>2} {:<36} {}  ({}; {:.1}s{limit})",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            took.as_secs_f64()
        );
        if !pass {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
