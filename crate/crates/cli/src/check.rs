use std::time::Instant;

use anyhow::Result;
use clap::Args;

use stn_icnn::gradcheck::{op_names, run_suite, Suite};

use crate::Failure;

#[derive(Args, Debug, Clone)]
pub struct GradCheckArgs {
    /// all, tensor, stn or losses.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Harness self-test: perturb this op's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

pub fn run(a: &GradCheckArgs) -> Result<()> {
    let suite: Suite = a.suite.parse().map_err(|e: stn_icnn::Error| Failure::Usage(e.to_string()))?;
    if let Some(op) = &a.corrupt {
        if !op_names().contains(&op.as_str()) {
            return Err(Failure::Usage(format!("unknown op {op:?}")).into());
        }
    }
    let start = Instant::now();
    let outcomes = run_suite(suite, a.corrupt.as_deref())?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        println!("{:<8} {:<24} max_rel_error {:.3e} bound {:.0e} {verdict}", o.suite, o.op, o.max_rel_error, o.bound);
        if !o.passed() {
            failed.push(o.op);
        }
    }
    println!("checked {} ops in {:.2} s", outcomes.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient bound exceeded: {}", failed.join(", "))).into())
    }
}
