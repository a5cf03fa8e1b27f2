use dss_lab::verify::{run_suite, PropertyResult, VerifyOptions};

use crate::config::{split_override, ConfigError};
use crate::Failure;

/// Applies `key=value` overrides to the verification settings. A bare key
/// names a tolerance; `seed` and `orthogonality_lambda` set the harness
/// itself. A leading `verify.` or `tolerances.` is accepted.
pub fn apply_overrides(opts: &mut VerifyOptions, overrides: &[String]) -> Result<(), ConfigError> {
    for item in overrides {
        let (key, value) = split_override(item)?;
        let key = key.strip_prefix("verify.").unwrap_or(key);
        let bad = |what: &str| ConfigError(format!("--set {item}: {what}"));
        match key {
            "seed" => opts.seed = value.as_u64().ok_or_else(|| bad("expected a non-negative integer"))?,
            "orthogonality_lambda" => {
                let v = value.as_f64().ok_or_else(|| bad("expected a number"))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad("lambda must lie in [0, 1]"));
                }
                opts.orthogonality_lambda = v;
            }
            _ => {
                let name = key.strip_prefix("tolerances.").unwrap_or(key);
                let v = value.as_f64().ok_or_else(|| bad("expected a number"))?;
                opts.tolerances.set(name, v).map_err(|e| bad(&e.to_string()))?;
            }
        }
    }
    Ok(())
}

fn line(r: &PropertyResult) -> String {
    format!(
        "{} {:<34} cases={:<5} observed={:.3e} tolerance={:.3e}",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.cases,
        r.observed,
        r.tolerance
    )
}

pub fn verify(opts: &VerifyOptions) -> Result<(), Failure> {
    let results = run_suite(opts).map_err(|e| Failure::numeric(format!("verification harness failed: {e}")))?;
    for r in &results {
        println!("{}", line(r));
    }
    let failed: Vec<&PropertyResult> = results.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        println!("all {} properties hold", results.len());
        return Ok(());
    }
    let detail = failed
        .iter()
        .map(|r| format!("  {}: observed {:e} exceeds tolerance {:e}", r.name, r.observed, r.tolerance))
        .collect::<Vec<_>>()
        .join("\n");
    Err(Failure::property(format!("{} of {} properties failed\n{detail}", failed.len(), results.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_forms() {
        let mut o = VerifyOptions::default();
        apply_overrides(
            &mut o,
            &[
                "orthogonality=0".into(),
                "tolerances.svd=1e-3".into(),
                "verify.orthogonality_lambda=0".into(),
                "seed=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(o.tolerances.orthogonality, 0.0);
        assert_eq!(o.tolerances.svd, 1e-3);
        assert_eq!(o.orthogonality_lambda, 0.0);
        assert_eq!(o.seed, 7);
        assert!(apply_overrides(&mut o, &["no_such_tolerance=1".into()]).is_err());
        assert!(apply_overrides(&mut o, &["orthogonality=-1".into()]).is_err());
    }
}
