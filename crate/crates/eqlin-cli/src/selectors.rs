use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use eqlin::{effective_geometry, PredictorTable, Subspace, TolPolicy};
use nalgebra::DMatrix;

use crate::report::RunReport;

pub fn split_list(raw: &str) -> Vec<String> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

pub fn token_indices(table: &PredictorTable, raw: &str) -> Result<Vec<usize>> {
    split_list(raw)
        .iter()
        .map(|t| table.token_index(t).ok_or_else(|| anyhow!("unknown token {t:?}")))
        .collect()
}

/// Resolves a Γ selector: `G`, `N`, `M`, `full`, `tokens:a,b,c` (span of g(b)−g(a), g(c)−g(a)) or `@rows.json`.
pub fn gamma_subspace(table: &PredictorTable, raw: &str, policy: TolPolicy, report: &mut RunReport) -> Result<Subspace> {
    let geo = effective_geometry(table, policy);
    match raw {
        "G" => Ok(geo.g),
        "N" => Ok(geo.n),
        "M" => Ok(geo.m),
        "full" => Ok(Subspace::full(table.dim())),
        _ => {
            if let Some(list) = raw.strip_prefix("tokens:") {
                let ids = token_indices(table, list)?;
                let Some((&first, rest)) = ids.split_first() else {
                    bail!("Γ token list is empty");
                };
                let u = table.unembeddings();
                let rows = DMatrix::from_fn(rest.len(), table.dim(), |i, j| u[(rest[i], j)] - u[(first, j)]);
                Ok(Subspace::span_of_rows(&rows, policy))
            } else if let Some(path) = raw.strip_prefix('@') {
                let bytes = report.read_input(Path::new(path))?;
                let rows: Vec<Vec<f64>> = serde_json::from_slice(&bytes).with_context(|| format!("{path}: expected a JSON array of rows"))?;
                if rows.iter().any(|r| r.len() != table.dim()) {
                    bail!("{path}: every Γ row must have length {}", table.dim());
                }
                let m = DMatrix::from_fn(rows.len(), table.dim(), |i, j| rows[i][j]);
                Ok(Subspace::span_of_rows(&m, policy))
            } else {
                bail!("unknown Γ selector {raw:?} (use G, N, M, full, tokens:a,b,... or @file.json)")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_ignore_blanks() {
        assert_eq!(split_list(" a, b,,c "), vec!["a", "b", "c"]);
    }

    #[test]
    fn token_selector_spans_differences() {
        let t = eqlin::synth::rank_one_model();
        let mut r = RunReport::new("t");
        let s = gamma_subspace(&t, "tokens:a,b,c", TolPolicy::default(), &mut r).unwrap();
        assert_eq!(s.dim(), 2);
        assert!(gamma_subspace(&t, "tokens:a,z", TolPolicy::default(), &mut r).is_err());
        assert!(gamma_subspace(&t, "bogus", TolPolicy::default(), &mut r).is_err());
    }
}
