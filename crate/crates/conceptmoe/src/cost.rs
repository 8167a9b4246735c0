//! Cost tables: one row per (strategy, R), with the reallocation knob
//! solved against the baseline.

use conceptmoe_core::costmodel::{attn_map_and_kv, csv_header, csv_row, solve_reallocation, CostInputs, Strategy, Q};

use crate::error::Result;

/// `csv_header()` plus a trailing `status` column.
pub fn header() -> String {
    format!("{},status", csv_header())
}

/// Solves each strategy at `r` and reports its costs. A strategy that
/// cannot reach baseline FLOPs is reported at the base knobs with status
/// `infeasible`.
pub fn rows(base: &CostInputs, strategies: &[Strategy], ratios: &[Q]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for &s in strategies {
        for &r in ratios {
            let (x, status) = match s {
                Strategy::Baseline => (CostInputs { r, strategy: s, ..base.clone() }, "ok".to_string()),
                _ => match solve_reallocation(base, r, s) {
                    Ok(sol) => (sol.inputs, "ok".to_string()),
                    Err(conceptmoe_core::Error::Infeasible(msg)) => {
                        let x = CostInputs {
                            r,
                            strategy: s,
                            k_concept: base.k_active,
                            l_loop: 0,
                            scale_sq: Q::from_integer(1),
                            ..base.clone()
                        };
                        (x, format!("infeasible: {}", msg.replace(',', ";")))
                    }
                    Err(e) => return Err(e.into()),
                },
            };
            let rep = attn_map_and_kv(&x)?;
            out.push(format!("{},{status}", csv_row(&x, &rep)));
        }
    }
    Ok(out)
}
