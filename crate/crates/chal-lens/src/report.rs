//! Effect tables: Wald tests, odds ratios, significance stars and the
//! classification buckets, plus the serialized fit record.
//!
//! Coefficients of the logistic mixed model are log odds ratios. Odds
//! ratios are not symmetric around 1, so confidence intervals are formed
//! on the log scale and exponentiated. Stars follow the usual thresholds
//! (p <= 0.05 / 0.01 / 0.001); buckets partition significant effects by
//! odds-ratio magnitude, with `x` marking characteristics that could not
//! be assessed because their column was structurally constant.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::glmm::GlmmFit;
use crate::lmm::{LmmFit, VarianceComponent};
use crate::stats::two_sided_p;

/// Half-width multiplier of the 95% confidence interval.
pub const CI_95_Z: f64 = 1.96;

/// Significance stars for a two-sided p-value.
pub fn stars_for(p: f64) -> &'static str {
    if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    }
}

/// Wald z and two-sided p for one coefficient.
pub fn wald_test(beta: f64, se: f64) -> (f64, f64) {
    let z = beta / se;
    (z, two_sided_p(z))
}

/// Bucket symbol for an effect with the given odds ratio and p-value.
///
/// Significant positive effects: (1, 1.25] -> `+`, (1.25, 1.5] -> `++`,
/// above 1.5 -> `+++`; significant negative: [0.75, 1) -> `-`,
/// [0.5, 0.75) -> `--`, below 0.5 -> `---`. Everything non-significant is
/// blank.
pub fn bucket_for(or: f64, p: f64, alpha: f64) -> &'static str {
    if !(p <= alpha) || or == 1.0 {
        return "";
    }
    if or > 1.0 {
        if or <= 1.25 {
            "+"
        } else if or <= 1.5 {
            "++"
        } else {
            "+++"
        }
    } else if or >= 0.75 {
        "-"
    } else if or >= 0.5 {
        "--"
    } else {
        "---"
    }
}

/// Statistics of one assessed characteristic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectStats {
    pub beta: f64,
    pub se: f64,
    pub or: f64,
    pub log_ci: (f64, f64),
    pub or_ci: (f64, f64),
    pub z: f64,
    pub p_value: f64,
    pub stars: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub caveat: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectRow {
    pub name: String,
    /// `None` for characteristics whose column was dropped (bucket `x`).
    pub stats: Option<EffectStats>,
    pub bucket: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectTable {
    pub rows: Vec<EffectRow>,
    /// Significance level used for the buckets.
    pub alpha: f64,
}

impl EffectTable {
    pub fn assessed_rows(&self) -> impl Iterator<Item = (&EffectRow, &EffectStats)> {
        self.rows
            .iter()
            .filter_map(|r| r.stats.as_ref().map(|s| (r, s)))
    }
}

/// Builds the effect table over `column_order` (the pre-drop column
/// list). Columns absent from `beta_names` are marked unassessed (`x`).
pub fn effect_table(
    column_order: &[String],
    beta_names: &[String],
    beta: &[f64],
    beta_se: &[f64],
    caveats: &[Option<String>],
    alpha: f64,
) -> EffectTable {
    debug_assert_eq!(beta_names.len(), beta.len());
    debug_assert_eq!(beta_names.len(), beta_se.len());
    let rows = column_order
        .iter()
        .map(|name| match beta_names.iter().position(|n| n == name) {
            Some(j) => {
                let (z, p) = wald_test(beta[j], beta_se[j]);
                let or = beta[j].exp();
                let log_ci = (beta[j] - CI_95_Z * beta_se[j], beta[j] + CI_95_Z * beta_se[j]);
                EffectRow {
                    name: name.clone(),
                    bucket: bucket_for(or, p, alpha).to_string(),
                    stats: Some(EffectStats {
                        beta: beta[j],
                        se: beta_se[j],
                        or,
                        log_ci,
                        or_ci: (log_ci.0.exp(), log_ci.1.exp()),
                        z,
                        p_value: p,
                        stars: stars_for(p).to_string(),
                        caveat: caveats.get(j).cloned().flatten(),
                    }),
                }
            }
            None => EffectRow {
                name: name.clone(),
                stats: None,
                bucket: "x".to_string(),
            },
        })
        .collect();
    EffectTable { rows, alpha }
}

/// 17-significant-digit float formatting for machine-readable files.
pub fn format_g17(v: f64) -> String {
    format!("{v:.16e}")
}

struct SigFig17;

impl serde_json::ser::Formatter for SigFig17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes to JSON with every float carrying 17 significant digits,
/// so numeric output is reproducible bit for bit.
pub fn to_json_17<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigFig17);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("JSON output is UTF-8"))
}

/// Writes the effect table as CSV (one row per characteristic).
pub fn write_effects_csv<W: Write>(table: &EffectTable, mut writer: W) -> io::Result<()> {
    writeln!(
        writer,
        "characteristic,assessed,log_or,se,or,log_ci_low,log_ci_high,or_ci_low,or_ci_high,z,p_value,stars,bucket,caveat"
    )?;
    for row in &table.rows {
        match &row.stats {
            Some(s) => writeln!(
                writer,
                "{},true,{},{},{},{},{},{},{},{},{},{},{},{}",
                row.name,
                format_g17(s.beta),
                format_g17(s.se),
                format_g17(s.or),
                format_g17(s.log_ci.0),
                format_g17(s.log_ci.1),
                format_g17(s.or_ci.0),
                format_g17(s.or_ci.1),
                format_g17(s.z),
                format_g17(s.p_value),
                s.stars,
                row.bucket,
                s.caveat.as_deref().unwrap_or("")
            )?,
            None => writeln!(writer, "{},false,,,,,,,,,,,{},", row.name, row.bucket)?,
        }
    }
    Ok(())
}

/// Plain-text rendering of an effect table, 3 decimals.
pub fn effect_summary_text(table: &EffectTable) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<26} {:>8} {:>7} {:>7} {:>9} {:>5} {:>6}\n",
        "characteristic", "log_or", "se", "or", "p", "stars", "bucket"
    ));
    for row in &table.rows {
        match &row.stats {
            Some(s) => out.push_str(&format!(
                "{:<26} {:>8.3} {:>7.3} {:>7.3} {:>9.3e} {:>5} {:>6}\n",
                row.name, s.beta, s.se, s.or, s.p_value, s.stars, row.bucket
            )),
            None => out.push_str(&format!(
                "{:<26} {:>8} {:>7} {:>7} {:>9} {:>5} {:>6}\n",
                row.name, "-", "-", "-", "-", "", row.bucket
            )),
        }
    }
    out
}

/// One coefficient in a serialized fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefRecord {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub caveat: Option<String>,
}

/// JSON-serializable fit summary, shared between the linear and the
/// logistic mixed model (the latter adds link metadata).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub model: String,
    pub link: Option<String>,
    pub perspective: Option<String>,
    pub subset: Option<String>,
    pub transform: Option<String>,
    /// Boundary values clamped during the outcome transform.
    pub clamped_values: Option<u64>,
    pub alpha: CoefRecord,
    pub coefficients: Vec<CoefRecord>,
    /// Full column order before constant columns were dropped.
    pub column_order: Vec<String>,
    pub dropped_columns: Vec<String>,
    pub variance_components: Vec<VarianceComponent>,
    pub sigma2_eps: Option<f64>,
    /// -2 log-likelihood criterion (REML or Laplace), when finite.
    pub criterion: Option<f64>,
    pub converged: bool,
    pub n_iter_outer: usize,
    pub n_iter_inner_total: Option<usize>,
    pub n_obs: usize,
    pub excluded_rows: usize,
    pub group_sizes: Vec<(String, usize)>,
    pub warnings: Vec<String>,
    pub seed: Option<u64>,
}

impl FitRecord {
    pub fn from_lmm(fit: &LmmFit) -> FitRecord {
        FitRecord {
            model: "lmm".to_string(),
            link: None,
            perspective: None,
            subset: None,
            transform: None,
            clamped_values: None,
            alpha: CoefRecord {
                name: "intercept".to_string(),
                estimate: fit.alpha,
                se: fit.alpha_se,
                caveat: None,
            },
            coefficients: coef_records(&fit.beta_names, &fit.beta, &fit.beta_se, &fit.warnings),
            column_order: fit.beta_names.clone(),
            dropped_columns: Vec::new(),
            variance_components: fit.variance_components.clone(),
            sigma2_eps: Some(fit.sigma2_eps),
            criterion: fit.criterion.is_finite().then_some(fit.criterion),
            converged: fit.converged,
            n_iter_outer: fit.n_iter,
            n_iter_inner_total: None,
            n_obs: fit.n_obs,
            excluded_rows: 0,
            group_sizes: fit
                .conditional_modes
                .iter()
                .map(|b| (b.factor.clone(), b.modes.len()))
                .collect(),
            warnings: fit.warnings.clone(),
            seed: None,
        }
    }

    pub fn from_glmm(fit: &GlmmFit) -> FitRecord {
        FitRecord {
            model: "glmm".to_string(),
            link: Some("logit".to_string()),
            perspective: None,
            subset: None,
            transform: None,
            clamped_values: None,
            alpha: CoefRecord {
                name: "intercept".to_string(),
                estimate: fit.alpha,
                se: fit.alpha_se,
                caveat: None,
            },
            coefficients: coef_records(&fit.beta_names, &fit.beta, &fit.beta_se, &fit.warnings),
            column_order: fit.beta_names.clone(),
            dropped_columns: Vec::new(),
            variance_components: fit.variance_components.clone(),
            sigma2_eps: None,
            criterion: fit
                .laplace_deviance
                .is_finite()
                .then_some(fit.laplace_deviance),
            converged: fit.converged,
            n_iter_outer: fit.n_iter_outer,
            n_iter_inner_total: Some(fit.n_iter_inner_total),
            n_obs: fit.n_obs,
            excluded_rows: 0,
            group_sizes: fit
                .conditional_modes
                .iter()
                .map(|b| (b.factor.clone(), b.modes.len()))
                .collect(),
            warnings: fit.warnings.clone(),
            seed: None,
        }
    }

    /// The effect table implied by this record (dropped columns as `x`).
    pub fn effect_table(&self, alpha: f64) -> EffectTable {
        let mut order = self.column_order.clone();
        for d in &self.dropped_columns {
            if !order.contains(d) {
                order.push(d.clone());
            }
        }
        let names: Vec<String> = self.coefficients.iter().map(|c| c.name.clone()).collect();
        let beta: Vec<f64> = self.coefficients.iter().map(|c| c.estimate).collect();
        let se: Vec<f64> = self.coefficients.iter().map(|c| c.se).collect();
        let caveats: Vec<Option<String>> =
            self.coefficients.iter().map(|c| c.caveat.clone()).collect();
        effect_table(&order, &names, &beta, &se, &caveats, alpha)
    }
}

// Coefficient-level caveats derived from fit warnings: separation names a
// column; variance boundaries blanket every coefficient.
fn coef_records(
    names: &[String],
    beta: &[f64],
    se: &[f64],
    warnings: &[String],
) -> Vec<CoefRecord> {
    let boundary = warnings.iter().any(|w| w.contains("zero boundary"));
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut caveat = None;
            for w in warnings {
                if w.contains("quasi-separation") && w.contains(&format!("`{name}`")) {
                    caveat = Some("quasi-separation".to_string());
                }
            }
            if caveat.is_none() && boundary {
                caveat = Some("variance component at zero boundary".to_string());
            }
            CoefRecord {
                name: name.clone(),
                estimate: beta[j],
                se: se[j],
                caveat,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wald_null_coefficient() {
        let (z, p) = wald_test(0.0, 0.1);
        assert_eq!(z, 0.0);
        assert_eq!(p, 1.0);
        assert_eq!(stars_for(p), "");
    }

    #[test]
    fn wald_reference_values() {
        // frozen against a high-precision normal CDF
        let (z, p) = wald_test(0.405465, 0.1);
        assert_relative_eq!(z, 4.05465, epsilon = 1e-10);
        assert_relative_eq!(p, 5.020942334588163e-5, max_relative = 1e-10);
        assert_eq!(stars_for(p), "***");

        let (z2, p2) = wald_test(0.2, 0.12);
        assert_relative_eq!(z2, 1.6666666666666667, epsilon = 1e-12);
        assert_relative_eq!(p2, 0.09558070454562939, max_relative = 1e-10);
        assert_eq!(stars_for(p2), "");
    }

    #[test]
    fn star_thresholds() {
        assert_eq!(stars_for(0.05), "*");
        assert_eq!(stars_for(0.010000001), "*");
        assert_eq!(stars_for(0.01), "**");
        assert_eq!(stars_for(0.001), "***");
        assert_eq!(stars_for(0.051), "");
    }

    #[test]
    fn odds_ratio_symmetry() {
        // OR 3:2 vs 2:3 are log-symmetric around 0
        let up = (1.5f64).ln();
        let down = (2.0f64 / 3.0).ln();
        assert_relative_eq!(up, -down, epsilon = 1e-12);
        assert_relative_eq!(up, 0.405465, epsilon = 1e-6);
    }

    #[test]
    fn ci_reference_case() {
        let table = effect_table(
            &["c".to_string()],
            &["c".to_string()],
            &[-0.7],
            &[0.2],
            &[None],
            0.05,
        );
        let s = table.rows[0].stats.as_ref().unwrap();
        assert_relative_eq!(s.or, 0.4965853037914095, max_relative = 1e-12);
        assert_relative_eq!(s.or_ci.0, 0.3355447327042427, max_relative = 1e-12);
        assert_relative_eq!(s.or_ci.1, 0.7349153180090687, max_relative = 1e-12);
    }

    #[test]
    fn bucket_partition() {
        let a = 0.05;
        assert_eq!(bucket_for(1.6, 0.01, a), "+++");
        assert_eq!(bucket_for(1.5, 0.01, a), "++");
        assert_eq!(bucket_for(1.3, 0.01, a), "++");
        assert_eq!(bucket_for(1.25, 0.01, a), "+");
        assert_eq!(bucket_for(1.1, 0.01, a), "+");
        assert_eq!(bucket_for(0.6, 0.001, a), "--");
        assert_eq!(bucket_for(0.8, 0.04, a), "-");
        assert_eq!(bucket_for(0.75, 0.04, a), "-");
        assert_eq!(bucket_for(0.49, 0.04, a), "---");
        assert_eq!(bucket_for(0.5, 0.04, a), "--");
        assert_eq!(bucket_for(1.4, 0.3, a), "");
        assert_eq!(bucket_for(1.0, 0.01, a), "");
    }

    #[test]
    fn bucket_mirror_direction() {
        // a significant OR and its reciprocal land on opposite sides;
        // the band widths themselves are fixed asymmetrically
        // (1.25/1.5 up, 0.75/0.5 down), so only direction mirrors
        for or in [1.05, 1.1, 1.3, 1.5, 2.0, 4.0] {
            let pos = bucket_for(or, 0.01, 0.05);
            let neg = bucket_for(1.0 / or, 0.01, 0.05);
            assert!(pos.starts_with('+'), "{or}: {pos}");
            assert!(neg.starts_with('-'), "{or}: {neg}");
        }
        // the extreme buckets do mirror exactly
        assert_eq!(bucket_for(2.0, 0.01, 0.05), "+++");
        assert_eq!(bucket_for(0.5, 0.01, 0.05), "--");
        assert_eq!(bucket_for(0.49, 0.01, 0.05), "---");
    }

    #[test]
    fn dropped_columns_marked_x() {
        let order = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let table = effect_table(
            &order,
            &["a".to_string(), "c".to_string()],
            &[0.1, -0.2],
            &[0.05, 0.05],
            &[None, None],
            0.05,
        );
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.rows[1].name, "b");
        assert_eq!(table.rows[1].bucket, "x");
        assert!(table.rows[1].stats.is_none());
        assert!(table.rows[0].stats.is_some());
    }

    #[test]
    fn json17_round_trips_floats() {
        #[derive(Serialize, Deserialize)]
        struct S {
            v: f64,
        }
        let orig = S { v: 0.1 + 0.2 };
        let json = to_json_17(&orig).unwrap();
        assert!(json.contains("e"), "{json}");
        let back: S = serde_json::from_str(&json).unwrap();
        assert_eq!(back.v.to_bits(), orig.v.to_bits());
    }

    #[test]
    fn effects_csv_shape() {
        let order = vec!["a".to_string(), "b".to_string()];
        let table = effect_table(&order, &["a".to_string()], &[0.5], &[0.1], &[None], 0.05);
        let mut buf = Vec::new();
        write_effects_csv(&table, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("a,true,"));
        assert!(lines[2].starts_with("b,false,"));
        assert!(lines[2].ends_with(",x,"));
    }
}
