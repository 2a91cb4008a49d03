//! Loss, stream, and rank ablation arms over a shared base config.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::{rse_report, EditSettings, Embedder, Padding, PerceptualFeatureBank, RseAggregate};
use crate::trainer::{run_training_from_manifest, TrainConfig};

/// A named change to the base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Override {
    None,
    NoCover,
    NoFocus,
    NoDoubleStream,
    NoSingleStream,
    Rank(usize),
}

impl Override {
    fn apply(self, c: &mut TrainConfig) {
        match self {
            Override::None => {}
            Override::NoCover => c.lambda_cover = 0.0,
            Override::NoFocus => c.lambda_focus = 0.0,
            Override::NoDoubleStream => c.sites.double_stream = false,
            Override::NoSingleStream => c.sites.single_stream = false,
            Override::Rank(r) => c.rank = r,
        }
    }

    /// Dotted config paths this override is meant to change.
    pub fn intended_fields(self) -> &'static [&'static str] {
        match self {
            Override::None => &[],
            Override::NoCover => &["lambda_cover"],
            Override::NoFocus => &["lambda_focus"],
            Override::NoDoubleStream => &["sites.double_stream"],
            Override::NoSingleStream => &["sites.single_stream"],
            Override::Rank(_) => &["rank"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: &'static str,
    pub label: &'static str,
    pub change: Override,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub base: TrainConfig,
    pub arms: Vec<Arm>,
}

impl AblationPlan {
    pub const ARM_NAMES: [&'static str; 7] =
        ["full", "no_cover", "no_focus", "no_double", "no_single", "rank_8", "rank_16"];

    pub fn standard(base: TrainConfig) -> Self {
        let arm = |name, label, change| Arm { name, label, change };
        let arms = vec![
            arm("full", "Full (Rank = 4)", Override::None),
            arm("no_cover", "w/o L_cover", Override::NoCover),
            arm("no_focus", "w/o L_focus", Override::NoFocus),
            arm("no_double", "w/o Double", Override::NoDoubleStream),
            arm("no_single", "w/o Single", Override::NoSingleStream),
            arm("rank_8", "Rank = 8", Override::Rank(8)),
            arm("rank_16", "Rank = 16", Override::Rank(16)),
        ];
        Self { base, arms }
    }

    /// Checks name uniqueness and that every arm resolves to a valid config.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.arms {
            if !seen.insert(a.name) {
                return Err(Error::Config(format!("duplicate ablation arm {:?}", a.name)));
            }
            self.resolve(a)?;
        }
        Ok(())
    }

    pub fn resolve(&self, arm: &Arm) -> Result<TrainConfig> {
        let mut c = self.base.clone();
        arm.change.apply(&mut c);
        c.validate()?;
        Ok(c)
    }

    /// Errors unless each arm's config differs from the base in exactly its intended fields.
    pub fn check_config_diffs(&self) -> Result<()> {
        for a in &self.arms {
            let diff = config_diff(&self.base, &self.resolve(a)?);
            let intended: Vec<String> = a.change.intended_fields().iter().map(|s| s.to_string()).collect();
            if diff != intended {
                return Err(Error::Config(format!(
                    "arm {} changes {:?}, intended {:?}",
                    a.name, diff, intended
                )));
            }
        }
        Ok(())
    }
}

/// Sorted dotted paths of leaf fields that differ between two configs.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let to = |c: &TrainConfig| serde_json::to_value(c).expect("serializable");
    let mut out = Vec::new();
    walk("", &to(a), &to(b), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub label: String,
    pub aggregate: RseAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Markdown table with `mean_{std}` cells.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Arm | RSM ↑ | LPIPS_bg ↓ | MSE_bg ↓ |\n|---|---|---|---|\n");
        for r in &self.rows {
            let a = &r.aggregate;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                r.label,
                a.rsm.display(),
                a.lpips_bg.display(),
                a.mse_bg.display()
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}

/// Evaluation inputs shared by every arm.
pub struct AblationEval<'a> {
    pub embedder: &'a dyn Embedder,
    pub bank: &'a PerceptualFeatureBank,
    pub padding: Padding,
    pub settings: EditSettings,
}

/// Trains and evaluates each arm under `out_dir/<arm>` (checkpoint, log,
/// resolved `config.toml`, report), then writes
/// `ablation.md` and `ablation.json`.
pub fn run_ablation(
    plan: &AblationPlan,
    manifest: &Path,
    out_dir: &Path,
    eval: &AblationEval,
    mut on_arm: impl FnMut(&Arm),
) -> Result<AblationTable> {
    plan.validate()?;
    plan.check_config_diffs()?;
    let mut rows = Vec::new();
    for arm in &plan.arms {
        on_arm(arm);
        let config = plan.resolve(arm)?;
        let dir = out_dir.join(arm.name);
        let outcome = run_training_from_manifest(manifest, &config, &dir)?;
        let report = rse_report(
            manifest,
            &outcome.checkpoint,
            eval.embedder,
            eval.bank,
            eval.padding,
            eval.settings,
        )?;
        report.save(&dir)?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        rows.push(AblationRow {
            arm: arm.name.to_string(),
            label: arm.label.to_string(),
            aggregate: report.aggregate,
        });
    }
    let table = AblationTable { rows };
    for (name, body) in [("ablation.md", table.to_markdown()), ("ablation.json", table.to_json())] {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::metrics::MeanStd;

    #[test]
    fn standard_plan_has_seven_unique_valid_arms() {
        let plan = AblationPlan::standard(TrainConfig::default());
        let names: Vec<_> = plan.arms.iter().map(|a| a.name).collect();
        assert_eq!(names, AblationPlan::ARM_NAMES);
        plan.validate().unwrap();
        plan.check_config_diffs().unwrap();
    }

    #[test]
    fn diffs_name_exact_fields() {
        let plan = AblationPlan::standard(TrainConfig::default());
        let expect: BTreeMap<&str, Vec<&str>> = [
            ("full", vec![]),
            ("no_cover", vec!["lambda_cover"]),
            ("no_focus", vec!["lambda_focus"]),
            ("no_double", vec!["sites.double_stream"]),
            ("no_single", vec!["sites.single_stream"]),
            ("rank_8", vec!["rank"]),
            ("rank_16", vec!["rank"]),
        ]
        .into();
        for a in &plan.arms {
            assert_eq!(config_diff(&plan.base, &plan.resolve(a).unwrap()), expect[a.name], "{}", a.name);
        }
    }

    #[test]
    fn diff_check_catches_a_stray_change() {
        let mut plan = AblationPlan::standard(TrainConfig::default());
        plan.arms[5].change = Override::Rank(4);
        assert!(plan.check_config_diffs().is_err());
    }

    #[test]
    fn duplicate_arm_rejected() {
        let mut plan = AblationPlan::standard(TrainConfig::default());
        plan.arms[1].name = "full";
        assert!(plan.validate().is_err());
    }

    #[test]
    fn markdown_rows_use_mean_std() {
        let m = MeanStd { mean: 0.5, std: 0.25 };
        let table = AblationTable {
            rows: vec![AblationRow {
                arm: "full".into(),
                label: "Full (Rank = 4)".into(),
                aggregate: RseAggregate { rsm: m, lpips_bg: m, mse_bg: m },
            }],
        };
        let md = table.to_markdown();
        assert!(md.contains("| Full (Rank = 4) | 0.5000_{0.2500} | 0.5000_{0.2500} | 0.5000_{0.2500} |"));
    }
}
