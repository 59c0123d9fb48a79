//! Noise sweep and ablation runners.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::lab::{Lab, LabConfig};
use crate::error::{Error, Result};
use crate::grpo::Aggregation;
use crate::policy::PolicyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub seed: u64,
    pub fmr_micro: f64,
    pub fmr_macro: f64,
    /// Set when the run failed; the FMR columns are then NaN.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMean {
    pub condition: String,
    pub fmr_micro: f64,
    pub fmr_macro: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub seeds: Vec<u64>,
}

impl Report {
    /// Condition order follows first appearance; failed runs are left out.
    pub fn means(&self) -> Vec<ConditionMean> {
        let mut order: Vec<&str> = Vec::new();
        let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            if !order.contains(&r.condition.as_str()) {
                order.push(&r.condition);
            }
            if r.error.is_none() {
                let e = acc.entry(&r.condition).or_default();
                e.0 += r.fmr_micro;
                e.1 += r.fmr_macro;
                e.2 += 1;
            }
        }
        order
            .into_iter()
            .map(|c| {
                let (mi, ma, n) = acc.get(c).copied().unwrap_or_default();
                let d = n as f64;
                ConditionMean {
                    condition: c.to_string(),
                    fmr_micro: if n > 0 { mi / d } else { f64::NAN },
                    fmr_macro: if n > 0 { ma / d } else { f64::NAN },
                    runs: n,
                }
            })
            .collect()
    }

    pub fn mean_micro(&self, condition: &str) -> Option<f64> {
        self.means()
            .into_iter()
            .find(|m| m.condition == condition && m.runs > 0)
            .map(|m| m.fmr_micro)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "condition,seed,fmr_micro,fmr_macro")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.condition, r.seed, r.fmr_micro, r.fmr_macro)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Per-condition means plus the seed list and any failures.
    pub fn summary_json(&self) -> serde_json::Value {
        let failures: Vec<_> = self
            .rows
            .iter()
            .filter_map(|r| {
                r.error
                    .as_ref()
                    .map(|e| serde_json::json!({"condition": r.condition, "seed": r.seed, "error": e}))
            })
            .collect();
        serde_json::json!({
            "seeds": self.seeds,
            "means": self.means(),
            "failures": failures,
        })
    }
}

fn row(condition: &str, seed: u64, result: Result<super::FmrReport>) -> ReportRow {
    match result {
        Ok(r) => ReportRow {
            condition: condition.to_string(),
            seed,
            fmr_micro: r.micro,
            fmr_macro: r.macro_,
            error: None,
        },
        Err(e) => ReportRow {
            condition: condition.to_string(),
            seed,
            fmr_micro: f64::NAN,
            fmr_macro: f64::NAN,
            error: Some(e.to_string()),
        },
    }
}

pub fn noise_condition(ratio: f64) -> String {
    format!("noisy-{ratio:.2}")
}

pub fn refined_condition(ratio: f64) -> String {
    format!("refined-{ratio:.2}")
}

/// SFT on each noise level, plus SFT on Refined Data, for every lab.
pub fn noise_sweep(labs: &mut [Lab], ratios: &[f64]) -> Result<Report> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::key("ratios", format!("{r} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    for lab in labs.iter_mut() {
        for &ratio in ratios {
            let cond = noise_condition(ratio);
            let res = lab.noisy_targets(ratio).and_then(|t| {
                let p = lab.sft(&lab.reference, &lab.train, &t, false, &cond)?.0;
                lab.evaluate(&p)
            });
            rows.push(row(&cond, lab.seed, res));
        }
        let cond = refined_condition(lab.cfg.refine_ratio);
        let res = lab.refined_targets().map(|t| t.to_vec()).and_then(|t| {
            let p = lab.sft(&lab.reference, &lab.train, &t, false, &cond)?.0;
            lab.evaluate(&p)
        });
        rows.push(row(&cond, lab.seed, res));
    }
    // Rows are grouped by condition, seeds in order within each.
    let order: Vec<String> = rows.iter().take(ratios.len() + 1).map(|r| r.condition.clone()).collect();
    rows.sort_by_key(|r| order.iter().position(|c| *c == r.condition));
    Ok(Report {
        rows,
        seeds: labs.iter().map(|l| l.seed).collect(),
    })
}

pub fn run_noise_sweep(cfg: &LabConfig, ratios: &[f64], seeds: &[u64]) -> Result<Report> {
    let mut labs = seeds.iter().map(|&s| Lab::new(cfg, s)).collect::<Result<Vec<_>>>()?;
    noise_sweep(&mut labs, ratios)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// SFT on the small clean expert set.
    SftClean,
    /// SFT on Refined Data.
    SftRefined,
    VanillaRl,
    TokGrpo,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::SftClean => "sft-clean",
            Stage::SftRefined => "sft-refined",
            Stage::VanillaRl => "vanilla-rl",
            Stage::TokGrpo => "tok-grpo",
        }
    }

    fn parse(s: &str) -> Option<Stage> {
        [Stage::SftClean, Stage::SftRefined, Stage::VanillaRl, Stage::TokGrpo]
            .into_iter()
            .find(|st| st.name() == s)
    }

    fn is_sft(self) -> bool {
        matches!(self, Stage::SftClean | Stage::SftRefined)
    }
}

/// One ablation cell: up to two stages, optionally with prompt augmentation on
/// SFT stages. Written `baseline`, `tok-grpo`, `tok-grpo->sft+dyn`, …; a second
/// `sft` stage is SFT on the clean set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub stages: Vec<Stage>,
    pub dyn_prompt: bool,
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.stages.is_empty() {
            return write!(f, "baseline");
        }
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                write!(f, "->")?;
            }
            let name = if i > 0 && *s == Stage::SftClean { "sft" } else { s.name() };
            write!(f, "{name}")?;
        }
        if self.dyn_prompt {
            write!(f, "+dyn")?;
        }
        Ok(())
    }
}

impl FromStr for AblationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::key("ablation", format!("unsupported configuration `{s}`"));
        let (body, dyn_prompt) = match s.strip_suffix("+dyn") {
            Some(b) => (b, true),
            None => (s, false),
        };
        if body == "baseline" {
            return if dyn_prompt { Err(bad()) } else { Ok(AblationSpec { stages: vec![], dyn_prompt }) };
        }
        let parts: Vec<&str> = body.split("->").collect();
        if parts.len() > 2 {
            return Err(bad());
        }
        let first = Stage::parse(parts[0]).ok_or_else(bad)?;
        let mut stages = vec![first];
        if let Some(&second) = parts.get(1) {
            stages.push(match second {
                "sft" => Stage::SftClean,
                "vanilla-rl" => Stage::VanillaRl,
                "tok-grpo" => Stage::TokGrpo,
                _ => return Err(bad()),
            });
        }
        if dyn_prompt && !stages.iter().any(|s| s.is_sft()) {
            return Err(bad());
        }
        Ok(AblationSpec { stages, dyn_prompt })
    }
}

/// The grid reported by default: the baseline, each single stage, both orders
/// of RL and SFT, and the full pipeline.
pub fn default_ablation() -> Vec<AblationSpec> {
    [
        "baseline",
        "sft-clean",
        "sft-refined",
        "vanilla-rl",
        "tok-grpo",
        "vanilla-rl->sft",
        "sft-clean->tok-grpo",
        "tok-grpo->sft",
        "tok-grpo->sft+dyn",
    ]
    .iter()
    .map(|s| s.parse().expect("built-in names parse"))
    .collect()
}

fn run_spec(lab: &mut Lab, spec: &AblationSpec) -> Result<PolicyParams> {
    let mut params = lab.reference.clone();
    for (i, stage) in spec.stages.iter().enumerate() {
        let tag = format!("{spec}/{i}");
        params = match stage {
            Stage::SftClean => {
                let t = lab.expert.truth();
                lab.sft(&params, &lab.expert, &t, spec.dyn_prompt, &tag)?.0
            }
            Stage::SftRefined => {
                let t = lab.refined_targets()?.to_vec();
                lab.sft(&params, &lab.train, &t, spec.dyn_prompt, &tag)?.0
            }
            Stage::VanillaRl | Stage::TokGrpo => {
                let t = lab.refined_targets()?.to_vec();
                let agg = if *stage == Stage::TokGrpo {
                    Aggregation::Token
                } else {
                    Aggregation::Sequence
                };
                lab.rl(&params, &t, agg, &tag)?.0
            }
        };
    }
    Ok(params)
}

/// Every configuration from each lab's pretrained reference.
pub fn ablation(labs: &mut [Lab], specs: &[AblationSpec]) -> Report {
    let mut rows = Vec::with_capacity(specs.len() * labs.len());
    for spec in specs {
        let name = spec.to_string();
        for lab in labs.iter_mut() {
            let res = run_spec(lab, spec).and_then(|p| lab.evaluate(&p));
            rows.push(row(&name, lab.seed, res));
        }
    }
    Report {
        rows,
        seeds: labs.iter().map(|l| l.seed).collect(),
    }
}

pub fn run_ablation(cfg: &LabConfig, specs: &[AblationSpec], seeds: &[u64]) -> Result<Report> {
    let mut labs = seeds.iter().map(|&s| Lab::new(cfg, s)).collect::<Result<Vec<_>>>()?;
    Ok(ablation(&mut labs, specs))
}

/// Outcome of one trend check on a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        pass,
        detail,
    }
}

fn mean_or_missing(report: &Report, cond: &str) -> std::result::Result<f64, Check> {
    report
        .mean_micro(cond)
        .ok_or_else(|| check(cond, false, format!("no successful runs of `{cond}`")))
}

/// Noise sweep trends: mean FMR strictly decreases along increasing ratios and
/// the highest ratio trails the lowest by more than 0.15; Refined Data beats
/// its noisy source (`refine_ratio`) by at least 0.02 when that ratio was run.
pub fn sweep_checks(report: &Report, ratios: &[f64], refine_ratio: f64) -> Vec<Check> {
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::new();
    let means: std::result::Result<Vec<f64>, Check> =
        sorted.iter().map(|&r| mean_or_missing(report, &noise_condition(r))).collect();
    match means {
        Err(c) => out.push(c),
        Ok(m) if m.len() >= 2 => {
            let listing = sorted
                .iter()
                .zip(&m)
                .map(|(r, v)| format!("{r:.2}:{v:.3}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push(check(
                "noise-monotone",
                m.windows(2).all(|w| w[1] < w[0]),
                listing,
            ));
            let (first, last) = (m[0], m[m.len() - 1]);
            out.push(check(
                "noise-gap",
                last < first - 0.15,
                format!("{last:.3} vs {first:.3} - 0.15"),
            ));
        }
        Ok(_) => {}
    }
    if sorted.contains(&refine_ratio) {
        let pair = mean_or_missing(report, &refined_condition(refine_ratio))
            .and_then(|a| mean_or_missing(report, &noise_condition(refine_ratio)).map(|b| (a, b)));
        out.push(match pair {
            Ok((refined, noisy)) => check(
                "refinement-recovery",
                refined >= noisy + 0.02,
                format!("refined {refined:.3} vs noisy {noisy:.3} + 0.02"),
            ),
            Err(c) => c,
        });
    }
    out
}

/// Ablation trends: every post-trained cell beats the baseline by 0.10; RL
/// before SFT is at least as good as the reverse order; the full pipeline is
/// within 0.01 of the best cell. Checks whose cells were not run are skipped.
pub fn ablation_checks(report: &Report) -> Vec<Check> {
    let means: Vec<ConditionMean> = report.means();
    let get = |c: &str| means.iter().find(|m| m.condition == c && m.runs > 0).map(|m| m.fmr_micro);
    let mut out = Vec::new();
    if let Some(base) = get("baseline") {
        let weak: Vec<String> = means
            .iter()
            .filter(|m| m.condition != "baseline" && !(m.runs > 0 && m.fmr_micro >= base + 0.10))
            .map(|m| format!("{}:{:.3}", m.condition, m.fmr_micro))
            .collect();
        out.push(check(
            "beats-baseline",
            weak.is_empty(),
            if weak.is_empty() {
                format!("baseline {base:.3}")
            } else {
                format!("baseline {base:.3}; short: {}", weak.join(" "))
            },
        ));
    }
    if let (Some(rl_first), Some(sft_first)) = (get("tok-grpo->sft"), get("sft-clean->tok-grpo")) {
        out.push(check(
            "rl-before-sft",
            rl_first >= sft_first,
            format!("{rl_first:.3} vs {sft_first:.3}"),
        ));
    }
    if let Some(full) = get("tok-grpo->sft+dyn") {
        let best = means
            .iter()
            .filter(|m| m.runs > 0)
            .max_by(|a, b| a.fmr_micro.total_cmp(&b.fmr_micro))
            .expect("the full pipeline has runs");
        out.push(check(
            "full-pipeline-best",
            full >= best.fmr_micro - 0.01,
            format!("{full:.3} vs best {} {:.3}", best.condition, best.fmr_micro),
        ));
    }
    out
}
