//! Token accounting and cost arithmetic.
//!
//! Money is kept in integer picodollars (1e-12 USD) so per-stage and total
//! costs are exact; rounding to cents only happens for display.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub mod stage {
    pub const PERSONA: &str = "persona";
    pub const WAI_INSTRUCTION: &str = "wai_instruction";
    pub const WAI_RESPONSE: &str = "wai_response";
    pub const WAR_INSTRUCTION: &str = "war_instruction";
    pub const WAR_ROLLOUT: &str = "war_rollout";
    pub const WAR_REFINE: &str = "war_refine";
    pub const JUDGE: &str = "judge";

    /// Synthesis stages in pipeline order.
    pub const SYNTHESIS: [&str; 6] = [
        PERSONA,
        WAI_INSTRUCTION,
        WAI_RESPONSE,
        WAR_INSTRUCTION,
        WAR_ROLLOUT,
        WAR_REFINE,
    ];

    pub fn display_name(stage: &str) -> &str {
        match stage {
            PERSONA => "Generate author's persona",
            WAI_INSTRUCTION => "Web as Instruction (instruction)",
            WAI_RESPONSE => "Web as Instruction (rollout response)",
            WAR_INSTRUCTION => "Web as Response (instruction)",
            WAR_ROLLOUT => "Web as Response (rollout response)",
            WAR_REFINE => "Web as Response (refined response)",
            JUDGE => "Quality/difficulty judge",
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamsError {
    #[error("temperature must be in [0, 2], got {0}")]
    Temperature(f64),
    #[error("top_p must be in (0, 1], got {0}")]
    TopP(f64),
    #[error("max_output_tokens must be positive")]
    MaxTokens,
    #[error("price must be non-negative and finite, got {0}")]
    Price(f64),
}

/// Sampling parameters for one backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

impl GenerationParams {
    pub fn new(
        model: impl Into<String>,
        temperature: f64,
        top_p: f64,
        max_output_tokens: u32,
    ) -> Result<Self, ParamsError> {
        let p = Self {
            model: model.into(),
            temperature,
            top_p,
            max_output_tokens,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ParamsError::Temperature(self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ParamsError::TopP(self.top_p));
        }
        if self.max_output_tokens == 0 {
            return Err(ParamsError::MaxTokens);
        }
        Ok(())
    }

    /// Open-weight generator settings (temperature 0.6, top-p 0.9).
    pub fn llama3_70b_instruct() -> Self {
        Self {
            model: "Llama3-70B-Instruct".into(),
            temperature: 0.6,
            top_p: 0.9,
            max_output_tokens: 1024,
        }
    }

    /// Proprietary generator settings (temperature 0.7, top-p 1.0).
    pub fn gpt_4o_mini() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            temperature: 0.7,
            top_p: 1.0,
            max_output_tokens: 1024,
        }
    }
}

/// Parameters per stage, with a shared default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub default: GenerationParams,
    #[serde(default)]
    pub overrides: BTreeMap<String, GenerationParams>,
}

impl GenerationPlan {
    pub fn uniform(params: GenerationParams) -> Self {
        Self {
            default: params,
            overrides: BTreeMap::new(),
        }
    }

    pub fn for_stage(&self, stage: &str) -> &GenerationParams {
        self.overrides.get(stage).unwrap_or(&self.default)
    }
}

/// One backend answer with its token usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub backend_id: String,
    pub latency_ms: u64,
}

/// USD price per one million tokens, stored in micro-dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Price(u64);

impl Price {
    pub const fn from_micros_per_million(micros: u64) -> Self {
        Self(micros)
    }

    pub fn from_dollars_per_million(dollars: f64) -> Result<Self, ParamsError> {
        if !(dollars.is_finite() && dollars >= 0.0) {
            return Err(ParamsError::Price(dollars));
        }
        Ok(Self(libm::round(dollars * 1e6) as u64))
    }

    pub fn micros_per_million(self) -> u64 {
        self.0
    }

    pub fn dollars_per_million(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Exact cost of `tokens` at this price.
    pub fn cost(self, tokens: u64) -> Cost {
        // tokens * micro$ / 1e6 tokens = tokens * 1e-12 $
        Cost(tokens as u128 * self.0 as u128)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prices {
    pub input: Price,
    pub output: Price,
}

impl Prices {
    /// Batch pricing for gpt-4o-mini: $0.075 / 1M input, $0.3 / 1M output.
    pub const GPT_4O_MINI_BATCH: Prices = Prices {
        input: Price::from_micros_per_million(75_000),
        output: Price::from_micros_per_million(300_000),
    };

    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> Cost {
        self.input.cost(input_tokens) + self.output.cost(output_tokens)
    }
}

/// Exact amount of money in picodollars.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cost(u128);

const PICOS_PER_CENT: u128 = 10_000_000_000;

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub fn picodollars(self) -> u128 {
        self.0
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 1e12
    }

    /// Whole cents, rounding halves up.
    pub fn cents_half_up(self) -> u128 {
        (self.0 + PICOS_PER_CENT / 2) / PICOS_PER_CENT
    }
}

impl core::ops::Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl core::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cents = self.cents_half_up();
        write!(f, "${}.{:02}", cents / 100, cents % 100)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl StageUsage {
    pub fn add(&mut self, other: StageUsage) {
        self.calls += other.calls;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

/// Per-stage call counts and token totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub rows: BTreeMap<String, StageUsage>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: &str, completion: &Completion) {
        let row = self.rows.entry(stage.to_string()).or_default();
        row.add(StageUsage {
            calls: 1,
            input_tokens: completion.input_tokens,
            output_tokens: completion.output_tokens,
        });
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for (stage, usage) in &other.rows {
            self.rows.entry(stage.clone()).or_default().add(*usage);
        }
    }

    pub fn usage(&self, stage: &str) -> StageUsage {
        self.rows.get(stage).copied().unwrap_or_default()
    }

    pub fn calls(&self, stage: &str) -> u64 {
        self.usage(stage).calls
    }

    pub fn total(&self) -> StageUsage {
        let mut t = StageUsage::default();
        for u in self.rows.values() {
            t.add(*u);
        }
        t
    }

    /// Rows ordered as the synthesis pipeline runs them, then any extra
    /// stages alphabetically.
    pub fn ordered_rows(&self) -> Vec<(String, StageUsage)> {
        let mut out: Vec<(String, StageUsage)> = stage::SYNTHESIS
            .iter()
            .filter_map(|s| self.rows.get(*s).map(|u| (s.to_string(), *u)))
            .collect();
        for (s, u) in &self.rows {
            if !stage::SYNTHESIS.contains(&s.as_str()) {
                out.push((s.clone(), *u));
            }
        }
        out
    }
}

/// A hypothetical workload row: `calls` × average token lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRow {
    pub stage: String,
    pub calls: u64,
    pub avg_input_tokens: u64,
    pub avg_output_tokens: u64,
}

impl PlanRow {
    pub fn new(stage: &str, calls: u64, avg_input_tokens: u64, avg_output_tokens: u64) -> Self {
        Self {
            stage: stage.into(),
            calls,
            avg_input_tokens,
            avg_output_tokens,
        }
    }

    pub fn usage(&self) -> StageUsage {
        StageUsage {
            calls: self.calls,
            input_tokens: self.calls * self.avg_input_tokens,
            output_tokens: self.calls * self.avg_output_tokens,
        }
    }
}

/// The six-row 100k-pair workload with gpt-4o-mini token averages.
pub fn reference_plan() -> Vec<PlanRow> {
    alloc::vec![
        PlanRow::new(stage::PERSONA, 100_000, 523, 32),
        PlanRow::new(stage::WAI_INSTRUCTION, 66_667, 711, 123),
        PlanRow::new(stage::WAI_RESPONSE, 66_667, 611, 392),
        PlanRow::new(stage::WAR_INSTRUCTION, 33_333, 645, 91),
        PlanRow::new(stage::WAR_ROLLOUT, 33_333, 91, 522),
        PlanRow::new(stage::WAR_REFINE, 33_333, 1155, 591),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLine {
    pub stage: String,
    pub label: String,
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub avg_input_tokens: f64,
    pub avg_output_tokens: f64,
    pub cost: Cost,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub input_price_per_1m: f64,
    pub output_price_per_1m: f64,
    pub lines: Vec<BudgetLine>,
    /// Sum of unrounded line costs.
    pub total: Cost,
    pub total_usd: f64,
}

impl BudgetReport {
    pub fn from_usage<'a>(
        rows: impl IntoIterator<Item = (&'a str, StageUsage)>,
        prices: Prices,
    ) -> Self {
        let lines: Vec<BudgetLine> = rows
            .into_iter()
            .map(|(stage_name, u)| {
                let cost = prices.cost(u.input_tokens, u.output_tokens);
                let avg = |t: u64| if u.calls == 0 { 0.0 } else { t as f64 / u.calls as f64 };
                BudgetLine {
                    stage: stage_name.to_string(),
                    label: stage::display_name(stage_name).to_string(),
                    calls: u.calls,
                    input_tokens: u.input_tokens,
                    output_tokens: u.output_tokens,
                    avg_input_tokens: avg(u.input_tokens),
                    avg_output_tokens: avg(u.output_tokens),
                    cost,
                    cost_usd: cost.dollars(),
                }
            })
            .collect();
        let total: Cost = lines.iter().map(|l| l.cost).sum();
        Self {
            input_price_per_1m: prices.input.dollars_per_million(),
            output_price_per_1m: prices.output.dollars_per_million(),
            lines,
            total,
            total_usd: total.dollars(),
        }
    }

    pub fn from_plan(plan: &[PlanRow], prices: Prices) -> Self {
        Self::from_usage(plan.iter().map(|r| (r.stage.as_str(), r.usage())), prices)
    }

    pub fn from_ledger(ledger: &CostLedger, prices: Prices) -> Self {
        let rows = ledger.ordered_rows();
        Self::from_usage(rows.iter().map(|(s, u)| (s.as_str(), *u)), prices)
    }
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<40} {:>12} {:>10} {:>10} {:>10}",
            "Stage", "# Samples", "Avg. In", "Avg. Out", "Cost ($)"
        )?;
        for l in &self.lines {
            let cents = l.cost.cents_half_up();
            writeln!(
                f,
                "{:<40} {:>12} {:>10} {:>10} {:>10}",
                l.label,
                group_thousands(l.calls),
                group_thousands(libm::round(l.avg_input_tokens) as u64),
                group_thousands(libm::round(l.avg_output_tokens) as u64),
                alloc::format!("{}.{:02}", cents / 100, cents % 100),
            )?;
        }
        let cents = self.total.cents_half_up();
        write!(
            f,
            "{:<40} {:>12} {:>10} {:>10} {:>10}",
            "Total",
            "-",
            "-",
            "-",
            alloc::format!("{}.{:02}", cents / 100, cents % 100)
        )
    }
}
