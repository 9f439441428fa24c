//! Checkpoint evaluation and the variant grid.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{DasError, Result};
use crate::eval::{codebook_stats, retrieval_eval, text_table, CodebookReport, RetrievalOptions, RetrievalReport};
use crate::features::{ctr_probe, featurize, split_examples, FeatureToggles, ProbeConfig, ProbeResult, SidTables};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{fit, AlignTarget, DasModel, TrainConfig};
use crate::types::Side;

/// Training variants compared by the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// β = 0: quantizers see no CF signal.
    NoAlign,
    /// γ = 0, aligned to the fused `c_u` / `c_i`.
    Biased,
    /// Aligned to `c_u^int` / `c_i^pro` with every view on.
    Debiased,
    MinusDualU2i,
    MinusDualView,
    MinusCooccur,
    Full,
    /// Only the dual user-to-item view (a step of the stacking curve).
    U2iOnly,
}

impl Variant {
    /// The seven variants of the `ablate` grid, in report order.
    pub const GRID: [Variant; 7] = [
        Variant::NoAlign,
        Variant::Biased,
        Variant::Debiased,
        Variant::MinusDualU2i,
        Variant::MinusDualView,
        Variant::MinusCooccur,
        Variant::Full,
    ];

    /// Alignment views stacked one at a time.
    pub const STACK: [Variant; 4] = [Variant::NoAlign, Variant::U2iOnly, Variant::MinusCooccur, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoAlign => "no-align",
            Variant::Biased => "biased",
            Variant::Debiased => "debiased",
            Variant::MinusDualU2i => "minus-dual-u2i",
            Variant::MinusDualView => "minus-dual-view",
            Variant::MinusCooccur => "minus-cooccur",
            Variant::Full => "full",
            Variant::U2iOnly => "u2i-only",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let a = &mut c.ablation;
        a.dual_u2i = true;
        a.dual_view = true;
        a.cooccur = true;
        a.align_target = AlignTarget::Debiased;
        match self {
            Variant::NoAlign => {
                c.beta = 0.0;
                a.dual_u2i = false;
                a.dual_view = false;
                a.cooccur = false;
            }
            Variant::Biased => {
                c.gamma = 0.0;
                a.align_target = AlignTarget::Biased;
            }
            Variant::Debiased | Variant::Full => {}
            Variant::MinusDualU2i => a.dual_u2i = false,
            Variant::MinusDualView => a.dual_view = false,
            Variant::MinusCooccur => a.cooccur = false,
            Variant::U2iOnly => {
                a.dual_view = false;
                a.cooccur = false;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DasError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::GRID
            .into_iter()
            .chain([Variant::U2iOnly])
            .find(|v| v.name() == s)
            .ok_or_else(|| DasError::Invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub k: usize,
    /// Sampled negatives per positive in retrieval AUC; 0 uses the full pool.
    pub retrieval_negatives: usize,
    pub history_len: usize,
    pub probe: ProbeConfig,
    pub probe_features: FeatureToggles,
    /// Seed of the retrieval negative sampler; the model's seed when unset.
    pub seed: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 100,
            retrieval_negatives: 99,
            history_len: 20,
            probe: ProbeConfig::default(),
            probe_features: FeatureToggles::prefix(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub user_cf_to_ad_sid: RetrievalReport,
    pub user_sid_to_ad_cf: RetrievalReport,
    pub user_codebooks: Vec<CodebookReport>,
    pub ad_codebooks: Vec<CodebookReport>,
    pub probe_baseline: ProbeResult,
    pub probe_sid: ProbeResult,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let f = |x: f64| format!("{x:.4}");
        let mut out = text_table(
            &["retrieval", "auc", "recall@k", "k", "queries"],
            &[("<c_u^int, z_i>", &self.user_cf_to_ad_sid), ("<z_u, c_i^pro>", &self.user_sid_to_ad_cf)]
                .iter()
                .map(|(n, r)| vec![n.to_string(), f(r.auc), f(r.recall_at_k), r.k.to_string(), r.queries.to_string()])
                .collect::<Vec<_>>(),
        );
        out.push('\n');
        let rows: Vec<Vec<String>> = [("user", &self.user_codebooks), ("ad", &self.ad_codebooks)]
            .iter()
            .flat_map(|(side, reports)| {
                reports.iter().map(move |r| {
                    vec![
                        format!("{side} l{}", r.level),
                        f(r.usage_rate),
                        format!("{:.2}", r.perplexity),
                        r.group_mass.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" "),
                    ]
                })
            })
            .collect();
        out.push_str(&text_table(&["codebook", "usage", "perplexity", "group mass"], &rows));
        out.push('\n');
        out.push_str(&text_table(
            &["probe", "auc"],
            &[vec!["ids only".into(), f(self.probe_baseline.auc)], vec!["ids + sid".into(), f(self.probe_sid.auc)]],
        ));
        out
    }
}

/// Clicked `(user, ad)` pairs.
pub type Pairs = Vec<(usize, usize)>;

/// Held-out relevance: clicks after the training cut; the clicks before it
/// are excluded from ranking.
pub fn click_pairs(data: &Dataset, train_fraction: f64) -> (Pairs, Pairs) {
    let split = data.chronological_split(train_fraction);
    (data.clicked_pairs(&split.train), data.clicked_pairs(&split.test))
}

pub fn retrieval_reports(
    model: &DasModel,
    data: &Dataset,
    sids: &SidTables,
    opts: &EvalOptions,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let (train, test) = click_pairs(data, model.config.train_fraction);
    let ropts = RetrievalOptions {
        k: opts.k,
        negatives: (opts.retrieval_negatives > 0).then_some(opts.retrieval_negatives),
        seed: opts.seed.unwrap_or(model.config.seed),
    };
    let z_u = das_numerics::Tensor::from_rows(&sids.user_dense)?;
    let z_i = das_numerics::Tensor::from_rows(&sids.ad_dense)?;
    let c_u = model.unbiased_cf(Side::User)?;
    let c_i = model.unbiased_cf(Side::Ad)?;
    Ok((retrieval_eval(&c_u, &z_i, &test, &train, ropts)?, retrieval_eval(&z_u, &c_i, &test, &train, ropts)?))
}

pub fn codebook_reports(model: &DasModel, sids: &SidTables) -> Result<(Vec<CodebookReport>, Vec<CodebookReport>)> {
    let (levels, n) = (model.config.levels, model.config.codebook_size);
    let per = |s| (1..=levels).map(|l| codebook_stats(s, l, n)).collect::<Result<Vec<_>>>();
    Ok((per(&sids.user_sids)?, per(&sids.ad_sids)?))
}

pub fn probe_auc(
    data: &Dataset,
    sids: Option<&SidTables>,
    toggles: FeatureToggles,
    train_fraction: f64,
    opts: &EvalOptions,
) -> Result<ProbeResult> {
    let examples = featurize(data, sids, toggles, opts.history_len)?;
    let (train, test) = split_examples(&examples, train_fraction);
    ctr_probe(train, test, opts.probe)
}

pub fn evaluate(model: &DasModel, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let sids = SidTables::infer(model, data)?;
    let (a, b) = retrieval_reports(model, data, &sids, opts)?;
    let (user_codebooks, ad_codebooks) = codebook_reports(model, &sids)?;
    let frac = model.config.train_fraction;
    Ok(EvalReport {
        user_cf_to_ad_sid: a,
        user_sid_to_ad_cf: b,
        user_codebooks,
        ad_codebooks,
        probe_baseline: probe_auc(data, None, FeatureToggles::ids_only(), frac, opts)?,
        probe_sid: probe_auc(data, Some(&sids), opts.probe_features, frac, opts)?,
    })
}

/// A grid definition: data, training and evaluation settings, seeds and the
/// variants to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            seeds: vec![0, 1, 2],
            variants: Variant::GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub user_cf_to_ad_sid: RetrievalReport,
    pub user_sid_to_ad_cf: RetrievalReport,
    pub user_codebook_l1: CodebookReport,
    pub ad_codebook_l1: CodebookReport,
    pub probe_auc: f64,
    pub final_loss: Option<f64>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub retrieval_auc_cf_sid: f64,
    pub retrieval_auc_sid_cf: f64,
    pub recall_cf_sid: f64,
    pub recall_sid_cf: f64,
    pub ad_perplexity_l1: f64,
    pub ad_usage_l1: f64,
    pub user_perplexity_l1: f64,
    pub user_usage_l1: f64,
    pub probe_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub runs: Vec<VariantRun>,
    /// Ids-only probe AUC per seed, in seed order.
    pub baseline_probe_auc: Vec<f64>,
    pub baseline_probe_median: f64,
    /// Medians over seeds, one row per variant in grid order.
    pub summary: Vec<VariantSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl GridReport {
    pub fn summary_of(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }

    pub fn to_text(&self) -> String {
        let f = |x: f64| format!("{x:.4}");
        let mut rows: Vec<Vec<String>> = self
            .summary
            .iter()
            .map(|s| {
                vec![
                    s.variant.to_string(),
                    f(s.retrieval_auc_cf_sid),
                    f(s.retrieval_auc_sid_cf),
                    f(s.recall_cf_sid),
                    f(s.recall_sid_cf),
                    format!("{:.2}", s.ad_perplexity_l1),
                    f(s.ad_usage_l1),
                    f(s.probe_auc),
                ]
            })
            .collect();
        rows.push(vec![
            "no-sid baseline".into(),
            "-".into(),
            "-".into(),
            "-".into(),
            "-".into(),
            "-".into(),
            "-".into(),
            f(self.baseline_probe_median),
        ]);
        text_table(
            &[
                "variant",
                "auc<c_u,z_i>",
                "auc<z_u,c_i>",
                "r@k<c_u,z_i>",
                "r@k<z_u,c_i>",
                "ad ppl l1",
                "ad use l1",
                "probe auc",
            ],
            &rows,
        )
    }
}

/// Trains and evaluates every (seed, variant) pair. Variants that resolve to
/// the same training config (debiased and full) are trained once.
pub fn run_grid(grid: &GridConfig, mut progress: impl FnMut(&str)) -> Result<GridReport> {
    if grid.seeds.is_empty() || grid.variants.is_empty() {
        return Err(DasError::Invalid("grid needs at least one seed and one variant".into()));
    }
    let mut runs = Vec::new();
    let mut baseline = Vec::new();
    for &seed in &grid.seeds {
        let synth = SynthConfig { seed, ..grid.synth.clone() };
        let world = generate(&synth)?;
        let data = world.dataset()?;
        let mut eval = grid.eval;
        eval.probe.seed = seed;
        let frac = grid.train.train_fraction;
        let b = probe_auc(&data, None, FeatureToggles::ids_only(), frac, &eval)?;
        progress(&format!("seed {seed}: ids-only probe auc {:.4}", b.auc));
        baseline.push(b.auc);
        let mut done: Vec<(TrainConfig, VariantRun)> = Vec::new();
        for &variant in &grid.variants {
            let config = TrainConfig { seed, ..variant.apply(&grid.train) };
            if let Some((_, prior)) = done.iter().find(|(c, _)| *c == config) {
                runs.push(VariantRun { variant, ..prior.clone() });
                continue;
            }
            let start = Instant::now();
            let out = fit(&data, &config)?;
            let secs = start.elapsed().as_secs_f64();
            let model = out.model;
            let sids = SidTables::infer(&model, &data)?;
            let (a, bb) = retrieval_reports(&model, &data, &sids, &eval)?;
            let (uc, ac) = codebook_reports(&model, &sids)?;
            let p = probe_auc(&data, Some(&sids), eval.probe_features, frac, &eval)?;
            let run = VariantRun {
                variant,
                seed,
                user_cf_to_ad_sid: a,
                user_sid_to_ad_cf: bb,
                user_codebook_l1: uc[0].clone(),
                ad_codebook_l1: ac[0].clone(),
                probe_auc: p.auc,
                final_loss: out.epochs.last().map(|e| e.total),
                train_seconds: secs,
            };
            progress(&format!(
                "seed {seed} {variant}: auc {:.4}/{:.4} ad ppl {:.1} probe {:.4} ({secs:.1}s)",
                run.user_cf_to_ad_sid.auc, run.user_sid_to_ad_cf.auc, run.ad_codebook_l1.perplexity, run.probe_auc
            ));
            done.push((config, run.clone()));
            runs.push(run);
        }
    }
    let mut order: Vec<Variant> = Vec::new();
    for v in &grid.variants {
        if !order.contains(v) {
            order.push(*v);
        }
    }
    let summary = order
        .into_iter()
        .map(|variant| {
            let rs: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let m = |f: &dyn Fn(&VariantRun) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            VariantSummary {
                variant,
                retrieval_auc_cf_sid: m(&|r| r.user_cf_to_ad_sid.auc),
                retrieval_auc_sid_cf: m(&|r| r.user_sid_to_ad_cf.auc),
                recall_cf_sid: m(&|r| r.user_cf_to_ad_sid.recall_at_k),
                recall_sid_cf: m(&|r| r.user_sid_to_ad_cf.recall_at_k),
                ad_perplexity_l1: m(&|r| r.ad_codebook_l1.perplexity),
                ad_usage_l1: m(&|r| r.ad_codebook_l1.usage_rate),
                user_perplexity_l1: m(&|r| r.user_codebook_l1.perplexity),
                user_usage_l1: m(&|r| r.user_codebook_l1.usage_rate),
                probe_auc: m(&|r| r.probe_auc),
            }
        })
        .collect();
    Ok(GridReport { runs, baseline_probe_median: median(&baseline), baseline_probe_auc: baseline, summary })
}
