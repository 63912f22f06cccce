//! Multi-stage training plans over role-tagged corpora, with a batching
//! audit and checkpoint lineage per stage.
//!
//! A plan is an ordered list of stages. Each stage names a mixture of corpus
//! roles and trains retriever, reranker and generator on the concatenation,
//! starting from the previous stage's weights (or from scratch).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corpus::synthetic::{CrossLingualSetup, PSEUDO_PAIRS};
use crate::corpus::{CorpusError, CorpusRole, CorpusSet, Language, Passage, PassagePool, TrainingExample};
use crate::metrics::MetricsReport;
use crate::pipeline::{build_tokenizer, gold_passages, Pipeline, PipelineError, RoundReport};
use crate::train::{derive_seed, TrainLog};
use crate::xaug::{build_pseudo_set, AugmentReport, StubTranslator, XaugError};

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("corpus role {0} is missing")]
    MissingRole(CorpusRole),
    #[error("stage {stage} has {n} examples; at least 2 are needed")]
    TooFewExamples { stage: String, n: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Xaug(#[from] XaugError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("run record: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ThreeStage,
    TwoStage,
    FinetuneOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::ThreeStage => "three_stage",
            Variant::TwoStage => "two_stage",
            Variant::FinetuneOnly => "finetune_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Variant::ThreeStage, Variant::TwoStage, Variant::FinetuneOnly]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ScheduleError::InvalidPlan(format!("unknown variant {s:?}")))
    }
}

/// A translation direction of the pseudo data, e.g. Zh to Vi.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PseudoPair {
    pub source: Language,
    pub target: Language,
}

impl PseudoPair {
    pub fn label(self) -> String {
        format!("{}-{}", title(self.source.code()), title(self.target.code()))
    }
}

fn title(code: &str) -> String {
    let mut c = code.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl std::str::FromStr for PseudoPair {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase().replace('_', "-");
        PSEUDO_PAIRS
            .iter()
            .map(|&(source, target)| PseudoPair { source, target })
            .find(|p| p.label().to_ascii_lowercase() == lower)
            .ok_or_else(|| ScheduleError::InvalidPlan(format!("unknown pseudo pair {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFrom {
    Scratch,
    PreviousStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub mixture: BTreeSet<CorpusRole>,
    /// `section.key` overrides applied on top of the run config for this
    /// stage only, e.g. `("generator.epochs", "5")`.
    #[serde(default)]
    pub overrides: Vec<(String, String)>,
    pub initialize_from: InitFrom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub variant: Variant,
    /// Pseudo pair whose translated examples are left out of D′.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_pair: Option<PseudoPair>,
    pub stages: Vec<Stage>,
}

fn stage(name: &str, roles: &[CorpusRole], init: InitFrom) -> Stage {
    Stage {
        name: name.into(),
        mixture: roles.iter().copied().collect(),
        overrides: Vec::new(),
        initialize_from: init,
    }
}

pub fn make_plan(variant: Variant) -> StagePlan {
    use CorpusRole::*;
    let cross = || stage("t_cross_lingual", &[DCrossLingual, DTDownstream], InitFrom::Scratch);
    let pseudo = |init| stage("t_translated", &[DPrimeTranslated, DTDownstream], init);
    let fine = |init| stage("f_downstream", &[DTDownstream], init);
    let stages = match variant {
        Variant::ThreeStage => vec![cross(), pseudo(InitFrom::PreviousStage), fine(InitFrom::PreviousStage)],
        Variant::TwoStage => vec![pseudo(InitFrom::Scratch), fine(InitFrom::PreviousStage)],
        Variant::FinetuneOnly => vec![fine(InitFrom::Scratch)],
    };
    StagePlan {
        variant,
        drop_pair: None,
        stages,
    }
}

impl StagePlan {
    /// The same plan with `pair`'s pseudo examples removed from D′.
    pub fn without_pair(mut self, pair: PseudoPair) -> Result<Self, ScheduleError> {
        if !self.stages.iter().any(|s| s.mixture.contains(&CorpusRole::DPrimeTranslated)) {
            return Err(ScheduleError::InvalidPlan(format!(
                "{} uses no translated data, so there is no pair to drop",
                self.variant
            )));
        }
        self.drop_pair = Some(pair);
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidPlan(m));
        let Some(last) = self.stages.last() else {
            return bad("a plan needs at least one stage".into());
        };
        if last.mixture != BTreeSet::from([CorpusRole::DTDownstream]) {
            return bad(format!("final stage {} must train on d_t_downstream only", last.name));
        }
        if self.stages[0].initialize_from == InitFrom::PreviousStage {
            return bad(format!("first stage {} has no previous stage", self.stages[0].name));
        }
        let mut names = BTreeSet::new();
        for s in &self.stages {
            if s.mixture.is_empty() {
                return bad(format!("stage {} has an empty mixture", s.name));
            }
            if s.mixture.contains(&CorpusRole::UHighResource) {
                return bad(format!("stage {}: u_high_resource is translation input, not training data", s.name));
            }
            if !names.insert(s.name.as_str()) {
                return bad(format!("duplicate stage name {}", s.name));
            }
            for (key, _) in &s.overrides {
                if !["retriever.", "reranker.", "generator.", "fgm."].iter().any(|p| key.starts_with(p)) {
                    return bad(format!("stage {}: override {key} is not a training key", s.name));
                }
            }
        }
        Ok(())
    }

    /// Short content hash of the plan.
    pub fn id(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("plan serializes"))
    }

    pub fn label(&self) -> String {
        match self.drop_pair {
            Some(p) => format!("{} w/o {}", self.variant, p.label()),
            None => self.variant.to_string(),
        }
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Training sets by role, the passage pool they ground in, and the held-out
/// split every stage is scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub sets: BTreeMap<CorpusRole, CorpusSet>,
    pub pool: PassagePool,
    pub dev: CorpusSet,
    /// Retrieval pool for dev evaluation.
    pub eval_passages: Vec<Passage>,
    pub augment: Vec<(PseudoPair, AugmentReport)>,
}

impl Corpora {
    /// Cross-lingual synthetic corpora with D′ produced by the stub
    /// translator from each high-resource language into its low-resource
    /// partner.
    pub fn from_cross_lingual(setup: &CrossLingualSetup, cfg: &RunConfig, seed: u64) -> Result<Self, ScheduleError> {
        let mut pool = setup.pool();
        let mut pseudo = Vec::new();
        let mut augment = Vec::new();
        for (i, &(source, target)) in PSEUDO_PAIRS.iter().enumerate() {
            let lex = setup.lexicon(source, target, cfg.xaug.lexicon_noise, derive_seed(seed, &[i as u64]));
            let client = StubTranslator::new(source, target, lex);
            let src = CorpusSet::new(
                CorpusRole::UHighResource,
                setup.u_high_resource.examples().iter().filter(|e| e.language == source).cloned().collect(),
            );
            let out = build_pseudo_set(&src, &pool, &client, &cfg.xaug.policy())?;
            for p in out.passages {
                pool.insert(p)?;
            }
            pseudo.extend(out.set.examples().iter().cloned());
            augment.push((PseudoPair { source, target }, out.report));
        }
        let dev_languages: BTreeSet<Language> = setup.dt_dev.examples().iter().map(|e| e.language).collect();
        let eval_passages = setup
            .passages
            .iter()
            .filter(|p| dev_languages.contains(&p.language))
            .cloned()
            .collect();
        let sets = BTreeMap::from([
            (CorpusRole::DCrossLingual, setup.d_cross_lingual.clone()),
            (CorpusRole::UHighResource, setup.u_high_resource.clone()),
            (CorpusRole::DPrimeTranslated, CorpusSet::new(CorpusRole::DPrimeTranslated, pseudo)),
            (CorpusRole::DTDownstream, setup.dt_train.clone()),
        ]);
        Ok(Self {
            sets,
            pool,
            dev: setup.dt_dev.clone(),
            eval_passages,
            augment,
        })
    }

    /// Vocabulary over everything the corpora contain.
    pub fn tokenizer(&self, prompt: &str) -> crate::tokenizer::Tokenizer {
        let examples = self.sets.values().flat_map(|s| s.examples()).chain(self.dev.examples());
        build_tokenizer(&self.pool, examples, prompt)
    }

    /// Examples of `stage`'s mixture in role order, with D′ filtered by the
    /// plan's dropped pair.
    pub fn mixture(&self, plan: &StagePlan, stage: &Stage) -> Result<Vec<TrainingExample>, ScheduleError> {
        let mut out = Vec::new();
        for role in &stage.mixture {
            let set = self.sets.get(role).ok_or(ScheduleError::MissingRole(*role))?;
            let dropped = match (role, plan.drop_pair) {
                (CorpusRole::DPrimeTranslated, Some(p)) => Some(p.target),
                _ => None,
            };
            out.extend(set.examples().iter().filter(|e| Some(e.language) != dropped).cloned());
        }
        Ok(out)
    }
}

/// Hashes of the example multiset a stage declared and of what each
/// component batched during its first epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAudit {
    pub declared: String,
    /// Retriever, reranker and generator; `None` when a component ran no
    /// epochs.
    pub consumed: [Option<String>; 3],
}

impl StageAudit {
    pub fn ok(&self) -> bool {
        self.consumed.iter().flatten().all(|c| *c == self.declared)
    }
}

/// Order-independent hash of a multiset of examples.
pub fn multiset_hash<'a>(examples: impl IntoIterator<Item = &'a TrainingExample>) -> String {
    let mut prints: Vec<String> = examples.into_iter().map(TrainingExample::fingerprint).collect();
    prints.sort();
    let mut h = Sha256::new();
    for p in &prints {
        h.update(p.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn audit(examples: &[TrainingExample], round: &RoundReport) -> StageAudit {
    let consumed = |log: &TrainLog| {
        (!log.epochs.is_empty()).then(|| multiset_hash(log.first_epoch_items.iter().map(|&i| &examples[i])))
    };
    StageAudit {
        declared: multiset_hash(examples),
        consumed: [
            consumed(&round.retriever),
            consumed(&round.reranker.log),
            consumed(&round.generator.log),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub mixture: Vec<CorpusRole>,
    pub n_examples: usize,
    pub seed: u64,
    /// Retriever, reranker and generator checkpoint ids.
    pub checkpoints: [String; 3],
    pub parents: [String; 3],
    pub audit: StageAudit,
    pub metrics: MetricsReport,
    /// Reranked retrieval scores on dev, next to `metrics`' first-stage ones.
    pub rerank: MetricsReport,
    pub training: RoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub plan_id: String,
    pub label: String,
    pub plan: StagePlan,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunRecord {
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.stages.last().map(|s| &s.metrics)
    }

    /// Each stage's checkpoints name the previous stage's as parents.
    pub fn lineage_unbroken(&self) -> bool {
        self.stages.windows(2).all(|w| w[1].parents == w[0].checkpoints)
            && self.stages.first().is_none_or(|s| s.parents.iter().all(String::is_empty))
    }
}

/// Trains one stage starting from `model`, returning the stage record.
pub fn run_stage(
    plan: &StagePlan,
    index: usize,
    corpora: &Corpora,
    cfg: &RunConfig,
    seed: u64,
    model: &mut Pipeline,
) -> Result<StageRecord, ScheduleError> {
    let st = &plan.stages[index];
    let cfg = cfg.with_overrides(&st.overrides)?;
    let examples = corpora.mixture(plan, st)?;
    if examples.len() < 2 {
        return Err(ScheduleError::TooFewExamples {
            stage: st.name.clone(),
            n: examples.len(),
        });
    }
    let stage_seed = derive_seed(seed, &[index as u64 + 1]);
    let index_passages = gold_passages(&examples, &corpora.pool);
    log::info!("stage {} ({}): {} examples", st.name, plan.label(), examples.len());
    let parents = model.checkpoint_ids();
    let training = model.train_round(&examples, &corpora.pool, &index_passages, &cfg, stage_seed)?;
    model.seal(Some(&st.name), &parents);
    let eval = model.evaluate(corpora.dev.examples(), &corpora.pool, &corpora.eval_passages, &cfg, stage_seed)?;
    let record = StageRecord {
        name: st.name.clone(),
        mixture: st.mixture.iter().copied().collect(),
        n_examples: examples.len(),
        seed: stage_seed,
        checkpoints: model.checkpoint_ids(),
        parents,
        audit: audit(&examples, &training),
        metrics: MetricsReport::new(eval.generation.clone(), Some(eval.retrieval)),
        rerank: MetricsReport::new(eval.generation, Some(eval.rerank)),
        training,
    };
    log::info!(
        "stage {}: total {:.2}, MRR@5 {:.3} -> {:.3}, audit {}",
        st.name,
        record.metrics.total,
        record.metrics.mrr_at_5.unwrap_or(0.0),
        record.rerank.mrr_at_5.unwrap_or(0.0),
        if record.audit.ok() { "ok" } else { "MISMATCH" }
    );
    Ok(record)
}

/// Where stage checkpoints and records go, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct RunStore {
    pub dir: Option<PathBuf>,
}

impl RunStore {
    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn stage_dir(&self, index: usize, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("stage{}-{name}", index + 1)))
    }
}

/// Key identifying the inputs of a stage: plan, config, seed and the stage's
/// position. A stored stage with the same key is reused on resume.
fn stage_key(plan: &StagePlan, cfg: &RunConfig, seed: u64, index: usize, corpora: &Corpora) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(plan).expect("plan serializes"));
    h.update(cfg.to_toml().as_bytes());
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    for set in corpora.sets.values() {
        h.update(multiset_hash(set.examples()).as_bytes());
    }
    h.update(multiset_hash(corpora.dev.examples()).as_bytes());
    hex::encode(h.finalize())
}

fn load_stage(dir: &Path, key: &str) -> Option<(Pipeline, StageRecord)> {
    let stored = std::fs::read_to_string(dir.join("stage.key")).ok()?;
    if stored.trim() != key {
        return None;
    }
    let record: StageRecord = serde_json::from_slice(&std::fs::read(dir.join("stage.json")).ok()?).ok()?;
    let model = Pipeline::load(dir).ok()?;
    (model.checkpoint_ids() == record.checkpoints).then_some((model, record))
}

fn save_stage(dir: &Path, key: &str, model: &Pipeline, record: &StageRecord) -> Result<(), ScheduleError> {
    model.save(dir)?;
    std::fs::write(dir.join("stage.json"), serde_json::to_vec_pretty(record)?)?;
    std::fs::write(dir.join("stage.key"), key)?;
    Ok(())
}

/// Runs every stage in order. With a store directory, finished stages are
/// written there and reused when a later call finds matching inputs.
pub fn run_plan(
    plan: &StagePlan,
    corpora: &Corpora,
    cfg: &RunConfig,
    seed: u64,
    store: &RunStore,
) -> Result<(RunRecord, Pipeline), ScheduleError> {
    plan.validate()?;
    for st in &plan.stages {
        for role in &st.mixture {
            if !corpora.sets.contains_key(role) {
                return Err(ScheduleError::MissingRole(*role));
            }
        }
        cfg.with_overrides(&st.overrides)?;
    }
    let tokenizer = corpora.tokenizer(&cfg.generator.prompt);
    let fresh = || Pipeline::new(tokenizer.clone(), cfg, derive_seed(seed, &[0]));
    let mut model = fresh();
    let mut stages = Vec::with_capacity(plan.stages.len());
    for (i, st) in plan.stages.iter().enumerate() {
        if st.initialize_from == InitFrom::Scratch {
            model = fresh();
        }
        let key = stage_key(plan, cfg, seed, i, corpora);
        let dir = store.stage_dir(i, &st.name);
        if let Some((m, r)) = dir.as_deref().and_then(|d| load_stage(d, &key)) {
            log::info!("stage {}: reusing stored checkpoints", st.name);
            model = m;
            stages.push(r);
            continue;
        }
        let record = run_stage(plan, i, corpora, cfg, seed, &mut model)?;
        if let Some(d) = &dir {
            save_stage(d, &key, &model, &record)?;
        }
        stages.push(record);
    }
    let record = RunRecord {
        plan_id: plan.id(),
        label: plan.label(),
        plan: plan.clone(),
        seed,
        stages,
    };
    Ok((record, model))
}

/// The six compared runs: the three variants, two-stage without each pseudo
/// pair, and three-stage with an empty generator prompt.
pub fn ablation_plans() -> Vec<(String, StagePlan, Option<String>)> {
    let mut rows = vec![
        ("three_stage".to_string(), make_plan(Variant::ThreeStage), None),
        ("two_stage".to_string(), make_plan(Variant::TwoStage), None),
        ("finetune_only".to_string(), make_plan(Variant::FinetuneOnly), None),
    ];
    for &(source, target) in PSEUDO_PAIRS.iter().rev() {
        let pair = PseudoPair { source, target };
        let plan = make_plan(Variant::TwoStage).without_pair(pair).expect("two_stage uses D′");
        rows.push((plan.label(), plan, None));
    }
    rows.push(("three_stage w/o prompt".to_string(), make_plan(Variant::ThreeStage), Some(String::new())));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub f1: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub records: Vec<RunRecord>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let mut out = format!("{:<26} {:>8} {:>8} {:>8} {:>8}\n", "run", "F1", "BLEU", "ROUGE-L", "Total");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<26} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                r.name, r.f1, r.bleu, r.rouge_l, r.total
            ));
        }
        out
    }
}

pub fn ablation_suite(
    corpora: &Corpora,
    cfg: &RunConfig,
    seed: u64,
    store: &RunStore,
) -> Result<AblationTable, ScheduleError> {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (i, (name, plan, prompt)) in ablation_plans().into_iter().enumerate() {
        let cfg = match prompt {
            Some(p) => RunConfig {
                generator: crate::config::GeneratorSection {
                    prompt: p,
                    ..cfg.generator.clone()
                },
                ..cfg.clone()
            },
            None => cfg.clone(),
        };
        let sub = RunStore {
            dir: store.dir.as_ref().map(|d| d.join(format!("row{}", i + 1))),
        };
        let (record, _) = run_plan(&plan, corpora, &cfg, seed, &sub)?;
        let m = record.final_metrics().expect("plans have stages");
        rows.push(AblationRow {
            name,
            f1: m.f1,
            bleu: m.bleu,
            rouge_l: m.rouge_l,
            total: m.total,
        });
        records.push(record);
    }
    Ok(AblationTable { seed, rows, records })
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_have_declared_mixtures() {
        use CorpusRole::*;
        let three = make_plan(Variant::ThreeStage);
        let mixtures: Vec<Vec<CorpusRole>> = three.stages.iter().map(|s| s.mixture.iter().copied().collect()).collect();
        assert_eq!(
            mixtures,
            vec![vec![DCrossLingual, DTDownstream], vec![DPrimeTranslated, DTDownstream], vec![DTDownstream]]
        );
        assert_eq!(make_plan(Variant::TwoStage).stages.len(), 2);
        let ft = make_plan(Variant::FinetuneOnly);
        assert_eq!(ft.stages.len(), 1);
        assert_eq!(ft.stages[0].mixture, BTreeSet::from([DTDownstream]));
        for v in [Variant::ThreeStage, Variant::TwoStage, Variant::FinetuneOnly] {
            make_plan(v).validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_bad_plans() {
        let mut p = make_plan(Variant::TwoStage);
        p.stages.swap(0, 1);
        assert!(p.validate().is_err());
        let mut p = make_plan(Variant::ThreeStage);
        p.stages[1].mixture.clear();
        assert!(p.validate().is_err());
        let mut p = make_plan(Variant::ThreeStage);
        p.stages[0].initialize_from = InitFrom::PreviousStage;
        assert!(p.validate().is_err());
        let mut p = make_plan(Variant::FinetuneOnly);
        p.stages[0].overrides.push(("model.d_model".into(), "8".into()));
        assert!(p.validate().is_err());
        assert!(make_plan(Variant::FinetuneOnly).without_pair("zh-vi".parse().unwrap()).is_err());
    }

    #[test]
    fn pair_labels_parse() {
        let p: PseudoPair = "Zh-Vi".parse().unwrap();
        assert_eq!((p.source, p.target), (Language::Zh, Language::Vi));
        assert_eq!("en_fr".parse::<PseudoPair>().unwrap().label(), "En-Fr");
        assert!("en-vi".parse::<PseudoPair>().is_err());
    }

    #[test]
    fn ablation_has_six_distinct_rows() {
        let plans = ablation_plans();
        assert_eq!(plans.len(), 6);
        let names: BTreeSet<&str> = plans.iter().map(|p| p.0.as_str()).collect();
        assert_eq!(names.len(), 6);
        assert!(names.contains("two_stage w/o Zh-Vi"));
        assert!(names.contains("two_stage w/o En-Fr"));
    }

    #[test]
    fn multiset_hash_ignores_order_but_not_multiplicity() {
        let e = |id: &str| TrainingExample {
            id: id.into(),
            input_x: "q".into(),
            grounding_passage_id: "p".into(),
            response_r: "r".into(),
            language: Language::En,
            origin: crate::corpus::Origin::Native,
        };
        let (a, b) = (e("a"), e("b"));
        assert_eq!(multiset_hash([&a, &b]), multiset_hash([&b, &a]));
        assert_ne!(multiset_hash([&a, &b]), multiset_hash([&a, &b, &b]));
    }

    #[test]
    fn median_of_three() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
