//! End-to-end wiring: data, identifiers, training and evaluation for one
//! run configuration, with caching so variants sharing a stage reuse it.

use std::collections::BTreeMap;
use std::sync::Arc;

use ace_tensor::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};
use crate::data::{generate_corpus, generate_queries, split_queries, Corpus, QueryRecord, Split};
use crate::decode::PrefixTree;
use crate::error::{CoreError, Result};
use crate::eval::{median, run_eval, EvalReport};
use crate::ids::{build_identifiers, BuiltIdentifiers, IdMode};
use crate::model::{FusionMode, FusionModel, VocabLayout};
use crate::par::Exec;
use crate::train::{make_examples, train_loop, EpochLog, Example, TrainOutcome};

/// Seed for one pipeline stage, derived from the run seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    Rng::new(seed).substream(&[stage]).seed()
}

pub const STAGE_CORPUS: u64 = 0;
pub const STAGE_QUERIES: u64 = 1;
pub const STAGE_SPLIT: u64 = 2;
pub const STAGE_IDS: u64 = 3;
pub const STAGE_MODEL_INIT: u64 = 4;
pub const STAGE_TRAIN: u64 = 5;

/// Corpus plus split-labelled queries.
pub fn generate_data(cfg: &DataConfig, seed: u64) -> Result<(Corpus, Vec<QueryRecord>)> {
    let corpus = generate_corpus(&cfg.corpus, stage_seed(seed, STAGE_CORPUS))?;
    let mut queries = generate_queries(&corpus, &cfg.queries, stage_seed(seed, STAGE_QUERIES))?;
    split_queries(&mut queries, cfg.split, stage_seed(seed, STAGE_SPLIT))?;
    Ok((corpus, queries))
}

/// Everything a model is trained and evaluated on.
pub struct Task {
    pub corpus: Arc<Corpus>,
    pub ids: Arc<BuiltIdentifiers>,
    pub layout: VocabLayout,
    pub tree: PrefixTree,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Task {
    pub fn new(corpus: Arc<Corpus>, queries: &[QueryRecord], ids: Arc<BuiltIdentifiers>, train_queries_per_item: Option<usize>) -> Result<Self> {
        let layout = VocabLayout::new(ids.set.position_sizes.clone())?;
        let tree = PrefixTree::build(&ids.set.identifiers, &layout)?;
        let mut train = make_examples(queries, &ids.set, &layout, Split::Train)?;
        if let Some(q) = train_queries_per_item {
            train = keep_first_per_item(train, q);
        }
        Ok(Task {
            val: make_examples(queries, &ids.set, &layout, Split::Val)?,
            test: make_examples(queries, &ids.set, &layout, Split::Test)?,
            corpus,
            ids,
            layout,
            tree,
            train,
        })
    }

    pub fn examples(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Keep the first `q` examples of every item, preserving order.
pub fn keep_first_per_item(examples: Vec<Example>, q: usize) -> Vec<Example> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    examples
        .into_iter()
        .filter(|e| {
            let c = seen.entry(e.item_id).or_default();
            *c += 1;
            *c <= q
        })
        .collect()
}

/// What differs between trained models of one seed.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrainSpec {
    pub id_mode: IdMode,
    pub fusion: FusionMode,
    pub encoder_layers: usize,
    /// `omega` in millionths, so the spec stays hashable.
    pub omega_micro: u64,
    pub train_queries_per_item: Option<usize>,
}

impl TrainSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TrainSpec {
            id_mode: cfg.identifier.mode,
            fusion: cfg.model.fusion,
            encoder_layers: cfg.model.encoder_layers,
            omega_micro: (cfg.train.omega * 1e6).round() as u64,
            train_queries_per_item: None,
        }
    }

    pub fn omega(&self) -> f64 {
        self.omega_micro as f64 / 1e6
    }
}

pub struct Trained {
    pub task: Arc<Task>,
    pub model: FusionModel<f32>,
    pub outcome: TrainOutcome,
    pub seconds: f64,
}

/// Cache of data, identifiers, tasks and trained models keyed by seed.
pub struct Lab {
    pub config: RunConfig,
    pub exec: Exec,
    data: BTreeMap<u64, (Arc<Corpus>, Arc<Vec<QueryRecord>>)>,
    ids: BTreeMap<(u64, IdMode), Arc<BuiltIdentifiers>>,
    tasks: BTreeMap<(u64, IdMode, Option<usize>), Arc<Task>>,
    models: BTreeMap<(u64, TrainSpec), Arc<Trained>>,
}

impl Lab {
    pub fn new(config: RunConfig, exec: Exec) -> Self {
        Lab {
            config,
            exec,
            data: BTreeMap::new(),
            ids: BTreeMap::new(),
            tasks: BTreeMap::new(),
            models: BTreeMap::new(),
        }
    }

    pub fn data(&mut self, seed: u64) -> Result<(Arc<Corpus>, Arc<Vec<QueryRecord>>)> {
        if let Some(d) = self.data.get(&seed) {
            return Ok(d.clone());
        }
        let (c, q) = generate_data(&self.config.data, seed)?;
        let d = (Arc::new(c), Arc::new(q));
        self.data.insert(seed, d.clone());
        Ok(d)
    }

    pub fn identifiers(&mut self, seed: u64, mode: IdMode) -> Result<Arc<BuiltIdentifiers>> {
        if let Some(b) = self.ids.get(&(seed, mode)) {
            return Ok(b.clone());
        }
        let (corpus, _) = self.data(seed)?;
        let cfg = crate::ids::IdConfig { mode, ..self.config.identifier.clone() };
        let b = Arc::new(build_identifiers(&corpus.embeddings(), &cfg, stage_seed(seed, STAGE_IDS), self.exec)?);
        self.ids.insert((seed, mode), b.clone());
        Ok(b)
    }

    pub fn task(&mut self, seed: u64, mode: IdMode, train_queries_per_item: Option<usize>) -> Result<Arc<Task>> {
        let key = (seed, mode, train_queries_per_item);
        if let Some(t) = self.tasks.get(&key) {
            return Ok(t.clone());
        }
        let (corpus, queries) = self.data(seed)?;
        let ids = self.identifiers(seed, mode)?;
        let t = Arc::new(Task::new(corpus, &queries, ids, train_queries_per_item)?);
        self.tasks.insert(key, t.clone());
        Ok(t)
    }

    /// Train (or fetch) the model for `spec` under `seed`.
    pub fn trained(&mut self, seed: u64, spec: &TrainSpec, on_epoch: impl FnMut(&EpochLog)) -> Result<Arc<Trained>> {
        let key = (seed, spec.clone());
        if let Some(t) = self.models.get(&key) {
            return Ok(t.clone());
        }
        let task = self.task(seed, spec.id_mode, spec.train_queries_per_item)?;
        let mut model_cfg = self.config.model.clone();
        model_cfg.fusion = spec.fusion;
        model_cfg.encoder_layers = spec.encoder_layers;
        if model_cfg.query_vocab_size != self.config.data.queries.vocab_size {
            return Err(CoreError::invalid(format!(
                "model query vocab {} differs from data vocab {}",
                model_cfg.query_vocab_size, self.config.data.queries.vocab_size
            )));
        }
        let train_cfg = crate::train::TrainConfig { omega: spec.omega(), ..self.config.train.clone() };
        let start = std::time::Instant::now();
        let mut model = FusionModel::new(model_cfg, task.layout.clone(), &mut Rng::new(stage_seed(seed, STAGE_MODEL_INIT)))?;
        let outcome = train_loop(&mut model, &task.train, &task.val, &train_cfg, stage_seed(seed, STAGE_TRAIN), self.exec, on_epoch)?;
        let t = Arc::new(Trained {
            task,
            model,
            outcome,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.models.insert(key, t.clone());
        Ok(t)
    }
}

/// Ablation variants of the full system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoConstrainedBeam,
    NoConsistencyLoss,
    NoFusion,
    NoKmeansToken,
    NoRqvaeToken,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoConstrainedBeam,
        Variant::NoConsistencyLoss,
        Variant::NoFusion,
        Variant::NoKmeansToken,
        Variant::NoRqvaeToken,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoConstrainedBeam => "w/o constrained beam search",
            Variant::NoConsistencyLoss => "w/o consistency loss",
            Variant::NoFusion => "w/o fusion strategy",
            Variant::NoKmeansToken => "w/o K-Means token",
            Variant::NoRqvaeToken => "w/o RQ-VAE token",
        }
    }

    /// Training spec for this variant and whether decoding is constrained.
    pub fn spec(self, base: &TrainSpec) -> (TrainSpec, bool) {
        let mut s = base.clone();
        let mut constrained = true;
        match self {
            Variant::Full => {}
            Variant::NoConstrainedBeam => constrained = false,
            Variant::NoConsistencyLoss => s.omega_micro = 0,
            Variant::NoFusion => s.fusion = FusionMode::LastLayer,
            Variant::NoKmeansToken => s.id_mode = IdMode::NoKmeans,
            Variant::NoRqvaeToken => s.id_mode = IdMode::HierarchicalKmeans,
        }
        (s, constrained)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub median_recall_at_1: f64,
    pub median_recall_at_5: f64,
    pub median_recall_at_10: f64,
    pub median_mrr_at_10: f64,
}

impl AblationRow {
    pub fn from_reports(variant: Variant, seeds: Vec<u64>, reports: Vec<EvalReport>) -> Self {
        let col = |f: fn(&EvalReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
        AblationRow {
            variant,
            label: variant.label().to_owned(),
            median_recall_at_1: col(|r| r.recall_at_1),
            median_recall_at_5: col(|r| r.recall_at_5),
            median_recall_at_10: col(|r| r.recall_at_10),
            median_mrr_at_10: col(|r| r.mrr_at_10),
            seeds,
            reports,
        }
    }
}

/// Evaluate `variants` on `split` for every seed; medians over seeds.
pub fn run_ablations(
    lab: &mut Lab,
    seeds: &[u64],
    variants: &[Variant],
    beam: usize,
    split: Split,
    mut log: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    if seeds.len() < 3 {
        return Err(CoreError::invalid(format!("ablations need at least 3 seeds, got {}", seeds.len())));
    }
    let base = TrainSpec::from_config(&lab.config);
    let exec = lab.exec;
    let mut rows = Vec::new();
    for &v in variants {
        let (spec, constrained) = v.spec(&base);
        let mut reports = Vec::new();
        for &seed in seeds {
            let t = lab.trained(seed, &spec, |e| log(&format!("{} seed {seed} epoch {} loss {:.4}", v.label(), e.epoch, e.loss)))?;
            let r = run_eval(&t.model, &t.task.tree, t.task.examples(split), &[beam], split.as_str(), constrained, exec)?;
            log(&format!("{} seed {seed}: R@1 {:.4}", v.label(), r[0].recall_at_1));
            reports.extend(r);
        }
        rows.push(AblationRow::from_reports(v, seeds.to_vec(), reports));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusConfig;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::with_seed(1);
        c.data.corpus = CorpusConfig { n_items: 24, n_concepts: 3, dim: 8, ..CorpusConfig::default() };
        c.data.queries.queries_per_item = 3;
        c.data.queries.vocab_size = 128;
        c.identifier.kmeans.k = 3;
        c.identifier.rqvae.hidden = vec![16];
        c.identifier.rqvae.latent = 4;
        c.identifier.rqvae.codebook_size = 4;
        c.identifier.rqvae.epochs = 2;
        c.identifier.rqvae.warmup_epochs = 1;
        c.model.d_model = 16;
        c.model.n_heads = 2;
        c.model.ffn_dim = 16;
        c.model.encoder_layers = 2;
        c.model.decoder_layers = 1;
        c.model.query_vocab_size = 128;
        c.train.epochs = 1;
        c.train.warmup_epochs = 1;
        c
    }

    #[test]
    fn lab_caches_and_ablations_smoke() {
        let mut lab = Lab::new(small_config(), Exec::Sequential);
        let rows = run_ablations(&mut lab, &[1, 2, 3], &Variant::ALL, 5, Split::Test, |_| {}).unwrap();
        assert_eq!(rows.len(), Variant::ALL.len());
        for r in &rows {
            assert_eq!(r.reports.len(), 3);
            assert!(r.reports.iter().all(EvalReport::identities_hold));
        }
        // Full and unconstrained share one trained model per seed.
        assert_eq!(lab.models.len(), 3 * (Variant::ALL.len() - 1));
        assert!(run_ablations(&mut lab, &[1, 2], &[Variant::Full], 5, Split::Test, |_| {}).is_err());
    }

    #[test]
    fn subsampling_keeps_the_first_queries() {
        let ex = |item| Example { query: vec![1], item_id: item, target: vec![0] };
        let kept = keep_first_per_item(vec![ex(0), ex(1), ex(0), ex(0), ex(1)], 2);
        assert_eq!(kept.iter().map(|e| e.item_id).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn data_is_reproducible() {
        let c = small_config();
        let (a, qa) = generate_data(&c.data, 4).unwrap();
        let (b, qb) = generate_data(&c.data, 4).unwrap();
        assert_eq!(a.embeddings(), b.embeddings());
        assert_eq!(qa, qb);
    }
}
