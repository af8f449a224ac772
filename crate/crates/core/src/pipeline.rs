//! Staged pipeline with digest-based resumption.
//!
//! Every stage writes its outputs plus a `stage.json` recording the digest
//! of the run configuration and of every input file it consumed. A rerun
//! skips stages whose recorded digests still match; deleting a stage
//! directory forces exactly that stage (and anything whose inputs then
//! change) to recompute. All stage outputs are plain files, and everything
//! deterministic is byte-stable under a fixed seed. Wall-clock timings go
//! to `timings.log`, which is the one file excluded from that guarantee.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::digest::{digest_file, sha256_hex};
use crate::editor::{run_edit, BaselineMode, EditPlan};
use crate::error::{Error, Result};
use crate::eval::{evaluate, report_csv, write_report, EvalConfig, EvalReport, RefusalLexicon};
use crate::gate::{
    aggregate, classify, layer_search_range, locate_center, radius_search, stats, write_gate_file,
    LayerSearchResult, NeuralGate, NeuronTaxonomy,
};
use crate::model::{read_checkpoint, write_checkpoint, ModelConfig, ToyModel};
use crate::probe::{probe_corpus, read_probe_results, write_probe_results, ProbeConfig, SpanMode};
use crate::synth::{
    build_corpus, default_subjects, read_corpus, read_manifest, regenerate, split, tokens,
    write_corpus, write_manifest, SplitCorpus, SplitParams,
};
use crate::train::{train_base, TrainConfig};

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// How many of the six default subject categories to use.
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub n_templates: usize,
    /// Insert seeded context prefixes using the default starter words.
    pub augment: bool,
    pub holdout_subjects: Vec<u32>,
    pub holdout_templates: Vec<u32>,
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_subjects: 6,
            images_per_subject: 1,
            n_templates: 12,
            augment: true,
            holdout_subjects: vec![5],
            holdout_templates: vec![11],
            test_fraction: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeStageConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l1_weight: f64,
    #[serde(default)]
    pub span_mode: SpanMode,
    /// Worker threads for the per-sample probes.
    pub parallelism: usize,
}

impl Default for ProbeStageConfig {
    fn default() -> Self {
        ProbeStageConfig {
            steps: 40,
            learning_rate: 0.1,
            l1_weight: 0.005,
            span_mode: SpanMode::Full,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditStageConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub mode: BaselineMode,
    /// When set, edit a contiguous band of layers centered on the chosen
    /// one, gated per layer from a jointly optimized probe.
    #[serde(default)]
    pub multi_layer_halfwidth: Option<usize>,
}

impl Default for EditStageConfig {
    fn default() -> Self {
        EditStageConfig {
            learning_rate: 1e-2,
            epochs: 12,
            batch_size: 4,
            mode: BaselineMode::Gated,
            multi_layer_halfwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub max_radius: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { max_radius: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalStageConfig {
    pub max_new: usize,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        EvalStageConfig { max_new: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub probe: ProbeStageConfig,
    /// Shared balance between safety and consistency losses, used by both
    /// the probe objective and the edit loss.
    pub alpha: f64,
    pub gate_threshold: f64,
    pub edit: EditStageConfig,
    pub search: SearchConfig,
    pub eval: EvalStageConfig,
}

impl RunConfig {
    pub fn default_for(seed: u64, out_dir: PathBuf) -> Self {
        let model = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        RunConfig {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            seed,
            out_dir,
            model,
            corpus: CorpusConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            probe: ProbeStageConfig::default(),
            alpha: 1.25,
            gate_threshold: 0.3,
            edit: EditStageConfig::default(),
            search: SearchConfig::default(),
            eval: EvalStageConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported run config schema_version {}",
                self.schema_version
            )));
        }
        self.model.validate()?;
        let c = &self.corpus;
        if c.n_subjects == 0 || c.n_subjects > 6 {
            return Err(Error::Config(format!(
                "corpus.n_subjects {} outside 1..=6",
                c.n_subjects
            )));
        }
        if c.images_per_subject == 0 {
            return Err(Error::Config("corpus.images_per_subject is zero".into()));
        }
        if c.n_templates == 0 || c.n_templates > 12 {
            return Err(Error::Config(format!(
                "corpus.n_templates {} outside 1..=12",
                c.n_templates
            )));
        }
        if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "corpus.test_fraction {} outside (0, 1)",
                c.test_fraction
            )));
        }
        if let Some(bad) = c
            .holdout_subjects
            .iter()
            .find(|&&s| s as usize >= c.n_subjects)
        {
            return Err(Error::Config(format!(
                "corpus.holdout_subjects entry {bad} outside roster"
            )));
        }
        if let Some(bad) = c
            .holdout_templates
            .iter()
            .find(|&&t| t as usize >= c.n_templates)
        {
            return Err(Error::Config(format!(
                "corpus.holdout_templates entry {bad} outside roster"
            )));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(Error::Config(format!(
                "gate_threshold {}",
                self.gate_threshold
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {}", self.alpha)));
        }
        if self.probe.steps == 0 {
            return Err(Error::Config("probe.steps is zero".into()));
        }
        if !(self.edit.learning_rate > 0.0) || self.edit.epochs == 0 || self.edit.batch_size == 0 {
            return Err(Error::Config("edit stage hyperparameters invalid".into()));
        }
        if self.eval.max_new == 0 {
            return Err(Error::Config("eval.max_new is zero".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        // the output directory is a location, not an input
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(sha256_hex(
            serde_json::to_string(&c)
                .map_err(|e| Error::Format(format!("run config encode: {e}")))?
                .as_bytes(),
        ))
    }

    fn probe_config(&self, layers: Vec<usize>) -> ProbeConfig {
        ProbeConfig {
            alpha: self.alpha,
            steps: self.probe.steps,
            learning_rate: self.probe.learning_rate,
            l1_weight: self.probe.l1_weight,
            layers,
            clamp_lo: -1.0,
            clamp_hi: 1.0,
            span_mode: self.probe.span_mode,
        }
    }

    fn edit_plan(&self, gates: BTreeMap<usize, NeuralGate>, mode: BaselineMode) -> EditPlan {
        EditPlan {
            layers: gates,
            alpha: self.alpha,
            learning_rate: self.edit.learning_rate,
            epochs: self.edit.epochs,
            batch_size: self.edit.batch_size,
            batch_seed: self.seed,
            mode,
        }
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            max_new: self.eval.max_new,
            seed: self.seed,
            lexicon: RefusalLexicon::refuse_token(tokens::REFUSE),
        }
    }

    /// Layers probed for the layer search: the search band widened by the
    /// radius, clipped to the model.
    pub fn probed_layers(&self) -> Vec<usize> {
        let range = layer_search_range(self.model.n_layers);
        let lo = range.start.saturating_sub(self.search.max_radius);
        let hi = (range.end + self.search.max_radius).min(self.model.n_layers);
        (lo..hi).collect()
    }
}

pub fn write_run_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Format(format!("run config encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_run_config(bytes: &[u8]) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_slice(bytes)
        .map_err(|e| Error::Config(format!("run config decode: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read(path)?)
}

// ---- stage bookkeeping --------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    config_digest: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

const STAGE_FILE: &str = "stage.json";

fn stage_is_current(
    dir: &Path,
    stage: &str,
    config_digest: &str,
    inputs: &BTreeMap<String, String>,
) -> bool {
    let Ok(bytes) = std::fs::read(dir.join(STAGE_FILE)) else {
        return false;
    };
    let Ok(manifest) = serde_json::from_slice::<StageManifest>(&bytes) else {
        return false;
    };
    if manifest.stage != stage
        || manifest.config_digest != config_digest
        || &manifest.inputs != inputs
    {
        return false;
    }
    // outputs must still exist with the recorded digests
    manifest.outputs.iter().all(|(name, digest)| {
        digest_file(&dir.join(name))
            .map(|d| &d == digest)
            .unwrap_or(false)
    })
}

fn finish_stage(
    dir: &Path,
    stage: &str,
    config_digest: &str,
    inputs: BTreeMap<String, String>,
    output_names: &[&str],
) -> Result<()> {
    let mut outputs = BTreeMap::new();
    for name in output_names {
        outputs.insert((*name).to_string(), digest_file(&dir.join(name))?);
    }
    let manifest = StageManifest {
        stage: stage.to_string(),
        config_digest: config_digest.to_string(),
        inputs,
        outputs,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("stage manifest encode: {e}")))?;
    std::fs::write(dir.join(STAGE_FILE), text)?;
    Ok(())
}

pub struct StagePaths {
    pub root: PathBuf,
    pub corpus_dir: PathBuf,
    pub base_dir: PathBuf,
    pub probe_dir: PathBuf,
    pub gate_dir: PathBuf,
    pub locate_dir: PathBuf,
    pub edit_dir: PathBuf,
    pub eval_dir: PathBuf,
}

impl StagePaths {
    pub fn new(root: &Path) -> Self {
        StagePaths {
            root: root.to_path_buf(),
            corpus_dir: root.join("01_corpus"),
            base_dir: root.join("02_base"),
            probe_dir: root.join("03_probe"),
            gate_dir: root.join("04_gate"),
            locate_dir: root.join("05_locate"),
            edit_dir: root.join("06_edit"),
            eval_dir: root.join("07_eval"),
        }
    }

    pub fn corpus_file(&self) -> PathBuf {
        self.corpus_dir.join("corpus.jsonl")
    }

    pub fn manifest_file(&self) -> PathBuf {
        self.corpus_dir.join("manifest.json")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.base_dir.join("base.ckpt")
    }

    pub fn probe_results(&self) -> PathBuf {
        self.probe_dir.join("probe_results.jsonl")
    }

    pub fn gate_file(&self, layer: usize) -> PathBuf {
        self.gate_dir.join(format!("gate_l{layer:02}.json"))
    }

    pub fn search_file(&self) -> PathBuf {
        self.locate_dir.join("search.json")
    }

    pub fn edited_checkpoint(&self) -> PathBuf {
        self.edit_dir.join("edited.ckpt")
    }

    pub fn post_report(&self) -> PathBuf {
        self.eval_dir.join("report.json")
    }

    pub fn pre_report(&self) -> PathBuf {
        self.eval_dir.join("pre_report.json")
    }
}

fn load_splits(paths: &StagePaths) -> Result<SplitCorpus> {
    let manifest = read_manifest(&paths.manifest_file())?;
    let corpus = read_corpus(&paths.corpus_file())?;
    let params = manifest
        .split
        .as_ref()
        .ok_or_else(|| Error::Format("manifest lacks split parameters".into()))?;
    let splits = split(
        &corpus,
        &params.holdout_subjects,
        &params.holdout_templates,
        params.test_fraction,
        params.seed,
    )?;
    Ok(splits)
}

// ---- stages --------------------------------------------------------------

pub fn stage_gen_data(cfg: &RunConfig) -> Result<bool> {
    let paths = StagePaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.corpus_dir)?;
    let config_digest = cfg.digest()?;
    let inputs = BTreeMap::new();
    if stage_is_current(&paths.corpus_dir, "gen-data", &config_digest, &inputs) {
        return Ok(false);
    }
    let subjects = default_subjects(cfg.corpus.images_per_subject)
        .into_iter()
        .take(cfg.corpus.n_subjects)
        .collect::<Vec<_>>();
    let augment = if cfg.corpus.augment {
        tokens::starter_tokens()
    } else {
        Vec::new()
    };
    let (samples, mut manifest) =
        build_corpus(&subjects, cfg.corpus.n_templates, &augment, cfg.seed)?;
    let splits = split(
        &samples,
        &cfg.corpus.holdout_subjects,
        &cfg.corpus.holdout_templates,
        cfg.corpus.test_fraction,
        cfg.seed,
    )?;
    manifest.split = Some(SplitParams {
        holdout_subjects: cfg.corpus.holdout_subjects.clone(),
        holdout_templates: cfg.corpus.holdout_templates.clone(),
        test_fraction: cfg.corpus.test_fraction,
        seed: cfg.seed,
    });
    manifest.split_counts = Some(splits.counts());
    // regeneration from the manifest must reproduce what is on disk
    let (regenerated, _) = regenerate(&manifest)?;
    if regenerated != samples {
        return Err(Error::Numeric(
            "manifest regeneration disagrees with generated corpus".into(),
        ));
    }
    write_corpus(&samples, &paths.corpus_file())?;
    write_manifest(&manifest, &paths.manifest_file())?;
    finish_stage(
        &paths.corpus_dir,
        "gen-data",
        &config_digest,
        inputs,
        &["corpus.jsonl", "manifest.json"],
    )?;
    Ok(true)
}

pub fn stage_train_base(cfg: &RunConfig) -> Result<bool> {
    let paths = StagePaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.base_dir)?;
    let config_digest = cfg.digest()?;
    let inputs = BTreeMap::from([
        ("corpus".to_string(), digest_file(&paths.corpus_file())?),
        ("manifest".to_string(), digest_file(&paths.manifest_file())?),
    ]);
    if stage_is_current(&paths.base_dir, "train-base", &config_digest, &inputs) {
        return Ok(false);
    }
    let splits = load_splits(&paths)?;
    let mut model = ToyModel::init(cfg.model.clone(), tokens::default_special_tokens());
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let report = train_base(&mut model, &splits.train, &train_cfg)?;
    write_checkpoint(&model, &paths.base_checkpoint())?;
    std::fs::write(
        paths.base_dir.join("train_report.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Format(format!("train report encode: {e}")))?,
    )?;
    finish_stage(
        &paths.base_dir,
        "train-base",
        &config_digest,
        inputs,
        &["base.ckpt", "train_report.json"],
    )?;
    Ok(true)
}

pub fn stage_probe(cfg: &RunConfig) -> Result<bool> {
    let paths = StagePaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.probe_dir)?;
    let config_digest = cfg.digest()?;
    let inputs = BTreeMap::from([
        ("corpus".to_string(), digest_file(&paths.corpus_file())?),
        ("base".to_string(), digest_file(&paths.base_checkpoint())?),
    ]);
    if stage_is_current(&paths.probe_dir, "probe", &config_digest, &inputs) {
        return Ok(false);
    }
    let splits = load_splits(&paths)?;
    let model = read_checkpoint(&paths.base_checkpoint())?;
    let mut all_results = Vec::new();
    for layer in cfg.probed_layers() {
        let probe_cfg = cfg.probe_config(vec![layer]);
        let batch = probe_corpus(&model, &splits.train, &probe_cfg, cfg.probe.parallelism)?;
        if !batch.failures.is_empty() {
            return Err(Error::Numeric(format!(
                "{} probe failures at layer {layer}, first: {} ({})",
                batch.failures.len(),
                batch.failures[0].sample_id,
                batch.failures[0].message
            )));
        }
        all_results.extend(batch.results);
    }
    write_probe_results(&all_results, &paths.probe_results())?;
    finish_stage(
        &paths.probe_dir,
        "probe",
        &config_digest,
        inputs,
        &["probe_results.jsonl"],
    )?;
    Ok(true)
}

pub fn stage_aggregate(cfg: &RunConfig) -> Result<bool> {
    let paths = StagePaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.gate_dir)?;
    let config_digest = cfg.digest()?;
    let inputs = BTreeMap::from([(
        "probe_results".to_string(),
        digest_file(&paths.probe_results())?,
    )]);
    if stage_is_current(&paths.gate_dir, "aggregate", &config_digest, &inputs) {
        return Ok(false);
    }
    let results = read_probe_results(&paths.probe_results())?;
    let probe_digest = digest_file(&paths.probe_results())?;
    let mut outputs: Vec<String> = Vec::new();
    let mut taxonomies: BTreeMap<usize, NeuronTaxonomy> = BTreeMap::new();
    for layer in cfg.probed_layers() {
        let layer_results: Vec<_> = results
            .iter()
            .filter(|r| r.vectors.contains_key(&layer))
            .cloned()
            .collect();
        let gate = aggregate(&layer_results, layer, cfg.gate_threshold)?;
        taxonomies.insert(layer, classify(&gate));
        write_gate_file(&gate, probe_digest.clone(), &paths.gate_file(layer))?;
        outputs.push(format!("gate_l{layer:02}.json"));
    }
    std::fs::write(
        paths.gate_dir.join("taxonomies.json"),
        serde_json::to_string_pretty(&taxonomies)
            .map_err(|e| Error::Format(format!("taxonomy encode: {e}")))?,
    )?;
    outputs.push("taxonomies.json".into());
    let hist = stats::frequency_histogram(&results, cfg.gate_threshold)?;
    stats::write_histogram_csv(&hist, &paths.gate_dir.join("histogram.csv"))?;
    outputs.push("histogram.csv".into());
    let props = stats::strong_proportions(&results, cfg.gate_threshold)?;
    stats::write_proportions_csv(&props, &paths.gate_dir.join("proportions.csv"))?;
    outputs.push("proportions.csv".into());
    let names: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
    finish_stage(&paths.gate_dir, "aggregate", &config_digest, inputs, &names)?;
    Ok(true)
}

fn load_gates(cfg: &RunConfig, paths: &StagePaths) -> Result<BTreeMap<usize, NeuralGate>> {
    let mut gates = BTreeMap::new();
    for layer in cfg.probed_layers() {
        let (gate, _) = crate::gate::read_gate_file(&paths.gate_file(layer))?;
        gates.insert(layer, gate);
    }
    Ok(gates)
}

/// Edit at one layer and score the edited model on the test split.
fn edit_and_eval_layer(
    cfg: &RunConfig,
    base: &ToyModel,
    splits: &SplitCorpus,
    gates: &BTreeMap<usize, NeuralGate>,
    layer: usize,
) -> Result<EvalReport> {
    let gate = gates
        .get(&layer)
        .ok_or_else(|| Error::Data(format!("no gate for layer {layer}")))?;
    let plan = cfg.edit_plan(BTreeMap::from([(layer, gate.clone())]), cfg.edit.mode);
    let (edited, _) = run_edit(base, &splits.train, &plan)?;
    evaluate(&edited, splits, &cfg.eval_config())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocateOutput {
    pub center: usize,
    pub search: LayerSearchResult,
    pub chosen_layer: usize,
}

pub fn stage_locate(cfg: &RunConfig) -> Result<bool> {
    let paths = StagePaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.locate_dir)?;
    let config_digest = cfg.digest()?;
    let mut inputs = BTreeMap::from([
        ("corpus".to_string(), digest_file(&paths.corpus_file())?),
        ("base".to_string(), digest_file(&paths.base_checkpoint())?),
    ]);
    for layer in cfg.probed_layers() {
        inputs.insert(
            format!("gate_l{layer:02}"),
            digest_file(&paths.gate_file(layer))?,
        );
    }
    if stage_is_current(&paths.locate_dir, "locate-layer", &config_digest, &inputs) {
        return Ok(false);
    }
    let splits = load_splits(&paths)?;
    let base = read_checkpoint(&paths.base_checkpoint())?;
    let gates = load_gates(cfg, &paths)?;
    let taxonomies: BTreeMap<usize, NeuronTaxonomy> =
        gates.iter().map(|(&l, g)| (l, classify(g))).collect();
    let center = locate_center(&taxonomies, layer_search_range(cfg.model.n_layers))?;

    let mut layer_reports: BTreeMap<usize, EvalReport> = BTreeMap::new();
    let search = radius_search(
        |layer| {
            let report = edit_and_eval_layer(cfg, &base, &splits, &gates, layer)?;
            let eta = report.eta;
            layer_reports.insert(layer, report);
            Ok(eta)
        },
        center,
        cfg.search.max_radius,
        cfg.model.n_layers,
    )?;
    let output = LocateOutput {
        center,
        chosen_layer: search.chosen,
        search,
    };
    std::fs::write(
        paths.search_file(),
        serde_json::to_string_pretty(&output)
            .map_err(|e| Error::Format(format!("search encode: {e}")))?,
    )?;
    let mut outputs = vec!["search.json".to_string()];
    for (layer, report) in &layer_reports {
        let name = format!("report_l{layer:02}.json");
        write_report(report, &paths.locate_dir.join(&name))?;
        outputs.push(name);
    }
    let names: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
    finish_stage(
        &paths.locate_dir,
        "locate-layer",
        &config_digest,
        inputs,
        &names,
    )?;
    Ok(true)
}

pub fn read_locate_output(paths: &StagePaths) -> Result<LocateOutput> {
    let bytes = std::fs::read(paths.search_file())?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("search decode: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditProvenance {
    pub plan_digest: String,
    pub gate_digests: BTreeMap<usize, String>,
    pub corpus_digest: String,
    pub base_digest: String,
    pub seed: u64,
    pub layers: Vec<usize>,
    pub mode: BaselineMode,
}

pub fn stage_edit(cfg: &RunConfig) -> Result<bool> {
    let paths = StagePaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.edit_dir)?;
    let config_digest = cfg.digest()?;
    let inputs = BTreeMap::from([
        ("corpus".to_string(), digest_file(&paths.corpus_file())?),
        ("base".to_string(), digest_file(&paths.base_checkpoint())?),
        ("search".to_string(), digest_file(&paths.search_file())?),
        (
            "probe_results".to_string(),
            digest_file(&paths.probe_results())?,
        ),
    ]);
    if stage_is_current(&paths.edit_dir, "edit", &config_digest, &inputs) {
        return Ok(false);
    }
    let splits = load_splits(&paths)?;
    let base = read_checkpoint(&paths.base_checkpoint())?;
    let locate = read_locate_output(&paths)?;
    let chosen = locate.chosen_layer;

    // assemble gates for the edited layers
    let gates: BTreeMap<usize, NeuralGate> = match cfg.edit.multi_layer_halfwidth {
        None => {
            let (gate, _) = crate::gate::read_gate_file(&paths.gate_file(chosen))?;
            BTreeMap::from([(chosen, gate)])
        }
        Some(hw) => {
            // joint probe over the contiguous band, one gate per layer
            let lo = chosen.saturating_sub(hw);
            let hi = (chosen + hw + 1).min(cfg.model.n_layers);
            let band: Vec<usize> = (lo..hi).collect();
            let probe_cfg = cfg.probe_config(band.clone());
            let batch = probe_corpus(&base, &splits.train, &probe_cfg, cfg.probe.parallelism)?;
            if !batch.failures.is_empty() {
                return Err(Error::Numeric(format!(
                    "{} joint probe failures",
                    batch.failures.len()
                )));
            }
            write_probe_results(&batch.results, &paths.edit_dir.join("joint_probe.jsonl"))?;
            band.iter()
                .map(|&l| aggregate(&batch.results, l, cfg.gate_threshold).map(|g| (l, g)))
                .collect::<Result<_>>()?
        }
    };

    let plan = cfg.edit_plan(gates.clone(), cfg.edit.mode);
    let (edited, report) = run_edit(&base, &splits.train, &plan)?;
    write_checkpoint(&edited, &paths.edited_checkpoint())?;
    std::fs::write(
        paths.edit_dir.join("edit_report.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Format(format!("edit report encode: {e}")))?,
    )?;
    let provenance = EditProvenance {
        plan_digest: sha256_hex(
            serde_json::to_string(&plan)
                .map_err(|e| Error::Format(format!("plan encode: {e}")))?
                .as_bytes(),
        ),
        // single-layer edits cite the stage-04 gate file; multi-layer
        // gates were aggregated from the joint probe written above
        gate_digests: match cfg.edit.multi_layer_halfwidth {
            None => BTreeMap::from([(chosen, digest_file(&paths.gate_file(chosen))?)]),
            Some(_) => {
                let joint = digest_file(&paths.edit_dir.join("joint_probe.jsonl"))?;
                gates.keys().map(|&l| (l, joint.clone())).collect()
            }
        },
        corpus_digest: digest_file(&paths.corpus_file())?,
        base_digest: digest_file(&paths.base_checkpoint())?,
        seed: cfg.seed,
        layers: gates.keys().copied().collect(),
        mode: cfg.edit.mode,
    };
    std::fs::write(
        paths.edit_dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)
            .map_err(|e| Error::Format(format!("provenance encode: {e}")))?,
    )?;
    let mut outputs = vec!["edited.ckpt", "edit_report.json", "provenance.json"];
    if cfg.edit.multi_layer_halfwidth.is_some() {
        outputs.push("joint_probe.jsonl");
    }
    finish_stage(&paths.edit_dir, "edit", &config_digest, inputs, &outputs)?;
    Ok(true)
}

pub fn stage_evaluate(cfg: &RunConfig) -> Result<bool> {
    let paths = StagePaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.eval_dir)?;
    let config_digest = cfg.digest()?;
    let inputs = BTreeMap::from([
        ("corpus".to_string(), digest_file(&paths.corpus_file())?),
        ("base".to_string(), digest_file(&paths.base_checkpoint())?),
        (
            "edited".to_string(),
            digest_file(&paths.edited_checkpoint())?,
        ),
    ]);
    if stage_is_current(&paths.eval_dir, "evaluate", &config_digest, &inputs) {
        return Ok(false);
    }
    let splits = load_splits(&paths)?;
    let base = read_checkpoint(&paths.base_checkpoint())?;
    let edited = read_checkpoint(&paths.edited_checkpoint())?;
    let eval_cfg = cfg.eval_config();
    let pre = evaluate(&base, &splits, &eval_cfg)?;
    let post = evaluate(&edited, &splits, &eval_cfg)?;
    write_report(&pre, &paths.pre_report())?;
    write_report(&post, &paths.post_report())?;
    std::fs::write(paths.eval_dir.join("report.csv"), report_csv(&post))?;
    std::fs::write(paths.eval_dir.join("pre_report.csv"), report_csv(&pre))?;
    finish_stage(
        &paths.eval_dir,
        "evaluate",
        &config_digest,
        inputs,
        &[
            "report.json",
            "pre_report.json",
            "report.csv",
            "pre_report.csv",
        ],
    )?;
    Ok(true)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub stages_run: Vec<String>,
    pub stages_skipped: Vec<String>,
    pub chosen_layer: usize,
    pub center: usize,
    pub pre: EvalReport,
    pub post: EvalReport,
}

/// Run every stage in order, skipping the ones whose digests are current.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_run_config(cfg, &cfg.out_dir.join("run_config.json"))?;
    let paths = StagePaths::new(&cfg.out_dir);

    type StageFn = fn(&RunConfig) -> Result<bool>;
    let stages: [(&str, StageFn); 6] = [
        ("gen-data", stage_gen_data),
        ("train-base", stage_train_base),
        ("probe", stage_probe),
        ("aggregate", stage_aggregate),
        ("locate-layer", stage_locate),
        ("edit", stage_edit),
    ];
    let mut summary_run = Vec::new();
    let mut summary_skipped = Vec::new();
    let mut timings = String::new();
    for (name, stage) in stages {
        let started = Instant::now();
        let ran = stage(cfg).map_err(|e| stage_error(name, e))?;
        let secs = started.elapsed().as_secs_f64();
        timings.push_str(&format!(
            "{name}: {secs:.3}s ({})\n",
            if ran { "run" } else { "skipped" }
        ));
        if ran {
            summary_run.push(name.to_string());
        } else {
            summary_skipped.push(name.to_string());
        }
    }
    let started = Instant::now();
    let ran = stage_evaluate(cfg).map_err(|e| stage_error("evaluate", e))?;
    timings.push_str(&format!(
        "evaluate: {:.3}s ({})\n",
        started.elapsed().as_secs_f64(),
        if ran { "run" } else { "skipped" }
    ));
    if ran {
        summary_run.push("evaluate".into());
    } else {
        summary_skipped.push("evaluate".into());
    }
    std::fs::write(cfg.out_dir.join("timings.log"), timings)?;

    let locate = read_locate_output(&paths)?;
    let pre = crate::eval::read_report(&paths.pre_report())?;
    let post = crate::eval::read_report(&paths.post_report())?;
    Ok(PipelineSummary {
        stages_run: summary_run,
        stages_skipped: summary_skipped,
        chosen_layer: locate.chosen_layer,
        center: locate.center,
        pre,
        post,
    })
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(io),
        Error::Config(m) => Error::Config(format!("stage {stage}: {m}")),
        Error::Data(m) => Error::Data(format!("stage {stage}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("stage {stage}: {m}")),
        Error::Format(m) => Error::Format(format!("stage {stage}: {m}")),
        Error::Shape(m) => Error::Shape(format!("stage {stage}: {m}")),
        Error::Graph(m) => Error::Graph(format!("stage {stage}: {m}")),
    }
}

/// Probe-to-report sweep over alpha values, one subdirectory per value,
/// summarized as CSV.
pub fn sweep_alpha(base_cfg: &RunConfig, values: &[f64], out_dir: &Path) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(Error::Config("no alpha values".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows =
        String::from("alpha,rta_sensitive,rta_benign,eta,utility_accuracy,generalization_rta\n");
    let mut failures = Vec::new();
    for &alpha in values {
        let mut cfg = base_cfg.clone();
        cfg.alpha = alpha;
        cfg.out_dir = out_dir.join(format!("alpha_{alpha}"));
        match run_pipeline(&cfg) {
            Ok(summary) => {
                let p = &summary.post;
                rows.push_str(&format!(
                    "{alpha},{},{},{},{},{}\n",
                    p.rta_sensitive, p.rta_benign, p.eta, p.utility_accuracy, p.generalization_rta
                ));
            }
            Err(e) => {
                failures.push(format!("alpha {alpha}: {e}"));
            }
        }
    }
    let csv_path = out_dir.join("alpha_sweep.csv");
    std::fs::write(&csv_path, rows)?;
    if !failures.is_empty() {
        std::fs::write(out_dir.join("sweep_failures.log"), failures.join("\n"))?;
    }
    Ok(csv_path)
}

/// Convenience wrapper used by tests and the CLI: evaluate a specific
/// baseline mode at the already-located layer, reusing a finished run's
/// stages 01-05.
pub fn run_baseline_variant(
    cfg: &RunConfig,
    mode: BaselineMode,
) -> Result<(EvalReport, crate::editor::EditReport)> {
    let paths = StagePaths::new(&cfg.out_dir);
    let splits = load_splits(&paths)?;
    let base = read_checkpoint(&paths.base_checkpoint())?;
    let locate = read_locate_output(&paths)?;
    let (gate, _) = crate::gate::read_gate_file(&paths.gate_file(locate.chosen_layer))?;
    let plan = cfg.edit_plan(BTreeMap::from([(locate.chosen_layer, gate)]), mode);
    let (edited, edit_report) = run_edit(&base, &splits.train, &plan)?;
    let report = evaluate(&edited, &splits, &cfg.eval_config())?;
    Ok((report, edit_report))
}

/// Edit at an explicit layer (reusing a finished run's corpus, base model,
/// and gates) and score the result. Exhaustive layer studies drive this.
pub fn edit_and_eval_at_layer(cfg: &RunConfig, layer: usize) -> Result<EvalReport> {
    let paths = StagePaths::new(&cfg.out_dir);
    let splits = load_splits(&paths)?;
    let base = read_checkpoint(&paths.base_checkpoint())?;
    let gates = load_gates(cfg, &paths)?;
    edit_and_eval_layer(cfg, &base, &splits, &gates, layer)
}
