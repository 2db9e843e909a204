// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run orchestration: one directory per run holding a manifest, checkpoints,
//! CSV tables and figure specs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, io_err, LabError, Result};
use crate::geometry::{
    default_discrepancy_weights, discrepancy, extract_profile, write_profiles_csv, LayerProfile,
    ProfileMeta,
};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{alpha_sweep, epsilon_sigma, function_set, threshold_for_model, ThresholdRow};
use crate::harness::figure::{FigureId, FigureSpec, FigureStyle};
use crate::model::{load_checkpoint, save_checkpoint, write_matrix, InterventionSpec, Model};
use crate::surrogate::{build_intervention_map, collect_io_pairs, fit_layer, write_surrogate_csv, MapKind};
use crate::taskgen::PromptBatch;
use crate::tale::{evaluate_masked, greedy_prune, PruneResult, ValidationMetric};
use crate::trainer::{train_with, write_loss_curve};

/// One orchestration path per CLI verb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Train,
    Prune,
    Profile,
    Surrogate,
    Intervene,
    Sweep,
    Eval,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Train => "train",
            Verb::Prune => "prune",
            Verb::Profile => "profile",
            Verb::Surrogate => "surrogate",
            Verb::Intervene => "intervene",
            Verb::Sweep => "sweep",
            Verb::Eval => "eval",
        }
    }
}

/// Stages needed to produce a figure's inputs.
pub fn verbs_for_figure(id: FigureId) -> Vec<Verb> {
    match id {
        FigureId::Profile => vec![Verb::Prune, Verb::Profile],
        FigureId::Threshold | FigureId::Alpha => vec![Verb::Sweep],
        FigureId::Spectrum => vec![Verb::Surrogate],
    }
}

/// Seed for one sampling purpose, derived from the run seed.
pub fn derived_seed(seed: u64, purpose: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(purpose.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub data: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub profile: String,
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub wall_time_secs: f64,
    pub verbs: Vec<Verb>,
    pub seeds: Seeds,
    pub outputs: Vec<OutputRecord>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| LabError::Config(e.to_string()))
    }
}

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates `<out>/<unix-time>-<hash prefix>` and its subdirectories.
    pub fn create(out: &Path, config_hash: &str, started_unix: u64) -> Result<Self> {
        let stem = format!("{started_unix}-{}", &config_hash[..12]);
        let mut root = out.join(&stem);
        let mut n = 1;
        while root.exists() {
            root = out.join(format!("{stem}-{n}"));
            n += 1;
        }
        let dir = Self { root };
        for sub in [dir.checkpoints(), dir.csv(), dir.figures()] {
            std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        }
        Ok(dir)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn csv(&self) -> PathBuf {
        self.root.join("csv")
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
}

/// The single place run outputs are written from.
struct Writer {
    dir: RunDir,
    outputs: Vec<OutputRecord>,
}

impl Writer {
    /// Runs `write` against the absolute path, then records the file hash.
    fn emit(&mut self, rel: impl AsRef<Path>, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let rel = rel.as_ref();
        let abs = self.dir.root.join(rel);
        write(&abs)?;
        let bytes = std::fs::read(&abs).map_err(io_err(&abs))?;
        self.outputs.retain(|o| o.path != rel);
        self.outputs.push(OutputRecord {
            path: rel.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.emit(Path::new("csv").join(name), |p| {
            let mut w = csv::Writer::from_path(p)?;
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush().map_err(io_err(p))
        })
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn join_layers(layers: impl IntoIterator<Item = usize>) -> String {
    layers
        .into_iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Summary returned to callers; the same data lives in the run directory.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub prunes: BTreeMap<String, PruneResult>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    w: Writer,
    model: Option<Model>,
    prunes: BTreeMap<String, PruneResult>,
    log: &'a mut dyn FnMut(&str),
}

impl Runner<'_> {
    fn k(&self) -> usize {
        self.cfg.train.k_max
    }

    fn prompts(&self, dataset: &str, purpose: &str, count: usize) -> Result<Vec<PromptBatch>> {
        let task = self.cfg.dataset(dataset)?;
        task.sample_prompts(count, self.k(), derived_seed(self.cfg.seed, &format!("{purpose}/{dataset}")))
    }

    fn model(&mut self) -> Result<&Model> {
        if self.model.is_none() {
            let m = match &self.cfg.checkpoint {
                Some(path) => {
                    (self.log)(&format!("loading {}", path.display()));
                    let m = load_checkpoint(path)?;
                    if m.config != self.cfg.model {
                        return Err(invalid("checkpoint", "model config differs from the experiment config"));
                    }
                    m
                }
                None => self.train()?,
            };
            self.model = Some(m);
        }
        Ok(self.model.as_ref().expect("just set"))
    }

    fn train(&mut self) -> Result<Model> {
        let cfg = self.cfg;
        (self.log)(&format!("training {} steps", cfg.train.total_steps));
        let init = Model::init(cfg.model.clone(), cfg.train.seed)?;
        let log = &mut *self.log;
        let out = train_with(init, &cfg.train, &cfg.task, |p| {
            log(&format!("step {} loss {:.4e} k={}", p.step, p.loss, p.context_length))
        })?;
        (self.log)(&format!("validation mse {:.4e}", out.validation_mse));
        self.w.emit("checkpoints/model.ckpt", |p| save_checkpoint(&out.model, p))?;
        self.w.emit("csv/loss_curve.csv", |p| write_loss_curve(p, &out.curve))?;
        self.w.csv(
            "train_summary.csv",
            &["steps", "final_loss", "validation_mse"],
            &[vec![
                cfg.train.total_steps.to_string(),
                num(out.curve.last().map_or(f64::NAN, |p| p.loss)),
                num(out.validation_mse),
            ]],
        )?;
        Ok(out.model)
    }

    fn prune(&mut self, dataset: &str) -> Result<PruneResult> {
        if let Some(r) = self.prunes.get(dataset) {
            return Ok(r.clone());
        }
        let prompts = self.prompts(dataset, "prune", self.cfg.prune.n_prompts)?;
        let cfg = self.cfg.prune.config();
        let model = self.model()?;
        let r = greedy_prune(&ValidationMetric::new(model, &prompts), &cfg)?;
        (self.log)(&format!(
            "prune {dataset}: dropped {:?}, ratio {:.4}",
            r.dropped_layers, r.best_over_full_ratio
        ));
        self.w.emit(format!("csv/prune_{dataset}.csv"), |p| r.write_rounds_csv(p))?;
        self.prunes.insert(dataset.to_string(), r.clone());
        Ok(r)
    }

    fn write_prune_summary(&mut self) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .prunes
            .iter()
            .map(|(ds, r)| {
                vec![
                    ds.clone(),
                    num(r.baseline_metric),
                    num(r.best_metric),
                    num(r.best_over_full_ratio),
                    join_layers(r.dropped_layers.iter().copied()),
                ]
            })
            .collect();
        self.w.csv(
            "prune_summary.csv",
            &["dataset", "baseline_metric", "best_metric", "best_over_full_ratio", "dropped_layers"],
            &rows,
        )
    }

    fn run_prune(&mut self) -> Result<()> {
        for ds in self.cfg.prune.datasets.clone() {
            self.prune(&ds)?;
        }
        self.write_prune_summary()
    }

    fn profile(&mut self, dataset: &str, spec: &InterventionSpec, prompts: &[PromptBatch]) -> Result<LayerProfile> {
        let traces = self.model()?.masked(spec.clone()).traces(prompts)?;
        extract_profile(
            &traces,
            self.cfg.profile_stage.positions,
            ProfileMeta {
                dataset: dataset.to_string(),
                model_id: self.cfg.name.clone(),
                mask: spec.label(),
            },
        )
    }

    fn run_profile(&mut self) -> Result<()> {
        let stage = self.cfg.profile_stage.clone();
        let reference_prompts = self.prompts(&stage.reference, "profile", stage.n_prompts)?;
        let reference = self.profile(&stage.reference, &InterventionSpec::none(), &reference_prompts)?;
        let weights = default_discrepancy_weights();
        let mut profiles = Vec::new();
        let mut rows = Vec::new();
        let mut markers = BTreeSet::new();
        for ds in &stage.datasets {
            let prompts = self.prompts(ds, "profile", stage.n_prompts)?;
            let mut specs = vec![InterventionSpec::none()];
            if ds != &stage.reference {
                let r = self.prune(ds)?;
                if !r.dropped_layers.is_empty() {
                    markers.extend(r.dropped_layers.iter().copied());
                    specs.push(r.spec());
                }
            }
            for spec in specs {
                let p = self.profile(ds, &spec, &prompts)?;
                let d = discrepancy(&p, &reference, &weights)?;
                for (l, v) in d.per_layer.iter().enumerate() {
                    rows.push(vec![ds.clone(), spec.label(), l.to_string(), num(*v)]);
                }
                rows.push(vec![ds.clone(), spec.label(), "aggregate".into(), num(d.aggregate)]);
                profiles.push(p);
            }
        }
        self.w.emit("csv/profiles.csv", |p| write_profiles_csv(p, &profiles))?;
        self.w.csv("discrepancy.csv", &["dataset", "mask", "layer", "discrepancy"], &rows)?;
        let labels = profiles
            .iter()
            .map(|p| format!("{} {}", p.meta.dataset, p.meta.mask))
            .collect();
        self.figure(
            FigureId::Profile,
            vec!["csv/profiles.csv".into()],
            FigureStyle {
                log_y: false,
                series_labels: labels,
                markers: markers.into_iter().collect(),
            },
        )
    }

    fn run_surrogate(&mut self) -> Result<()> {
        let stage = self.cfg.surrogate.clone();
        let mut fits = Vec::new();
        for ds in &stage.datasets {
            let prompts = self.prompts(ds, "surrogate", stage.n_prompts)?;
            let traces = self.model()?.unmasked().traces(&prompts)?;
            for layer in 0..self.cfg.model.n_layers {
                let f = fit_layer(&traces, layer, stage.policy, ds)?;
                self.w.emit(format!("checkpoints/surrogate_{ds}_layer{layer}.mat"), |p| write_matrix(&f.w, p))?;
                fits.push(f);
            }
        }
        let gain_rows: Vec<Vec<String>> = fits
            .iter()
            .flat_map(|f| {
                f.gains.iter().map(move |g| {
                    vec![f.meta.dataset.clone(), f.meta.layer.to_string(), num(*g)]
                })
            })
            .collect();
        self.w.emit("csv/surrogates.csv", |p| write_surrogate_csv(p, &fits))?;
        self.w.csv("surrogate_gains.csv", &["dataset", "layer", "gain"], &gain_rows)?;
        self.figure(
            FigureId::Spectrum,
            vec!["csv/surrogates.csv".into()],
            FigureStyle {
                log_y: true,
                series_labels: stage.datasets.clone(),
                markers: Vec::new(),
            },
        )
    }

    /// Layer targeted by interventions: explicit, else the first TALE pick.
    fn target_layer(&mut self, explicit: Option<usize>, dataset: &str) -> Result<Option<usize>> {
        if explicit.is_some() {
            return Ok(explicit);
        }
        Ok(self.prune(dataset)?.dropped_layers.first().copied())
    }

    fn run_intervene(&mut self) -> Result<()> {
        let stage = self.cfg.intervene.clone();
        let ds = stage.dataset.as_str();
        let Some(layer) = self.target_layer(stage.layer, ds)? else {
            (self.log)(&format!("intervene: TALE keeps every layer on {ds}; nothing to target"));
            return self.w.csv("interventions.csv", &INTERVENTION_HEADER, &[]);
        };
        let calibration = self.prompts(ds, "intervene-calibration", stage.n_calibration)?;
        let eval = self.prompts(ds, "prune", self.cfg.prune.n_prompts)?;
        let model = self.model()?.clone();
        let traces = model.unmasked().traces(&calibration)?;
        let fit = fit_layer(&traces, layer, stage.policy, ds)?;
        // Controls are calibrated on the states they will act on.
        let (_, cal_out) = collect_io_pairs(&traces, layer, stage.policy)?;
        let base = evaluate_masked(&model, &InterventionSpec::none(), &eval)?;
        let dropped = evaluate_masked(&model, &InterventionSpec::drop_layers([layer]), &eval)?;
        let mut rows = vec![
            intervention_row(ds, layer, "base", base, base, None, None),
            intervention_row(ds, layer, "drop", dropped, base, None, None),
        ];
        for (i, kind) in stage.kinds.iter().enumerate() {
            let map = build_intervention_map(
                *kind,
                Some(&fit),
                self.cfg.model.d_model,
                derived_seed(self.cfg.seed, &format!("intervene-map/{i}")),
                Some(&cal_out),
                stage.norm_budget,
            )?;
            if let Some(w) = &map.warning {
                (self.log)(&format!("intervene {}: {w}", kind_name(*kind)));
            }
            let spec = InterventionSpec::none().with_injection(layer, map.matrix.clone());
            let m = evaluate_masked(&model, &spec, &eval)?;
            rows.push(intervention_row(
                ds,
                layer,
                kind_name(*kind),
                m,
                base,
                map.calibration_median_gain,
                map.warning.clone(),
            ));
        }
        self.w.csv("interventions.csv", &INTERVENTION_HEADER, &rows)
    }

    fn run_sweep(&mut self) -> Result<()> {
        self.run_alpha()?;
        self.run_threshold()
    }

    fn run_alpha(&mut self) -> Result<()> {
        let stage = self.cfg.sweep.clone();
        let ds = stage.dataset.as_str();
        let mut rows = Vec::new();
        if let Some(layer) = self.target_layer(stage.layer, ds)? {
            let prompts = self.prompts(ds, "prune", self.cfg.prune.n_prompts)?;
            for p in alpha_sweep(self.model()?, layer, &stage.alphas, &prompts)? {
                rows.push(vec![ds.to_string(), layer.to_string(), num(p.alpha), num(p.metric)]);
            }
        } else {
            (self.log)(&format!("alpha sweep: TALE keeps every layer on {ds}; nothing to target"));
        }
        self.w.csv("alpha_sweep.csv", &["dataset", "layer", "alpha", "metric"], &rows)?;
        if rows.is_empty() {
            // A figure spec needs rows to point at.
            return Ok(());
        }
        self.figure(
            FigureId::Alpha,
            vec!["csv/alpha_sweep.csv".into()],
            FigureStyle {
                series_labels: vec![ds.to_string()],
                ..FigureStyle::default()
            },
        )
    }

    fn run_threshold(&mut self) -> Result<()> {
        let stage = self.cfg.sweep.clone();
        let mut rows = Vec::new();
        for &sigma in &stage.sigmas {
            let name = format!("sweep-sigma{sigma}");
            let task = self.cfg.task.scaled(sigma)?;
            let validation = task.sample_prompts(
                self.cfg.prune.n_prompts,
                self.k(),
                derived_seed(self.cfg.seed, &format!("prune/{name}")),
            )?;
            let cfg = self.cfg.prune.config();
            let model = self.model()?.clone();
            let pruned = greedy_prune(&ValidationMetric::new(&model, &validation), &cfg)?;
            let grouped = function_set(
                &task,
                stage.n_functions,
                stage.n_batches,
                self.k() + 1,
                derived_seed(self.cfg.seed, &format!("threshold/{name}")),
            )?;
            let row = threshold_for_model(&format!("sigma={sigma}"), &model, &pruned.dropped_set(), &grouped)?;
            (self.log)(&format!(
                "threshold sigma={sigma}: dropped {:?}, only_pruned {} only_base {}",
                row.dropped, row.only_pruned, row.only_base
            ));
            rows.push(threshold_record(&row));
        }
        self.w.csv("threshold.csv", &THRESHOLD_HEADER, &rows)?;
        self.figure(FigureId::Threshold, vec!["csv/threshold.csv".into()], FigureStyle::default())
    }

    fn run_eval(&mut self) -> Result<()> {
        let stage = self.cfg.eval.clone();
        let mut rows = Vec::new();
        for ds in &stage.datasets {
            let task = self.cfg.dataset(ds)?.clone();
            let pruned = self.prune(ds)?;
            let mut specs = vec![InterventionSpec::none()];
            if !pruned.dropped_layers.is_empty() {
                specs.push(pruned.spec());
            }
            for spec in specs {
                let model = self.model()?;
                let r = epsilon_sigma(&model.masked(spec.clone()), &stage.protocol, &task)?;
                for (seed, e) in stage.protocol.seeds.iter().zip(&r.per_seed) {
                    rows.push(vec![ds.clone(), spec.label(), seed.to_string(), num(*e)]);
                }
                rows.push(vec![ds.clone(), spec.label(), "mean".into(), num(r.mean)]);
                (self.log)(&format!("eval {ds} {}: {:.4e}", spec.label(), r.mean));
            }
        }
        self.w.csv("epsilon.csv", &["dataset", "mask", "seed", "epsilon"], &rows)
    }

    fn figure(&mut self, id: FigureId, inputs: Vec<PathBuf>, style: FigureStyle) -> Result<()> {
        let spec = FigureSpec {
            id,
            inputs,
            output: PathBuf::from(format!("figures/{}.svg", id.name())),
            manifest_hash: self.hash.clone(),
            style,
        };
        spec.validate(&self.w.dir.root)?;
        self.w.emit(format!("figures/{}.toml", id.name()), |p| spec.write(p))
    }
}

const INTERVENTION_HEADER: [&str; 7] = [
    "dataset",
    "layer",
    "intervention",
    "metric",
    "ratio_to_base",
    "calibration_median_gain",
    "warning",
];

fn kind_name(kind: MapKind) -> &'static str {
    match kind {
        MapKind::InverseSurrogate => "inverse_surrogate",
        MapKind::RandomRotation => "random_rotation",
        MapKind::RandomTriangular => "random_triangular",
    }
}

fn intervention_row(
    ds: &str,
    layer: usize,
    what: &str,
    metric: f64,
    base: f64,
    gain: Option<f64>,
    warning: Option<String>,
) -> Vec<String> {
    vec![
        ds.to_string(),
        layer.to_string(),
        what.to_string(),
        num(metric),
        num(metric / base),
        gain.map(num).unwrap_or_default(),
        warning.unwrap_or_default(),
    ]
}

const THRESHOLD_HEADER: [&str; 11] = [
    "label",
    "n",
    "both",
    "only_base",
    "only_pruned",
    "neither",
    "acc_mean_base_mse",
    "threshold",
    "mean_pruned_mse",
    "agg_ratio",
    "dropped",
];

fn threshold_record(r: &ThresholdRow) -> Vec<String> {
    vec![
        r.label.clone(),
        r.n.to_string(),
        r.both.to_string(),
        r.only_base.to_string(),
        r.only_pruned.to_string(),
        r.neither.to_string(),
        num(r.acc_mean_base_mse),
        num(r.threshold),
        num(r.mean_pruned_mse),
        num(r.agg_ratio),
        join_layers(r.dropped.iter().copied()),
    ]
}

/// Runs `verbs` (in pipeline order) into a fresh directory under `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    verbs: &[Verb],
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let hash = cfg.hash()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let dir = RunDir::create(out, &hash, started_unix)?;
    log(&format!("run directory {}", dir.root.display()));
    let verbs: Vec<Verb> = verbs.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();

    let mut runner = Runner {
        cfg,
        hash: hash.clone(),
        w: Writer {
            dir: dir.clone(),
            outputs: Vec::new(),
        },
        model: None,
        prunes: BTreeMap::new(),
        log,
    };
    for &verb in &verbs {
        match verb {
            Verb::Train => {
                let m = runner.train()?;
                runner.model = Some(m);
            }
            Verb::Prune => runner.run_prune()?,
            Verb::Profile => runner.run_profile()?,
            Verb::Surrogate => runner.run_surrogate()?,
            Verb::Intervene => runner.run_intervene()?,
            Verb::Sweep => runner.run_sweep()?,
            Verb::Eval => runner.run_eval()?,
        }
    }
    if !runner.prunes.is_empty() && !verbs.contains(&Verb::Prune) {
        runner.write_prune_summary()?;
    }
    let mut outputs = runner.w.outputs;
    outputs.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        name: cfg.name.clone(),
        profile: cfg.profile.name().to_string(),
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix,
        wall_time_secs: started.elapsed().as_secs_f64(),
        verbs: verbs.clone(),
        seeds: Seeds {
            train: cfg.train.seed,
            data: cfg.seed,
        },
        outputs,
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| LabError::Config(e.to_string()))?;
    std::fs::write(dir.manifest(), text).map_err(io_err(dir.manifest()))?;
    Ok(RunSummary {
        dir: dir.root,
        manifest,
        prunes: runner.prunes,
    })
}

/// Re-runs the verbs recorded in a manifest with its embedded config.
pub fn rerun_manifest(manifest: &Path, out: &Path, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let m = Manifest::read(manifest)?;
    run_experiment(&m.config, &m.verbs, out, log)
}
