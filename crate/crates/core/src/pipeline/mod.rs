//! Command drivers behind the `occface` binary.
//!
//! Every command reads and writes inside one output directory, derives its
//! random streams from the master seed, and produces byte-identical files
//! when rerun with the same configuration.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gradcore::AdamState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{
    generate_dataset, make_gt_mesh, neutral_frontal, Occlusion, Split, SynthDataset, SynthSample,
};
use crate::diffusion::{
    metrics_csv, sample_batch, sample_chains, train, Chain, DiffusionModel, TrainSet,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_masked_protocol, Camera, EvalPair, EvalReport, OcclusionMask, PairError, Summary,
    DISTANCE_NOTE,
};
use crate::head::{
    synthesize_assets, write_obj, CoeffKind, CoefficientVector, Mesh, ModelAssets, Vec3,
};
use crate::rank::{
    flatten, gt_order, predicted_order, rank_metrics, rank_report_csv, select, vertex_distance,
    RankConfig, RankExample, RankNet, RankReportRow,
};

pub use config::{EvalConfig, NetConfig, Paths, Preset, RankSettings, RunConfig, SamplingConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const ASSETS_FILE: &str = "assets.bin";
pub const DATASET_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "dataset.json";
pub const RECON_DIR: &str = "reconstructions";
pub const BASELINE_FILE: &str = "baseline.json";

/// Exit status for a failed command: 2 for configuration or missing-input
/// problems, 3 for numerical aborts, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_numerical() => 3,
        Error::Config(_) | Error::Dimension { .. } | Error::Json(_) => 2,
        _ => 1,
    }
}

/// Per-command random seed: the first eight bytes of
/// `SHA-256(master seed ‖ command ‖ input id)`.
pub fn sub_seed(master: u64, command: &str, input: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((command.len() as u64).to_le_bytes());
    h.update(command.as_bytes());
    h.update(input.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn input_id(sample: &SynthSample) -> String {
    format!("s{:05}", sample.index)
}

fn parse_input_id(id: &str) -> Result<usize> {
    id.strip_prefix('s')
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Config(format!("input id `{id}` is not of the form s00042")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    IdGen,
    ExpGen,
    IdRank,
}

impl Network {
    pub fn name(self) -> &'static str {
        match self {
            Network::IdGen => "idgen",
            Network::ExpGen => "expgen",
            Network::IdRank => "idrank",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    NowStyle,
    Co545Style,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::NowStyle => "now_style",
            Protocol::Co545Style => "co545_style",
        }
    }
}

/// Shape and expression hypotheses for one input, with the ranked choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSet {
    pub seed: u64,
    pub input: String,
    pub selected: usize,
    /// `S_R`, shared by every output mesh.
    pub shape: Vec<f64>,
    pub scores: Vec<f64>,
    pub shape_candidates: Vec<Vec<f64>>,
    pub expressions: Vec<Vec<f64>>,
    pub meshes: Vec<String>,
}

/// Prior draws per input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSet {
    pub seed: u64,
    pub coeff_scale: f64,
    pub inputs: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedPoolRow {
    pub input: String,
    pub selected: usize,
    pub selected_from_model: bool,
    pub ranked_error_mm: f64,
    pub pool_average_mm: f64,
    pub model_average_mm: f64,
    pub prior_average_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub all: Summary,
    pub occluded: Option<Summary>,
    pub unoccluded: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub seed: u64,
    pub protocol: String,
    pub alignment: String,
    pub distances: String,
    pub methods: Vec<MethodReport>,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

impl Evaluation {
    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.subset == method)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankSummary {
    pub seed: u64,
    pub inputs: usize,
    pub k_percent: f64,
    pub mean_precision: f64,
    pub mean_iou: f64,
    pub mean_error_ratio: f64,
    /// Share of inputs whose selected shape beats the candidate mean distance.
    pub selected_below_mean: f64,
}

/// Source for `export-mesh`.
#[derive(Clone, Debug, PartialEq)]
pub enum MeshSource {
    Template,
    Input(String),
    Coefficients(PathBuf),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoeffFile {
    #[serde(default)]
    shape: Vec<f64>,
    #[serde(default)]
    expression: Vec<f64>,
    #[serde(default)]
    pose: Vec<f64>,
}

/// One output directory bound to a configuration.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: RunConfig,
    pub out: PathBuf,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

impl Workspace {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Workspace {
            config,
            out: out.into(),
        })
    }

    fn resolve(&self, custom: &Option<PathBuf>, default: &str) -> PathBuf {
        custom.clone().unwrap_or_else(|| self.out.join(default))
    }

    pub fn assets_path(&self) -> PathBuf {
        self.resolve(&self.config.paths.assets, ASSETS_FILE)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.config.paths.dataset, DATASET_FILE)
    }

    pub fn checkpoint_path(&self, net: Network) -> PathBuf {
        let p = &self.config.paths;
        let custom = match net {
            Network::IdGen => &p.idgen,
            Network::ExpGen => &p.expgen,
            Network::IdRank => &p.idrank,
        };
        self.resolve(custom, &format!("{}.ckpt", net.name()))
    }

    pub fn recon_dir(&self) -> PathBuf {
        self.out.join(RECON_DIR)
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Writes the effective configuration next to the outputs.
    fn record_config(&self) -> Result<()> {
        write(&self.out.join(CONFIG_FILE), self.config.to_json())
    }

    fn require(path: &Path, hint: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "missing {} (run `occface {hint}` first)",
                path.display()
            )))
        }
    }

    pub fn load_assets(&self) -> Result<ModelAssets> {
        let path = self.assets_path();
        Self::require(&path, "synth-data")?;
        ModelAssets::load(&path)
    }

    pub fn load_dataset(&self) -> Result<SynthDataset> {
        let path = self.dataset_path();
        Self::require(&path, "synth-data")?;
        SynthDataset::load(&path)
    }

    pub fn load_diffusion(&self, net: Network) -> Result<DiffusionModel> {
        let path = self.checkpoint_path(net);
        Self::require(&path, &format!("train {}", net.name()))?;
        DiffusionModel::load(&path)
    }

    pub fn load_ranker(&self) -> Result<RankNet> {
        let path = self.checkpoint_path(Network::IdRank);
        Self::require(&path, "train idrank")?;
        RankNet::load(&path)
    }

    /// Synthetic head assets and the paired embedding dataset.
    pub fn synth_data(&self) -> Result<SynthDataset> {
        let master = self.seed();
        // configured seeds are salts under the master seed
        let mut head = self.config.head.clone();
        head.seed = sub_seed(master, "synth-data-assets", &head.seed.to_string());
        let mut data = self.config.data.clone();
        data.seed = sub_seed(master, "synth-data-dataset", &data.seed.to_string());
        let assets = synthesize_assets(&head)?;
        let dataset = generate_dataset(&data)?;
        fs::create_dir_all(&self.out)?;
        self.record_config()?;
        assets.save(&self.assets_path())?;
        dataset.save(&self.dataset_path())?;
        let mut manifest = dataset.manifest(DATASET_FILE);
        manifest["seed"] = json!(master);
        manifest["assets_file"] = json!(ASSETS_FILE);
        write(&self.out.join(MANIFEST_FILE), to_json(&manifest)?)?;
        Ok(dataset)
    }

    /// Trains one network and writes its checkpoint and loss log. Returns
    /// the per-step losses.
    pub fn train(&self, net: Network) -> Result<Vec<f64>> {
        self.record_config()?;
        match net {
            Network::IdGen | Network::ExpGen => self.train_diffusion(net),
            Network::IdRank => self.train_ranker(),
        }
    }

    fn train_diffusion(&self, net: Network) -> Result<Vec<f64>> {
        let dataset = self.load_dataset()?;
        let settings = if net == Network::IdGen {
            &self.config.idgen
        } else {
            &self.config.expgen
        };
        let mut data = TrainSet::default();
        for s in dataset.split(Split::Train) {
            match net {
                Network::IdGen => data.push(s.beta.clone(), s.ca.clone()),
                _ => data.push(s.psi.clone(), s.joint_condition()),
            }
        }
        let command = format!("train-{}", net.name());
        let mut model = DiffusionModel::new(
            settings.model.clone(),
            sub_seed(self.seed(), &command, "init"),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed(), &command, "batches"));
        let losses = train(&mut model, &data, &settings.train, &mut rng, |_, _| {})?;
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        write(
            &self.out.join(format!("{}_metrics.csv", net.name())),
            metrics_csv(&losses),
        )?;
        model.save_with_meta(
            &self.checkpoint_path(net),
            self.checkpoint_meta(settings.train.steps),
        )?;
        Ok(losses)
    }

    fn checkpoint_meta(&self, steps: usize) -> serde_json::Value {
        json!({ "seed": self.seed(), "steps": steps, "data_seed": self.config.data.seed })
    }

    fn rank_config(&self, assets: &ModelAssets) -> RankConfig {
        let r = &self.config.idrank;
        RankConfig {
            coords: 3 * assets.frontal_count(),
            cond_dim: self.config.data.ca_dim,
            hidden: r.hidden.clone(),
            feature_scale: r.feature_scale,
            temperature: r.temperature,
        }
    }

    fn template_frontal(assets: &ModelAssets) -> Result<Vec<f64>> {
        let template = Mesh {
            vertices: assets.template.clone(),
        };
        Ok(flatten(&assets.extract_frontal(&template)?))
    }

    fn prior_draws(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = self.config.data.coeff_scale;
        (0..n)
            .map(|_| {
                (0..self.config.data.shape_dim)
                    .map(|_| scale * normal(&mut rng))
                    .collect()
            })
            .collect()
    }

    fn train_ranker(&self) -> Result<Vec<f64>> {
        let assets = self.load_assets()?;
        let dataset = self.load_dataset()?;
        let idgen = self.load_diffusion(Network::IdGen)?;
        let r = &self.config.idrank;
        let master = self.seed();
        let train_samples: Vec<&SynthSample> = dataset.split(Split::Train).collect();
        if train_samples.is_empty() {
            return Err(Error::Config("dataset has no training samples".into()));
        }
        let mut pick_rng = ChaCha8Rng::seed_from_u64(sub_seed(master, "train-idrank", "lists"));
        let lists: Vec<&SynthSample> = (0..r.lists)
            .map(|_| train_samples[pick_rng.random_range(0..train_samples.len())])
            .collect();
        let steps = r.sample_steps.unwrap_or(idgen.schedule.steps());
        let mut net = RankNet::new(
            self.rank_config(&assets),
            &Self::template_frontal(&assets)?,
            sub_seed(master, "train-idrank", "init"),
        )?;
        let mut adam = AdamState::new(r.lr);
        let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(master, "train-idrank", "batches"));
        // list index -> (epoch, example)
        let mut cache: BTreeMap<usize, (usize, RankExample)> = BTreeMap::new();
        let mut losses = Vec::with_capacity(r.steps);
        for step in 0..r.steps {
            let epoch = step / r.resample_period;
            let picks: Vec<usize> = (0..r.batch)
                .map(|_| batch_rng.random_range(0..lists.len()))
                .collect();
            let stale: Vec<usize> = {
                let mut s: Vec<usize> = picks
                    .iter()
                    .copied()
                    .filter(|j| cache.get(j).is_none_or(|(e, _)| *e != epoch))
                    .collect();
                s.sort_unstable();
                s.dedup();
                s
            };
            if !stale.is_empty() {
                let tags: Vec<String> = stale.iter().map(|&j| format!("{j}/{epoch}")).collect();
                let lists = &lists;
                let chains: Vec<Chain> = stale
                    .iter()
                    .zip(&tags)
                    .flat_map(|(&j, tag)| {
                        let seed = sub_seed(master, "train-idrank-pool", tag);
                        (0..r.pool_size as u64).map(move |stream| Chain {
                            cond: lists[j].id_condition(),
                            seed,
                            stream,
                        })
                    })
                    .collect();
                let shapes = sample_chains(&idgen, &idgen.schedule, &chains, steps)?;
                for ((&j, tag), pool) in stale.iter().zip(&tags).zip(shapes.chunks(r.pool_size)) {
                    let mut pool = pool.to_vec();
                    let mix = sub_seed(master, "train-idrank-mix", tag) as f64 / u64::MAX as f64;
                    if mix < r.mixed_fraction {
                        let half = r.pool_size / 2;
                        let prior = self.prior_draws(
                            r.pool_size - half,
                            sub_seed(master, "train-idrank-prior", tag),
                        );
                        pool.splice(half.., prior);
                    }
                    let example = ranking_example(&assets, lists[j], &pool)?;
                    cache.insert(j, (epoch, example));
                }
            }
            let batch: Vec<&RankExample> = picks.iter().map(|j| &cache[j].1).collect();
            let loss = net.train_step(&mut adam, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("ranking loss"));
            }
            losses.push(loss);
        }
        write(
            &self.out.join("idrank_metrics.csv"),
            rank_metrics_csv(&losses),
        )?;
        net.save_with_meta(
            &self.checkpoint_path(Network::IdRank),
            self.checkpoint_meta(r.steps),
        )?;
        Ok(losses)
    }

    fn select_inputs<'a>(
        &self,
        dataset: &'a SynthDataset,
        ids: &[String],
    ) -> Result<Vec<&'a SynthSample>> {
        if ids.is_empty() {
            let limit = self.config.sampling.max_inputs.unwrap_or(usize::MAX);
            return Ok(dataset.split(Split::Val).take(limit).collect());
        }
        ids.iter()
            .map(|id| {
                let idx = parse_input_id(id)?;
                dataset
                    .samples
                    .get(idx)
                    .ok_or_else(|| Error::Config(format!("input {id} is not in the dataset")))
            })
            .collect()
    }

    /// Samples shapes, ranks them, samples expressions, and writes meshes
    /// built from the selected shape. `ids` defaults to the validation split.
    pub fn reconstruct(
        &self,
        ids: &[String],
        write_meshes: bool,
    ) -> Result<Vec<ReconstructionSet>> {
        self.record_config()?;
        let assets = self.load_assets()?;
        let dataset = self.load_dataset()?;
        let idgen = self.load_diffusion(Network::IdGen)?;
        let expgen = self.load_diffusion(Network::ExpGen)?;
        let ranker = self.load_ranker()?;
        let s = &self.config.sampling;
        let (n, m) = (s.n_samples, self.config.n_expressions());
        let shape_steps = s.step_count.unwrap_or(idgen.schedule.steps());
        let expr_steps = s.step_count.unwrap_or(expgen.schedule.steps());
        let inputs = self.select_inputs(&dataset, ids)?;
        let dir = self.recon_dir();
        let mut out = Vec::with_capacity(inputs.len());
        for sample in inputs {
            let id = input_id(sample);
            let seed = sub_seed(self.seed(), "reconstruct", &id);
            let shapes = sample_batch(
                &idgen,
                &idgen.schedule,
                sample.id_condition(),
                n,
                seed,
                shape_steps,
            )?;
            let scores = if n == 1 {
                vec![0.0]
            } else {
                let feats = shapes
                    .iter()
                    .map(|b| Ok(flatten(&neutral_frontal(&assets, b)?)))
                    .collect::<Result<Vec<_>>>()?;
                ranker.scores(&feats, sample.id_condition())?
            };
            let selected = select(&scores)?;
            let shape = shapes[selected].clone();
            let expr_seed = sub_seed(self.seed(), "reconstruct-expression", &id);
            let expressions = sample_batch(
                &expgen,
                &expgen.schedule,
                &sample.joint_condition(),
                m,
                expr_seed,
                expr_steps,
            )?;
            let mut meshes = Vec::new();
            if write_meshes {
                let beta = CoefficientVector::shape(shape.clone())?;
                let pose = CoefficientVector::zeros(CoeffKind::Pose, assets.pose_dim());
                for (i, psi) in expressions.iter().enumerate() {
                    let mesh = assets.reconstruct(
                        &beta,
                        &pose,
                        &CoefficientVector::expression(psi.clone())?,
                    )?;
                    let name = format!("mesh_{i:03}.obj");
                    fs::create_dir_all(dir.join(&id))?;
                    write_obj(&dir.join(&id).join(&name), &mesh.vertices, &assets.faces)?;
                    meshes.push(name);
                }
            }
            let set = ReconstructionSet {
                seed,
                input: id.clone(),
                selected,
                shape,
                scores,
                shape_candidates: shapes,
                expressions,
                meshes,
            };
            write(&dir.join(&id).join("sidecar.json"), to_json(&set)?)?;
            out.push(set);
        }
        let index = json!({
            "seed": self.seed(),
            "n_samples": n,
            "n_expressions": m,
            "inputs": out.iter().map(|r| r.input.clone()).collect::<Vec<_>>(),
        });
        write(&dir.join("index.json"), to_json(&index)?)?;
        Ok(out)
    }

    pub fn load_reconstructions(&self) -> Result<Vec<ReconstructionSet>> {
        let dir = self.recon_dir();
        let index_path = dir.join("index.json");
        Self::require(&index_path, "reconstruct")?;
        let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
        let ids = index["inputs"]
            .as_array()
            .ok_or_else(|| Error::Config("reconstruction index lacks an input list".into()))?;
        ids.iter()
            .map(|id| {
                let id = id.as_str().unwrap_or_default();
                let text = fs::read_to_string(dir.join(id).join("sidecar.json"))?;
                Ok(serde_json::from_str(&text)?)
            })
            .collect()
    }

    fn sample_for<'a>(dataset: &'a SynthDataset, id: &str) -> Result<&'a SynthSample> {
        let idx = parse_input_id(id)?;
        dataset
            .samples
            .get(idx)
            .ok_or_else(|| Error::Config(format!("reconstruction {id} does not match the dataset")))
    }

    /// Ranking quality of the stored reconstructions against ground truth.
    pub fn rank_report(&self, k_percent: f64) -> Result<RankSummary> {
        self.record_config()?;
        let assets = self.load_assets()?;
        let dataset = self.load_dataset()?;
        let recon = self.load_reconstructions()?;
        if recon.is_empty() {
            return Err(Error::Empty("reconstructions"));
        }
        let mut rows = Vec::new();
        let (mut precision, mut iou, mut ratio, mut wins) = (0.0, 0.0, 0.0, 0usize);
        for set in &recon {
            let sample = Self::sample_for(&dataset, &set.input)?;
            let gt = neutral_frontal(&assets, &sample.beta)?;
            let d = set
                .shape_candidates
                .iter()
                .map(|b| vertex_distance(&neutral_frontal(&assets, b)?, &gt))
                .collect::<Result<Vec<_>>>()?;
            let m = rank_metrics(&predicted_order(&set.scores), &gt_order(&d), &d, k_percent)?;
            precision += m.precision;
            iou += m.iou;
            ratio += m.error_ratio;
            let row = RankReportRow::new(set.input.clone(), &set.scores, &d)?;
            wins += (row.selected_distance <= row.mean_distance) as usize;
            rows.push(row);
        }
        let n = recon.len() as f64;
        let summary = RankSummary {
            seed: self.seed(),
            inputs: recon.len(),
            k_percent,
            mean_precision: precision / n,
            mean_iou: iou / n,
            mean_error_ratio: ratio / n,
            selected_below_mean: wins as f64 / n,
        };
        write(&self.out.join("rank_report.csv"), rank_report_csv(&rows))?;
        write(&self.out.join("rank_report.json"), to_json(&summary)?)?;
        Ok(summary)
    }

    fn frontal_landmarks(&self, assets: &ModelAssets) -> Vec<usize> {
        if !self.config.eval.landmarks_only {
            return Vec::new();
        }
        let frontal = assets.frontal_indices();
        assets
            .landmarks
            .iter()
            .filter_map(|l| frontal.binary_search(l).ok())
            .collect()
    }

    /// Aligned mean frontal-vertex error (mm) of a neutral shape.
    fn shape_error(
        &self,
        assets: &ModelAssets,
        beta: &[f64],
        gt: &[Vec3],
        landmarks: &[usize],
    ) -> Result<f64> {
        EvalPair {
            id: String::new(),
            predicted: Mesh {
                vertices: neutral_frontal(assets, beta)?,
            },
            ground_truth: gt.to_vec(),
            visible: vec![true; gt.len()],
            landmarks: landmarks.to_vec(),
            occluded: false,
        }
        .mean_distance(self.config.eval.alignment)
    }

    fn load_baseline(&self) -> Result<Option<BaselineSet>> {
        let path = self.out.join(BASELINE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    /// Prior draws for every reconstructed input, and ranking on mixed
    /// prior/model pools when a ranker is available.
    pub fn baseline_flame(&self) -> Result<(BaselineSet, Vec<MixedPoolRow>)> {
        self.record_config()?;
        let assets = self.load_assets()?;
        let dataset = self.load_dataset()?;
        let recon = self.load_reconstructions()?;
        let n = self.config.sampling.n_samples;
        let mut baseline = BaselineSet {
            seed: self.seed(),
            coeff_scale: self.config.data.coeff_scale,
            inputs: BTreeMap::new(),
        };
        for set in &recon {
            let draws = self.prior_draws(n, sub_seed(self.seed(), "baseline-flame", &set.input));
            baseline.inputs.insert(set.input.clone(), draws);
        }
        write(&self.out.join(BASELINE_FILE), to_json(&baseline)?)?;

        let mut rows = Vec::new();
        if self.checkpoint_path(Network::IdRank).exists() {
            let ranker = self.load_ranker()?;
            let landmarks = self.frontal_landmarks(&assets);
            let half = self.config.eval.mixed_pool / 2;
            for set in &recon {
                let prior = &baseline.inputs[&set.input];
                if set.shape_candidates.len() < half || prior.len() < half {
                    return Err(Error::Config(format!(
                        "mixed pools of {} need at least {half} samples per source",
                        self.config.eval.mixed_pool
                    )));
                }
                let pool: Vec<Vec<f64>> = set.shape_candidates[..half]
                    .iter()
                    .chain(&prior[..half])
                    .cloned()
                    .collect();
                let sample = Self::sample_for(&dataset, &set.input)?;
                let gt = neutral_frontal(&assets, &sample.beta)?;
                let feats = pool
                    .iter()
                    .map(|b| Ok(flatten(&neutral_frontal(&assets, b)?)))
                    .collect::<Result<Vec<_>>>()?;
                let selected = select(&ranker.scores(&feats, sample.id_condition())?)?;
                let err = pool
                    .iter()
                    .map(|b| self.shape_error(&assets, b, &gt, &landmarks))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(MixedPoolRow {
                    input: set.input.clone(),
                    selected,
                    selected_from_model: selected < half,
                    ranked_error_mm: err[selected],
                    pool_average_mm: mean(&err),
                    model_average_mm: mean(&err[..half]),
                    prior_average_mm: mean(&err[half..]),
                });
            }
            let mut csv = format!(
                "# {DISTANCE_NOTE}\ninput,selected,selected_from_model,ranked_error_mm,pool_average_mm,model_average_mm,prior_average_mm\n"
            );
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.input,
                    r.selected,
                    r.selected_from_model as u8,
                    r.ranked_error_mm,
                    r.pool_average_mm,
                    r.model_average_mm,
                    r.prior_average_mm
                ));
            }
            write(&self.out.join("baseline_mixed.csv"), csv)?;
            let below = rows
                .iter()
                .filter(|r| r.ranked_error_mm < r.pool_average_mm)
                .count();
            let summary = json!({
                "seed": self.seed(),
                "pool_size": 2 * half,
                "inputs": rows.len(),
                "ranked_below_pool_average": below as f64 / rows.len().max(1) as f64,
                "selected_from_model": rows.iter().filter(|r| r.selected_from_model).count(),
            });
            write(&self.out.join("baseline_mixed.json"), to_json(&summary)?)?;
        }
        Ok((baseline, rows))
    }

    /// Scores the stored reconstructions. With `self_check` every prediction
    /// is replaced by its ground truth, which must score exactly zero.
    pub fn evaluate(&self, protocol: Protocol, self_check: bool) -> Result<Evaluation> {
        self.record_config()?;
        let assets = self.load_assets()?;
        let dataset = self.load_dataset()?;
        let recon = self.load_reconstructions()?;
        if recon.is_empty() {
            return Err(Error::Empty("reconstructions"));
        }
        let baseline = self.load_baseline()?;
        let mode = self.config.eval.alignment;
        let mut rows: BTreeMap<&'static str, Vec<PairError>> = BTreeMap::new();
        let mut push = |method: &'static str, id: &str, occ: &Occlusion, e: f64| {
            rows.entry(method).or_default().push(PairError {
                id: id.to_string(),
                occluded: occ.is_occluded(),
                error_mm: e,
            })
        };
        match protocol {
            Protocol::NowStyle => {
                let landmarks = self.frontal_landmarks(&assets);
                for set in &recon {
                    let sample = Self::sample_for(&dataset, &set.input)?;
                    let gt = neutral_frontal(&assets, &sample.beta)?;
                    let occ = &sample.occlusion;
                    if self_check {
                        push(
                            "ground_truth",
                            &set.input,
                            occ,
                            self.shape_error(&assets, &sample.beta, &gt, &landmarks)?,
                        );
                        continue;
                    }
                    let err = set
                        .shape_candidates
                        .iter()
                        .map(|b| self.shape_error(&assets, b, &gt, &landmarks))
                        .collect::<Result<Vec<_>>>()?;
                    push("ranked_sample", &set.input, occ, err[set.selected]);
                    push("average_of_samples", &set.input, occ, mean(&err));
                    push(
                        "best_of_10",
                        &set.input,
                        occ,
                        min(&err[..err.len().min(10)]),
                    );
                    push("best_of_all", &set.input, occ, min(&err));
                    if let Some(prior) = baseline.as_ref().and_then(|b| b.inputs.get(&set.input)) {
                        let e = prior
                            .iter()
                            .map(|b| self.shape_error(&assets, b, &gt, &landmarks))
                            .collect::<Result<Vec<_>>>()?;
                        push("flame_prior", &set.input, occ, mean(&e));
                    }
                }
            }
            Protocol::Co545Style => {
                let camera = Camera::default();
                let landmarks = if self.config.eval.landmarks_only {
                    assets.landmarks.clone()
                } else {
                    Vec::new()
                };
                for set in &recon {
                    let sample = Self::sample_for(&dataset, &set.input)?;
                    let (gt, _) = make_gt_mesh(&assets, &sample.beta, &sample.psi)?;
                    let mask = occlusion_mask(&sample.occlusion, &assets, &gt)?;
                    let item = build_masked_protocol(
                        &assets,
                        std::slice::from_ref(&gt),
                        &[mask],
                        &camera,
                    )?
                    .remove(0);
                    let rmse = |beta: &[f64], psi: &[f64]| -> Result<f64> {
                        let (pred, _) = make_gt_mesh(&assets, beta, psi)?;
                        item.pair(pred, &gt, &landmarks).rmse(mode)
                    };
                    let occ = &sample.occlusion;
                    if self_check {
                        push(
                            "ground_truth",
                            &set.input,
                            occ,
                            rmse(&sample.beta, &sample.psi)?,
                        );
                        continue;
                    }
                    let ranked = set
                        .expressions
                        .iter()
                        .map(|psi| rmse(&set.shape, psi))
                        .collect::<Result<Vec<_>>>()?;
                    let m = set.expressions.len();
                    let average = set
                        .shape_candidates
                        .iter()
                        .enumerate()
                        .map(|(i, b)| rmse(b, &set.expressions[i % m]))
                        .collect::<Result<Vec<_>>>()?;
                    push("ranked_sample", &set.input, occ, mean(&ranked));
                    push("average_of_samples", &set.input, occ, mean(&average));
                    if let Some(prior) = baseline.as_ref().and_then(|b| b.inputs.get(&set.input)) {
                        let e = prior
                            .iter()
                            .enumerate()
                            .map(|(i, b)| rmse(b, &set.expressions[i % m]))
                            .collect::<Result<Vec<_>>>()?;
                        push("flame_prior", &set.input, occ, mean(&e));
                    }
                }
            }
        }
        let mut reports = Vec::new();
        let mut methods = Vec::new();
        let mut csv = format!("# {DISTANCE_NOTE}\nmethod,id,occluded,error_mm\n");
        for (method, pairs) in rows {
            let report = EvalReport::new(protocol.name(), mode, method, pairs)?;
            for p in &report.pairs {
                csv.push_str(&format!(
                    "{method},{},{},{}\n",
                    p.id, p.occluded as u8, p.error_mm
                ));
            }
            let split = report.split()?;
            let pick = |label: &str| split.iter().find(|r| r.subset == label).map(|r| r.summary);
            methods.push(MethodReport {
                method: method.to_string(),
                all: report.summary,
                occluded: pick("occluded"),
                unoccluded: pick("unoccluded"),
            });
            reports.push(report);
        }
        let evaluation = Evaluation {
            seed: self.seed(),
            protocol: protocol.name().into(),
            alignment: mode.as_str().into(),
            distances: DISTANCE_NOTE.into(),
            methods,
            reports,
        };
        let stem = if self_check {
            format!("eval_{}_self", protocol.name())
        } else {
            format!("eval_{}", protocol.name())
        };
        write(&self.out.join(format!("{stem}.csv")), csv)?;
        write(
            &self.out.join(format!("{stem}.json")),
            to_json(&evaluation)?,
        )?;
        Ok(evaluation)
    }

    /// Writes one OBJ mesh and returns its path.
    pub fn export_mesh(&self, source: &MeshSource, file: Option<&Path>) -> Result<PathBuf> {
        let assets = self.load_assets()?;
        let pose_zero = CoefficientVector::zeros(CoeffKind::Pose, assets.pose_dim());
        let (mesh, name) = match source {
            MeshSource::Template => (assets.template.clone(), "template".to_string()),
            MeshSource::Input(id) => {
                let dataset = self.load_dataset()?;
                let sample = Self::sample_for(&dataset, id)?;
                (
                    make_gt_mesh(&assets, &sample.beta, &sample.psi)?.0.vertices,
                    id.clone(),
                )
            }
            MeshSource::Coefficients(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read coefficients {}: {e}", path.display()))
                })?;
                let c: CoeffFile = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("coefficient file: {e}")))?;
                let pad = |mut v: Vec<f64>, dim: usize, what: &str| -> Result<Vec<f64>> {
                    if v.len() > dim {
                        return Err(Error::Config(format!(
                            "{what} has {} values, the model takes {dim}",
                            v.len()
                        )));
                    }
                    v.resize(dim, 0.0);
                    Ok(v)
                };
                let beta = CoefficientVector::shape(pad(c.shape, assets.shape_dim, "shape")?)?;
                let psi = CoefficientVector::expression(pad(
                    c.expression,
                    assets.expr_dim,
                    "expression",
                )?)?;
                let theta = if c.pose.is_empty() {
                    pose_zero
                } else {
                    CoefficientVector::pose(pad(c.pose, assets.pose_dim(), "pose")?)?
                };
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("mesh")
                    .to_string();
                (assets.reconstruct(&beta, &theta, &psi)?.vertices, stem)
            }
        };
        let path = file
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.out.join(format!("{name}.obj")));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        write_obj(&path, &mesh, &assets.faces)?;
        Ok(path)
    }
}

/// Candidate list for ranking: frontal coordinates and distances to the
/// sample's neutral ground truth.
pub fn ranking_example(
    assets: &ModelAssets,
    sample: &SynthSample,
    shapes: &[Vec<f64>],
) -> Result<RankExample> {
    let gt = neutral_frontal(assets, &sample.beta)?;
    let mut candidates = Vec::with_capacity(shapes.len());
    let mut distances = Vec::with_capacity(shapes.len());
    for b in shapes {
        let f = neutral_frontal(assets, b)?;
        distances.push(vertex_distance(&f, &gt)?);
        candidates.push(flatten(&f));
    }
    Ok(RankExample {
        cond: sample.id_condition().to_vec(),
        candidates,
        distances,
    })
}

/// Trailing moving average window of the ranking loss log.
pub const LOSS_WINDOW: usize = 50;

/// `step,loss,moving_average` lines.
pub fn rank_metrics_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss,moving_average\n");
    for (i, l) in losses.iter().enumerate() {
        let from = (i + 1).saturating_sub(LOSS_WINDOW);
        s.push_str(&format!("{},{},{}\n", i + 1, l, mean(&losses[from..=i])));
    }
    s
}

/// Image-plane band hidden by a synthetic occluder. The occluded block of
/// the embedding maps to the same fraction of face height, counted from
/// the top, so eye occlusions hide the upper face and mouth occlusions the
/// lower face.
pub fn occlusion_mask(occ: &Occlusion, assets: &ModelAssets, mesh: &Mesh) -> Result<OcclusionMask> {
    if !occ.is_occluded() {
        return Ok(OcclusionMask::None);
    }
    let frontal = assets.extract_frontal(mesh)?;
    let camera = Camera::default();
    let ys = frontal
        .iter()
        .map(|&p| Ok(camera.project(p)?[1]))
        .collect::<Result<Vec<_>>>()?;
    let top = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let height = top - ys.iter().copied().fold(f64::INFINITY, f64::min);
    let reach = 10.0 * height.max(1.0);
    Ok(OcclusionMask::Region {
        min: [-reach, top - (occ.start + occ.rate) * height],
        max: [reach, top - occ.start * height],
    })
}
