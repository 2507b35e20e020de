//! The train → attack → defend → evaluate pipeline.
//!
//! Non-adaptive attacks are generated once against the undefended model and
//! replayed under every defense; adaptive attacks are generated separately
//! for each defense, through it. Adversarial inputs can be cached in an
//! archive keyed by a fingerprint of the configuration and model weights.
//!
//! Every random stream derives from the top-level seed, per-sample work
//! uses per-sample sub-seeds, and all reductions run in a fixed order, so a
//! report depends only on the configuration and not on the thread count.

use std::time::Instant;

use rayon::prelude::*;
use resonance::archive::{Archive, ArchiveKind};
use resonance::attacks::{attack_classifier, AttackConfig};
use resonance::defense::DefenseMode;
use resonance::model::{train, TrainingMeta};
use resonance::seed::derive_seed;
use resonance::stereo::{
    attack_stereo, gen_random_dot_stereogram, patch_encoder, stereo_metrics, subsampled_patch_encoder,
    MatcherConfig, StereoMatcher, StereoMetrics, StereoPair,
};
use resonance::{Defense, DefenseConfig, LabeledImages, Model, Tensor, WeightBundle};
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, DenseTarget, EncoderKind, ExperimentConfig};
use crate::data::{gen_synthetic_shapes, load_mnist_idx, ShapesConfig, SHAPE_CLASSES};
use crate::error::{Error, Result, StageExt};
use crate::report::{hex, ExperimentReport, Outcomes, ReportMeta, ReportRow, Task, Timing};

const TRAIN_DATA_STREAM: u64 = 1;
const TEST_DATA_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;
const ATTACK_STREAM: u64 = 5;
const PAIR_STREAM: u64 = 6;

/// Name of the tap every stereo encoder exposes.
pub const STEREO_TAP: &str = "features";

/// SHA-256 of the configuration's canonical JSON form, excluding the cache
/// location.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.cache = None;
    let bytes = serde_json::to_vec(&c).expect("configs always serialize");
    hex(&Sha256::digest(&bytes))
}

/// Digest of a model's parameter values.
pub fn model_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Train and test sets of a classification config; the test set is cut to
/// `sample_count`.
pub fn load_classification_data(cfg: &ExperimentConfig) -> Result<(LabeledImages, LabeledImages, usize)> {
    match &cfg.dataset {
        DatasetConfig::SyntheticShapes {
            train_count,
            size,
            noise,
        } => {
            let mk = |n, stream| {
                gen_synthetic_shapes(&ShapesConfig {
                    size: *size,
                    ..ShapesConfig::new(n, *noise, derive_seed(cfg.seed, stream, 0))
                })
            };
            Ok((
                mk(*train_count, TRAIN_DATA_STREAM)?,
                mk(cfg.sample_count, TEST_DATA_STREAM)?,
                SHAPE_CLASSES.len(),
            ))
        }
        DatasetConfig::MnistIdx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_mnist_idx(train_images, train_labels)?;
            let test = load_mnist_idx(test_images, test_labels)?;
            let n = cfg.sample_count.min(test.len());
            Ok((train, test.take(n)?, 10))
        }
        DatasetConfig::StereoRds { .. } => Err(Error::Config("stereo datasets have no classifier".into())),
    }
}

/// The classifier of a config: loaded from `model.weights` when given,
/// trained otherwise.
pub fn build_classifier(cfg: &ExperimentConfig, train_set: &LabeledImages, classes: usize) -> Result<(Model, WeightBundle)> {
    let shape = train_set.images.shape();
    let input = [shape[1], shape[2], shape[3]];
    let spec = cfg.model.resolve(input, classes);
    if let Some(path) = &cfg.model.weights {
        let bundle = WeightBundle::load(path)?;
        let model = Model::from_bundle(spec, &bundle)?;
        return Ok((model, bundle));
    }
    let mut model = Model::new(spec, derive_seed(cfg.seed, INIT_STREAM, 0))?;
    let hp = cfg.training.to_train_config(derive_seed(cfg.seed, SHUFFLE_STREAM, 0));
    let bundle = train(&mut model, train_set, None, &hp)?;
    Ok((model, bundle))
}

fn attack_seed(cfg: &ExperimentConfig, a: &AttackConfig) -> AttackConfig {
    AttackConfig {
        seed: derive_seed(cfg.seed, ATTACK_STREAM, a.seed),
        ..a.clone()
    }
}

/// Adversarial inputs keyed by `attack|defense` (`defense = *` for
/// transfer attacks), with a fingerprint of what produced them.
struct AdversarialStore {
    fingerprint: String,
    tensors: Vec<(String, Tensor)>,
    /// Entries read from the cache file.
    loaded: usize,
}

impl AdversarialStore {
    fn open(cfg: &ExperimentConfig, fingerprint: String) -> Self {
        if let Some(path) = &cfg.cache {
            if let Ok(a) = Archive::load(path) {
                if a.kind == ArchiveKind::AdversarialCache && a.meta("fingerprint") == Some(fingerprint.as_str()) {
                    return Self {
                        fingerprint,
                        loaded: a.tensors.len(),
                        tensors: a.tensors,
                    };
                }
            }
        }
        Self {
            fingerprint,
            tensors: Vec::new(),
            loaded: 0,
        }
    }

    fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    fn get_or_insert(&mut self, key: String, make: impl FnOnce() -> Result<Tensor>) -> Result<(Tensor, bool)> {
        if let Some(t) = self.get(&key) {
            return Ok((t.clone(), false));
        }
        let t = make()?;
        self.tensors.push((key, t.clone()));
        Ok((t, true))
    }

    fn to_archive(&self) -> Archive {
        let mut a = Archive::new(ArchiveKind::AdversarialCache);
        a.meta.push(("fingerprint".into(), self.fingerprint.clone()));
        a.tensors = self.tensors.clone();
        a
    }

    fn persist(&self, cfg: &ExperimentConfig) -> Result<()> {
        match &cfg.cache {
            Some(path) if self.tensors.len() != self.loaded => Ok(self.to_archive().save(path)?),
            _ => Ok(()),
        }
    }
}

fn transfer_key(attack: &str) -> String {
    format!("{attack}|*")
}

fn adaptive_key(attack: &str, defense: &str) -> String {
    format!("{attack}|{defense}")
}

/// Intermediate state of a classification run.
pub struct ClassificationRun {
    pub model: Model,
    pub bundle: WeightBundle,
    pub test: LabeledImages,
    pub defenses: Vec<DefenseConfig>,
    pub timings: Vec<Timing>,
}

/// Loads data and builds (or trains) the model.
pub fn prepare_classification(cfg: &ExperimentConfig) -> Result<ClassificationRun> {
    let (train_set, test, classes) = load_classification_data(cfg).stage("dataset")?;
    let ((model, bundle), secs) = timed(|| build_classifier(cfg, &train_set, classes)).stage("model")?;
    let defenses = cfg.defense_list();
    for d in &defenses {
        Defense::new(&model, d.clone()).stage("defense")?;
    }
    Ok(ClassificationRun {
        model,
        bundle,
        test,
        defenses,
        timings: vec![Timing {
            stage: if cfg.model.weights.is_some() { "load_model" } else { "train" }.into(),
            seconds: secs,
            steps: None,
            samples: None,
        }],
    })
}

fn generate_classification(
    cfg: &ExperimentConfig,
    run: &mut ClassificationRun,
    store: &mut AdversarialStore,
) -> Result<()> {
    let defenses: Vec<Defense> = run
        .defenses
        .iter()
        .map(|d| Defense::new(&run.model, d.clone()))
        .collect::<resonance::Result<_>>()?;
    let n = run.test.len();
    for a in &cfg.attacks {
        let ac = attack_seed(cfg, a);
        let label = a.label();
        let targets: Vec<(String, &Defense)> = if a.adaptive {
            defenses.iter().map(|d| (adaptive_key(&label, &d.config().label()), d)).collect()
        } else {
            vec![(transfer_key(&label), &defenses[0])]
        };
        for (key, def) in targets {
            let start = Instant::now();
            let (_, fresh) = store.get_or_insert(key.clone(), || {
                Ok(attack_classifier(def, &run.test.images, &run.test.labels, &ac)?)
            })?;
            if fresh {
                run.timings.push(Timing {
                    stage: format!("attack:{key}"),
                    seconds: start.elapsed().as_secs_f64(),
                    steps: Some(ac.steps),
                    samples: Some(n),
                });
            }
        }
    }
    Ok(())
}

fn evaluate_classification(
    cfg: &ExperimentConfig,
    run: &ClassificationRun,
    store: &AdversarialStore,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(run.defenses.len());
    for d in &run.defenses {
        let def = Defense::new(&run.model, d.clone())?;
        let label = d.label();
        let mut outcomes = vec![Outcomes::Correct(def.correct(&run.test.images, &run.test.labels)?)];
        for a in &cfg.attacks {
            let key = if a.adaptive {
                adaptive_key(&a.label(), &label)
            } else {
                transfer_key(&a.label())
            };
            let x = store
                .get(&key)
                .ok_or_else(|| Error::Integrity(format!("missing adversarial set `{key}`")))?;
            outcomes.push(Outcomes::Correct(def.correct(x, &run.test.labels)?));
        }
        rows.push(ReportRow::from_outcomes(label, outcomes)?);
    }
    Ok(rows)
}

/// Generates (or loads) the adversarial sets of a classification config
/// and returns them as an archive.
pub fn classification_attacks(cfg: &ExperimentConfig) -> Result<Archive> {
    let mut run = prepare_classification(cfg)?;
    let mut store = AdversarialStore::open(cfg, fingerprint(cfg, &run.model));
    generate_classification(cfg, &mut run, &mut store).stage("attack")?;
    store.persist(cfg).stage("cache")?;
    Ok(store.to_archive())
}

fn fingerprint(cfg: &ExperimentConfig, model: &Model) -> String {
    let mut h = Sha256::new();
    h.update(config_hash(cfg).as_bytes());
    h.update(model_digest(model).as_bytes());
    hex(&h.finalize())
}

fn run_classification(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut run = prepare_classification(cfg)?;
    let mut store = AdversarialStore::open(cfg, fingerprint(cfg, &run.model));
    generate_classification(cfg, &mut run, &mut store).stage("attack")?;
    store.persist(cfg).stage("cache")?;
    let (rows, secs) = timed(|| evaluate_classification(cfg, &run, &store)).stage("evaluate")?;
    run.timings.push(Timing {
        stage: "evaluate".into(),
        seconds: secs,
        steps: None,
        samples: None,
    });
    let report = ExperimentReport::new(
        Task::Classification,
        cfg.attacks.iter().map(AttackConfig::label).collect(),
        rows,
        meta(cfg, run.timings),
    )
    .stage("report")?;
    Ok(report)
}

fn meta(cfg: &ExperimentConfig, timings: Vec<Timing>) -> ReportMeta {
    ReportMeta {
        seed: cfg.seed,
        sample_count: cfg.sample_count,
        config_hash: config_hash(cfg),
        timings,
    }
}

/// Stereo pairs, encoder and defense list of a stereo config.
pub struct StereoSetup {
    pub pairs: Vec<StereoPair>,
    pub encoder: Model,
    pub matcher: MatcherConfig,
    pub defenses: Vec<DefenseConfig>,
}

impl StereoSetup {
    pub fn matchers(&self) -> Result<Vec<StereoMatcher<'_>>> {
        self.defenses
            .iter()
            .map(|d| Ok(StereoMatcher::new(&self.encoder, STEREO_TAP, d.clone(), self.matcher.clone())?))
            .collect()
    }
}

/// Generates the stereograms and builds the matcher of a stereo config.
pub fn prepare_stereo(cfg: &ExperimentConfig) -> Result<StereoSetup> {
    let DatasetConfig::StereoRds {
        height,
        width,
        d_max,
        structure,
    } = &cfg.dataset
    else {
        return Err(Error::Config("not a stereo dataset".into()));
    };
    let (h, w, d_max) = (*height, *width, *d_max);
    let bs = structure.to_block_structure();
    let pairs = (0..cfg.sample_count)
        .into_par_iter()
        .map(|i| gen_random_dot_stereogram(h, w, d_max, &bs, derive_seed(cfg.seed, PAIR_STREAM, i as u64)))
        .collect::<resonance::Result<Vec<_>>>()
        .stage("dataset")?;
    let m = &cfg.matcher;
    let encoder = match m.encoder {
        EncoderKind::SubsampledPatch => subsampled_patch_encoder([1, h, w], m.stride, m.patch, m.pad_mode),
        EncoderKind::Patch => patch_encoder([1, h, w], m.patch, m.stride, m.pad_mode),
    }
    .stage("model")?;
    let defenses = cfg
        .defense_list()
        .into_iter()
        .map(|d| match d.mode {
            DefenseMode::Sr | DefenseMode::LatentSmooth if d.tap.is_none() => DefenseConfig {
                tap: Some(STEREO_TAP.into()),
                ..d
            },
            _ => d,
        })
        .collect();
    Ok(StereoSetup {
        pairs,
        encoder,
        matcher: MatcherConfig {
            d_max,
            temperature: m.temperature_for(structure.contrast),
            candidate_pad: m.candidate_pad,
        },
        defenses,
    })
}

fn pair_key(base: &str, i: usize, side: &str) -> String {
    format!("{base}|{i}|{side}")
}

fn generate_stereo(
    cfg: &ExperimentConfig,
    setup: &StereoSetup,
    store: &mut AdversarialStore,
    timings: &mut Vec<Timing>,
) -> Result<()> {
    let matchers = setup.matchers()?;
    let clean_targets: Option<Vec<Tensor>> = match cfg.matcher.target {
        DenseTarget::GroundTruth => None,
        DenseTarget::CleanPrediction => Some(
            setup
                .pairs
                .par_iter()
                .map(|p| Ok(matchers[0].predict(p)?.values))
                .collect::<Result<_>>()?,
        ),
    };
    for a in &cfg.attacks {
        let label = a.label();
        let targets: Vec<(String, &StereoMatcher)> = if a.adaptive {
            matchers
                .iter()
                .map(|m| (adaptive_key(&label, &m.defense().config().label()), m))
                .collect()
        } else {
            vec![(transfer_key(&label), &matchers[0])]
        };
        for (key, matcher) in targets {
            if store.get(&pair_key(&key, 0, "left")).is_some() {
                continue;
            }
            let start = Instant::now();
            let advs = setup
                .pairs
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let ac = AttackConfig {
                        seed: derive_seed(cfg.seed, ATTACK_STREAM, derive_seed(a.seed, 0, i as u64)),
                        ..a.clone()
                    };
                    let target = match &clean_targets {
                        Some(t) => &t[i],
                        None => &p.gt_disparity,
                    };
                    Ok(attack_stereo(matcher, p, target, &ac)?)
                })
                .collect::<Result<Vec<_>>>()?;
            timings.push(Timing {
                stage: format!("attack:{key}"),
                seconds: start.elapsed().as_secs_f64(),
                steps: Some(a.steps),
                samples: Some(setup.pairs.len()),
            });
            for (i, (l, r)) in advs.into_iter().enumerate() {
                store.tensors.push((pair_key(&key, i, "left"), l));
                store.tensors.push((pair_key(&key, i, "right"), r));
            }
        }
    }
    Ok(())
}

fn pair_metrics(m: &StereoMatcher, p: &StereoPair, left: &Tensor, right: &Tensor) -> Result<StereoMetrics> {
    let pred = m.predict_images(left, right)?;
    Ok(stereo_metrics(&pred, &p.gt_disparity, &p.valid)?)
}

fn evaluate_stereo(cfg: &ExperimentConfig, setup: &StereoSetup, store: &AdversarialStore) -> Result<Vec<ReportRow>> {
    let matchers = setup.matchers()?;
    let mut rows = Vec::with_capacity(matchers.len());
    for m in &matchers {
        let label = m.defense().config().label();
        let clean = setup
            .pairs
            .par_iter()
            .map(|p| pair_metrics(m, p, &p.left, &p.right))
            .collect::<Result<Vec<_>>>()?;
        let mut outcomes = vec![Outcomes::Dense(clean)];
        for a in &cfg.attacks {
            let key = if a.adaptive {
                adaptive_key(&a.label(), &label)
            } else {
                transfer_key(&a.label())
            };
            let col = setup
                .pairs
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let get = |side| {
                        store
                            .get(&pair_key(&key, i, side))
                            .ok_or_else(|| Error::Integrity(format!("missing adversarial pair `{key}` #{i}")))
                    };
                    pair_metrics(m, p, get("left")?, get("right")?)
                })
                .collect::<Result<Vec<_>>>()?;
            outcomes.push(Outcomes::Dense(col));
        }
        rows.push(ReportRow::from_outcomes(label, outcomes)?);
    }
    Ok(rows)
}

fn stereo_fingerprint(cfg: &ExperimentConfig, setup: &StereoSetup) -> String {
    fingerprint(cfg, &setup.encoder)
}

/// Generates (or loads) the attacked stereo pairs and returns them as an
/// archive.
pub fn stereo_attacks(cfg: &ExperimentConfig) -> Result<Archive> {
    let setup = prepare_stereo(cfg)?;
    let mut store = AdversarialStore::open(cfg, stereo_fingerprint(cfg, &setup));
    let mut timings = Vec::new();
    generate_stereo(cfg, &setup, &mut store, &mut timings).stage("attack")?;
    store.persist(cfg).stage("cache")?;
    Ok(store.to_archive())
}

fn stereo_pipeline(cfg: &ExperimentConfig) -> Result<(ExperimentReport, StereoSetup, AdversarialStore)> {
    let setup = prepare_stereo(cfg)?;
    let mut store = AdversarialStore::open(cfg, stereo_fingerprint(cfg, &setup));
    let mut timings = Vec::new();
    generate_stereo(cfg, &setup, &mut store, &mut timings).stage("attack")?;
    store.persist(cfg).stage("cache")?;
    let (rows, secs) = timed(|| evaluate_stereo(cfg, &setup, &store)).stage("evaluate")?;
    timings.push(Timing {
        stage: "evaluate".into(),
        seconds: secs,
        steps: None,
        samples: None,
    });
    let report = ExperimentReport::new(
        Task::Stereo,
        cfg.attacks.iter().map(AttackConfig::label).collect(),
        rows,
        meta(cfg, timings),
    )
    .stage("report")?;
    Ok((report, setup, store))
}

fn run_stereo(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(stereo_pipeline(cfg)?.0)
}

fn file_label(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect()
}

/// Runs a stereo config and writes the first pair as images into `dir`:
/// `left.pgm`, `right.pgm`, `anaglyph.ppm`, the ground truth as
/// `gt.pgm`/`gt.disp.txt`, and for every (input set, defense) the
/// prediction as `pred_<set>_<defense>.pgm` plus a `.disp.txt` sidecar.
/// Attacked inputs are written as `<attack>_left.pgm`/`_right.pgm`.
pub fn stereo_demo(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<ExperimentReport> {
    use crate::pnm::{write_anaglyph, write_pgm, write_sidecar};
    cfg.validate().stage("config")?;
    let (report, setup, store) = stereo_pipeline(cfg)?;
    let write = || -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = &setup.pairs[0];
        let d_max = p.d_max as f64;
        write_pgm(&dir.join("left.pgm"), &p.left, 0.0, 1.0)?;
        write_pgm(&dir.join("right.pgm"), &p.right, 0.0, 1.0)?;
        write_anaglyph(&dir.join("anaglyph.ppm"), &p.left, &p.right)?;
        write_pgm(&dir.join("gt.pgm"), &p.gt_disparity, 0.0, d_max)?;
        write_sidecar(&dir.join("gt.disp.txt"), &p.gt_disparity, Some(&p.valid))?;
        let mut sets = vec![("clean".to_string(), p.left.clone(), p.right.clone())];
        for a in cfg.attacks.iter().filter(|a| !a.adaptive) {
            let key = transfer_key(&a.label());
            let get = |side| {
                store
                    .get(&pair_key(&key, 0, side))
                    .cloned()
                    .ok_or_else(|| Error::Integrity(format!("missing adversarial pair `{key}`")))
            };
            let (l, r) = (get("left")?, get("right")?);
            let name = file_label(&a.label());
            write_pgm(&dir.join(format!("{name}_left.pgm")), &l, 0.0, 1.0)?;
            write_pgm(&dir.join(format!("{name}_right.pgm")), &r, 0.0, 1.0)?;
            sets.push((name, l, r));
        }
        for m in setup.matchers()? {
            let def = file_label(&m.defense().config().label());
            for (set, l, r) in &sets {
                let pred = m.predict_images(l, r)?;
                let stem = format!("pred_{set}_{def}");
                write_pgm(&dir.join(format!("{stem}.pgm")), &pred.values, 0.0, d_max)?;
                write_sidecar(&dir.join(format!("{stem}.disp.txt")), &pred.values, Some(&pred.valid_mask))?;
            }
        }
        Ok(())
    };
    write().stage("write")?;
    Ok(report)
}

/// Runs the full pipeline for `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate().stage("config")?;
    if cfg.dataset.is_stereo() {
        run_stereo(cfg)
    } else {
        run_classification(cfg)
    }
}

/// Generates the adversarial sets of `cfg` without evaluating them.
pub fn run_attacks(cfg: &ExperimentConfig) -> Result<Archive> {
    cfg.validate().stage("config")?;
    if cfg.dataset.is_stereo() {
        stereo_attacks(cfg)
    } else {
        classification_attacks(cfg)
    }
}

/// Trains (or loads) the classifier of `cfg` and returns its weights with
/// the clean test accuracy recorded.
pub fn run_training(cfg: &ExperimentConfig) -> Result<WeightBundle> {
    cfg.validate().stage("config")?;
    let run = prepare_classification(cfg)?;
    let acc = run.model.accuracy(&run.test.images, &run.test.labels).stage("evaluate")?;
    Ok(run.model.to_bundle(TrainingMeta {
        val_accuracy: Some(acc),
        ..run.bundle.meta
    }))
}
