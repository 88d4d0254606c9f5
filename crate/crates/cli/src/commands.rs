use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use uapscan::attacks::{self, AttackKind, Provenance};
use uapscan::data::{self, Dataset, Splits};
use uapscan::detector::{self, Calibration, CalibrationData};
use uapscan::latency::{self, BenchConfig, LatencyReport};
use uapscan::metrics::{self, EvalReport, SweepRow};
use uapscan::model::{evaluate_accuracy, train};
use uapscan::{
    ActivationBaseline, Architecture, Checkpoint, Detector, DetectorConfig, ImageBatch, Perturbation, SmallCnn, Tensor,
};

use crate::config::{AttackSpec, DatasetKind, DetectorSpec, RunConfig};
use crate::manifest::Manifest;
use crate::{Cli, Command, SplitArg};

/// Resolved run: config plus the output directory and overrides.
pub struct Run {
    pub cfg: RunConfig,
    pub config_path: PathBuf,
    pub out: PathBuf,
    data_flag: Option<PathBuf>,
}

impl Run {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut cfg = RunConfig::load(&cli.config)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        cfg.validate().context("invalid run config")?;
        let out = match (&cli.out, &cfg.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => o.clone(),
            (None, None) => bail!("no output directory: pass --out or set `out` in the config"),
        };
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            config_path: cli.config.clone(),
            out,
            data_flag: cli.data.clone(),
        })
    }

    pub fn model_path(&self) -> PathBuf {
        self.out.join("model.uaps")
    }

    pub fn baseline_path(&self, label: &str) -> PathBuf {
        self.out.join("baselines").join(format!("{label}.uapb"))
    }

    pub fn perturbation_path(&self, name: &str) -> PathBuf {
        self.out.join("perturbations").join(format!("{name}.uapp"))
    }

    pub fn detector_path(&self, name: &str) -> PathBuf {
        self.out.join("detectors").join(format!("{name}.json"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(format!("{name}.json"))
    }

    fn manifest(&self, command: &str) -> Result<Manifest> {
        Manifest::new(command, self.cfg.seed, &self.config_path)
    }

    fn load_dataset(&self, m: &mut Manifest) -> Result<(Dataset, Architecture)> {
        let root = self.cfg.data_root(self.data_flag.as_deref())?;
        let (ds, arch) = match self.cfg.data.dataset {
            DatasetKind::Mnist => (data::load_mnist(&root)?, Architecture::mnist()),
            DatasetKind::Cifar10 => (data::load_cifar10(&root)?, Architecture::cifar10()),
        };
        m.inputs.insert("dataset:train".into(), ds.train.fingerprint());
        m.inputs.insert("dataset:test".into(), ds.test.fingerprint());
        Ok((ds, arch))
    }

    fn splits(&self, ds: &Dataset) -> Result<Splits> {
        Ok(data::split(&ds.train, &self.cfg.split_spec())?)
    }

    fn eval_set(&self, ds: &Dataset) -> ImageBatch {
        match self.cfg.data.eval_size {
            Some(n) => ds.test.head(n),
            None => ds.test.clone(),
        }
    }

    fn load_model(&self, m: &mut Manifest, arch: &Architecture) -> Result<SmallCnn> {
        let path = self.model_path();
        let ck = Checkpoint::load(&path).with_context(|| "run `train` first".to_string())?;
        m.input(&path)?;
        ensure!(
            ck.model().architecture() == arch,
            "checkpoint is for {} but the dataset needs {}",
            ck.model().architecture().descriptor(),
            arch.descriptor()
        );
        Ok(ck.into_model())
    }

    fn load_baseline(&self, m: &mut Manifest, label: &str) -> Result<ActivationBaseline> {
        let path = self.baseline_path(label);
        let b = ActivationBaseline::load(&path).with_context(|| "run `baseline` first".to_string())?;
        m.input(&path)?;
        Ok(b)
    }

    fn load_detector(&self, m: &mut Manifest, name: &str) -> Result<Detector> {
        let path = self.detector_path(name);
        let config = DetectorConfig::load(&path).with_context(|| format!("run `calibrate` for detector `{name}`"))?;
        m.input(&path)?;
        let baseline = self.load_baseline(m, &config.label())?;
        Ok(Detector::new(baseline, config)?)
    }

    fn load_perturbation(&self, m: &mut Manifest, name: &str) -> Result<Perturbation> {
        let path = self.perturbation_path(name);
        let p = Perturbation::load(&path).with_context(|| format!("run `attack` for `{name}`"))?;
        m.input(&path)?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, m: &mut Manifest, path: &Path, value: &T) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(value)?)?;
        m.output(path)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let r = Run::from_cli(cli)?;
    match &cli.command {
        Command::Train { epochs } => cmd_train(&r, *epochs),
        Command::Baseline => cmd_baseline(&r),
        Command::Attack {
            kind,
            name,
            epsilon,
            iterations,
        } => cmd_attack(&r, (*kind).into(), name.as_deref(), *epsilon, *iterations),
        Command::Calibrate { name, fp_rate } => cmd_calibrate(&r, name.as_deref(), *fp_rate),
        Command::Detect { split, perturbation } => cmd_detect(&r, *split, perturbation.as_deref()),
        Command::Evaluate { attacks, no_detectors } => cmd_evaluate(&r, attacks, *no_detectors),
        Command::Bench {
            batch_size,
            repetitions,
        } => cmd_bench(&r, *batch_size, *repetitions),
        Command::Report { detector } => cmd_report(&r, detector.as_deref()),
    }
}

fn cmd_train(r: &Run, epochs: Option<usize>) -> Result<()> {
    let mut m = r.manifest("train")?;
    let (ds, arch) = r.load_dataset(&mut m)?;
    let splits = r.splits(&ds)?;
    let mut tc = r.cfg.train_config();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    info!("training on {} images for {} epochs", splits.train.len(), tc.epochs);
    let mut ck = train(arch, &splits.train, Some(&splits.validation), &tc)?;
    let acc = evaluate_accuracy(ck.model(), &ds.test)?;
    info!("test accuracy {acc:.4}");
    ck.meta_mut().test_accuracy = Some(acc);
    ck.save(&r.model_path())?;
    m.output(&r.model_path())?;
    m.write(&r.out, "train")?;
    println!("test accuracy {acc:.4}");
    Ok(())
}

fn cmd_baseline(r: &Run) -> Result<()> {
    let mut m = r.manifest("baseline")?;
    let (ds, arch) = r.load_dataset(&mut m)?;
    let model = r.load_model(&mut m, &arch)?;
    let splits = r.splits(&ds)?;
    let mut layers: Vec<_> = r.cfg.detectors.iter().flat_map(|d| d.layers.iter().copied()).collect();
    if layers.is_empty() {
        layers = uapscan::TapLayer::ALL.to_vec();
    }
    let pairs = detector::candidate_pairs(&layers);
    let baselines = detector::fit_baselines(&model, &splits.baseline, &pairs)?;
    for b in &baselines {
        let path = r.baseline_path(&format!("{}{}", b.layer, b.kind.suffix()));
        b.save(&path)?;
        m.output(&path)?;
    }
    info!(
        "fitted {} baselines on {} clean images",
        baselines.len(),
        splits.baseline.len()
    );
    m.write(&r.out, "baseline")?;
    Ok(())
}

fn cmd_attack(
    r: &Run,
    kind: AttackKind,
    name: Option<&str>,
    epsilon: Option<f32>,
    iterations: Option<usize>,
) -> Result<()> {
    let specs: Vec<&AttackSpec> = match name {
        Some(n) => {
            let s = r.cfg.attack(n)?;
            ensure!(
                s.kind == kind,
                "attack `{n}` is a {} attack, not {}",
                s.kind.name(),
                kind.name()
            );
            vec![s]
        }
        None => r.cfg.attacks.iter().filter(|a| a.kind == kind).collect(),
    };
    ensure!(!specs.is_empty(), "no {} attacks in the run config", kind.name());
    let mut m = r.manifest(&format!("attack-{}", kind.name()))?;
    let (ds, arch) = r.load_dataset(&mut m)?;
    let model = r.load_model(&mut m, &arch)?;
    let splits = r.splits(&ds)?;
    for spec in specs {
        let mut spec = spec.clone();
        if epsilon.is_some() {
            spec.epsilon = epsilon;
        }
        if iterations.is_some() {
            spec.iterations = iterations;
        }
        let p = generate(r, &mut m, &model, &splits, &spec)?;
        let path = r.perturbation_path(&spec.name);
        p.save(&path)?;
        m.output(&path)?;
        info!("wrote {}", path.display());
    }
    let tag = name.map_or_else(|| kind.name().to_string(), |n| n.to_string());
    m.write(&r.out, &format!("attack-{tag}"))?;
    Ok(())
}

/// Runs one configured attack.
pub fn generate(
    r: &Run,
    m: &mut Manifest,
    model: &SmallCnn,
    splits: &Splits,
    spec: &AttackSpec,
) -> Result<Perturbation> {
    let cfg = spec.attack_config(r.cfg.seed);
    let attack_data = splits.train.head(r.cfg.data.attack_size);
    info!("{} `{}` on {} images", spec.kind.name(), spec.name, attack_data.len());
    let p: Perturbation = match spec.kind {
        AttackKind::SgdUap => attacks::sgd_uap(model, &attack_data, &cfg)?.into(),
        AttackKind::SgdLayer => attacks::sgd_layer(model, &attack_data, &cfg)?.into(),
        AttackKind::BaselineFeature => {
            let det = spec
                .detector
                .as_deref()
                .context("defense-aware attack needs a detector")?;
            let detector = r.load_detector(m, det)?;
            attacks::baseline_feature_uap(model, &attack_data, Some(&detector.baseline), &cfg)?.into()
        }
        AttackKind::EotPatch => {
            let transforms = spec.transforms.clone().unwrap_or_default();
            attacks::eot_patch(model, &attack_data, &cfg, &transforms)?.into()
        }
        AttackKind::Perlin => {
            let grid = spec.grid.clone().unwrap_or_default();
            let search = attacks::perlin_uap(model, &splits.validation.head(r.cfg.data.attack_size), &grid, &cfg)?;
            search.best.into()
        }
        AttackKind::RandomSign => {
            let shape = model.architecture().image_shape();
            let delta = attacks::random_sign_mask(shape, cfg.epsilon, cfg.seed);
            uapscan::MaskPerturbation::new(delta, cfg.epsilon, Provenance::new(AttackKind::RandomSign, &cfg))?.into()
        }
    };
    Ok(p)
}

fn cmd_calibrate(r: &Run, name: Option<&str>, fp_rate: Option<f64>) -> Result<()> {
    let specs: Vec<&DetectorSpec> = match name {
        Some(n) => vec![r.cfg.detector(n)?],
        None => r.cfg.detectors.iter().collect(),
    };
    ensure!(!specs.is_empty(), "no detectors in the run config");
    let mut m = r.manifest("calibrate")?;
    let (ds, arch) = r.load_dataset(&mut m)?;
    let model = r.load_model(&mut m, &arch)?;
    let splits = r.splits(&ds)?;
    for spec in specs {
        let (config, cal) = calibrate_one(
            r,
            &mut m,
            &model,
            &splits.validation,
            spec,
            fp_rate.unwrap_or(spec.fp_rate),
        )?;
        config.save(&r.detector_path(&spec.name))?;
        m.output(&r.detector_path(&spec.name))?;
        r.write_json(
            &mut m,
            &r.out.join("detectors").join(format!("{}.calibration.json", spec.name)),
            &cal,
        )?;
        println!(
            "{}: {} t={} threshold={:.4} mean AUC {:.4}",
            spec.name,
            config.label(),
            config.top_percentile,
            config.threshold,
            cal.mean_auc
        );
    }
    m.write(
        &r.out,
        name.map_or("calibrate".to_string(), |n| format!("calibrate-{n}"))
            .as_str(),
    )?;
    Ok(())
}

/// Searches the candidate grid against the detector's calibration attacks
/// on `clean`, then sets the threshold for `fp_rate` on the same images.
pub fn calibrate_one(
    r: &Run,
    m: &mut Manifest,
    model: &SmallCnn,
    clean: &ImageBatch,
    spec: &DetectorSpec,
    fp_rate: f64,
) -> Result<(DetectorConfig, Calibration)> {
    let pairs = detector::candidate_pairs(&spec.layers);
    let baselines = pairs
        .iter()
        .map(|(l, k)| r.load_baseline(m, &format!("{l}{}", k.suffix())))
        .collect::<Result<Vec<_>>>()?;
    let (_, clean_tables) = detector::collect_aggregates(model, clean.images(), &pairs)?;
    let mut perturbed = Vec::new();
    for name in &spec.calibrate_with {
        let p = r.load_perturbation(m, name)?;
        let images = p.apply(clean.images(), r.cfg.seed)?;
        perturbed.push(detector::collect_aggregates(model, &images, &pairs)?.1);
    }
    let data = CalibrationData {
        baselines,
        clean: clean_tables,
        perturbed,
    };
    let cal = detector::calibrate_detector(&data, &spec.t_grid)?;
    let idx = pairs
        .iter()
        .position(|&p| p == (cal.layer, cal.aggregation))
        .expect("chosen pair is a candidate");
    let scores = detector::table_scores(&data.clean[idx], &data.baselines[idx], cal.top_percentile)?;
    let config = detector::calibrated_config(cal.layer, cal.aggregation, cal.top_percentile, &scores, fp_rate)?;
    Ok((config, cal))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectReport {
    pub split: String,
    pub perturbation: Option<String>,
    pub samples: usize,
    pub detectors: Vec<DetectEntry>,
    pub combined_flag_rate: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectEntry {
    pub name: String,
    pub label: String,
    pub threshold: f64,
    pub fp_rate: f64,
    pub flagged: usize,
    pub flag_rate: f64,
}

fn load_all_detectors(r: &Run, m: &mut Manifest) -> Result<Vec<(String, Detector)>> {
    r.cfg
        .detectors
        .iter()
        .map(|d| Ok((d.name.clone(), r.load_detector(m, &d.name)?)))
        .collect()
}

fn cmd_detect(r: &Run, split: SplitArg, perturbation: Option<&str>) -> Result<()> {
    let mut m = r.manifest("detect")?;
    let (ds, arch) = r.load_dataset(&mut m)?;
    let model = r.load_model(&mut m, &arch)?;
    let dets = load_all_detectors(r, &mut m)?;
    ensure!(!dets.is_empty(), "no detectors in the run config");
    let batch = match split {
        SplitArg::Validation => r.splits(&ds)?.validation,
        SplitArg::Test => r.eval_set(&ds),
    };
    let images = match perturbation {
        Some(name) => r.load_perturbation(&mut m, name)?.apply(batch.images(), r.cfg.seed)?,
        None => batch.images().clone(),
    };
    let detectors: Vec<Detector> = dets.iter().map(|(_, d)| d.clone()).collect();
    let (_, results) = detector::infer_and_detect(&model, &images, &detectors)?;
    let entries: Vec<DetectEntry> = dets
        .iter()
        .zip(&results)
        .map(|((name, d), res)| DetectEntry {
            name: name.clone(),
            label: d.config.label(),
            threshold: d.config.threshold,
            fp_rate: d.config.fp_rate,
            flagged: res.flagged(),
            flag_rate: res.flag_rate(),
        })
        .collect();
    let combined_flag_rate = if results.len() >= 2 {
        Some(detector::combined_flag(&results.iter().collect::<Vec<_>>())?.flag_rate())
    } else {
        None
    };
    for e in &entries {
        println!(
            "{} ({}): flagged {}/{} = {:.4}",
            e.name,
            e.label,
            e.flagged,
            batch.len(),
            e.flag_rate
        );
    }
    if let Some(c) = combined_flag_rate {
        println!("combined: {c:.4}");
    }
    let split_name = match split {
        SplitArg::Validation => "validation",
        SplitArg::Test => "test",
    };
    let report = DetectReport {
        split: split_name.into(),
        perturbation: perturbation.map(str::to_string),
        samples: batch.len(),
        detectors: entries,
        combined_flag_rate,
    };
    let tag = match perturbation {
        Some(p) => format!("detect-{split_name}-{p}"),
        None => format!("detect-{split_name}"),
    };
    r.write_json(&mut m, &r.report_path(&tag), &report)?;
    m.write(&r.out, &tag)?;
    Ok(())
}

fn cmd_evaluate(r: &Run, names: &[String], no_detectors: bool) -> Result<()> {
    let names: Vec<String> = if names.is_empty() {
        r.cfg.attacks.iter().map(|a| a.name.clone()).collect()
    } else {
        names.to_vec()
    };
    ensure!(!names.is_empty(), "no attacks to evaluate");
    let mut m = r.manifest("evaluate")?;
    let (ds, arch) = r.load_dataset(&mut m)?;
    let model = r.load_model(&mut m, &arch)?;
    let dets = if no_detectors {
        Vec::new()
    } else {
        load_all_detectors(r, &mut m)?
    };
    let detectors: Vec<Detector> = dets.iter().map(|(_, d)| d.clone()).collect();
    let eval = r.eval_set(&ds);
    for name in &names {
        r.cfg.attack(name)?;
        let p = r.load_perturbation(&mut m, name)?;
        let (report, rocs) = metrics::evaluate(&model, &p, &eval, &detectors, r.cfg.seed)?;
        for ((dname, _), roc) in dets.iter().zip(&rocs) {
            let path = r.out.join("reports").join(format!("{name}.{dname}.roc.csv"));
            roc.write_csv(&path)?;
            m.output(&path)?;
        }
        print_report(name, &report);
        r.write_json(&mut m, &r.report_path(name), &report)?;
    }
    m.write(&r.out, "evaluate")?;
    Ok(())
}

fn print_report(name: &str, rep: &EvalReport) {
    print!("{name}: UER {:.4}", rep.uer);
    if let Some(t) = rep.tsr {
        print!(" TSR {t:.4}");
    }
    for d in &rep.detectors {
        print!(
            " | {} AUC {:.4} ASR {:.4} CP {:.4}",
            d.label, d.auc, d.outcome.asr, d.outcome.cp
        );
    }
    if let Some(c) = &rep.combined {
        print!(" | combined ASR {:.4} CP {:.4}", c.outcome.asr, c.outcome.cp);
    }
    println!();
}

fn cmd_bench(r: &Run, batch_size: Option<usize>, repetitions: Option<usize>) -> Result<()> {
    let mut m = r.manifest("bench")?;
    let (ds, arch) = r.load_dataset(&mut m)?;
    let model = r.load_model(&mut m, &arch)?;
    let dets = load_all_detectors(r, &mut m)?;
    let detectors: Vec<Detector> = dets.into_iter().map(|(_, d)| d).collect();
    let batch = batch_size.unwrap_or(r.cfg.bench.batch_size);
    ensure!(batch <= ds.test.len(), "batch size {batch} exceeds the test set");
    let images: Tensor = ds.test.head(batch).images().clone();
    let cfg = BenchConfig {
        repetitions: repetitions.unwrap_or(r.cfg.bench.repetitions),
        warmup: r.cfg.bench.warmup,
    };
    let report: LatencyReport = latency::bench(&model, &detectors, &images, &cfg)?;
    println!("plain: {:.4} ms/image", report.plain.per_image_ms);
    for t in report.detectors.iter().chain(&report.combined) {
        println!("{}: +{:.4} ms/image", t.label, t.added_per_image_ms);
    }
    r.write_json(&mut m, &r.report_path("latency"), &report)?;
    m.write(&r.out, "bench")?;
    Ok(())
}

fn cmd_report(r: &Run, detector: Option<&str>) -> Result<()> {
    let mut m = r.manifest("report")?;
    let mut rows = Vec::new();
    for spec in &r.cfg.attacks {
        let path = r.report_path(&spec.name);
        if !path.is_file() {
            log::warn!("no evaluation report for `{}`", spec.name);
            continue;
        }
        let rep: EvalReport =
            serde_json::from_slice(&std::fs::read(&path)?).with_context(|| format!("reading {}", path.display()))?;
        m.input(&path)?;
        let auc = match detector {
            Some(d) => {
                let idx = r.cfg.detectors.iter().position(|s| s.name == d);
                let idx = idx.with_context(|| format!("no detector named `{d}`"))?;
                rep.detectors.get(idx).map(|e| e.auc)
            }
            None => rep.detectors.first().map(|e| e.auc),
        };
        let budget = if rep.attack.attack == AttackKind::EotPatch {
            rep.budget
        } else {
            (rep.budget * 255.0 * 1000.0).round() / 1000.0
        };
        rows.push(SweepRow {
            attack: spec.name.clone(),
            budget,
            uer: rep.uer,
            auc,
        });
    }
    ensure!(!rows.is_empty(), "no evaluation reports found; run `evaluate` first");
    let path = r.out.join("reports").join("sweep.csv");
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    let mut buf = Vec::new();
    metrics::write_sweep_csv(&rows, &mut buf)?;
    std::fs::write(&path, &buf)?;
    m.output(&path)?;
    print!("{}", String::from_utf8_lossy(&buf));
    m.write(&r.out, "report")?;
    Ok(())
}
