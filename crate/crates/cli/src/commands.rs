use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ccspnet::data::{self, ManifestFlags, Phase, SynthConfig, TrialFilter, TrialSet};
use ccspnet::dsp;
use ccspnet::eval::{self, Approach, RunResult};
use ccspnet::model::{Ablation, ModelState};

use crate::config::RunConfig;
use crate::{
    io_error, svg, AblateArgs, ApproachArg, CliError, ComponentArg, ParamsArgs, PlotArgs, RunArgs,
    StatsArgs, SweepArgs, SynthArgs,
};

const STFT_WINDOW: usize = 64;
const STFT_HOP: usize = 8;

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.trials < 8 || a.trials % 2 != 0 {
        return Err(CliError::Config(format!(
            "--trials {} must be even and at least 8",
            a.trials
        )));
    }
    if a.subjects == 0 || a.subjects > u16::MAX as usize {
        return Err(CliError::Config(format!(
            "--subjects {} out of range",
            a.subjects
        )));
    }
    let cfg = SynthConfig {
        n_subjects: a.subjects,
        trials_per_class: a.trials / 2,
        n_channels: a.channels,
        snr: a.snr,
        erd: a.erd,
        subject_variability: a.variability,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let set = data::synthesize(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let flags = ManifestFlags {
        openbmi: false,
        non_separable: a.erd == 1.0,
    };
    let manifest = data::write_dataset(&set, &a.out, None, flags)?;
    println!(
        "wrote {} trials of {} subjects to {}",
        set.len(),
        a.subjects,
        manifest.display()
    );
    Ok(())
}

/// Configuration after applying the file, `CCSP_SEED` and flags, in that
/// order.
fn resolve(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("CCSP_SEED") {
        cfg.seed =
            Some(s.trim().parse().map_err(|_| {
                CliError::Config(format!("CCSP_SEED={s} is not an unsigned integer"))
            })?);
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = cfg.seed {
        if s > i64::MAX as u64 {
            return Err(CliError::Config(format!("seed {s} exceeds {}", i64::MAX)));
        }
        cfg.model.seed = s;
    }
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(e) = args.epochs {
        cfg.model.epochs = e;
        cfg.mark_model_key("epochs");
    }
    if let Some(b) = args.batch_size {
        cfg.model.batch_size = b;
        cfg.mark_model_key("batch_size");
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = &args.subjects {
        cfg.subjects = s.clone();
    }
    Ok(cfg)
}

/// Loads and pre-processes the configured dataset, then fits the model's
/// input shape to it.
fn load_data(cfg: &mut RunConfig) -> Result<TrialSet, CliError> {
    let manifest = cfg.manifest.clone().ok_or_else(|| {
        CliError::Config(
            "no dataset: pass --manifest or set `manifest` in the configuration".into(),
        )
    })?;
    let filter = TrialFilter {
        subjects: (!cfg.subjects.is_empty()).then(|| cfg.subjects.clone()),
        ..TrialFilter::default()
    };
    let raw = data::load_trials(&manifest, &filter)?;
    if raw.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no trials match the subject selection",
            manifest.display()
        )));
    }
    let set = if cfg.preprocessed {
        raw
    } else {
        data::preprocess(&raw, &cfg.preprocess)
            .map_err(|e| CliError::Config(format!("pre-processing: {e}")))?
    };
    cfg.fit_to_data(set.n_channels, set.n_times, set.sample_rate_hz)?;
    cfg.model.validate()?;
    Ok(set)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_history(path: &Path, result: &RunResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record([
        "subject_id",
        "epoch",
        "batch",
        "csp_loss",
        "fisher",
        "combined",
    ])
    .map_err(err)?;
    for o in &result.subjects {
        for h in &o.model.history {
            w.write_record([
                o.subject_id.to_string(),
                h.epoch.to_string(),
                h.batch.to_string(),
                h.csp_loss.to_string(),
                h.fisher.to_string(),
                h.combined.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// Writes results, history, models, resolved configuration and summary.
fn write_run(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    result: &RunResult,
) -> Result<(), CliError> {
    let models = dir.join("models");
    fs::create_dir_all(&models).map_err(|e| io_error(&models, e))?;
    let mut csv_bytes = Vec::new();
    result.write_csv(&mut csv_bytes)?;
    write(&dir.join("results.csv"), csv_bytes)?;
    write_history(&dir.join("history.csv"), result)?;
    for o in &result.subjects {
        let path = models.join(format!("subject_{:03}.ccsp", o.subject_id));
        o.model.save(&path)?;
    }
    let mut snapshot = cfg.clone();
    snapshot.model = result.config.clone();
    write(&dir.join("config.toml"), snapshot.to_toml())?;
    let mut summary = format!(
        "# ccspnet {command} generated at unix time {}\n",
        timestamp()
    );
    summary.push_str(&result.report()?);
    if let Some(first) = result.subjects.first() {
        summary.push_str("\nparameters\n");
        summary.push_str(&first.model.count_parameters().to_string());
        summary.push('\n');
    }
    write(&dir.join("summary.txt"), &summary)?;
    print!("{}", summary.lines().skip(1).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}

pub fn eval_sd(args: &RunArgs, command: &str) -> Result<(), CliError> {
    let mut cfg = resolve(args)?;
    let set = load_data(&mut cfg)?;
    let result = eval::run_sd(&set, &cfg.model, cfg.jobs)?;
    write_run(&cfg.out_dir, command, &cfg, &result)
}

/// Uses the subject-independent batch size and epoch count unless set
/// explicitly.
fn si_defaults(cfg: &mut RunConfig) {
    if !cfg.model_sets("batch_size") {
        cfg.model.batch_size = eval::SI_BATCH_SIZE;
    }
    if !cfg.model_sets("epochs") {
        cfg.model.epochs = eval::SI_EPOCHS;
    }
}

pub fn eval_si(args: &RunArgs, phase: Phase) -> Result<(), CliError> {
    let mut cfg = resolve(args)?;
    si_defaults(&mut cfg);
    let set = load_data(&mut cfg)?;
    let result = eval::run_loso(&set, &cfg.model, phase, cfg.jobs)?;
    write_run(&cfg.out_dir, "eval-si", &cfg, &result)
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.run)?;
    let approach = match a.approach {
        ApproachArg::Sd => Approach::Sd,
        ApproachArg::SiOffline => Approach::SiOffline,
        ApproachArg::SiOnline => Approach::SiOnline,
    };
    if approach != Approach::Sd {
        si_defaults(&mut cfg);
    }
    let components: Vec<Ablation> = match a.component {
        ComponentArg::All => Ablation::ALL.to_vec(),
        ComponentArg::Wkcnn => vec![Ablation::Wkcnn],
        ComponentArg::Tcnn => vec![Ablation::Tcnn],
        ComponentArg::Frn => vec![Ablation::Frn],
        ComponentArg::Lda => vec![Ablation::Lda],
    };
    let set = load_data(&mut cfg)?;
    for c in components {
        let result = eval::run_ablation(&set, &cfg.model, c, approach, cfg.jobs)?;
        write_run(&cfg.out_dir.join(c.to_string()), "ablate", &cfg, &result)?;
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.run)?;
    si_defaults(&mut cfg);
    let set = load_data(&mut cfg)?;
    let phase = Phase::from(a.phase);
    let results = eval::run_subject_sweep(&set, &cfg.model, &a.counts, phase, cfg.jobs)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_error(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("sweep.csv");
    let mut text = String::from("n_train_subjects,subject_id,accuracy,seed\n");
    for (count, r) in &results {
        for o in &r.subjects {
            text.push_str(&format!(
                "{count},{},{},{}\n",
                o.subject_id, o.accuracy, o.seed
            ));
        }
        let s = r.summary()?;
        println!(
            "{count:>3} training subjects: mean {:.2} sd {:.2}",
            s.mean, s.sd
        );
    }
    write(&path, text)
}

pub fn stats(a: &StatsArgs) -> Result<(), CliError> {
    if a.fixtures {
        print!("{}", eval::published_comparison()?);
        return Ok(());
    }
    if a.inputs.is_empty() {
        return Err(CliError::Config(
            "pass --fixtures or at least one result CSV".into(),
        ));
    }
    let mut groups = Vec::new();
    for p in &a.inputs {
        groups.push((p.display().to_string(), eval::read_results_csv(p)?));
    }
    print!("{}", eval::compare_results(&groups)?);
    Ok(())
}

pub fn params(a: &ParamsArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(ab) = a.ablation {
        cfg.model.ablation = ab;
    }
    let model = ModelState::new(cfg.model)?;
    println!("{}", model.count_parameters());
    Ok(())
}

fn load_model(path: Option<&PathBuf>, cfg: &RunConfig) -> Result<Option<ModelState>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let model = ModelState::load(path)?;
    let m = &model.config;
    if (m.n_channels, m.n_timepoints) != (cfg.model.n_channels, cfg.model.n_timepoints) {
        return Err(CliError::Config(format!(
            "model expects {}x{} input, data is {}x{}",
            m.n_channels, m.n_timepoints, cfg.model.n_channels, cfg.model.n_timepoints
        )));
    }
    Ok(Some(model))
}

pub fn plot(a: &PlotArgs) -> Result<(), CliError> {
    let mut run = a.run.clone();
    run.subjects = Some(vec![a.subject]);
    let mut cfg = resolve(&run)?;
    let set = load_data(&mut cfg)?;
    let model = load_model(a.model.as_ref(), &cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_error(&cfg.out_dir, e))?;
    if a.stft {
        plot_stft(a, &cfg, &set, model.as_ref())
    } else {
        let model = model.ok_or_else(|| CliError::Config("--csp-scatter needs --model".into()))?;
        plot_scatter(&cfg, &set, &model)
    }
}

fn plot_stft(
    a: &PlotArgs,
    cfg: &RunConfig,
    set: &TrialSet,
    model: Option<&ModelState>,
) -> Result<(), CliError> {
    if a.trial >= set.len() {
        return Err(CliError::Config(format!(
            "--trial {} but subject {} has {} trials",
            a.trial,
            a.subject,
            set.len()
        )));
    }
    if a.channel >= set.n_channels {
        return Err(CliError::Config(format!(
            "--channel {} but the data has {} channels",
            a.channel, set.n_channels
        )));
    }
    let (c, t) = (set.n_channels, set.n_times);
    let fs_hz = set.sample_rate_hz;
    let window = STFT_WINDOW.min(t);
    let spec = |x: &[f64]| {
        dsp::stft(x, window, STFT_HOP, fs_hz).map_err(|e| CliError::Config(format!("stft: {e}")))
    };
    let trial = set.trial_f64(a.trial);
    let mut grids = vec![(
        "raw".to_string(),
        0usize,
        spec(&trial[a.channel * t..(a.channel + 1) * t])?,
    )];
    if let Some(m) = model {
        let x = m.input_tensor(set, &[a.trial])?;
        let (wavelet, temporal) = m.stage_outputs(&x)?;
        for (stage, maps) in [("wkcnn", wavelet), ("tcnn", temporal)] {
            let Some(maps) = maps else { continue };
            let k = maps.shape()[1];
            for map in 0..k {
                let start = (map * c + a.channel) * t;
                grids.push((
                    stage.to_string(),
                    map,
                    spec(&maps.data()[start..start + t])?,
                ));
            }
        }
    } else {
        eprintln!("no --model given; emitting the raw stage only");
    }
    let mut text = String::from("stage,map,time_s,freq_hz,magnitude\n");
    for (stage, map, g) in &grids {
        for (b, row) in g.magnitudes.iter().enumerate() {
            for (f, m) in row.iter().enumerate() {
                text.push_str(&format!(
                    "{stage},{map},{},{},{m}\n",
                    g.times_s[f], g.freqs_hz[b]
                ));
            }
        }
    }
    write(&cfg.out_dir.join("stft.csv"), text)?;
    let panels: Vec<(String, &dsp::Spectrogram)> = grids
        .iter()
        .map(|(stage, map, g)| (format!("{stage} map {map}, channel {}", a.channel), g))
        .collect();
    write(&cfg.out_dir.join("stft.svg"), svg::heat_maps(&panels, 4))?;
    println!(
        "wrote {} time-frequency grids to {}",
        grids.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn plot_scatter(cfg: &RunConfig, set: &TrialSet, model: &ModelState) -> Result<(), CliError> {
    let test = match data::split_sd(set) {
        Ok((_, test)) => test,
        Err(_) => set.clone(),
    };
    let features = model.csp_features(&test)?;
    let width = features.shape()[1];
    let m = ccspnet::csp::N_FILTERS;
    let n_branches = width / m;
    let mut text = String::from("branch,trial,label,x,y\n");
    let mut panels = Vec::with_capacity(n_branches);
    for b in 0..n_branches {
        let mut points = Vec::with_capacity(test.len());
        for i in 0..test.len() {
            let row = &features.data()[i * width..(i + 1) * width];
            let (x, y) = (row[b * m], row[b * m + m - 1]);
            text.push_str(&format!("{},{i},{},{x},{y}\n", b + 1, test.labels[i]));
            points.push((x, y, test.labels[i]));
        }
        panels.push((format!("branch {}", b + 1), points));
    }
    write(&cfg.out_dir.join("csp_scatter.csv"), text)?;
    write(
        &cfg.out_dir.join("csp_scatter.svg"),
        svg::scatter(&panels, 2),
    )?;
    println!(
        "wrote {} points for {} branches to {}",
        n_branches * test.len(),
        n_branches,
        cfg.out_dir.display()
    );
    Ok(())
}
