//! Experiment runners behind each CLI mode.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pfljscc_core::codec::Codec;
use pfljscc_core::federation::{Federation, ParamSet, TrainingState};
use pfljscc_core::theory::{
    self, CoefficientOptions, Lemma7Sweep, PositivityProbe, RateReport, SyntheticProblem,
    SyntheticSpec, TheoremReport, VerifyConfig,
};
use pfljscc_core::trainer::{CodecObjective, EvalMetrics, RoundMetrics};
use pfljscc_core::{Purpose, RngStream, StreamId};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Mode, Toggles};
use crate::dataset::load_or_synthesize;
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricsRow, MetricsTable};
use crate::plot::{line_chart, Series};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_PLOT: &str = "loss_vs_round.svg";
pub const PSNR_PLOT: &str = "psnr_vs_snr.svg";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "channel_sweep.csv";
pub const SWEEP_PLOT: &str = "channel_sweep.svg";
pub const THEORY_FILE: &str = "theory_report.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

/// Codec objective and initial training state for a config.
pub fn build(cfg: &ExperimentConfig) -> Result<(CodecObjective, TrainingState)> {
    cfg.validate()?;
    let codec = Codec::new(cfg.codec_config()?)?;
    let clients = load_or_synthesize(cfg)?;
    let params = codec.init_params(&mut RngStream::new(
        cfg.seed,
        StreamId::global(),
        Purpose::Init,
    ));
    let objective = CodecObjective {
        codec,
        clients,
        batch_size: cfg.batch_size,
        loss: cfg.loss,
        channel: cfg.channel,
    };
    objective.validate()?;
    let ps = ParamSet::partition(&params, cfg.toggles.pfl)?;
    let state = TrainingState::new(ps.u, vec![ps.v; cfg.clients]);
    Ok((objective, state))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: MetricsTable,
    pub state: TrainingState,
    /// Evaluation after the last round.
    pub eval: EvalMetrics,
}

/// Trains without touching the filesystem.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (objective, mut state) = build(cfg)?;
    let mut fed = Federation::new(&objective, cfg.schedule, cfg.seed);
    fed.aggregation = cfg.aggregation;
    fed.parallel = cfg.parallel;
    fed.instrument = cfg.instrument;
    let rounds = cfg.schedule.rounds;
    let mut metrics = MetricsTable::new(cfg.eval_snr_db.clone());
    let mut last_eval = None;
    let mut clock = Instant::now();
    fed.run(&mut state, |report, st| {
        let done = report.round + 1;
        let due = done == rounds || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let eval = if due {
            Some(objective.evaluate(st, &cfg.eval_snr_db, cfg.seed)?)
        } else {
            None
        };
        let m = RoundMetrics {
            round: report.round,
            losses: report.losses,
            grad_norm_u_sq: report.grad_norm_u_sq,
            grad_norm_v_sq_avg: report.grad_norm_v_sq_avg,
            eval,
        };
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        clock = Instant::now();
        if let Some(e) = &m.eval {
            log::info!(
                "round {done}/{rounds}: l_total {:.5}, psnr {:?}",
                m.losses.total,
                e.psnr
            );
            last_eval = Some(e.clone());
        }
        metrics
            .rows
            .push(MetricsRow::from_round(&m, &cfg.eval_snr_db, wall_ms));
        Ok(())
    })?;
    let eval = match last_eval {
        Some(e) => e,
        None => objective.evaluate(&state, &cfg.eval_snr_db, cfg.seed)?,
    };
    Ok(TrainOutcome {
        metrics,
        state,
        eval,
    })
}

/// Writes the resolved config, metrics, checkpoint and plots of a run.
pub fn write_train_outputs(cfg: &ExperimentConfig, out: &TrainOutcome, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_file(&dir.join(METRICS_FILE), out.metrics.to_csv_string())?;
    Checkpoint {
        config: cfg.clone(),
        state: out.state.clone(),
    }
    .save(&dir.join(CHECKPOINT_FILE))?;
    let rows = &out.metrics.rows;
    let pts = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| (r.round as f64, f(r))).collect();
    let svg = line_chart(
        "Training loss",
        "round",
        "loss",
        &[
            Series::new("l_total", pts(|r| r.l_total)),
            Series::new("l_mse", pts(|r| r.l_mse)),
            Series::new("l_cl", pts(|r| r.l_cl)),
        ],
    );
    write_file(&dir.join(LOSS_PLOT), svg)?;
    write_file(
        &dir.join(PSNR_PLOT),
        psnr_chart("Test PSNR after training", &out.eval),
    )?;
    Ok(())
}

fn psnr_chart(title: &str, e: &EvalMetrics) -> String {
    let pts = e
        .snr_db
        .iter()
        .copied()
        .zip(e.psnr.iter().copied())
        .collect();
    line_chart(title, "SNR (dB)", "PSNR (dB)", &[Series::new("psnr", pts)])
}

/// One trained ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub toggles: Toggles,
    pub seed: u64,
    pub final_l_total: f64,
    pub eval: EvalMetrics,
}

/// Per-variant results and their seed averages.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub snr_db: Vec<f64>,
    pub rows: Vec<AblationRow>,
    /// `(variant, toggles, mean PSNR per SNR, mean MS-SSIM per SNR)`.
    pub means: Vec<(String, Toggles, Vec<f64>, Vec<f64>)>,
}

impl AblationOutcome {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header: Vec<String> = [
            "variant",
            "dual_pipeline",
            "decoder_preprocess",
            "pfl",
            "seed",
            "final_l_total",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.snr_db.iter().map(|s| format!("psnr@{s}")));
        header.extend(self.snr_db.iter().map(|s| format!("msssim@{s}")));
        w.write_record(&header)?;
        let flags = |t: &Toggles| {
            [
                t.dual_pipeline.to_string(),
                t.decoder_preprocess.to_string(),
                t.pfl.to_string(),
            ]
        };
        for r in &self.rows {
            let mut rec = vec![r.variant.clone()];
            rec.extend(flags(&r.toggles));
            rec.push(r.seed.to_string());
            rec.push(r.final_l_total.to_string());
            rec.extend(r.eval.psnr.iter().map(f64::to_string));
            rec.extend(r.eval.ms_ssim.iter().map(f64::to_string));
            w.write_record(rec)?;
        }
        for (name, t, psnr, ssim) in &self.means {
            let mut rec = vec![name.clone()];
            rec.extend(flags(t));
            rec.push("mean".into());
            rec.push(String::new());
            rec.extend(psnr.iter().map(f64::to_string));
            rec.extend(ssim.iter().map(f64::to_string));
            w.write_record(rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Config of one ablation run: only the toggles, seed and output folder
/// differ from `base`.
pub fn ablation_config(
    base: &ExperimentConfig,
    variant: &str,
    toggles: Toggles,
    seed: u64,
) -> ExperimentConfig {
    let mut c = base.clone();
    c.mode = Mode::Train;
    c.toggles = toggles;
    c.seed = seed;
    c.output_dir = base.output_dir.join(variant).join(format!("seed{seed}"));
    c
}

/// Trains the full system and each single-component-off variant for every
/// ablation seed. With `write`, each run's outputs go into its own folder.
pub fn ablate(base: &ExperimentConfig, write: bool) -> Result<AblationOutcome> {
    base.validate()?;
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for (variant, toggles) in Toggles::ablation_rows() {
        let mut psnr = vec![0.0; base.eval_snr_db.len()];
        let mut ssim = vec![0.0; base.eval_snr_db.len()];
        for &seed in &base.ablation_seeds {
            let cfg = ablation_config(base, variant, toggles, seed);
            let out = train(&cfg)?;
            if write {
                write_train_outputs(&cfg, &out, &cfg.output_dir)?;
            }
            let k = base.ablation_seeds.len() as f64;
            for i in 0..psnr.len() {
                psnr[i] += out.eval.psnr[i] / k;
                ssim[i] += out.eval.ms_ssim[i] / k;
            }
            log::info!("ablation {variant} seed {seed}: psnr {:?}", out.eval.psnr);
            rows.push(AblationRow {
                variant: variant.to_string(),
                toggles,
                seed,
                final_l_total: out.metrics.rows.last().map_or(f64::NAN, |r| r.l_total),
                eval: out.eval,
            });
        }
        means.push((variant.to_string(), toggles, psnr, ssim));
    }
    Ok(AblationOutcome {
        snr_db: base.eval_snr_db.clone(),
        rows,
        means,
    })
}

/// Checkpoint the channel sweep reads.
pub fn sweep_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE))
}

/// Evaluates the checkpointed model over `cfg.sweep_snr_db`. The data and
/// model come from the config embedded in the checkpoint.
pub fn channel_sweep(cfg: &ExperimentConfig) -> Result<EvalMetrics> {
    let path = sweep_checkpoint_path(cfg);
    if !path.exists() {
        return Err(HarnessError::checkpoint(
            &path,
            "missing checkpoint; run `train` first or pass --checkpoint",
        ));
    }
    let ck = Checkpoint::load(&path)?;
    let (objective, _) = build(&ck.config)?;
    Ok(objective.evaluate(&ck.state, &cfg.sweep_snr_db, ck.config.seed)?)
}

pub fn sweep_csv(e: &EvalMetrics) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["snr_db", "psnr", "msssim"])?;
    for i in 0..e.snr_db.len() {
        w.write_record([
            e.snr_db[i].to_string(),
            e.psnr[i].to_string(),
            e.ms_ssim[i].to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Parses a channel sweep CSV back into metrics.
pub fn read_sweep_csv(text: &str) -> Result<EvalMetrics> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut e = EvalMetrics {
        snr_db: Vec::new(),
        psnr: Vec::new(),
        ms_ssim: Vec::new(),
    };
    for rec in r.deserialize::<(f64, f64, f64)>() {
        let (s, p, m) = rec?;
        e.snr_db.push(s);
        e.psnr.push(p);
        e.ms_ssim.push(m);
    }
    Ok(e)
}

/// Ranks with ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

/// Everything the theory mode reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub problem: SyntheticSpec,
    pub theorem: TheoremReport,
    pub rates: Vec<RateReport>,
    pub lemma7: Lemma7Sweep,
    pub positivity: PositivityProbe,
    /// Bound held at every horizon, every rate slope passed and no drift
    /// inequality failed.
    pub pass: bool,
}

pub fn verify_theory(cfg: &ExperimentConfig) -> Result<TheoryReport> {
    cfg.validate()?;
    let t = &cfg.theory;
    let spec = SyntheticSpec::deterministic_homogeneous(cfg.seed);
    let problem = SyntheticProblem::new(spec)?;
    let options = CoefficientOptions {
        symmetrize: t.symmetrize,
    };
    let mut vc = VerifyConfig::new(cfg.seed);
    vc.local_steps = t.local_steps;
    vc.options = options;
    let theorem = theory::verify_theorem_empirically(&problem, &t.horizons, &vc)?;
    let rates = t
        .rate_exponents
        .iter()
        .map(|&q| theory::rate_check(&problem, q, &t.rate_horizons, &vc))
        .collect::<pfljscc_core::Result<Vec<_>>>()?;
    let lemma7 = theory::lemma7_sweep(t.lemma7_draws, cfg.seed);
    let positivity = theory::lambda_positivity_probe(t.positivity_draws, cfg.seed, options);
    if let Some(ce) = positivity.counterexamples.first() {
        log::warn!(
            "{} of {} constant draws leave a lambda nonpositive for an admissible c, e.g. {ce:?}",
            positivity.counterexamples.len(),
            positivity.draws
        );
    }
    let pass = theorem.pass && rates.iter().all(|r| r.pass) && lemma7.failures.is_empty();
    Ok(TheoryReport {
        seed: cfg.seed,
        problem: spec,
        theorem,
        rates,
        lemma7,
        positivity,
        pass,
    })
}

/// Runs the configured mode and writes its outputs under `output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    match cfg.mode {
        Mode::Train => {
            let out = train(cfg)?;
            write_train_outputs(cfg, &out, dir)?;
        }
        Mode::Ablate => {
            let out = ablate(cfg, true)?;
            create_dir(dir)?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            write_file(&dir.join(ABLATION_FILE), out.to_csv_string()?)?;
            let series: Vec<Series> = out
                .means
                .iter()
                .map(|(name, _, psnr, _)| {
                    Series::new(
                        name.clone(),
                        out.snr_db
                            .iter()
                            .copied()
                            .zip(psnr.iter().copied())
                            .collect(),
                    )
                })
                .collect();
            write_file(
                &dir.join(PSNR_PLOT),
                line_chart("Ablation: test PSNR", "SNR (dB)", "PSNR (dB)", &series),
            )?;
        }
        Mode::ChannelSweep => {
            let e = channel_sweep(cfg)?;
            create_dir(dir)?;
            write_file(&dir.join(SWEEP_FILE), sweep_csv(&e)?)?;
            write_file(&dir.join(SWEEP_PLOT), psnr_chart("Channel sweep", &e))?;
        }
        Mode::VerifyTheory => {
            let report = verify_theory(cfg)?;
            create_dir(dir)?;
            write_file(
                &dir.join(THEORY_FILE),
                serde_json::to_string_pretty(&report)?,
            )?;
            let series: Vec<Series> = report
                .rates
                .iter()
                .map(|r| {
                    Series::new(
                        format!("q = {}", r.q),
                        r.points
                            .iter()
                            .map(|p| ((p.0 as f64).ln(), p.2.ln()))
                            .collect(),
                    )
                })
                .collect();
            write_file(
                &dir.join("rate_fit.svg"),
                line_chart("Gradient-norm average", "ln T", "ln LHS", &series),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // Ties take mean ranks: ranks (1, 2.5, 2.5) against (1, 2, 3).
        let r = spearman(&[1.0, 2.0, 3.0], &[0.0, 5.0, 5.0]);
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn sweep_csv_round_trip() {
        let e = EvalMetrics {
            snr_db: vec![-5.0, -2.5],
            psnr: vec![10.1, 0.1 + 0.2],
            ms_ssim: vec![0.5, 0.25],
        };
        assert_eq!(read_sweep_csv(&sweep_csv(&e).unwrap()).unwrap(), e);
    }
}
