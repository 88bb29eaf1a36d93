//! Per-round metrics CSV: writing and re-ingestion.

use std::io::{Read, Write};

use pfljscc_core::trainer::RoundMetrics;

use crate::error::{HarnessError, Result};

/// One CSV row. Evaluation and gradient-norm cells are empty in rounds
/// where they were not computed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// 1-based count of completed rounds.
    pub round: usize,
    pub l_mse: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub grad_norm_u_sq: Option<f64>,
    pub grad_norm_v_sq_avg: Option<f64>,
    pub psnr: Vec<Option<f64>>,
    pub msssim: Vec<Option<f64>>,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn from_round(m: &RoundMetrics, grid: &[f64], wall_ms: f64) -> Self {
        let (psnr, msssim) = match &m.eval {
            Some(e) => (
                e.psnr.iter().copied().map(Some).collect(),
                e.ms_ssim.iter().copied().map(Some).collect(),
            ),
            None => (vec![None; grid.len()], vec![None; grid.len()]),
        };
        Self {
            round: m.round + 1,
            l_mse: m.losses.mse,
            l_cl: m.losses.contrastive,
            l_total: m.losses.total,
            grad_norm_u_sq: m.grad_norm_u_sq,
            grad_norm_v_sq_avg: m.grad_norm_v_sq_avg,
            psnr,
            msssim,
            wall_ms,
        }
    }
}

/// A metrics table: the SNR grid of the evaluation columns plus rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub snr_db: Vec<f64>,
    pub rows: Vec<MetricsRow>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_f64(s: &str, column: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| HarnessError::Usage(format!("column `{column}`: `{s}` is not a number")))
}

fn parse_opt(s: &str, column: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(s, column).map(Some)
    }
}

const FIXED: [&str; 6] = [
    "round",
    "l_mse",
    "l_cl",
    "l_total",
    "grad_norm_u_sq",
    "grad_norm_v_sq_avg",
];

impl MetricsTable {
    pub fn new(snr_db: Vec<f64>) -> Self {
        Self {
            snr_db,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
        h.extend(self.snr_db.iter().map(|s| format!("psnr@{s}")));
        h.extend(self.snr_db.iter().map(|s| format!("msssim@{s}")));
        h.push("wall_ms".into());
        h
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.round.to_string(),
                r.l_mse.to_string(),
                r.l_cl.to_string(),
                r.l_total.to_string(),
                fmt_opt(r.grad_norm_u_sq),
                fmt_opt(r.grad_norm_v_sq_avg),
            ];
            rec.extend(r.psnr.iter().map(|x| fmt_opt(*x)));
            rec.extend(r.msssim.iter().map(|x| fmt_opt(*x)));
            rec.push(r.wall_ms.to_string());
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| HarnessError::io("metrics.csv", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header.len() < FIXED.len() + 1
            || header[..FIXED.len()] != FIXED
            || header.last().map(String::as_str) != Some("wall_ms")
        {
            return Err(HarnessError::Usage("metrics header does not match".into()));
        }
        let middle = &header[FIXED.len()..header.len() - 1];
        if !middle.len().is_multiple_of(2) {
            return Err(HarnessError::Usage("unbalanced psnr/msssim columns".into()));
        }
        let k = middle.len() / 2;
        let mut snr_db = Vec::with_capacity(k);
        for i in 0..k {
            let p = middle[i]
                .strip_prefix("psnr@")
                .ok_or_else(|| HarnessError::Usage(format!("unexpected column `{}`", middle[i])))?;
            let m = middle[k + i].strip_prefix("msssim@").ok_or_else(|| {
                HarnessError::Usage(format!("unexpected column `{}`", middle[k + i]))
            })?;
            if p != m {
                return Err(HarnessError::Usage(format!(
                    "psnr@{p} paired with msssim@{m}"
                )));
            }
            snr_db.push(parse_f64(p, &middle[i])?);
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).unwrap_or("");
            let round = get(0).parse().map_err(|_| {
                HarnessError::Usage(format!("column `round`: `{}` is not an integer", get(0)))
            })?;
            let base = FIXED.len();
            rows.push(MetricsRow {
                round,
                l_mse: parse_f64(get(1), "l_mse")?,
                l_cl: parse_f64(get(2), "l_cl")?,
                l_total: parse_f64(get(3), "l_total")?,
                grad_norm_u_sq: parse_opt(get(4), "grad_norm_u_sq")?,
                grad_norm_v_sq_avg: parse_opt(get(5), "grad_norm_v_sq_avg")?,
                psnr: (0..k)
                    .map(|i| parse_opt(get(base + i), &header[base + i]))
                    .collect::<Result<_>>()?,
                msssim: (0..k)
                    .map(|i| parse_opt(get(base + k + i), &header[base + k + i]))
                    .collect::<Result<_>>()?,
                wall_ms: parse_f64(get(base + 2 * k), "wall_ms")?,
            });
        }
        Ok(Self { snr_db, rows })
    }

    /// The table without the wall-clock column, for determinism checks.
    pub fn without_wall_clock(&self) -> Self {
        let mut t = self.clone();
        t.rows.iter_mut().for_each(|r| r.wall_ms = 0.0);
        t
    }
}
