//! Episode logs, per-timestep reward, and reward/violation curves.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 10;

const CSV_HEADER: &str = "env_step,episode,episode_reward,episode_len,violated,cum_violations";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Environment steps consumed when the episode ended.
    pub env_step: usize,
    pub episode: usize,
    pub episode_reward: f64,
    pub episode_len: usize,
    pub violated: bool,
    pub cum_violations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub episodes: Vec<EpisodeRecord>,
}

impl RunLog {
    pub fn new(episodes: Vec<EpisodeRecord>) -> Result<Self> {
        let log = Self { episodes };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        let mut cum = 0;
        for (i, w) in self.episodes.iter().enumerate() {
            if i > 0 && w.env_step <= self.episodes[i - 1].env_step {
                return Err(Error::Config(format!("run log: env_step not increasing at row {i}")));
            }
            cum += usize::from(w.violated);
            if w.cum_violations != cum {
                return Err(Error::Config(format!("run log: cum_violations inconsistent at row {i}")));
            }
        }
        Ok(())
    }

    pub fn violations(&self) -> usize {
        self.episodes.iter().filter(|e| e.violated).count()
    }

    pub fn total_reward(&self) -> f64 {
        self.episodes.iter().map(|e| e.episode_reward).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{CSV_HEADER}")?;
        for e in &self.episodes {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.env_step,
                e.episode,
                e.episode_reward,
                e.episode_len,
                u8::from(e.violated),
                e.cum_violations
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bad = |line: usize, why: &str| Error::Artifact {
            path: path.display().to_string(),
            reason: format!("line {line}: {why}"),
        };
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != CSV_HEADER {
            return Err(bad(1, "unexpected header"));
        }
        let mut episodes = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 2, "expected 6 fields"));
            }
            let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(i + 2, &e.to_string()));
            episodes.push(EpisodeRecord {
                env_step: int(f[0])?,
                episode: int(f[1])?,
                episode_reward: f[2].trim().parse().map_err(|_| bad(i + 2, "bad reward"))?,
                episode_len: int(f[3])?,
                violated: match f[4].trim() {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(i + 2, "violated must be 0 or 1")),
                },
                cum_violations: int(f[5])?,
            });
        }
        let log = Self { episodes };
        log.validate().map_err(|e| bad(0, &e.to_string()))?;
        Ok(log)
    }
}

/// `Σ episode rewards / T`.
pub fn ptr(log: &RunLog, total_timesteps: usize) -> Result<f64> {
    if total_timesteps == 0 {
        return Err(Error::Config("per-timestep reward needs T >= 1".into()));
    }
    Ok(log.total_reward() / total_timesteps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PtrRatio {
    pub ptr: f64,
    pub violations: usize,
    /// `ptr / violations`, or `ptr` when there were none.
    pub ratio: f64,
    pub zero_violations: bool,
}

impl PtrRatio {
    /// Reporting scale used in tables.
    pub fn times_1e3(&self) -> f64 {
        self.ratio * 1e3
    }
}

pub fn ptr_over_violations(log: &RunLog, total_timesteps: usize) -> Result<PtrRatio> {
    let p = ptr(log, total_timesteps)?;
    let v = log.violations();
    Ok(PtrRatio {
        ptr: p,
        violations: v,
        ratio: p / v.max(1) as f64,
        zero_violations: v == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
}

/// Mean of the last `window` values ending at each index.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// One point per episode: (cumulative violations, trailing mean reward).
pub fn reward_vs_violations_curve(log: &RunLog, window: usize) -> Vec<CurvePoint> {
    let rewards: Vec<f64> = log.episodes.iter().map(|e| e.episode_reward).collect();
    log.episodes
        .iter()
        .zip(trailing_mean(&rewards, window))
        .map(|(e, y)| CurvePoint {
            x: e.cum_violations as f64,
            y,
        })
        .collect()
}

/// One point per episode: (environment steps, trailing mean reward).
pub fn reward_vs_steps_curve(log: &RunLog, window: usize) -> Vec<CurvePoint> {
    let rewards: Vec<f64> = log.episodes.iter().map(|e| e.episode_reward).collect();
    log.episodes
        .iter()
        .zip(trailing_mean(&rewards, window))
        .map(|(e, y)| CurvePoint { x: e.env_step as f64, y })
        .collect()
}

/// One point per episode: (environment steps, cumulative violations).
pub fn violations_vs_steps_curve(log: &RunLog) -> Vec<CurvePoint> {
    log.episodes
        .iter()
        .map(|e| CurvePoint {
            x: e.env_step as f64,
            y: e.cum_violations as f64,
        })
        .collect()
}

/// Linear interpolation, constant beyond the ends. Where several points
/// share an `x` the last one wins.
pub fn interpolate(curve: &[CurvePoint], x: f64) -> f64 {
    let mut pts: Vec<CurvePoint> = Vec::with_capacity(curve.len());
    for p in curve {
        match pts.last_mut() {
            Some(last) if last.x == p.x => *last = *p,
            _ => pts.push(*p),
        }
    }
    let first = pts[0];
    let last = pts[pts.len() - 1];
    if x <= first.x {
        return first.y;
    }
    if x >= last.x {
        return last.y;
    }
    let i = pts.partition_point(|p| p.x <= x);
    let (a, b) = (pts[i - 1], pts[i]);
    a.y + (b.y - a.y) * (x - a.x) / (b.x - a.x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    /// Population standard deviation across curves.
    pub std: Vec<f64>,
}

impl Band {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "x,mean,std")?;
        for i in 0..self.x.len() {
            writeln!(w, "{},{},{}", self.x[i], self.mean[i], self.std[i])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Interpolates every curve onto the sorted union of their x values.
pub fn aggregate_seeds(curves: &[Vec<CurvePoint>]) -> Result<Band> {
    let curves: Vec<&Vec<CurvePoint>> = curves.iter().filter(|c| !c.is_empty()).collect();
    if curves.is_empty() {
        return Err(Error::Empty("curves to aggregate"));
    }
    let mut grid: Vec<f64> = curves.iter().flat_map(|c| c.iter().map(|p| p.x)).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let n = curves.len() as f64;
    let mut mean = Vec::with_capacity(grid.len());
    let mut std = Vec::with_capacity(grid.len());
    for &x in &grid {
        let ys: Vec<f64> = curves.iter().map(|c| interpolate(c, x)).collect();
        let m = ys.iter().sum::<f64>() / n;
        mean.push(m);
        std.push((ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / n).sqrt());
    }
    Ok(Band { x: grid, mean, std })
}

/// One method/env cell of the summary table, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub env: String,
    pub ptr_over_v_times_1e3: f64,
    pub ptr_over_v_times_1e3_std: f64,
    pub seeds: usize,
    pub zero_violation_seeds: usize,
    pub mean_violations: f64,
    pub mean_ptr: f64,
}

pub fn table_row(method: &str, env: &str, runs: &[(RunLog, usize)]) -> Result<TableRow> {
    if runs.is_empty() {
        return Err(Error::Empty("runs for table row"));
    }
    let ratios = runs.iter().map(|(l, t)| ptr_over_violations(l, *t)).collect::<Result<Vec<_>>>()?;
    let n = ratios.len() as f64;
    let scaled: Vec<f64> = ratios.iter().map(PtrRatio::times_1e3).collect();
    let m = scaled.iter().sum::<f64>() / n;
    Ok(TableRow {
        method: method.into(),
        env: env.into(),
        ptr_over_v_times_1e3: m,
        ptr_over_v_times_1e3_std: (scaled.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt(),
        seeds: runs.len(),
        zero_violation_seeds: ratios.iter().filter(|r| r.zero_violations).count(),
        mean_violations: ratios.iter().map(|r| r.violations as f64).sum::<f64>() / n,
        mean_ptr: ratios.iter().map(|r| r.ptr).sum::<f64>() / n,
    })
}
