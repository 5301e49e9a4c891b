//! Tabular and binary artifacts. Every table is CSV with a header row;
//! floats use the shortest representation that round-trips.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corrector::CorrectorEstimate;
use crate::effective::{EffectiveMatrix, Estimator};
use crate::error::{Error, Result};
use crate::homogenization::{ConvergenceReport, PathEnsemble, RandomEnvReport};
use crate::potential::BoxGeometry;
use crate::torus::{GibbsSampleSet, MixingCurve, TorusState};

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn parse_f64(field: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Parse(format!("not a number: {field:?}")))
}

fn parse_usize(field: &str) -> Result<usize> {
    field.trim().parse().map_err(|_| Error::Parse(format!("not an index: {field:?}")))
}

/// Columns `chain, draw, y_0, …, y_{n−1}`.
pub fn write_gibbs_csv(path: &Path, set: &GibbsSampleSet) -> Result<()> {
    let mut w = writer(path)?;
    let n = set.states.first().map_or(0, TorusState::len);
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend((0..n).map(|k| format!("y_{k}")));
    w.write_record(&header)?;
    let per_chain = set.len() / set.chains.max(1);
    for (i, s) in set.states.iter().enumerate() {
        let mut row = vec![(i / per_chain.max(1)).to_string(), (i % per_chain.max(1)).to_string()];
        row.extend(s.angles().iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the states back with their chain layout. Sampler settings and
/// the acceptance rate are not part of the table and come back zeroed.
pub fn read_gibbs_csv(path: &Path) -> Result<GibbsSampleSet> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut states = Vec::new();
    let mut chains = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Parse("gibbs table needs chain, draw and at least one site".into()));
        }
        chains = chains.max(parse_usize(&rec[0])? + 1);
        let angles = rec.iter().skip(2).map(parse_f64).collect::<Result<Vec<_>>>()?;
        states.push(TorusState::new(angles)?);
    }
    if states.is_empty() {
        return Err(Error::Parse("empty gibbs table".into()));
    }
    Ok(GibbsSampleSet {
        states,
        chains,
        burn_in: 0,
        thin: 0,
        acceptance: 0.0,
        seed: 0,
    })
}

/// Columns `t, raw_gap, sup_gap, se, inconclusive`.
pub fn write_mixing_csv(path: &Path, curve: &MixingCurve) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "raw_gap", "sup_gap", "se", "inconclusive"])?;
    for i in 0..curve.times.len() {
        w.write_record([
            curve.times[i].to_string(),
            curve.raw_gap[i].to_string(),
            curve.sup_gap[i].to_string(),
            curve.se[i].to_string(),
            curve.inconclusive[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `site, point, y_0, …, value, se`.
pub fn write_corrector_csv(path: &Path, estimates: &[CorrectorEstimate]) -> Result<()> {
    let mut w = writer(path)?;
    let n = estimates
        .first()
        .and_then(|e| e.points.first())
        .map_or(0, TorusState::len);
    let mut header = vec!["site".to_string(), "point".to_string()];
    header.extend((0..n).map(|k| format!("y_{k}")));
    header.extend(["value".to_string(), "se".to_string()]);
    w.write_record(&header)?;
    for e in estimates {
        for (i, (p, v)) in e.points.iter().zip(&e.values).enumerate() {
            let mut row = vec![e.site.to_string(), i.to_string()];
            row.extend(p.angles().iter().map(f64::to_string));
            row.extend([v.value.to_string(), v.se.to_string()]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Columns `k, l, value, se, estimator`, with `k`, `l` box indices.
pub fn write_effective_csv(path: &Path, m: &EffectiveMatrix) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["k", "l", "value", "se", "estimator"])?;
    for (r, &k) in m.sites.iter().enumerate() {
        for (c, &l) in m.sites.iter().enumerate() {
            w.write_record([
                k.to_string(),
                l.to_string(),
                m.values[r][c].to_string(),
                m.se[r][c].to_string(),
                m.estimator.tag().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_effective_csv(path: &Path, radius: usize) -> Result<EffectiveMatrix> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut rows = Vec::new();
    let mut estimator = None;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::Parse("effective table needs five columns".into()));
        }
        let tag = &rec[4];
        let est = [Estimator::Derivative, Estimator::Martingale, Estimator::Msd, Estimator::Exact1d]
            .into_iter()
            .find(|e| e.tag() == tag)
            .ok_or_else(|| Error::Parse(format!("unknown estimator {tag:?}")))?;
        estimator = Some(est);
        rows.push((parse_usize(&rec[0])?, parse_usize(&rec[1])?, parse_f64(&rec[2])?, parse_f64(&rec[3])?));
    }
    let mut sites: Vec<usize> = rows.iter().map(|r| r.0).collect();
    sites.dedup();
    let m = sites.len();
    if rows.len() != m * m {
        return Err(Error::Parse("effective table is not a full square block".into()));
    }
    let pos = |k: usize| sites.iter().position(|&s| s == k);
    let mut values = vec![vec![0.0; m]; m];
    let mut se = vec![vec![0.0; m]; m];
    for (k, l, v, s) in rows {
        let (Some(r), Some(c)) = (pos(k), pos(l)) else {
            return Err(Error::Parse("column index outside the block".into()));
        };
        values[r][c] = v;
        se[r][c] = s;
    }
    Ok(EffectiveMatrix {
        radius,
        sites,
        values,
        se,
        estimator: estimator.ok_or_else(|| Error::Parse("empty effective table".into()))?,
    })
}

/// One row per ε of the ladder.
pub fn write_convergence_csv(path: &Path, report: &ConvergenceReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "eps", "paths", "ks_statistic", "ks_p", "energy_statistic", "energy_p", "cov_gap", "cov_gap_se",
        "relative_gap",
    ])?;
    for r in &report.records {
        w.write_record([
            r.eps.to_string(),
            r.paths.to_string(),
            r.ks.statistic.to_string(),
            r.ks.p_value.to_string(),
            r.energy.statistic.to_string(),
            r.energy.p_value.to_string(),
            r.cov_gap.value.to_string(),
            r.cov_gap.se.to_string(),
            r.relative_gap.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `environment, eps, diag_gap, se`.
pub fn write_random_env_csv(path: &Path, report: &RandomEnvReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["environment", "eps", "diag_gap", "se"])?;
    for (e, gaps) in report.per_env.iter().enumerate() {
        for (r, g) in report.averaged.records.iter().zip(gaps) {
            w.write_record([e.to_string(), r.eps.to_string(), g.value.to_string(), g.se.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Appends one JSON object per line.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Started,
    Finished,
    Failed,
}

/// A manifest line describing one pipeline stage. Each stage appends a
/// `started` line before it runs and a closing line afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub status: StageStatus,
    pub seed: u64,
    pub config_sha256: String,
    pub code_version: String,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

/// Header of three little-endian `u64` (dimension, half-width, frames)
/// followed by `f64` values, path-major, then time, then site.
pub fn write_frames(path: &Path, geom: &BoxGeometry, ens: &PathEnsemble) -> Result<()> {
    if ens.n_sites != geom.n_sites() {
        return Err(Error::Domain("ensemble does not match the box".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for v in [geom.dimension as u64, geom.half_width as u64, ens.times.len() as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    for path in &ens.data {
        for v in path {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the box and the per-path flat trajectories.
pub fn read_frames(path: &Path) -> Result<(BoxGeometry, usize, Vec<Vec<f64>>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 {
        return Err(Error::Parse("frame file shorter than its header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    let (d, l, frames) = (word(0) as usize, word(1) as usize, word(2) as usize);
    if d == 0 || d > 3 {
        return Err(Error::Parse(format!("unsupported dimension {d}")));
    }
    let geom = BoxGeometry::new(d, l);
    let per_path = frames * geom.n_sites();
    let body = &bytes[24..];
    if per_path == 0 || body.len() % (8 * per_path) != 0 {
        return Err(Error::Parse("frame body does not divide into whole paths".into()));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((geom, frames, values.chunks(per_path).map(<[f64]>::to_vec).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homogenization::{simulate_xeps, EnsembleConfig, Starts};
    use crate::potential::{Lattice, PotentialSpec};
    use crate::rng::Stream;

    #[test]
    fn effective_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = EffectiveMatrix {
            radius: 1,
            sites: vec![2, 3, 4],
            values: vec![vec![1.25, 0.1, 0.0], vec![0.1, 1.25, 0.1], vec![0.0, 0.1, 1.25]],
            se: vec![vec![0.01; 3]; 3],
            estimator: Estimator::Martingale,
        };
        let p = dir.path().join("abar.csv");
        write_effective_csv(&p, &m).unwrap();
        assert_eq!(read_effective_csv(&p, 1).unwrap(), m);
    }

    #[test]
    fn frames_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let geom = BoxGeometry::new(1, 1);
        let lat = Lattice::new(&PotentialSpec::free(1), geom).unwrap();
        let ens = simulate_xeps(&lat, &EnsembleConfig::new(1.0, 0.05, 0.5, 3), Starts::Fixed(&[0.0; 3]), Stream::root(1))
            .unwrap();
        let p = dir.path().join("frames.bin");
        write_frames(&p, &geom, &ens).unwrap();
        let (g, frames, data) = read_frames(&p).unwrap();
        assert_eq!(g, geom);
        assert_eq!(frames, ens.times.len());
        assert_eq!(data, ens.data);
    }

    #[test]
    fn jsonl_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.jsonl");
        for stage in ["gibbs", "mixing"] {
            let e = ManifestEntry {
                stage: stage.into(),
                status: StageStatus::Finished,
                seed: 7,
                config_sha256: "00".into(),
                code_version: "0".into(),
                wall_seconds: 0.0,
                outputs: vec![],
                summary: serde_json::json!({"ok": true}),
            };
            append_jsonl(&p, &e).unwrap();
        }
        let back: Vec<ManifestEntry> = read_jsonl(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].stage, "mixing");
    }

    #[test]
    fn gibbs_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let lat = Lattice::new(&crate::presets::cosine_single_site(1, 1.0), BoxGeometry::new(1, 1)).unwrap();
        let cfg = crate::torus::GibbsConfig {
            chains: 3,
            burn_in: 10,
            samples_per_chain: 5,
            ..Default::default()
        };
        let set = crate::torus::gibbs_sample(&lat, &cfg, Stream::root(2)).unwrap();
        let p = dir.path().join("gibbs.csv");
        write_gibbs_csv(&p, &set).unwrap();
        let back = read_gibbs_csv(&p).unwrap();
        assert_eq!(back.states, set.states);
        assert_eq!(back.chains, 3);
    }
}
