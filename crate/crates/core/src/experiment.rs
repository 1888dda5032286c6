//! Batch runs over grids of ID spaces and device sets, with CSV output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{CdModel, DeviceId};
use crate::dense::{width_for_known_n, AttemptSummary, ExponentialSearch};
use crate::error::{Error, Result};
use crate::partitions::PartitionFamily;
use crate::protocols::{build, InnerElection, ProtocolKind};
use crate::runtime::{execute, Protocol, ProtocolConfig, RunReport};
use crate::tradeoff::{choose_params, PartitionTradeoff};

/// Largest `N` for which every subset is enumerated.
pub const ALL_SUBSETS_LIMIT: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SubsetGen {
    /// Every nonempty subset of `[N]`.
    All,
    /// `trials` uniform subsets, of size `size` or of a uniform size in
    /// `1..=min(N, 64)`.
    Random { size: Option<u64>, trials: u64 },
    Explicit(Vec<Vec<DeviceId>>),
    /// `trials` uniform subsets of size `ceil(c N)`.
    Density { c: f64, trials: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub protocol: ProtocolKind,
    pub model: CdModel,
    pub n_grid: Vec<u64>,
    pub subsets: SubsetGen,
    pub known_n: Option<u64>,
    pub k: Option<u32>,
    pub epsilon: Option<f64>,
    pub b: Option<u64>,
    pub c: Option<f64>,
    pub seed: u64,
    pub inner: InnerElection,
    pub family: Option<PathBuf>,
    pub emit_transcripts: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(protocol: ProtocolKind, model: CdModel, n_grid: Vec<u64>, subsets: SubsetGen) -> Self {
        ExperimentSpec {
            protocol,
            model,
            n_grid,
            subsets,
            known_n: None,
            k: None,
            epsilon: None,
            b: None,
            c: None,
            seed: 0,
            inner: InnerElection::Auto,
            family: None,
            emit_transcripts: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::InvalidParams("empty N grid".into()));
        }
        for &n in &self.n_grid {
            self.config(n).validate()?;
            if self.subsets == SubsetGen::All && n > ALL_SUBSETS_LIMIT {
                return Err(Error::InvalidParams(format!(
                    "all-subsets generator is limited to N <= {ALL_SUBSETS_LIMIT}, got {n}"
                )));
            }
        }
        if let SubsetGen::Density { c, .. } = self.subsets {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::InvalidParams(format!("density must lie in (0, 1], got {c}")));
            }
        }
        if let Some(c) = self.c {
            if c <= 0.0 {
                return Err(Error::InvalidParams(format!("C must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn config(&self, n: u64) -> ProtocolConfig {
        ProtocolConfig {
            model: self.model,
            id_space: n,
            known_n: self.known_n,
            known_upper_n: self.known_n,
            k: self.k,
            epsilon: self.epsilon,
            b: self.b,
            seed: self.seed,
            inner_election: self.inner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Row {
    pub protocol: String,
    pub model: String,
    #[serde(rename = "N")]
    pub big_n: u64,
    pub n: u64,
    pub b: Option<u64>,
    pub k: Option<u32>,
    pub rounds: u64,
    pub max_energy: u64,
    pub strict: bool,
    pub easy: bool,
    pub transcript_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub protocol: String,
    #[serde(rename = "N")]
    pub big_n: u64,
    pub runs: u64,
    pub max_energy: u64,
    pub mean_energy: f64,
    pub max_rounds: u64,
    pub mean_rounds: f64,
    pub strict_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttemptRow {
    pub run: usize,
    pub attempt: u32,
    pub b: u64,
    #[serde(rename = "N_i")]
    pub space: u64,
    pub success: bool,
    pub energy_max: u64,
    pub rounds: u64,
}

impl AttemptRow {
    fn new(run: usize, s: AttemptSummary) -> Self {
        AttemptRow {
            run,
            attempt: s.attempt,
            b: s.b,
            space: s.space,
            success: s.success,
            energy_max: s.energy_max,
            rounds: s.rounds,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExperimentOutput {
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    pub attempts: Vec<AttemptRow>,
}

impl ExperimentOutput {
    pub fn all_strict(&self) -> bool {
        self.rows.iter().all(|r| r.strict)
    }

    pub fn write_rows<W: Write>(&self, w: W) -> Result<()> {
        write_csv(w, &self.rows)
    }

    pub fn write_aggregates<W: Write>(&self, w: W) -> Result<()> {
        write_csv(w, &self.aggregates)
    }

    pub fn write_attempts<W: Write>(&self, w: W) -> Result<()> {
        write_csv(w, &self.attempts)
    }
}

fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    wr.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Round after the last non-idle slot.
pub fn completion_rounds(report: &RunReport) -> u64 {
    report.transcript.rounds.last().map_or(0, |r| r.round + 1)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut r = SplitMix64::seed_from_u64(seed ^ a.rotate_left(32) ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    r.gen()
}

fn random_subset(n: u64, size: u64, seed: u64) -> Vec<DeviceId> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut v: Vec<u64> = index::sample(&mut rng, n as usize, size.min(n) as usize)
        .into_iter()
        .map(|i| i as u64 + 1)
        .collect();
    v.sort_unstable();
    v
}

/// Device sets for one ID space, in a fixed order.
pub fn device_sets(gen: &SubsetGen, n: u64, seed: u64) -> Result<Vec<Vec<DeviceId>>> {
    Ok(match gen {
        SubsetGen::All => {
            if n > ALL_SUBSETS_LIMIT {
                return Err(Error::InvalidParams(format!("N = {n} too large for all subsets")));
            }
            (1u64..(1 << n))
                .map(|mask| (1..=n).filter(|i| mask >> (i - 1) & 1 == 1).collect())
                .collect()
        }
        SubsetGen::Random { size, trials } => (0..*trials)
            .map(|t| {
                let s = mix(seed, n, t);
                let size = size.unwrap_or_else(|| {
                    SplitMix64::seed_from_u64(s ^ 1).gen_range(1..=n.min(64))
                });
                random_subset(n, size, s)
            })
            .collect(),
        SubsetGen::Explicit(sets) => sets
            .iter()
            .map(|v| {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                if v.iter().any(|&x| x == 0 || x > n) {
                    return Err(Error::InvalidParams(format!("device set {v:?} not inside [1, {n}]")));
                }
                Ok(v)
            })
            .collect::<Result<_>>()?,
        SubsetGen::Density { c, trials } => {
            let size = ((c * n as f64).ceil() as u64).clamp(1, n);
            (0..*trials).map(|t| random_subset(n, size, mix(seed, n, t))).collect()
        }
    })
}

enum Built {
    Plain(Box<dyn Protocol>),
    Search(ExponentialSearch),
}

impl Built {
    fn protocol(&self) -> &dyn Protocol {
        match self {
            Built::Plain(p) => p.as_ref(),
            Built::Search(p) => p,
        }
    }
}

fn build_for(spec: &ExperimentSpec, n: u64) -> Result<(Built, Option<u64>)> {
    let cfg = spec.config(n);
    cfg.validate()?;
    let kind = spec.protocol;
    if kind == ProtocolKind::ExponentialSearch {
        return Ok((Built::Search(ExponentialSearch::new(spec.model, n)), None));
    }
    if kind == ProtocolKind::PartitionTradeoff {
        if let Some(path) = &spec.family {
            let file = fs::File::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let fam = PartitionFamily::read_from(std::io::BufReader::new(file))?;
            if fam.n != n {
                return Err(Error::InvalidParams(format!(
                    "family is for N = {} but the grid has N = {n}",
                    fam.n
                )));
            }
            let b = fam.b;
            let p = PartitionTradeoff::new(spec.model, Arc::new(fam), spec.inner)?;
            return Ok((Built::Plain(Box::new(p)), Some(b)));
        }
        if let Some(c) = spec.c {
            let params = choose_params(
                n,
                cfg.known_upper_n.ok_or_else(|| Error::InvalidParams("partition-tradeoff requires --n".into()))?,
                cfg.k.ok_or_else(|| Error::InvalidParams("partition-tradeoff requires --k".into()))?,
                cfg.epsilon.ok_or_else(|| Error::InvalidParams("partition-tradeoff requires --epsilon".into()))?,
            )?;
            let opts = crate::partitions::FamilyOptions {
                c,
                ..Default::default()
            };
            let fam = crate::partitions::generate_family(
                n,
                params.b,
                params.epsilon_tilde,
                params.known_upper_n,
                cfg.seed,
                &opts,
            )?;
            let p = PartitionTradeoff::new(spec.model, Arc::new(fam), spec.inner)?;
            return Ok((Built::Plain(Box::new(p)), Some(params.b)));
        }
    }
    let p = build(kind, &cfg)?;
    let b = match kind {
        ProtocolKind::DenseSimple | ProtocolKind::DenseImproved => {
            cfg.b.or_else(|| cfg.known_n.map(|m| width_for_known_n(n, m)))
        }
        ProtocolKind::PartitionTradeoff => {
            choose_params(n, cfg.known_upper_n.unwrap_or(1), cfg.k.unwrap_or(1), cfg.epsilon.unwrap_or(0.5))
                .ok()
                .map(|p| p.b)
        }
        ProtocolKind::StrongTradeoff if p.name() != "halving" => {
            choose_params(n, cfg.known_upper_n.unwrap_or(1), cfg.k.unwrap_or(1), cfg.epsilon.unwrap_or(0.5))
                .ok()
                .map(|p| p.b)
        }
        _ => None,
    };
    Ok((Built::Plain(p), b))
}

struct Job {
    big_n: u64,
    set: Vec<DeviceId>,
}

/// Run every `(N, V)` of the spec. Results are in grid order regardless of
/// how the runs are scheduled across threads.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let mut built = BTreeMap::new();
    let mut jobs = Vec::new();
    for &n in &spec.n_grid {
        if let std::collections::btree_map::Entry::Vacant(e) = built.entry(n) {
            e.insert(build_for(spec, n)?);
        }
        for set in device_sets(&spec.subsets, n, spec.seed)? {
            jobs.push(Job { big_n: n, set });
        }
    }
    if let Some(dir) = &spec.emit_transcripts {
        fs::create_dir_all(dir).map_err(|e| Error::Parse(format!("{}: {e}", dir.display())))?;
    }
    let results: Vec<Result<(Row, Vec<AttemptSummary>)>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let (p, b) = &built[&job.big_n];
            let report = execute(p.protocol(), job.set.iter().copied())?;
            let attempts = match p {
                Built::Search(s) => s.attempt_summaries(&report),
                Built::Plain(_) => Vec::new(),
            };
            let b = match p {
                Built::Search(_) => attempts.last().map(|a| a.b),
                Built::Plain(_) => *b,
            };
            if let Some(dir) = &spec.emit_transcripts {
                write_transcript(dir, spec, i, job.big_n, &report)?;
            }
            Ok((
                Row {
                    protocol: spec.protocol.to_string(),
                    model: spec.model.to_string(),
                    big_n: job.big_n,
                    n: job.set.len() as u64,
                    b,
                    k: spec.k,
                    rounds: completion_rounds(&report),
                    max_energy: report.ledger.max_energy,
                    strict: report.strict_success,
                    easy: report.easy_success,
                    transcript_hash: format!("{:016x}", report.transcript_hash),
                },
                attempts,
            ))
        })
        .collect();
    let mut out = ExperimentOutput::default();
    for (run, r) in results.into_iter().enumerate() {
        let (row, attempts) = r?;
        out.rows.push(row);
        out.attempts
            .extend(attempts.into_iter().map(|s| AttemptRow::new(run, s)));
    }
    out.aggregates = aggregate(&out.rows);
    Ok(out)
}

fn write_transcript(dir: &Path, spec: &ExperimentSpec, run: usize, n: u64, report: &RunReport) -> Result<()> {
    let path = dir.join(format!("{}_{}_N{}_{:06}.tsv", spec.protocol, spec.model, n, run));
    let mut f = fs::File::create(&path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    report
        .transcript
        .write_to(&mut f)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, u64), Vec<&Row>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.protocol.clone(), r.big_n)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((protocol, big_n), rs)| {
            let runs = rs.len() as u64;
            Aggregate {
                protocol,
                big_n,
                runs,
                max_energy: rs.iter().map(|r| r.max_energy).max().unwrap_or(0),
                mean_energy: rs.iter().map(|r| r.max_energy as f64).sum::<f64>() / runs as f64,
                max_rounds: rs.iter().map(|r| r.rounds).max().unwrap_or(0),
                mean_rounds: rs.iter().map(|r| r.rounds as f64).sum::<f64>() / runs as f64,
                strict_failures: rs.iter().filter(|r| !r.strict).count() as u64,
            }
        })
        .collect()
}

/// Parse device sets, one per line, IDs separated by spaces or commas.
pub fn parse_device_sets(text: &str) -> Result<Vec<Vec<DeviceId>>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<u64>().map_err(|_| Error::Parse(format!("bad device id `{t}`"))))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_all_subsets_of_eight() {
        let spec = ExperimentSpec::new(ProtocolKind::Pairing, CdModel::NoCd, vec![8], SubsetGen::All);
        let out = run_experiment(&spec).unwrap();
        assert_eq!(out.rows.len(), 255);
        assert!(out.all_strict());
        assert_eq!(out.aggregates.len(), 1);
        assert_eq!(out.aggregates[0].runs, 255);
    }

    #[test]
    fn all_subsets_limit() {
        let spec = ExperimentSpec::new(ProtocolKind::Pairing, CdModel::NoCd, vec![21], SubsetGen::All);
        assert!(run_experiment(&spec).is_err());
    }

    #[test]
    fn bad_epsilon_is_rejected() {
        let mut spec = ExperimentSpec::new(
            ProtocolKind::PartitionTradeoff,
            CdModel::SenderCd,
            vec![64],
            SubsetGen::Random { size: Some(2), trials: 3 },
        );
        spec.epsilon = Some(1.5);
        spec.k = Some(3);
        spec.known_n = Some(2);
        assert!(matches!(run_experiment(&spec), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn csv_is_reproducible() {
        let mut spec = ExperimentSpec::new(
            ProtocolKind::DenseImproved,
            CdModel::NoCd,
            vec![64, 128],
            SubsetGen::Density { c: 0.5, trials: 20 },
        );
        spec.b = Some(4);
        spec.seed = 77;
        let csv = |spec: &ExperimentSpec| {
            let mut buf = Vec::new();
            run_experiment(spec).unwrap().write_rows(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = csv(&spec);
        assert_eq!(a, csv(&spec));
        assert!(a.starts_with("protocol,model,N,n,b,k,rounds,max_energy,strict,easy,transcript_hash\n"));
        spec.seed = 78;
        assert_ne!(a, csv(&spec));
    }

    #[test]
    fn explicit_sets_and_parsing() {
        let sets = parse_device_sets("1 2 3\n# comment\n4,5\n\n").unwrap();
        assert_eq!(sets, vec![vec![1, 2, 3], vec![4, 5]]);
        let spec = ExperimentSpec::new(
            ProtocolKind::ExponentialSearch,
            CdModel::ReceiverCd,
            vec![16],
            SubsetGen::Explicit(sets),
        );
        let out = run_experiment(&spec).unwrap();
        assert!(out.all_strict());
        assert!(!out.attempts.is_empty());
        let mut buf = Vec::new();
        out.write_attempts(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("run,attempt,b,N_i,success,energy_max,rounds\n"));
        let bad = ExperimentSpec::new(
            ProtocolKind::Pairing,
            CdModel::NoCd,
            vec![4],
            SubsetGen::Explicit(vec![vec![5]]),
        );
        assert!(run_experiment(&bad).is_err());
    }

    #[test]
    fn density_energy_grows_as_density_falls() {
        let mut last = 0;
        for c in [1.0, 0.5, 0.25] {
            let mut spec = ExperimentSpec::new(
                ProtocolKind::ExponentialSearch,
                CdModel::NoCd,
                vec![1 << 12],
                SubsetGen::Density { c, trials: 4 },
            );
            spec.seed = 5;
            let out = run_experiment(&spec).unwrap();
            let e = out.aggregates[0].max_energy;
            assert!(e >= last, "c={c}: {e} < {last}");
            last = e;
        }
    }
}
