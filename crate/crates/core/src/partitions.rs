//! Good partition families and the balls-into-bins estimate behind them.
//!
//! A family of `K` partitions of `[N]` into `b` parts is good for `n_max` if
//! every `V ⊆ [N]` with `1 <= |V| <= n_max` has, in some partition, a part
//! holding exactly one member of `V`.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::binomial_f64;

/// Name of the generator written into family files.
pub const PRNG_NAME: &str = "splitmix64";

/// Default constant in `K = ceil(C / eps * log_b N)`.
pub const DEFAULT_C: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    pub b: u64,
    /// `part_of[id - 1]` is the 1-based part holding `id`.
    pub part_of: Vec<u32>,
}

impl Partition {
    pub fn part(&self, id: u64) -> u32 {
        self.part_of[(id - 1) as usize]
    }

    /// Whether some part holds exactly one member of `v`.
    pub fn isolates(&self, v: &[u64]) -> bool {
        v.iter().any(|&x| {
            let p = self.part(x);
            v.iter().filter(|&&y| self.part(y) == p).count() == 1
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Certificate {
    Exhaustive(u64),
    Sampled { trials: u64, failures: u64 },
    Unverified,
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Certificate::Exhaustive(n) => write!(f, "exhaustive:{n}"),
            Certificate::Sampled { trials, failures } => write!(f, "sampled:{trials}:{failures}"),
            Certificate::Unverified => f.write_str("unverified"),
        }
    }
}

impl FromStr for Certificate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad verifier `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["unverified"] => Ok(Certificate::Unverified),
            ["exhaustive", n] => Ok(Certificate::Exhaustive(n.parse().map_err(|_| bad())?)),
            ["sampled", t, f] => Ok(Certificate::Sampled {
                trials: t.parse().map_err(|_| bad())?,
                failures: f.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFamily {
    pub n: u64,
    pub b: u64,
    pub epsilon_tilde: f64,
    pub n_max: u64,
    /// Seed the partitions were drawn from (after any Las Vegas retries).
    pub seed: u64,
    pub c: f64,
    pub verified: Certificate,
    pub partitions: Vec<Partition>,
    /// Regenerations needed before verification passed.
    #[serde(default)]
    pub retries: u32,
}

impl PartitionFamily {
    pub fn k(&self) -> usize {
        self.partitions.len()
    }

    /// Family with every ID in its own part (`b = N`), good for any `n_max`.
    pub fn singletons(n: u64) -> Self {
        PartitionFamily {
            n,
            b: n,
            epsilon_tilde: 0.5,
            n_max: n,
            seed: 0,
            c: DEFAULT_C,
            verified: Certificate::Unverified,
            partitions: vec![Partition {
                b: n,
                part_of: (1..=n as u32).collect(),
            }],
            retries: 0,
        }
    }

    /// `k` copies of the partition with a single part.
    pub fn single_part(n: u64, k: usize) -> Self {
        PartitionFamily {
            n,
            b: 1,
            epsilon_tilde: 0.5,
            n_max: n,
            seed: 0,
            c: DEFAULT_C,
            verified: Certificate::Unverified,
            partitions: vec![
                Partition {
                    b: 1,
                    part_of: vec![1; n as usize],
                };
                k
            ],
            retries: 0,
        }
    }

    /// First `(i, j)` (0-based partition, 1-based part) isolating a member of `v`.
    pub fn witness(&self, v: &[u64]) -> Option<(usize, u32)> {
        self.partitions.iter().enumerate().find_map(|(i, p)| {
            v.iter().find_map(|&x| {
                let j = p.part(x);
                (v.iter().filter(|&&y| p.part(y) == j).count() == 1).then_some((i, j))
            })
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {}",
            self.n,
            self.b,
            self.k(),
            self.epsilon_tilde,
            self.n_max,
            self.seed,
            self.c,
            self.verified,
            PRNG_NAME
        )?;
        let mut line = String::new();
        for p in &self.partitions {
            line.clear();
            for (i, part) in p.part_of.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&part.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty family file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 8 && h.len() != 9 {
            return Err(Error::Parse(format!("bad family header `{header}`")));
        }
        if h.len() == 9 && h[8] != PRNG_NAME {
            return Err(Error::Parse(format!("unknown generator `{}`", h[8])));
        }
        fn num<T: FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad {what} `{s}`")))
        }
        let n: u64 = num(h[0], "N")?;
        let b: u64 = num(h[1], "b")?;
        let k: usize = num(h[2], "K")?;
        let mut partitions = Vec::with_capacity(k);
        for line in lines {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let part_of = line
                .split_whitespace()
                .map(|t| num::<u32>(t, "part index"))
                .collect::<Result<Vec<_>>>()?;
            if part_of.len() as u64 != n || part_of.iter().any(|&p| p == 0 || p as u64 > b) {
                return Err(Error::Parse(format!(
                    "partition line {} is not a map [N] -> [b]",
                    partitions.len() + 1
                )));
            }
            partitions.push(Partition { b, part_of });
        }
        if partitions.len() != k {
            return Err(Error::Parse(format!(
                "header says K = {k} but found {} partitions",
                partitions.len()
            )));
        }
        Ok(PartitionFamily {
            n,
            b,
            epsilon_tilde: num(h[3], "epsilon_tilde")?,
            n_max: num(h[4], "n_max")?,
            seed: num(h[5], "seed")?,
            c: num(h[6], "C")?,
            verified: h[7].parse()?,
            partitions,
            retries: 0,
        })
    }
}

/// `K = max(1, ceil(C / eps * log_b N))`.
pub fn family_size(n: u64, b: u64, epsilon_tilde: f64, c: f64) -> usize {
    if n <= 1 || b <= 1 {
        return 1;
    }
    let log_b_n = (n as f64).ln() / (b as f64).ln();
    let k = (c / epsilon_tilde * log_b_n - 1e-9).ceil();
    (k as usize).max(1)
}

/// `n <= b^(1 - eps)`, with a little slack for exact powers.
pub fn within_lemma_range(n: u64, b: u64, epsilon_tilde: f64) -> bool {
    n as f64 <= (b as f64).powf(1.0 - epsilon_tilde) * (1.0 + 1e-12)
}

#[derive(Debug, Clone)]
pub struct FamilyOptions {
    pub c: f64,
    pub max_retries: u32,
    /// Largest number of subsets checked one by one before sampling instead.
    pub exhaustive_budget: u64,
    pub sample_trials: u64,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        FamilyOptions {
            c: DEFAULT_C,
            max_retries: 16,
            exhaustive_budget: 10_000_000,
            sample_trials: 100_000,
        }
    }
}

/// Draw `K` uniform partitions from `seed` without verifying them.
pub fn draw_family(n: u64, b: u64, epsilon_tilde: f64, n_max: u64, seed: u64, c: f64) -> PartitionFamily {
    let k = family_size(n, b, epsilon_tilde, c);
    let mut rng = SplitMix64::seed_from_u64(seed);
    let partitions = (0..k)
        .map(|_| Partition {
            b,
            part_of: (0..n).map(|_| rng.gen_range(1..=b as u32)).collect(),
        })
        .collect();
    PartitionFamily {
        n,
        b,
        epsilon_tilde,
        n_max,
        seed,
        c,
        verified: Certificate::Unverified,
        partitions,
        retries: 0,
    }
}

/// Las Vegas construction: draw, verify, and redraw from `seed + 1` on a
/// counterexample.
pub fn generate_family(
    n: u64,
    b: u64,
    epsilon_tilde: f64,
    n_max: u64,
    seed: u64,
    opts: &FamilyOptions,
) -> Result<PartitionFamily> {
    if n == 0 || b < 2 && n > 1 {
        return Err(Error::InvalidParams(format!("need N >= 1 and b >= 2, got N={n} b={b}")));
    }
    if !(epsilon_tilde > 0.0 && epsilon_tilde < 1.0) {
        return Err(Error::InvalidParams(format!(
            "epsilon_tilde must lie in (0, 1), got {epsilon_tilde}"
        )));
    }
    if !within_lemma_range(n_max, b.max(1), epsilon_tilde) {
        return Err(Error::InvalidParams(format!(
            "n_max = {n_max} exceeds b^(1-eps) = {:.3}",
            (b as f64).powf(1.0 - epsilon_tilde)
        )));
    }
    let b = b.max(1);
    for retry in 0..=opts.max_retries {
        let s = seed.wrapping_add(retry as u64);
        let mut fam = draw_family(n, b, epsilon_tilde, n_max, s, opts.c);
        match verify_family(&fam, VerifyMode::Auto, opts) {
            Verification::Pass(cert) => {
                fam.verified = cert;
                fam.retries = retry;
                return Ok(fam);
            }
            Verification::Counterexample(_) => continue,
        }
    }
    Err(Error::RetriesExhausted(opts.max_retries))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    Exhaustive,
    Sampled { trials: u64, seed: u64 },
    /// Exhaustive within the budget, sampled otherwise.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verification {
    Pass(Certificate),
    Counterexample(Vec<u64>),
}

impl Verification {
    pub fn passed(&self) -> bool {
        matches!(self, Verification::Pass(_))
    }
}

/// Number of nonempty subsets of `[n]` of size at most `m`.
pub fn subset_count(n: u64, m: u64) -> f64 {
    (1..=m.min(n)).map(|i| binomial_f64(n, i)).sum()
}

pub fn verify_family(family: &PartitionFamily, mode: VerifyMode, opts: &FamilyOptions) -> Verification {
    let n_max = family.n_max.min(family.n);
    let mode = match mode {
        VerifyMode::Auto if subset_count(family.n, n_max) <= opts.exhaustive_budget as f64 => {
            VerifyMode::Exhaustive
        }
        VerifyMode::Auto => VerifyMode::Sampled {
            trials: opts.sample_trials,
            seed: family.seed ^ 0x9e37_79b9_7f4a_7c15,
        },
        m => m,
    };
    match mode {
        VerifyMode::Exhaustive => match exhaustive_counterexample(family, n_max) {
            Some(v) => Verification::Counterexample(v),
            None => Verification::Pass(Certificate::Exhaustive(n_max)),
        },
        VerifyMode::Sampled { trials, seed } => {
            let mut rng = SplitMix64::seed_from_u64(seed);
            for size in 1..=n_max {
                let samples: Vec<Vec<u64>> = (0..trials)
                    .map(|_| {
                        let mut v: Vec<u64> = index::sample(&mut rng, family.n as usize, size as usize)
                            .into_iter()
                            .map(|i| i as u64 + 1)
                            .collect();
                        v.sort_unstable();
                        v
                    })
                    .collect();
                if let Some(v) = samples.into_par_iter().find_first(|v| family.witness(v).is_none()) {
                    return Verification::Counterexample(v);
                }
            }
            Verification::Pass(Certificate::Sampled {
                trials: trials * n_max,
                failures: 0,
            })
        }
        VerifyMode::Auto => unreachable!(),
    }
}

fn exhaustive_counterexample(family: &PartitionFamily, n_max: u64) -> Option<Vec<u64>> {
    if n_max == 0 {
        return None;
    }
    // Split on the smallest element so the search parallelises but the
    // reported counterexample is the lexicographically first one.
    (1..=family.n).into_par_iter().find_map_first(|first| {
        let mut cur = vec![first];
        search_from(family, n_max, &mut cur)
    })
}

fn search_from(family: &PartitionFamily, n_max: u64, cur: &mut Vec<u64>) -> Option<Vec<u64>> {
    if family.witness(cur).is_none() {
        return Some(cur.clone());
    }
    if cur.len() as u64 == n_max {
        return None;
    }
    let last = *cur.last().unwrap();
    for next in last + 1..=family.n {
        cur.push(next);
        let found = search_from(family, n_max, cur);
        cur.pop();
        if found.is_some() {
            return found;
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BallsInBins {
    pub n: u64,
    pub b: u64,
    pub trials: u64,
    pub estimate: f64,
    pub std_err: f64,
    /// `1 - (4n/b)^(n/2)`.
    pub analytic_bound: f64,
}

/// Monte Carlo estimate of `Pr[some bin holds exactly one ball]` for `n`
/// balls thrown uniformly into `b` bins.
pub fn balls_in_bins_singleton_prob(n: u64, b: u64, trials: u64, seed: u64) -> Result<BallsInBins> {
    if n == 0 || b == 0 || 2 * n > b {
        return Err(Error::InvalidParams(format!("need 1 <= n <= b/2, got n={n} b={b}")));
    }
    if trials < 10_000 {
        return Err(Error::InvalidParams(format!("need at least 10^4 trials, got {trials}")));
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut bins = vec![0u32; b as usize];
    let mut hits = 0u64;
    for _ in 0..trials {
        let mut used = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let j = rng.gen_range(0..b as usize);
            bins[j] += 1;
            used.push(j);
        }
        if used.iter().any(|&j| bins[j] == 1) {
            hits += 1;
        }
        for j in used {
            bins[j] = 0;
        }
    }
    let p = hits as f64 / trials as f64;
    Ok(BallsInBins {
        n,
        b,
        trials,
        estimate: p,
        std_err: (p * (1.0 - p) / trials as f64).sqrt(),
        analytic_bound: 1.0 - (4.0 * n as f64 / b as f64).powf(n as f64 / 2.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_subsets_up_to(n: u64, m: u64) -> Vec<Vec<u64>> {
        (1u32..(1 << n))
            .filter(|mask| mask.count_ones() as u64 <= m)
            .map(|mask| (1..=n).filter(|i| mask >> (i - 1) & 1 == 1).collect())
            .collect()
    }

    #[test]
    fn family_size_formula() {
        assert_eq!(family_size(16, 4, 0.5, 8.0), 32);
        assert_eq!(family_size(256, 16, 0.5, 8.0), 32);
        assert_eq!(family_size(1 << 16, 2, 0.5, 8.0), 256);
        assert_eq!(family_size(1, 2, 0.5, 8.0), 1);
    }

    #[test]
    fn singleton_family_always_passes() {
        let fam = PartitionFamily::singletons(9);
        let v = verify_family(&fam, VerifyMode::Exhaustive, &FamilyOptions::default());
        assert_eq!(v, Verification::Pass(Certificate::Exhaustive(9)));
    }

    #[test]
    fn single_part_family_fails_on_pairs() {
        let fam = PartitionFamily::single_part(5, 3);
        let v = verify_family(&fam, VerifyMode::Exhaustive, &FamilyOptions::default());
        assert_eq!(v, Verification::Counterexample(vec![1, 2]));
    }

    #[test]
    fn trivial_case_b_equals_n() {
        let fam = generate_family(8, 8, 0.5, 1, 3, &FamilyOptions::default()).unwrap();
        assert_eq!(fam.verified, Certificate::Exhaustive(1));
        assert_eq!(fam.retries, 0);
    }

    #[test]
    fn sixteen_by_four_is_exhaustively_good() {
        let fam = generate_family(16, 4, 0.5, 2, 1, &FamilyOptions::default()).unwrap();
        assert_eq!(fam.verified, Certificate::Exhaustive(2));
        assert_eq!(fam.k(), 32);
        // Independent brute force over all 136 subsets.
        for v in all_subsets_up_to(16, 2) {
            let ok = fam.partitions.iter().any(|p| {
                (1..=4).any(|j| v.iter().filter(|&&x| p.part_of[x as usize - 1] == j).count() == 1)
            });
            assert!(ok, "{v:?}");
        }
    }

    #[test]
    fn precondition_violation_is_rejected() {
        let err = generate_family(16, 2, 0.5, 4, 1, &FamilyOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidParams(_)));
    }

    #[test]
    fn retries_are_bounded() {
        // A family of one partition with two parts cannot isolate a member of
        // every 3-set; forcing tiny C makes the Las Vegas loop give up.
        let opts = FamilyOptions {
            c: 0.01,
            max_retries: 2,
            ..FamilyOptions::default()
        };
        let err = generate_family(12, 9, 0.5, 3, 0, &opts).unwrap_err();
        assert!(matches!(err, Error::RetriesExhausted(2)));
    }

    #[test]
    fn file_round_trip() {
        let fam = generate_family(16, 4, 0.5, 2, 7, &FamilyOptions::default()).unwrap();
        let text = fam.to_text();
        assert!(text.starts_with(&format!("16 4 32 0.5 2 {} 8 exhaustive:2 splitmix64\n", fam.seed)));
        let back = PartitionFamily::read_from(text.as_bytes()).unwrap();
        assert_eq!(back.partitions, fam.partitions);
        assert_eq!(back.verified, fam.verified);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(PartitionFamily::read_from("".as_bytes()).is_err());
        assert!(PartitionFamily::read_from("4 2 1 0.5 1 0 8 unverified\n1 2 3 1\n".as_bytes()).is_err());
        assert!(PartitionFamily::read_from("4 2 2 0.5 1 0 8 unverified\n1 2 2 1\n".as_bytes()).is_err());
        assert!(PartitionFamily::read_from("4 2 1 0.5 1 0 8 unverified xorshift\n1 2 2 1\n".as_bytes()).is_err());
    }

    #[test]
    fn sampled_mode_finds_planted_failure() {
        let fam = PartitionFamily::single_part(50, 2);
        let v = verify_family(
            &fam,
            VerifyMode::Sampled { trials: 100, seed: 1 },
            &FamilyOptions::default(),
        );
        match v {
            Verification::Counterexample(v) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    /// Exact `Pr[some singleton bin]` by enumerating all `b^n` placements.
    fn exact_singleton_prob(n: u32, b: u32) -> f64 {
        let total = b.pow(n);
        let mut good = 0u32;
        for code in 0..total {
            let mut counts = vec![0u32; b as usize];
            let mut c = code;
            for _ in 0..n {
                counts[(c % b) as usize] += 1;
                c /= b;
            }
            if counts.contains(&1) {
                good += 1;
            }
        }
        good as f64 / total as f64
    }

    #[test]
    fn balls_exact_two_in_four() {
        assert_eq!(exact_singleton_prob(2, 4), 0.75);
        let r = balls_in_bins_singleton_prob(2, 4, 100_000, 11).unwrap();
        assert!((r.estimate - 0.75).abs() <= 4.0 * (0.75f64 * 0.25 / 1e5).sqrt(), "{}", r.estimate);
    }

    #[test]
    fn balls_single_ball_is_certain() {
        for b in [2, 3, 10] {
            assert_eq!(balls_in_bins_singleton_prob(1, b, 10_000, 5).unwrap().estimate, 1.0);
        }
    }

    #[test]
    fn balls_bound_instance() {
        let r = balls_in_bins_singleton_prob(4, 64, 100_000, 2).unwrap();
        assert_eq!(r.analytic_bound, 0.9375);
        assert!(r.estimate + 3.0 * r.std_err >= r.analytic_bound);
        assert!((r.estimate - exact_singleton_prob(4, 64)).abs() < 4.0 * r.std_err.max(1e-4));
    }

    #[test]
    fn balls_rejects_bad_params() {
        assert!(balls_in_bins_singleton_prob(3, 4, 10_000, 0).is_err());
        assert!(balls_in_bins_singleton_prob(1, 4, 10, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn generation_is_reproducible(n in 2u64..40, b in 2u64..9, seed in any::<u64>()) {
            let a = draw_family(n, b, 0.5, 1, seed, DEFAULT_C);
            let c = draw_family(n, b, 0.5, 1, seed, DEFAULT_C);
            prop_assert_eq!(a.to_text(), c.to_text());
            prop_assert!(a.partitions.iter().all(|p| p.part_of.iter().all(|&x| x >= 1 && x as u64 <= b)));
        }

        #[test]
        fn exhaustive_verdict_matches_brute_force(n in 2u64..9, b in 2u64..5, seed in any::<u64>()) {
            let mut fam = draw_family(n, b, 0.5, n, seed, 0.5);
            fam.n_max = 3.min(n);
            let got = verify_family(&fam, VerifyMode::Exhaustive, &FamilyOptions::default());
            let first_bad = all_subsets_up_to(n, fam.n_max)
                .into_iter()
                .filter(|v| !fam.partitions.iter().any(|p| p.isolates(v)))
                .min();
            match (got, first_bad) {
                (Verification::Pass(_), None) => {}
                (Verification::Counterexample(v), Some(w)) => prop_assert_eq!(v, w),
                (g, w) => prop_assert!(false, "{:?} vs {:?}", g, w),
            }
        }
    }

    #[test]
    fn singleton_probability_grows_with_bins() {
        let mut last = 0.0;
        for b in [8u64, 16, 32, 64, 128] {
            let p = balls_in_bins_singleton_prob(4, b, 40_000, 9).unwrap().estimate;
            assert!(p + 0.01 >= last, "b={b}: {p} < {last}");
            last = p;
        }
    }
}
