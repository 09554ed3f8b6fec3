//! Multi-seed sweeps, their summary statistics and the encoding decision rule.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::encodings::{Activation, Variant};
use crate::error::{Error, Result};
use crate::model::{format_nmax, parse_nmax, train, ModelConfig, TrainOutcome};

/// Normal quantile used for the 95% interval.
pub const Z_95: f64 = 1.96;
/// Hit Dev (in percent) above which a dataset counts as high-deviation.
pub const DEFAULT_THRESHOLD: f64 = 3.0;
/// Runs a baseline needs before a recommendation is made.
pub const MIN_BASELINE_RUNS: usize = 3;

pub const SUMMARY_HEADER: &str = "Act\tencoding\tnmax\tHit Mean\tHit Dev\tNDCG Mean\tNDCG Dev\truns\tCI\tCI-length";

/// Metrics of one finished seed, as fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub hit_at_10: f64,
    pub ndcg: f64,
    pub best_epoch: usize,
}

impl SeedResult {
    pub fn from_outcome(seed: u64, outcome: &TrainOutcome) -> Self {
        SeedResult {
            seed,
            hit_at_10: outcome.test.hit_at_10,
            ndcg: outcome.test.ndcg,
            best_epoch: outcome.best_epoch,
        }
    }
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_and_dev(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `mean ± z·dev/√runs`, bounds rounded to 2 decimals, plus its length.
pub fn confidence_interval(mean: f64, dev: f64, runs: usize) -> ((f64, f64), f64) {
    let half = Z_95 * dev / (runs.max(1) as f64).sqrt();
    let (lo, hi) = (round2(mean - half), round2(mean + half));
    ((lo, hi), round2(hi - lo))
}

/// Aggregated metrics of one configuration. Means and deviations are in
/// percent; the interval is over Hit@10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Identity of the configuration with the seed removed.
    pub fingerprint: String,
    pub activation: Activation,
    pub encoding: Variant,
    pub nmax: Option<f64>,
    pub results: Vec<SeedResult>,
    pub hit_mean: f64,
    pub hit_dev: f64,
    pub ndcg_mean: f64,
    pub ndcg_dev: f64,
    pub runs: usize,
    pub ci: (f64, f64),
    pub ci_length: f64,
}

/// The configuration as JSON with the seed zeroed.
pub fn fingerprint(config: &ModelConfig) -> String {
    let cfg = ModelConfig { seed: 0, ..config.clone() };
    serde_json::to_string(&cfg).expect("configs always serialize")
}

pub fn aggregate(config: &ModelConfig, results: Vec<SeedResult>) -> Result<SweepSummary> {
    if results.is_empty() {
        return Err(Error::InsufficientRuns { runs: 0, needed: 1 });
    }
    let hits: Vec<f64> = results.iter().map(|r| 100.0 * r.hit_at_10).collect();
    let ndcgs: Vec<f64> = results.iter().map(|r| 100.0 * r.ndcg).collect();
    let (hit_mean, hit_dev) = mean_and_dev(&hits);
    let (ndcg_mean, ndcg_dev) = mean_and_dev(&ndcgs);
    let runs = results.len();
    let (ci, ci_length) = confidence_interval(hit_mean, hit_dev, runs);
    Ok(SweepSummary {
        fingerprint: fingerprint(config),
        activation: config.activation,
        encoding: config.encoding.variant,
        nmax: config.nmax,
        results,
        hit_mean,
        hit_dev,
        ndcg_mean,
        ndcg_dev,
        runs,
        ci,
        ci_length,
    })
}

impl SweepSummary {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}\t[{:.2}, {:.2}]\t{:.2}",
            self.activation,
            self.encoding,
            format_nmax(self.nmax),
            self.hit_mean,
            self.hit_dev,
            self.ndcg_mean,
            self.ndcg_dev,
            self.runs,
            self.ci.0,
            self.ci.1,
            self.ci_length
        )
    }

    /// Parse one data row of a summary table. Per-seed results and the
    /// fingerprint are not part of the table and come back empty.
    pub fn from_tsv_row(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::config(format!("summary row: bad {what} in '{line}'"));
        if cols.len() != 10 {
            return Err(bad("column count"));
        }
        let num = |i: usize, what: &str| cols[i].trim().parse::<f64>().map_err(|_| bad(what));
        let ci = cols[8]
            .trim()
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .and_then(|s| s.split_once(','))
            .ok_or_else(|| bad("CI"))?;
        let lo = ci.0.trim().parse::<f64>().map_err(|_| bad("CI"))?;
        let hi = ci.1.trim().parse::<f64>().map_err(|_| bad("CI"))?;
        Ok(SweepSummary {
            fingerprint: String::new(),
            activation: Activation::from_str(cols[0])?,
            encoding: Variant::from_str(cols[1])?,
            nmax: parse_nmax(cols[2])?,
            results: Vec::new(),
            hit_mean: num(3, "Hit Mean")?,
            hit_dev: num(4, "Hit Dev")?,
            ndcg_mean: num(5, "NDCG Mean")?,
            ndcg_dev: num(6, "NDCG Dev")?,
            runs: cols[7].trim().parse().map_err(|_| bad("runs"))?,
            ci: (lo, hi),
            ci_length: num(9, "CI-length")?,
        })
    }
}

pub fn summary_tsv(summaries: &[SweepSummary]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for summary in summaries {
        s.push_str(&summary.tsv_row());
        s.push('\n');
    }
    s
}

pub fn parse_summary_tsv(text: &str) -> Result<Vec<SweepSummary>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(SUMMARY_HEADER) {
        return Err(Error::config("summary table header does not match"));
    }
    lines.filter(|l| !l.trim().is_empty()).map(SweepSummary::from_tsv_row).collect()
}

/// Unweighted means over the summaries of one encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgDev {
    pub encoding: Variant,
    pub hit_dev: f64,
    pub ndcg_dev: f64,
    pub runs: f64,
    pub ci_length: f64,
    pub configs: usize,
}

/// Group summaries by encoding and average their deviations, in the
/// order the encodings first appear.
pub fn avg_dev(summaries: &[SweepSummary]) -> Vec<AvgDev> {
    let mut order: Vec<Variant> = Vec::new();
    let mut groups: HashMap<Variant, Vec<&SweepSummary>> = HashMap::new();
    for s in summaries {
        if !groups.contains_key(&s.encoding) {
            order.push(s.encoding);
        }
        groups.entry(s.encoding).or_default().push(s);
    }
    order
        .into_iter()
        .map(|encoding| {
            let g = &groups[&encoding];
            let n = g.len() as f64;
            let mean = |f: fn(&SweepSummary) -> f64| g.iter().map(|s| f(s)).sum::<f64>() / n;
            AvgDev {
                encoding,
                hit_dev: mean(|s| s.hit_dev),
                ndcg_dev: mean(|s| s.ndcg_dev),
                runs: mean(|s| s.runs as f64),
                ci_length: mean(|s| s.ci_length),
                configs: g.len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub variant: Variant,
    pub hit_dev: f64,
    pub threshold: f64,
    pub runs: usize,
}

impl fmt::Display for Recommendation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cmp = if self.hit_dev > self.threshold { ">" } else { "<=" };
        write!(
            f,
            "{}: baseline Hit Dev {:.2} {cmp} threshold {:.2} over {} runs",
            self.variant, self.hit_dev, self.threshold, self.runs
        )
    }
}

/// High-deviation datasets get the relative encoding, the rest the
/// concatenated rotatory one.
pub fn recommend_encoding(baseline: &SweepSummary, threshold: f64) -> Result<Recommendation> {
    if baseline.runs < MIN_BASELINE_RUNS {
        return Err(Error::InsufficientRuns {
            runs: baseline.runs,
            needed: MIN_BASELINE_RUNS,
        });
    }
    let variant = if baseline.hit_dev > threshold {
        Variant::Rmha4
    } else {
        Variant::RotatoryCon
    };
    Ok(Recommendation {
        variant,
        hit_dev: baseline.hit_dev,
        threshold,
        runs: baseline.runs,
    })
}

/// One line of the JSON-lines run ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub fingerprint: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<SeedResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Entries of `path` for `fingerprint`. A missing file is an empty ledger;
/// a truncated final line (from an interrupted write) is skipped.
pub fn read_ledger(path: &Path, fingerprint: &str) -> Result<Vec<LedgerEntry>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LedgerEntry>(line) {
            Ok(e) if e.fingerprint == fingerprint => out.push(e),
            Ok(_) => {}
            Err(_) if k + 1 == lines.len() => log::warn!("{}: ignoring truncated last line", path.display()),
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: k + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub summary: SweepSummary,
    /// Seeds whose run failed, with the error text. Excluded from the summary.
    pub failed: Vec<(u64, String)>,
    /// Seeds taken from the ledger instead of being trained.
    pub resumed: Vec<u64>,
}

/// Called with each freshly trained run, from the worker that trained it.
pub type RunHook<'a> = dyn Fn(&ModelConfig, &TrainOutcome) -> Result<()> + Sync + 'a;

/// Train `template` once per seed on up to `jobs` threads. With a ledger,
/// every finished seed is appended before aggregation and seeds already in
/// the ledger are not retrained.
pub fn sweep(
    template: &ModelConfig,
    ds: &InteractionDataset,
    seeds: &[u64],
    jobs: usize,
    ledger: Option<&Path>,
    hook: Option<&RunHook>,
) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::config("a sweep needs at least one seed"));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::config(format!("seed {dup} is listed twice")));
    }
    template.validate()?;
    let fp = fingerprint(template);

    let mut done: HashMap<u64, LedgerEntry> = HashMap::new();
    if let Some(path) = ledger {
        for e in read_ledger(path, &fp)? {
            done.insert(e.seed, e);
        }
    }
    let resumed: Vec<u64> = seeds.iter().copied().filter(|s| done.contains_key(s)).collect();
    let pending: Vec<u64> = seeds.iter().copied().filter(|s| !done.contains_key(s)).collect();

    let writer = match ledger {
        Some(path) => Some(Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?,
        )),
        None => None,
    };
    let next = AtomicUsize::new(0);
    let fresh: Mutex<Vec<LedgerEntry>> = Mutex::new(Vec::new());
    let first_io_error: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, pending.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = pending.get(k) else { break };
                let cfg = ModelConfig { seed, ..template.clone() };
                let outcome = train(&cfg, ds).and_then(|out| {
                    if let Some(h) = hook {
                        h(&cfg, &out)?;
                    }
                    Ok(out)
                });
                let entry = match outcome {
                    Ok(out) => LedgerEntry {
                        fingerprint: fp.clone(),
                        seed,
                        result: Some(SeedResult::from_outcome(seed, &out)),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("seed {seed} failed: {e}");
                        LedgerEntry {
                            fingerprint: fp.clone(),
                            seed,
                            result: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                if let (Some(w), Some(path)) = (&writer, ledger) {
                    let line = serde_json::to_string(&entry).expect("ledger entries serialize");
                    let mut file = w.lock().unwrap();
                    if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                        first_io_error.lock().unwrap().get_or_insert(Error::io(path, e));
                    }
                }
                fresh.lock().unwrap().push(entry);
            });
        }
    });
    if let Some(e) = first_io_error.into_inner().unwrap() {
        return Err(e);
    }
    for e in fresh.into_inner().unwrap() {
        done.insert(e.seed, e);
    }

    // aggregate in the order the seeds were given, however they finished
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for seed in seeds {
        let entry = &done[seed];
        match (&entry.result, &entry.error) {
            (Some(r), _) => results.push(r.clone()),
            (None, err) => failed.push((*seed, err.clone().unwrap_or_default())),
        }
    }
    if !failed.is_empty() {
        log::warn!("{} of {} seeds failed and are excluded", failed.len(), seeds.len());
    }
    if results.is_empty() {
        return Err(Error::InsufficientRuns { runs: 0, needed: 1 });
    }
    Ok(SweepReport {
        summary: aggregate(template, results)?,
        failed,
        resumed,
    })
}
