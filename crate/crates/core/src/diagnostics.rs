//! Convergence diagnostics, posterior summaries and plot-data exports.
//!
//! Split-R̂ uses the classic potential scale reduction over half-chains
//! (no rank normalization):
//!
//! ```text
//! R̂ = sqrt(((n−1)/n · W + B/n) / W)
//! ```
//!
//! with `n` the half-chain length, `W` the mean within-half-chain variance and
//! `B` `n` times the variance of the half-chain means. The effective sample
//! size truncates the pooled autocorrelation sum with Geyer's initial monotone
//! positive sequence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advi::{ElboHistory, VariationalPosterior};
use crate::model::ModelGraph;
use crate::nuts::Trace;
use crate::rng::{self, purpose};

/// Default highest-density interval mass.
pub const HDI_PROB: f64 = 0.94;

/// Upper bound on ESS as a multiple of the total draw count.
pub const ESS_MAX_RATIO: f64 = 1.5;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least {need} draws per chain, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("chains have different lengths")]
    RaggedChains,
    #[error("no chains given")]
    NoChains,
    #[error("nothing to export: {0}")]
    Empty(&'static str),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line}: {detail}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DiagnosticsError + '_ {
    move |source| DiagnosticsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_chains(chains: &[Vec<f64>], min_len: usize) -> Result<usize, DiagnosticsError> {
    let first = chains.first().ok_or(DiagnosticsError::NoChains)?;
    let n = first.len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::RaggedChains);
    }
    if n < min_len {
        return Err(DiagnosticsError::TooFewDraws { need: min_len, got: n });
    }
    Ok(n)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Split-R̂ over `chains` (each a sequence of draws of one scalar).
///
/// `Ok(None)` means "not applicable": every half-chain has zero variance.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<Option<f64>, DiagnosticsError> {
    let n = check_chains(chains, 4)?;
    let half = n / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..]])
        .collect();
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&halves.iter().map(|h| sample_var(h)).collect::<Vec<_>>());
    if !(w > 0.0) {
        return Ok(None);
    }
    let hn = half as f64;
    let b = hn * sample_var(&means);
    let var_plus = (hn - 1.0) / hn * w + b / hn;
    Ok(Some((var_plus / w).sqrt()))
}

/// Effective sample size of the pooled draws in `chains`.
///
/// `Ok(None)` when the draws have zero variance. The result is capped at
/// `ESS_MAX_RATIO` times the total draw count.
pub fn ess(chains: &[Vec<f64>]) -> Result<Option<f64>, DiagnosticsError> {
    let n = check_chains(chains, 4)?;
    let c = chains.len();
    let means: Vec<f64> = chains.iter().map(|ch| mean(ch)).collect();
    let w = mean(&chains.iter().map(|ch| sample_var(ch)).collect::<Vec<_>>());
    let nf = n as f64;
    let b = if c > 1 { nf * sample_var(&means) } else { 0.0 };
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    if !(w > 0.0) || !(var_plus > 0.0) {
        return Ok(None);
    }
    let rho = |t: usize| -> f64 {
        let mut acov = 0.0;
        for (ch, m) in chains.iter().zip(&means) {
            let s: f64 = (0..n - t).map(|i| (ch[i] - m) * (ch[i + t] - m)).sum();
            acov += s / nf;
        }
        acov /= c as f64;
        1.0 - (w - acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if !(pair > 0.0) {
            break;
        }
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / ESS_MAX_RATIO);
    Ok(Some(c as f64 * nf / tau))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Narrowest interval spanning `floor(prob·n) + 1` of the sorted draws.
pub fn hdi(sorted: &[f64], prob: f64) -> (f64, f64) {
    let n = sorted.len();
    let k = ((prob * n as f64).floor() as usize).min(n - 1);
    let mut best = (sorted[0], sorted[k]);
    for i in 1..n - k {
        if sorted[i + k] - sorted[i] < best.1 - best.0 {
            best = (sorted[i], sorted[i + k]);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub median: f64,
    pub q97_5: f64,
    pub hdi_low: f64,
    pub hdi_high: f64,
    pub ess: Option<f64>,
    /// Only for MCMC draws.
    pub rhat: Option<f64>,
    pub mcse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub hdi_prob: f64,
    pub rows: Vec<SummaryRow>,
}

impl PosteriorSummary {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Summary row for one scalar given as chains × draws.
///
/// With `mcmc` false the draws are taken as independent: ESS is the draw
/// count and R̂ is omitted. Moments are accumulated over the sorted draws, so
/// every field except the MCMC ESS and R̂ is invariant to draw order.
pub fn summarize_chains(
    name: &str,
    chains: &[Vec<f64>],
    mcmc: bool,
    hdi_prob: f64,
) -> Result<SummaryRow, DiagnosticsError> {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    if pooled.len() < 4 {
        return Err(DiagnosticsError::TooFewDraws {
            need: 4,
            got: pooled.len(),
        });
    }
    pooled.sort_by(f64::total_cmp);
    let m = mean(&pooled);
    let sd = sample_var(&pooled).sqrt();
    let (hdi_low, hdi_high) = hdi(&pooled, hdi_prob);
    let (ess, rhat) = if !mcmc {
        (Some(pooled.len() as f64), None)
    } else if chains.iter().all(|c| c.len() >= 4) {
        (ess(chains)?, split_rhat(chains)?)
    } else {
        (None, None)
    };
    Ok(SummaryRow {
        name: name.to_owned(),
        mean: m,
        sd,
        q2_5: quantile(&pooled, 0.025),
        median: quantile(&pooled, 0.5),
        q97_5: quantile(&pooled, 0.975),
        hdi_low,
        hdi_high,
        ess,
        rhat,
        mcse: ess.map(|e| sd / e.sqrt()),
    })
}

/// Summary of every element of an MCMC trace.
pub fn summarize_trace(t: &Trace) -> Result<PosteriorSummary, DiagnosticsError> {
    let rows = t
        .names
        .iter()
        .enumerate()
        .map(|(k, name)| summarize_chains(name, &t.element(k), true, HDI_PROB))
        .collect::<Result<_, _>>()?;
    Ok(PosteriorSummary {
        hdi_prob: HDI_PROB,
        rows,
    })
}

/// Summary of independent draws (iteration × element) labelled by `names`.
pub fn summarize_draws(names: &[String], draws: &[Vec<f64>]) -> Result<PosteriorSummary, DiagnosticsError> {
    let rows = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let col = vec![draws.iter().map(|d| d[k]).collect::<Vec<_>>()];
            summarize_chains(name, &col, false, HDI_PROB)
        })
        .collect::<Result<_, _>>()?;
    Ok(PosteriorSummary {
        hdi_prob: HDI_PROB,
        rows,
    })
}

/// Summary of `n` constrained draws from a variational posterior over `m`.
pub fn summarize_variational(
    q: &VariationalPosterior,
    m: &ModelGraph,
    n: usize,
    seed: u64,
) -> Result<PosteriorSummary, DiagnosticsError> {
    let mut r = rng::stream(seed, purpose::SUMMARY, 0);
    let draws: Vec<Vec<f64>> = q.sample(&mut r, n).iter().map(|z| m.constrain(z)).collect();
    summarize_draws(&m.element_names(), &draws)
}

/// Shortest round-tripping scientific form with 17 significant digits.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn format_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), format_float)
}

pub fn summary_csv(s: &PosteriorSummary) -> String {
    let lo = format!("hdi_{}%", fmt_pct((1.0 - s.hdi_prob) / 2.0));
    let hi = format!("hdi_{}%", fmt_pct(1.0 - (1.0 - s.hdi_prob) / 2.0));
    let mut out = format!("parameter,mean,sd,q2.5,q50,q97.5,{lo},{hi},ess,r_hat,mcse\n");
    for r in &s.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            format_float(r.mean),
            format_float(r.sd),
            format_float(r.q2_5),
            format_float(r.median),
            format_float(r.q97_5),
            format_float(r.hdi_low),
            format_float(r.hdi_high),
            format_opt(r.ess),
            format_opt(r.rhat),
            format_opt(r.mcse),
        );
    }
    out
}

fn fmt_pct(p: f64) -> String {
    let v = (p * 1000.0).round() / 10.0;
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn write_summary_csv(s: &PosteriorSummary, path: &Path) -> Result<(), DiagnosticsError> {
    fs::write(path, summary_csv(s)).map_err(io_err(path))
}

/// Writes `iteration,elbo,elbo_smoothed` rows; optionally an SVG next to it.
pub fn export_elbo(h: &ElboHistory, path: &Path, svg: bool) -> Result<(), DiagnosticsError> {
    if h.is_empty() {
        return Err(DiagnosticsError::Empty("ELBO history"));
    }
    let smoothed = h.smoothed();
    let mut out = String::from("iteration,elbo,elbo_smoothed\n");
    for (i, (v, s)) in h.values.iter().zip(&smoothed).enumerate() {
        let _ = writeln!(out, "{i},{},{}", format_float(*v), format_float(*s));
    }
    fs::write(path, out).map_err(io_err(path))?;
    if svg {
        let svg_path = path.with_extension("svg");
        let chart = line_chart("ELBO", &[("smoothed", &smoothed)]);
        fs::write(&svg_path, chart).map_err(io_err(&svg_path))?;
    }
    Ok(())
}

/// Rows of an exported ELBO file.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTable {
    pub elbo: Vec<f64>,
    pub smoothed: Vec<f64>,
}

fn parse_float(path: &Path, line: usize, s: &str) -> Result<f64, DiagnosticsError> {
    s.trim().parse().map_err(|_| DiagnosticsError::Parse {
        path: path.to_path_buf(),
        line,
        detail: format!("not a number: `{s}`"),
    })
}

pub fn read_elbo_csv(path: &Path) -> Result<ElboTable, DiagnosticsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut t = ElboTable {
        elbo: Vec::new(),
        smoothed: Vec::new(),
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(DiagnosticsError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("expected 3 columns, found {}", cols.len()),
            });
        }
        t.elbo.push(parse_float(path, i + 1, cols[1])?);
        t.smoothed.push(parse_float(path, i + 1, cols[2])?);
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub parameter: String,
    pub file: String,
    pub chains: usize,
    pub draws: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub svg: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub chains: usize,
    pub draws: usize,
    pub warmup: usize,
    pub files: Vec<ManifestEntry>,
}

pub const TRACE_MANIFEST: &str = "trace_manifest.json";

fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("trace_{}", s.trim_end_matches('_'))
}

/// Writes one `iteration,chain_0,…` file per element plus a manifest into `dir`.
pub fn export_trace(t: &Trace, dir: &Path, svg: bool) -> Result<TraceManifest, DiagnosticsError> {
    if t.num_chains() == 0 || t.num_draws() == 0 || t.names.is_empty() {
        return Err(DiagnosticsError::Empty("trace"));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    for (k, name) in t.names.iter().enumerate() {
        let chains = t.element(k);
        let stem = file_stem(name);
        let file = format!("{stem}.csv");
        let mut out = String::from("iteration");
        for c in 0..chains.len() {
            let _ = write!(out, ",chain_{c}");
        }
        out.push('\n');
        for i in 0..t.num_draws() {
            let _ = write!(out, "{i}");
            for ch in &chains {
                let _ = write!(out, ",{}", format_float(ch[i]));
            }
            out.push('\n');
        }
        let path = dir.join(&file);
        fs::write(&path, out).map_err(io_err(&path))?;
        let svg_file = if svg {
            let f = format!("{stem}.svg");
            let series: Vec<(String, &[f64])> = chains
                .iter()
                .enumerate()
                .map(|(c, v)| (format!("chain {c}"), v.as_slice()))
                .collect();
            let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (n.as_str(), *v)).collect();
            let p = dir.join(&f);
            fs::write(&p, line_chart(name, &refs)).map_err(io_err(&p))?;
            Some(f)
        } else {
            None
        };
        files.push(ManifestEntry {
            parameter: name.clone(),
            file,
            chains: t.num_chains(),
            draws: t.num_draws(),
            svg: svg_file,
        });
    }
    let manifest = TraceManifest {
        chains: t.num_chains(),
        draws: t.num_draws(),
        warmup: t.warmup,
        files,
    };
    let path = dir.join(TRACE_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<TraceManifest, DiagnosticsError> {
    let path = dir.join(TRACE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DiagnosticsError::Parse {
        path,
        line: e.line(),
        detail: e.to_string(),
    })
}

/// Reads an exported per-parameter trace file back as chains × draws.
pub fn read_trace_csv(path: &Path) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DiagnosticsError::Parse {
        path: path.to_path_buf(),
        line: 1,
        detail: "missing header".into(),
    })?;
    let c = header.split(',').count() - 1;
    let mut chains = vec![Vec::new(); c];
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != c + 1 {
            return Err(DiagnosticsError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                detail: format!("expected {} columns, found {}", c + 1, cols.len()),
            });
        }
        for (k, v) in cols[1..].iter().enumerate() {
            chains[k].push(parse_float(path, i + 2, v)?);
        }
    }
    Ok(chains)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Minimal static SVG line chart of one or more series over their index.
pub fn line_chart(title: &str, series: &[(&str, &[f64])]) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let finite = series.iter().flat_map(|(_, v)| v.iter()).filter(|x| x.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let sx = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (len - 1) as f64;
    let sy = |y: f64| h - pad - (h - 2.0 * pad) * (y - lo) / (hi - lo);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <text x=\"4\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{:.4}</text>\n\
         <text x=\"4\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{:.4}</text>\n",
        escape(title),
        sy(hi) + 4.0,
        hi,
        sy(lo),
        lo
    );
    for (k, (_, v)) in series.iter().enumerate() {
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(i, &y)| format!("{:.2},{:.2}", sx(i), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>",
            PALETTE[k % PALETTE.len()],
            pts.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
