//! File formats: MDP and experiment files (TOML), trajectory CSVs, and the
//! plain-text reports printed by the command-line tool.
//!
//! CSV indices are 1-based (`q_1_2` is `Q(s=1, a=2)`) and floats are
//! written with 17 significant digits, so reading a file back reproduces
//! every value bit for bit.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::bounds::{ComplexityBudget, LyapunovCertificate};
use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, VerificationReport};
use crate::mdp::{builtin, MdpDescription, Policy, QVector, BUILTINS};
use crate::sampler::Sample;
use crate::switching::{CoupledTrajectory, TrajectoryRecord};

fn io_error(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.to_string(),
        message: e.to_string(),
    }
}

fn parse_error(path: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        message: message.into(),
    }
}

fn read_text(path: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

/// Parses an MDP description. `origin` only labels diagnostics, which carry
/// the line and column of the offending key.
pub fn parse_mdp(text: &str, origin: &str) -> Result<MdpDescription> {
    toml::from_str(text).map_err(|e| parse_error(origin, e.to_string().trim_end()))
}

/// Serializes a description in the same format [`parse_mdp`] reads.
pub fn mdp_to_toml(desc: &MdpDescription) -> String {
    toml::to_string(desc).expect("descriptions always serialize")
}

pub fn read_mdp_file(path: &str) -> Result<MdpDescription> {
    parse_mdp(&read_text(path)?, path)
}

/// A builtin name, or otherwise a file path.
pub fn load_description(source: &str) -> Result<MdpDescription> {
    if BUILTINS.contains(&source) {
        builtin(source)
    } else if Path::new(source).exists() {
        read_mdp_file(source)
    } else if !source.contains(['/', '.']) {
        Err(Error::UnknownBuiltin(source.to_string()))
    } else {
        read_mdp_file(source)
    }
}

pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| parse_error(origin, e.to_string().trim_end()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config_file(path: &str) -> Result<ExperimentConfig> {
    parse_config(&read_text(path)?, path)
}

/// Creates `path` (and its parent directories) for writing.
pub fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let label = path.display().to_string();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(&label, e))?;
    }
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| io_error(&label, e))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV line of a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTrajectoryRow {
    pub k: u64,
    pub q: QVector,
    pub q_lower: QVector,
    pub q_upper: QVector,
    pub q_avg: QVector,
    pub noise_infnorm: Option<f64>,
    pub sample: Option<Sample>,
}

impl From<&TrajectoryRecord> for CsvTrajectoryRow {
    fn from(r: &TrajectoryRecord) -> Self {
        Self {
            k: r.k,
            q: r.q.clone(),
            q_lower: r.q_lower.clone(),
            q_upper: r.q_upper.clone(),
            q_avg: r.q_avg.clone(),
            noise_infnorm: r.noise_infnorm,
            sample: r.sample,
        }
    }
}

/// `(s, a)` pairs in file order, 1-based.
fn pair_labels(num_states: usize, num_actions: usize) -> Vec<(usize, usize)> {
    (1..=num_states).flat_map(|s| (1..=num_actions).map(move |a| (s, a))).collect()
}

/// Column names of a trajectory file.
pub fn trajectory_header(num_states: usize, num_actions: usize) -> Vec<String> {
    let pairs = pair_labels(num_states, num_actions);
    let mut h = vec!["k".to_string()];
    for prefix in ["q", "ql", "qu", "qavg"] {
        h.extend(pairs.iter().map(|(s, a)| format!("{prefix}_{s}_{a}")));
    }
    h.extend(["w_inf", "smp_s", "smp_a", "smp_snext", "smp_r"].map(String::from));
    h
}

fn csv_error(path: &str, e: csv::Error) -> Error {
    if e.is_io_error() {
        io_error(path, e)
    } else {
        parse_error(path, e.to_string())
    }
}

/// Writes a trajectory CSV. `label` only appears in diagnostics.
pub fn write_trajectory<W: Write>(out: W, traj: &CoupledTrajectory, label: &str) -> Result<()> {
    let ns = traj.q_star.num_states();
    let na = traj.q_star.num_actions();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(ns, na)).map_err(|e| csv_error(label, e))?;
    for r in &traj.records {
        let mut row = vec![r.k.to_string()];
        for v in [&r.q, &r.q_lower, &r.q_upper, &r.q_avg] {
            row.extend(pair_labels(ns, na).iter().map(|&(s, a)| fmt_f64(v.get(s - 1, a - 1))));
        }
        row.push(r.noise_infnorm.map(fmt_f64).unwrap_or_default());
        match r.sample {
            Some(smp) => row.extend([
                (smp.s + 1).to_string(),
                (smp.a + 1).to_string(),
                (smp.s_next + 1).to_string(),
                fmt_f64(smp.r),
            ]),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&row).map_err(|e| csv_error(label, e))?;
    }
    w.flush().map_err(|e| io_error(label, e))
}

/// Reads a trajectory CSV written by [`write_trajectory`].
pub fn read_trajectory<R: Read>(input: R, label: &str) -> Result<Vec<CsvTrajectoryRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers().map_err(|e| csv_error(label, e))?.clone();
    let mut ns = 0;
    let mut na = 0;
    for name in header.iter().filter_map(|h| h.strip_prefix("q_")) {
        let (s, a) = name
            .split_once('_')
            .and_then(|(s, a)| Some((s.parse::<usize>().ok()?, a.parse::<usize>().ok()?)))
            .ok_or_else(|| parse_error(label, format!("bad column name `q_{name}`")))?;
        ns = ns.max(s);
        na = na.max(a);
    }
    let expected = trajectory_header(ns, na);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_error(label, "unexpected trajectory header"));
    }
    let n = ns * na;
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(label, e))?;
        let at = |i: usize| rec.get(i).unwrap_or("");
        let bad = |col: &str| parse_error(label, format!("data row {}: bad `{col}`", line + 1));
        let num = |i: usize| at(i).parse::<f64>().map_err(|_| bad(&expected[i]));
        let index = |i: usize| match at(i).parse::<usize>() {
            Ok(v) if v >= 1 => Ok(v - 1),
            _ => Err(bad(&expected[i])),
        };
        let block = |b: usize| -> Result<QVector> {
            let mut q = QVector::zeros(ns, na);
            for (j, &(s, a)) in pair_labels(ns, na).iter().enumerate() {
                q.set(s - 1, a - 1, num(1 + b * n + j)?);
            }
            Ok(q)
        };
        let tail = 1 + 4 * n;
        let noise_infnorm = if at(tail).is_empty() { None } else { Some(num(tail)?) };
        let sample = if at(tail + 1).is_empty() {
            None
        } else {
            Some(Sample {
                s: index(tail + 1)?,
                a: index(tail + 2)?,
                s_next: index(tail + 3)?,
                r: num(tail + 4)?,
            })
        };
        rows.push(CsvTrajectoryRow {
            k: at(0).parse().map_err(|_| bad("k"))?,
            q: block(0)?,
            q_lower: block(1)?,
            q_upper: block(2)?,
            q_avg: block(3)?,
            noise_infnorm,
            sample,
        });
    }
    Ok(rows)
}

/// Writes the error channel `Q^U_k − Q^L_k` with its sup-norm.
pub fn write_error_channel<W: Write>(out: W, traj: &CoupledTrajectory, label: &str) -> Result<()> {
    let ns = traj.q_star.num_states();
    let na = traj.q_star.num_actions();
    let pairs = pair_labels(ns, na);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend(pairs.iter().map(|(s, a)| format!("err_{s}_{a}")));
    header.push("err_inf".into());
    w.write_record(&header).map_err(|e| csv_error(label, e))?;
    for r in &traj.records {
        let mut row = vec![r.k.to_string()];
        row.extend(pairs.iter().map(|&(s, a)| fmt_f64(r.err_upper_lower.get(s - 1, a - 1))));
        row.push(fmt_f64(r.err_upper_lower.inf_norm()));
        w.write_record(&row).map_err(|e| csv_error(label, e))?;
    }
    w.flush().map_err(|e| io_error(label, e))
}

/// Reads `(k, ‖Q^U_k − Q^L_k‖)` pairs from an error-channel CSV.
pub fn read_error_channel<R: Read>(input: R, label: &str) -> Result<Vec<(u64, f64)>> {
    let mut rd = csv::Reader::from_reader(input);
    let last = rd.headers().map_err(|e| csv_error(label, e))?.len() - 1;
    rd.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_error(label, e))?;
            let k = rec[0].parse().map_err(|_| parse_error(label, "bad `k`"))?;
            let v = rec[last].parse().map_err(|_| parse_error(label, "bad `err_inf`"))?;
            Ok((k, v))
        })
        .collect()
}

/// Step sizes of the two-state reproduction.
pub const PAPER_ALPHAS: [f64; 2] = [0.002, 0.9];

/// Settings of [`paper_example`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaperExampleOptions {
    pub steps: u64,
    pub seed: u64,
    pub stride: u64,
    /// Comparison systems start at `Q_0 ∓ spread`.
    pub spread: f64,
}

impl Default for PaperExampleOptions {
    fn default() -> Self {
        Self {
            steps: 200_000,
            seed: 7,
            stride: 100,
            spread: 1.0,
        }
    }
}

/// Summary of one emitted dataset pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PaperDataset {
    pub alpha: f64,
    pub trajectory_path: std::path::PathBuf,
    pub error_path: std::path::PathBuf,
    pub initial_gap: f64,
    pub terminal_gap: f64,
    /// Sample variance of `‖Q^U_k − Q^L_k‖` over the last tenth of the records.
    pub tail_variance: f64,
}

/// Sample variance of the last tenth (at least two entries) of `values`.
pub fn last_decile_variance(values: &[f64]) -> f64 {
    let n = values.len();
    let tail = &values[n - (n / 10).max(2).min(n)..];
    if tail.len() < 2 {
        return 0.0;
    }
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (tail.len() - 1) as f64
}

/// Simulates the two-state example at each of [`PAPER_ALPHAS`] from a
/// seeded uniform `Q_0` and writes `trajectory_alpha_<α>.csv` and
/// `error_alpha_<α>.csv` into `dir`.
pub fn paper_example(dir: &Path, opts: PaperExampleOptions) -> Result<Vec<PaperDataset>> {
    let mdp = crate::mdp::builtin_mdp("paper2state")?;
    let q_star = crate::mdp::solve_qstar(&mdp, crate::mdp::QSTAR_TOL);
    PAPER_ALPHAS
        .iter()
        .map(|&alpha| {
            let model = crate::switching::SwitchingModel::with_qstar(&mdp, alpha, q_star.clone())?;
            let cfg = ExperimentConfig {
                q0: crate::harness::InitMode::Uniform,
                record_stride: opts.stride,
                spread: opts.spread,
                ..ExperimentConfig::new("paper2state", alpha, opts.steps, 1, opts.seed)
            };
            let traj = crate::harness::simulate_trial(&model, &cfg, 0)?;
            let trajectory_path = dir.join(format!("trajectory_alpha_{alpha}.csv"));
            let error_path = dir.join(format!("error_alpha_{alpha}.csv"));
            write_trajectory(create_file(&trajectory_path)?, &traj, &trajectory_path.display().to_string())?;
            write_error_channel(create_file(&error_path)?, &traj, &error_path.display().to_string())?;
            let gaps: Vec<f64> = traj.records.iter().map(|r| r.err_upper_lower.inf_norm()).collect();
            Ok(PaperDataset {
                alpha,
                trajectory_path,
                error_path,
                initial_gap: gaps[0],
                terminal_gap: gaps[gaps.len() - 1],
                tail_variance: last_decile_variance(&gaps),
            })
        })
        .collect()
}

fn q_table(out: &mut String, q: &QVector) {
    for s in 0..q.num_states() {
        let _ = write!(out, "  s={}:", s + 1);
        for a in 0..q.num_actions() {
            let _ = write!(out, " {:>20.12}", q.get(s, a));
        }
        out.push('\n');
    }
}

/// Report printed by `solve`.
pub fn format_solution(q_star: &QVector, policy: &Policy, discount: f64, r_max: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "states {}  actions {}  discount {}  max |r| {}",
        q_star.num_states(),
        q_star.num_actions(),
        discount,
        r_max
    );
    out.push_str("Q* (rows s, columns a):\n");
    q_table(&mut out, q_star);
    let actions: Vec<String> = policy.0.iter().map(|a| (a + 1).to_string()).collect();
    let _ = writeln!(out, "greedy policy: [{}]", actions.join(", "));
    out
}

/// Report printed by `analyze`.
pub fn format_analysis(
    report: &crate::bounds::BoundReport,
    cert: &Result<LyapunovCertificate>,
    n: u64,
    budget: &Result<ComplexityBudget>,
) -> String {
    let c = &report.constants;
    let mut out = String::new();
    let _ = writeln!(out, "alpha               {}", report.alpha);
    let _ = writeln!(out, "d_min / d_max       {} / {}", c.d_min, c.d_max);
    let _ = writeln!(out, "reward scale        {}", c.reward_scale);
    let _ = writeln!(out, "rho                 {}", report.rho);
    let _ = writeln!(out, "noise sup bound     {}", report.noise_infnorm_bound);
    let _ = writeln!(out, "noise variance W    {}", report.noise_var_bound);
    let _ = writeln!(out, "Q_max               {}", report.qmax);
    match cert {
        Ok(cert) => {
            let _ = writeln!(out, "lyapunov epsilon    {:e}", cert.epsilon);
            let _ = writeln!(out, "lambda_min(M)       {}", cert.lambda_min);
            let _ = writeln!(out, "lambda_max(M)       {} (bound {})", cert.lambda_max, cert.lambda_max_bound);
            let _ = writeln!(out, "lyapunov residual   {:e}", cert.residual);
            if cert.m.nrows() == 1 {
                let _ = writeln!(out, "M                   {}", cert.m[(0, 0)]);
            }
        }
        Err(e) => {
            let _ = writeln!(out, "lyapunov            failed: {e}");
        }
    }
    let _ = writeln!(out, "e0_sq               {}", report.e0_sq);
    let _ = writeln!(out, "theorem1 rhs (N={n}) {}", report.thm1_rhs(n));
    let _ = writeln!(out, "theorem2 rhs (N={n}) {}", report.thm2_rhs(n));
    match budget {
        Ok(b) => {
            let _ = writeln!(out, "target eps / delta  {} / {}", b.accuracy, b.confidence);
            let _ = writeln!(out, "alpha_star          {:e}", b.alpha_star);
            let _ = writeln!(out, "n_star              {}", b.n_star);
            let _ = writeln!(out, "phi1 / phi2         {:e} / {:e} ({:?} binds)", b.phi1, b.phi2, b.binding);
        }
        Err(e) => {
            let _ = writeln!(out, "sample complexity   {e}");
        }
    }
    out
}

/// One line per check: `name PASS|FAIL margin detail`.
pub fn format_verification(report: &VerificationReport) -> String {
    let mut out = String::new();
    if let Some(e) = &report.validation {
        let _ = writeln!(out, "validation FAIL {e}");
        return out;
    }
    for c in &report.checks {
        let _ = writeln!(
            out,
            "{:<28} {} {:+.3e}  {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.margin,
            c.detail
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::InitMode;
    use crate::mdp::builtin_mdp;
    use crate::switching::{co_simulate, SwitchingModel};

    #[test]
    fn mdp_toml_round_trip() {
        for name in BUILTINS {
            let desc = builtin(name).unwrap();
            assert_eq!(parse_mdp(&mdp_to_toml(&desc), name).unwrap(), desc);
        }
    }

    #[test]
    fn parse_errors_name_field_and_line() {
        let text = "num_states = 1\nnum_actions = 1\ndiscount = 0.9\ntransition = [1.0]\nreward = [1.0]\nbehavior_policy = [1.0]\nstate_dist = \"x\"\n";
        let msg = parse_mdp(text, "bad.toml").unwrap_err().to_string();
        assert!(msg.contains("line 7"), "{msg}");
        assert!(msg.contains("bad.toml"));
        let missing = "num_states = 1\n";
        assert!(parse_mdp(missing, "m").unwrap_err().to_string().contains("num_actions"));
        let extra = format!("{}\nsurprise = 1\n", mdp_to_toml(&builtin("example1").unwrap()));
        assert!(parse_mdp(&extra, "m").unwrap_err().to_string().contains("surprise"));
    }

    #[test]
    fn config_parsing() {
        let cfg = parse_config(
            "mdp = \"paper2state\"\nalpha = 0.002\nnum_steps = 100\nnum_trials = 4\nbase_seed = 7\n[q0]\nmode = \"uniform\"\n",
            "c",
        )
        .unwrap();
        assert_eq!(cfg.q0, InitMode::Uniform);
        assert_eq!(cfg.record_stride, 10);
        let err = parse_config("mdp = \"x\"\nalpha = 2.0\nnum_steps = 1\nnum_trials = 1\nbase_seed = 0\n", "c");
        assert_eq!(err, Err(Error::StepSize(2.0)));
    }

    #[test]
    fn unknown_names() {
        assert_eq!(load_description("nope"), Err(Error::UnknownBuiltin("nope".into())));
        assert!(matches!(load_description("/no/such/file.toml"), Err(Error::Io { .. })));
    }

    #[test]
    fn trajectory_round_trip_and_header() {
        let model = SwitchingModel::new(&builtin_mdp("paper2state").unwrap(), 0.3).unwrap();
        let traj = co_simulate(&model, 100, 4, &QVector::zeros(2, 2), 1);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj, "t").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "k,q_1_1,q_1_2,q_2_1,q_2_2,ql_1_1,ql_1_2,ql_2_1,ql_2_2,qu_1_1,qu_1_2,qu_2_1,qu_2_2,qavg_1_1,qavg_1_2,qavg_2_1,qavg_2_2,w_inf,smp_s,smp_a,smp_snext,smp_r\n"
        ));
        let rows = read_trajectory(buf.as_slice(), "t").unwrap();
        assert_eq!(rows.len(), 101);
        let expected: Vec<CsvTrajectoryRow> = traj.records.iter().map(Into::into).collect();
        assert_eq!(rows, expected);
    }

    #[test]
    fn decile_variance() {
        let v: Vec<f64> = (0..100).map(|i| if i < 90 { 5.0 } else { (i % 2) as f64 }).collect();
        let tail = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        assert_eq!(last_decile_variance(&v), 10.0 / 4.0 / 9.0);
        assert_eq!(last_decile_variance(&tail), 0.5);
        assert_eq!(last_decile_variance(&[3.0]), 0.0);
    }

    #[test]
    fn error_channel_round_trip() {
        let model = SwitchingModel::new(&builtin_mdp("example3").unwrap(), 0.3).unwrap();
        let traj = co_simulate(&model, 20, 4, &QVector::zeros(1, 2), 5);
        let mut buf = Vec::new();
        write_error_channel(&mut buf, &traj, "e").unwrap();
        let read = read_error_channel(buf.as_slice(), "e").unwrap();
        let want: Vec<(u64, f64)> = traj.records.iter().map(|r| (r.k, r.err_upper_lower.inf_norm())).collect();
        assert_eq!(read, want);
    }
}
