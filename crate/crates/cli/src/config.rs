//! Run configuration files (TOML) and their resolution into core types.
//!
//! Unknown keys are rejected at every level. The schema is documented in
//! `docs/config.md`.

use std::fmt;
use std::path::{Path, PathBuf};

use bros_core::blockmat::BlockShape;
use bros_core::linalg::Matrix;
use bros_core::problems::{
    make_counterexample, make_hypercleaning, make_quadratic, make_quadratic_multilayer, BilevelProblem, HyperCleaning,
    HyperCleaningData,
};
use bros_core::randsrc::RngStream;
use bros_core::solvers::{SolverConfig, SolverMethod, StepSize};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// A problem shared across threads.
pub type SharedProblem = Box<dyn BilevelProblem + Send + Sync>;

/// Solver method as written in a config file (`"bros"`, `"masoba"`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodName(pub SolverMethod);

impl TryFrom<String> for MethodName {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse().map(MethodName).map_err(|e: bros_core::Error| e.to_string())
    }
}

impl From<MethodName> for String {
    fn from(m: MethodName) -> String {
        m.0.name().to_string()
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.name())
    }
}

/// Base stepsize: a number, or `"auto"` for `min(alpha_bar, 1/sqrt(K))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Value(f64),
    Keyword(String),
}

impl Alpha {
    pub fn parse_flag(s: &str) -> Result<Alpha, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Alpha::Keyword("auto".into()));
        }
        s.parse::<f64>()
            .map(Alpha::Value)
            .map_err(|_| format!("expected a number or \"auto\", got {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    Counterexample {},
    Quadratic {
        #[serde(default)]
        seed: u64,
        m: usize,
        n: usize,
        #[serde(default = "one_usize")]
        d_x: usize,
        #[serde(default = "one_f64")]
        conditioning: f64,
        #[serde(default)]
        sigma_grad: f64,
        #[serde(default)]
        sigma_op: f64,
    },
    Multilayer {
        #[serde(default)]
        seed: u64,
        /// `[[m_1, n_1], [m_2, n_2], ...]`
        layers: Vec<[usize; 2]>,
        #[serde(default = "one_usize")]
        d_x: usize,
        #[serde(default = "one_f64")]
        conditioning: f64,
        #[serde(default)]
        sigma_grad: f64,
        #[serde(default)]
        sigma_op: f64,
    },
    Hypercleaning {
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_train: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_val: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d_feat: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise_rate: Option<f64>,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_ridge")]
        ridge: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_batch: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_batch: Option<usize>,
        /// Imported training table: label first, then features.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_csv: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_csv: Option<PathBuf>,
    },
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn default_classes() -> usize {
    5
}

fn default_ridge() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub iterations: usize,
    pub alpha: Alpha,
    /// Cap used by `alpha = "auto"`.
    pub alpha_bar: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub ranks: Vec<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_clip: Option<f64>,
    pub eval_stride: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_from: Option<usize>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = SolverConfig::default();
        SolverSpec {
            iterations: d.iterations,
            alpha: Alpha::Value(d.alpha()),
            alpha_bar: 1.0,
            c1: d.c1,
            c2: d.c2,
            c3: d.c3,
            ranks: d.ranks,
            seed: d.seed,
            z_clip: d.z_clip,
            eval_stride: 10,
            x0: d.x0,
            average_from: d.average_from,
        }
    }
}

/// Grid of runs for the `sweep` subcommand. Empty lists fall back to the
/// single value in `[solver]` / `method`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodName>,
    pub ranks: Vec<Vec<usize>>,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Record elapsed seconds in the `wall_time` column; zero when off.
    #[serde(default = "default_true")]
    pub wall_time: bool,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(one_line(&e.to_string())))
    }

    /// Reads a config file; relative CSV paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let ProblemSpec::Hypercleaning { train_csv, val_csv, .. } = &mut cfg.problem {
            for p in [train_csv, val_csv].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn solver_config(&self) -> Result<SolverConfig, CliError> {
        let s = &self.solver;
        let step = match &s.alpha {
            Alpha::Value(a) => StepSize::Fixed(*a),
            Alpha::Keyword(k) if k == "auto" => StepSize::Auto { alpha_bar: s.alpha_bar },
            Alpha::Keyword(k) => {
                return Err(CliError::Config(format!(
                    "solver.alpha: expected a number or \"auto\", got {k:?}"
                )))
            }
        };
        Ok(SolverConfig {
            iterations: s.iterations,
            step,
            c1: s.c1,
            c2: s.c2,
            c3: s.c3,
            ranks: s.ranks.clone(),
            seed: s.seed,
            z_clip: s.z_clip,
            eval_stride: s.eval_stride,
            x0: s.x0.clone(),
            average_from: s.average_from,
        })
    }

    /// Builds the problem and checks the solver settings against it.
    pub fn resolve(&self) -> Result<(SharedProblem, SolverConfig), CliError> {
        let problem = self.problem.build()?;
        let solver = self.solver_config()?;
        solver
            .validate(problem.as_ref(), self.method.0)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok((problem, solver))
    }

    /// Expands the `[sweep]` grid into individual run configs.
    pub fn expand_sweep(&self) -> Vec<RunConfig> {
        fn or<T>(v: Vec<T>, d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v
            }
        }
        let sweep = self.sweep.clone().unwrap_or_default();
        let methods = or(sweep.methods, self.method);
        let ranks = or(sweep.ranks, self.solver.ranks.clone());
        let iterations = or(sweep.iterations, self.solver.iterations);
        let seeds = or(sweep.seeds, self.solver.seed);
        let mut out = Vec::new();
        for &method in &methods {
            for r in &ranks {
                for &k in &iterations {
                    for &seed in &seeds {
                        let mut c = self.clone();
                        c.sweep = None;
                        c.method = method;
                        c.solver.ranks = r.clone();
                        c.solver.iterations = k;
                        c.solver.seed = seed;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

impl ProblemSpec {
    pub fn build(&self) -> Result<SharedProblem, CliError> {
        let cfg = |e: bros_core::Error| CliError::Config(format!("problem: {e}"));
        Ok(match self {
            ProblemSpec::Counterexample {} => Box::new(make_counterexample()),
            ProblemSpec::Quadratic {
                seed,
                m,
                n,
                d_x,
                conditioning,
                sigma_grad,
                sigma_op,
            } => Box::new(
                make_quadratic(
                    &RngStream::new(*seed),
                    *m,
                    *n,
                    *d_x,
                    *conditioning,
                    *sigma_grad,
                    *sigma_op,
                )
                .map_err(cfg)?,
            ),
            ProblemSpec::Multilayer {
                seed,
                layers,
                d_x,
                conditioning,
                sigma_grad,
                sigma_op,
            } => {
                let shape = BlockShape::new(layers.iter().map(|&[m, n]| (m, n)).collect()).map_err(cfg)?;
                Box::new(
                    make_quadratic_multilayer(
                        &RngStream::new(*seed),
                        shape,
                        *d_x,
                        *conditioning,
                        *sigma_grad,
                        *sigma_op,
                    )
                    .map_err(cfg)?,
                )
            }
            ProblemSpec::Hypercleaning {
                seed,
                n_train,
                n_val,
                d_feat,
                noise_rate,
                classes,
                ridge,
                train_batch,
                val_batch,
                train_csv,
                val_csv,
            } => {
                let problem = match (train_csv, val_csv) {
                    (Some(tr), Some(va)) => {
                        if n_train.is_some() || n_val.is_some() || d_feat.is_some() || noise_rate.is_some() {
                            return Err(CliError::Config(
                                "problem: n_train, n_val, d_feat and noise_rate do not apply to imported data".into(),
                            ));
                        }
                        let (train_features, train_labels) = read_labeled_table(tr)?;
                        let (val_features, val_labels) = read_labeled_table(va)?;
                        let data = HyperCleaningData {
                            train_features,
                            train_labels,
                            val_features,
                            val_labels,
                            classes: *classes,
                        };
                        HyperCleaning::from_data(data, *ridge).map_err(cfg)?
                    }
                    (None, None) => make_hypercleaning(
                        &RngStream::new(*seed),
                        n_train.unwrap_or(400),
                        n_val.unwrap_or(200),
                        d_feat.unwrap_or(30),
                        *classes,
                        noise_rate.unwrap_or(0.3),
                        *ridge,
                    )
                    .map_err(cfg)?,
                    _ => {
                        return Err(CliError::Config(
                            "problem: train_csv and val_csv must be given together".into(),
                        ))
                    }
                };
                Box::new(problem.with_batches(*train_batch, *val_batch).map_err(cfg)?)
            }
        })
    }
}

/// Reads a headerless table with one sample per row: integer label first,
/// features after. Lines starting with `#` are skipped.
pub fn read_labeled_table(path: &Path) -> Result<(Matrix, Vec<usize>), CliError> {
    let bad = |line: usize, what: String| CliError::Config(format!("{}:{line}: {what}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut fields = rec.iter();
        let label = fields.next().unwrap_or("");
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| bad(line, format!("bad label {label:?}")))?,
        );
        let before = values.len();
        for f in fields {
            values.push(f.parse::<f64>().map_err(|_| bad(line, format!("bad feature {f:?}")))?);
        }
        let w = values.len() - before;
        match width {
            None if w == 0 => return Err(bad(line, "row has no features".into())),
            None => width = Some(w),
            Some(d) if d != w => return Err(bad(line, format!("expected {d} features, found {w}"))),
            _ => {}
        }
    }
    let d = width.ok_or_else(|| CliError::Config(format!("{}: no samples", path.display())))?;
    let features = Matrix::from_vec(labels.len(), d, values).expect("row widths checked");
    Ok((features, labels))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
