//! Experiment configuration: a flat INI dialect.
//!
//! ```ini
//! [data]
//! source = gaussian      # gaussian | two-gaussians | subspace | uniform | file
//! N = 20
//! d = 10
//! ```
//!
//! Lines starting with `#` or `;` are comments. Keys are case-sensitive,
//! unknown sections and keys are errors, and each key may appear once.
//! Every key and its default is listed in `README.md`; [`ExperimentConfig::to_ini`]
//! renders the full effective configuration back in the same dialect.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use krecon::attack::theory::{SoundnessConfig, UniquenessConfig};
use krecon::attack::{AttackConfig, MatchTolerance, QueryDistribution};
use krecon::kernels::KernelSpec;
use krecon::metrics::ImageShape;
use krecon::synthetic::{DataSource, TargetKind};

use crate::error::{CliError, CliResult};
use crate::matrix_file;
use crate::model_file::ModelKind;

#[derive(Debug, Clone, PartialEq)]
pub enum DataInput {
    Synthetic(DataSource),
    Files { x: PathBuf, y: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub input: DataInput,
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub seed: u64,
    pub targets: TargetKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Laplace,
    Rbf,
    Polynomial,
    Ntk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub kernel: KernelFamily,
    pub gamma: f64,
    pub c0: f64,
    pub degree: u32,
    pub depth: u32,
    pub lambda: f64,
    /// SVM descent steps.
    pub steps: usize,
    /// SVM peak learning rate.
    pub lr: f64,
}

impl ModelSection {
    /// Kernel spec for KRR/SVM; `gamma` overrides the configured value.
    pub fn kernel_spec(&self, gamma: Option<f64>) -> CliResult<KernelSpec> {
        let gamma = gamma.unwrap_or(self.gamma);
        Ok(match self.kernel {
            KernelFamily::Laplace => KernelSpec::laplace(gamma)?,
            KernelFamily::Rbf => KernelSpec::rbf(gamma)?,
            KernelFamily::Polynomial => KernelSpec::polynomial(self.c0, gamma, self.degree)?,
            KernelFamily::Ntk => KernelSpec::ntk(self.depth)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryChoice {
    Normal { sigma: f64 },
    Uniform { low: f64, high: f64 },
    Mixture { means: Vec<Vec<f64>>, sigma: f64 },
    Grid { low: f64, high: f64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSection {
    /// Candidate count; the training-set size when unset.
    pub n: Option<usize>,
    /// Query count; `query_count_bound(n, d)` when unset.
    pub m: Option<usize>,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub queries: QueryChoice,
    pub point_init_std: f64,
    pub coeff_init_var: f64,
    pub coeff_init_mean: f64,
    pub lr_points: f64,
    pub lr_coeffs: f64,
    pub lr_bandwidth: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub batch_size: Option<usize>,
    pub trace_stride: usize,
    pub pca_rank: Option<usize>,
    pub merge_tol: Option<f64>,
    pub coeff_tol: Option<f64>,
    pub snapshots: Vec<usize>,
}

impl AttackSection {
    /// The core attack settings for one run. Query files are read here.
    pub fn attack_config(&self, n: usize, m: usize, seed: u64) -> CliResult<AttackConfig> {
        let queries = match &self.queries {
            QueryChoice::Normal { sigma } => QueryDistribution::StandardNormal { sigma: *sigma },
            QueryChoice::Uniform { low, high } => QueryDistribution::UniformBox { low: *low, high: *high },
            QueryChoice::Mixture { means, sigma } => {
                QueryDistribution::GaussianMixture { means: means.clone(), sigma: *sigma }
            }
            QueryChoice::Grid { low, high } => QueryDistribution::Grid { low: *low, high: *high },
            QueryChoice::File(path) => QueryDistribution::Points(Arc::new(matrix_file::read(path)?)),
        };
        let config = AttackConfig {
            n,
            m,
            steps: self.steps,
            seed,
            queries,
            point_init_std: self.point_init_std,
            coeff_init_var: self.coeff_init_var,
            coeff_init_mean: self.coeff_init_mean,
            lr_points: self.lr_points,
            lr_coeffs: self.lr_coeffs,
            lr_bandwidth: self.lr_bandwidth,
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
            batch_size: self.batch_size,
            trace_stride: self.trace_stride,
            snapshot_steps: self.snapshots.clone(),
            merge_tol: self.merge_tol,
            coeff_tol: self.coeff_tol,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    L2,
    Dssim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSection {
    pub distance: DistanceKind,
    pub image_shape: Option<ImageShape>,
    pub data_range: Option<f64>,
    pub match_tol: MatchTolerance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaScale {
    /// Gammas are used as given.
    None,
    /// Gammas are multiplied by the mean training-point norm.
    DataNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSection {
    pub m_values: Vec<usize>,
    pub gammas: Vec<f64>,
    pub gamma_scale: GammaScale,
}

/// Settings of the `verify-uniqueness` suites.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifySection {
    pub soundness: SoundnessConfig,
    pub uniqueness: UniquenessConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub metrics: MetricsSection,
    pub ablate: AblateSection,
    pub verify: VerifySection,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let core = AttackConfig::default();
        ExperimentConfig {
            data: DataSection {
                input: DataInput::Synthetic(DataSource::Gaussian { sigma: 1.0 }),
                n: 20,
                d: 10,
                c: 1,
                seed: 0,
                targets: TargetKind::Normal,
            },
            model: ModelSection {
                kind: ModelKind::Krr,
                kernel: KernelFamily::Laplace,
                gamma: 0.15,
                c0: 1.0,
                degree: 2,
                depth: 2,
                lambda: 0.0,
                steps: 1000,
                lr: 1e-2,
            },
            attack: AttackSection {
                n: None,
                m: None,
                steps: core.steps,
                seeds: vec![0],
                queries: QueryChoice::Normal { sigma: 1.0 },
                point_init_std: core.point_init_std,
                coeff_init_var: core.coeff_init_var,
                coeff_init_mean: core.coeff_init_mean,
                lr_points: core.lr_points,
                lr_coeffs: core.lr_coeffs,
                lr_bandwidth: core.lr_bandwidth,
                pct_start: core.pct_start,
                div_factor: core.div_factor,
                final_div_factor: core.final_div_factor,
                batch_size: None,
                trace_stride: 100,
                pca_rank: None,
                merge_tol: None,
                coeff_tol: None,
                snapshots: Vec::new(),
            },
            metrics: MetricsSection {
                distance: DistanceKind::L2,
                image_shape: None,
                data_range: None,
                match_tol: MatchTolerance::Relative(0.05),
            },
            ablate: AblateSection {
                m_values: vec![50, 150, 300, 600],
                gammas: vec![0.01, 0.15, 3.0],
                gamma_scale: GammaScale::None,
            },
            verify: VerifySection::default(),
            out: PathBuf::from("out"),
        }
    }
}

/// One `key = value` line.
#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    section: String,
    key: String,
    value: String,
}

fn lex(text: &str) -> CliResult<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |msg: String| CliError::ConfigSyntax { line, msg };
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
            continue;
        }
        if let Some(rest) = t.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err(format!("unterminated section header {t:?}")))?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (key, value) = t.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {t:?}")))?;
        let section = section.clone().ok_or_else(|| err("key outside of any section".into()))?;
        let key = key.trim().to_string();
        if !seen.insert((section.clone(), key.clone())) {
            return Err(err(format!("duplicate key [{section}] {key}")));
        }
        entries.push(Entry { line, section, key, value: value.trim().to_string() });
    }
    Ok(entries)
}

impl Entry {
    fn err(&self, msg: impl Into<String>) -> CliError {
        CliError::ConfigSyntax { line: self.line, msg: msg.into() }
    }

    fn parse<T: FromStr>(&self) -> CliResult<T> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("[{}] {}: cannot parse {:?}", self.section, self.key, self.value)))
    }

    fn list<T: FromStr>(&self) -> CliResult<Vec<T>> {
        self.value
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| self.err(format!("[{}] {}: bad list item {:?}", self.section, self.key, t.trim())))
            })
            .collect()
    }

    /// `none` or a value.
    fn optional<T: FromStr>(&self) -> CliResult<Option<T>> {
        if self.value == "none" {
            Ok(None)
        } else {
            self.parse().map(Some)
        }
    }
}

/// Source-specific data keys, resolved once the whole section is read.
#[derive(Default)]
struct DataKeys {
    source: Option<String>,
    sigma: Option<f64>,
    offset: Option<f64>,
    rank: Option<usize>,
    low: Option<f64>,
    high: Option<f64>,
    x_file: Option<PathBuf>,
    y_file: Option<PathBuf>,
}

#[derive(Default)]
struct QueryKeys {
    kind: Option<String>,
    sigma: Option<f64>,
    low: Option<f64>,
    high: Option<f64>,
    means: Option<Vec<Vec<f64>>>,
    file: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut data = DataKeys::default();
        let mut queries = QueryKeys::default();
        let mut image: Option<ImageShape> = None;
        let mut match_tol: Option<f64> = None;
        let mut match_kind: Option<String> = None;
        for e in lex(text)? {
            match (e.section.as_str(), e.key.as_str()) {
                ("data", "source") => data.source = Some(e.value.clone()),
                ("data", "N") => cfg.data.n = e.parse()?,
                ("data", "d") => cfg.data.d = e.parse()?,
                ("data", "C") => cfg.data.c = e.parse()?,
                ("data", "seed") => cfg.data.seed = e.parse()?,
                ("data", "targets") => cfg.data.targets = parse_targets(&e)?,
                ("data", "sigma") => data.sigma = Some(e.parse()?),
                ("data", "offset") => data.offset = Some(e.parse()?),
                ("data", "rank") => data.rank = Some(e.parse()?),
                ("data", "low") => data.low = Some(e.parse()?),
                ("data", "high") => data.high = Some(e.parse()?),
                ("data", "x_file") => data.x_file = Some(PathBuf::from(&e.value)),
                ("data", "y_file") => data.y_file = Some(PathBuf::from(&e.value)),

                ("model", "kind") => cfg.model.kind = e.value.parse().map_err(|m: String| e.err(m))?,
                ("model", "kernel") => cfg.model.kernel = parse_family(&e)?,
                ("model", "gamma") => cfg.model.gamma = e.parse()?,
                ("model", "c0") => cfg.model.c0 = e.parse()?,
                ("model", "degree") => cfg.model.degree = e.parse()?,
                ("model", "depth") => cfg.model.depth = e.parse()?,
                ("model", "lambda") => cfg.model.lambda = e.parse()?,
                ("model", "steps") => cfg.model.steps = e.parse()?,
                ("model", "lr") => cfg.model.lr = e.parse()?,

                ("attack", "n") => cfg.attack.n = e.optional()?,
                ("attack", "m") => cfg.attack.m = e.optional()?,
                ("attack", "steps") => cfg.attack.steps = e.parse()?,
                ("attack", "seeds") => cfg.attack.seeds = e.list()?,
                ("attack", "queries") => queries.kind = Some(e.value.clone()),
                ("attack", "query_sigma") => queries.sigma = Some(e.parse()?),
                ("attack", "query_low") => queries.low = Some(e.parse()?),
                ("attack", "query_high") => queries.high = Some(e.parse()?),
                ("attack", "query_means") => queries.means = Some(parse_means(&e)?),
                ("attack", "query_file") => queries.file = Some(PathBuf::from(&e.value)),
                ("attack", "point_init_std") => cfg.attack.point_init_std = e.parse()?,
                ("attack", "coeff_init_var") => cfg.attack.coeff_init_var = e.parse()?,
                ("attack", "coeff_init_mean") => cfg.attack.coeff_init_mean = e.parse()?,
                ("attack", "lr_points") => cfg.attack.lr_points = e.parse()?,
                ("attack", "lr_coeffs") => cfg.attack.lr_coeffs = e.parse()?,
                ("attack", "lr_bandwidth") => cfg.attack.lr_bandwidth = e.parse()?,
                ("attack", "pct_start") => cfg.attack.pct_start = e.parse()?,
                ("attack", "div_factor") => cfg.attack.div_factor = e.parse()?,
                ("attack", "final_div_factor") => cfg.attack.final_div_factor = e.parse()?,
                ("attack", "batch_size") => cfg.attack.batch_size = e.optional()?,
                ("attack", "trace_stride") => cfg.attack.trace_stride = e.parse()?,
                ("attack", "pca_rank") => cfg.attack.pca_rank = e.optional()?,
                ("attack", "merge_tol") => cfg.attack.merge_tol = e.optional()?,
                ("attack", "coeff_tol") => cfg.attack.coeff_tol = e.optional()?,
                ("attack", "snapshots") => {
                    cfg.attack.snapshots = if e.value.is_empty() { Vec::new() } else { e.list()? }
                }

                ("metrics", "distance") => {
                    cfg.metrics.distance = match e.value.as_str() {
                        "l2" => DistanceKind::L2,
                        "dssim" => DistanceKind::Dssim,
                        other => return Err(e.err(format!("unknown distance {other:?} (expected l2 or dssim)"))),
                    }
                }
                ("metrics", "image_shape") => image = parse_shape(&e)?,
                ("metrics", "data_range") => cfg.metrics.data_range = e.optional()?,
                ("metrics", "match") => match_kind = Some(e.value.clone()),
                ("metrics", "match_tol") => match_tol = Some(e.parse()?),

                ("ablate", "m_values") => cfg.ablate.m_values = e.list()?,
                ("ablate", "gammas") => cfg.ablate.gammas = e.list()?,
                ("ablate", "gamma_scale") => {
                    cfg.ablate.gamma_scale = match e.value.as_str() {
                        "none" => GammaScale::None,
                        "data-norm" => GammaScale::DataNorm,
                        other => return Err(e.err(format!("unknown gamma_scale {other:?} (expected none or data-norm)"))),
                    }
                }

                ("verify", "points") => cfg.verify.soundness.points = e.parse()?,
                ("verify", "dim") => cfg.verify.soundness.dim = e.parse()?,
                ("verify", "m") => cfg.verify.soundness.m = e.optional()?,
                ("verify", "gamma") => cfg.verify.soundness.gamma = e.parse()?,
                ("verify", "seeds") => cfg.verify.soundness.seeds = e.list()?,
                ("verify", "steps") => cfg.verify.soundness.steps = e.parse()?,
                ("verify", "loss_threshold") => cfg.verify.soundness.loss_threshold = e.parse()?,
                ("verify", "match_tol") => cfg.verify.soundness.match_tol = e.parse()?,
                ("verify", "instances") => cfg.verify.uniqueness.instances = e.parse()?,
                ("verify", "max_points") => cfg.verify.uniqueness.max_points = e.parse()?,
                ("verify", "max_dim") => cfg.verify.uniqueness.max_dim = e.parse()?,
                ("verify", "instance_seed") => cfg.verify.uniqueness.seed = e.parse()?,
                ("verify", "eig_threshold") => cfg.verify.uniqueness.threshold = e.parse()?,

                ("output", "dir") => cfg.out = PathBuf::from(&e.value),

                (section @ ("data" | "model" | "attack" | "metrics" | "ablate" | "verify" | "output"), key) => {
                    return Err(e.err(format!("unknown key `{key}` in [{section}]")));
                }
                (section, _) => return Err(e.err(format!("unknown section [{section}]"))),
            }
        }
        cfg.data.input = resolve_data(data)?;
        cfg.attack.queries = resolve_queries(queries)?;
        cfg.metrics.image_shape = image;
        let tol = match_tol.unwrap_or(0.05);
        cfg.metrics.match_tol = match match_kind.as_deref().unwrap_or("relative") {
            "relative" => MatchTolerance::Relative(tol),
            "absolute" => MatchTolerance::Absolute(tol),
            other => return Err(CliError::Config(format!("unknown match kind {other:?} (expected relative or absolute)"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Range checks that do not need any files.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: &str| Err(CliError::Config(msg.into()));
        if self.data.n == 0 || self.data.d == 0 || self.data.c == 0 {
            return bad("data N, d and C must be >= 1");
        }
        if self.attack.seeds.is_empty() {
            return bad("attack seeds must not be empty");
        }
        if self.attack.n == Some(0) || self.attack.m == Some(0) {
            return bad("attack n and m must be >= 1");
        }
        if self.attack.pca_rank == Some(0) {
            return bad("pca_rank must be >= 1");
        }
        if !(self.model.lambda >= 0.0 && self.model.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.metrics.distance == DistanceKind::Dssim && self.metrics.image_shape.is_none() {
            return bad("distance = dssim needs metrics.image_shape");
        }
        if self.ablate.m_values.is_empty() || self.ablate.gammas.is_empty() {
            return bad("ablation lists must not be empty");
        }
        if self.ablate.gammas.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return bad("ablation gammas must be positive");
        }
        let tol = match self.metrics.match_tol {
            MatchTolerance::Absolute(t) | MatchTolerance::Relative(t) => t,
        };
        if !(tol.is_finite() && tol > 0.0) {
            return bad("match_tol must be positive");
        }
        // catches bad learning rates and schedules early
        let mut probe = self.attack.clone();
        probe.queries = QueryChoice::Normal { sigma: 1.0 };
        probe.attack_config(1, 1, 0)?;
        Ok(())
    }

    /// The full effective configuration in the same dialect; parsing it
    /// back yields an equal config.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let join = |v: Vec<String>| v.join(", ");

        s.push_str("[data]\n");
        match &self.data.input {
            DataInput::Synthetic(src) => match src {
                DataSource::Gaussian { sigma } => {
                    let _ = writeln!(s, "source = gaussian\nsigma = {sigma}");
                }
                DataSource::TwoGaussians { offset } => {
                    let _ = writeln!(s, "source = two-gaussians\noffset = {offset}");
                }
                DataSource::Subspace { rank, sigma } => {
                    let _ = writeln!(s, "source = subspace\nrank = {rank}\nsigma = {sigma}");
                }
                DataSource::Uniform { low, high } => {
                    let _ = writeln!(s, "source = uniform\nlow = {low}\nhigh = {high}");
                }
            },
            DataInput::Files { x, y } => {
                let _ = writeln!(s, "source = file\nx_file = {}", x.display());
                if let Some(y) = y {
                    let _ = writeln!(s, "y_file = {}", y.display());
                }
            }
        }
        let d = &self.data;
        let _ = writeln!(s, "N = {}\nd = {}\nC = {}\nseed = {}\ntargets = {}", d.n, d.d, d.c, d.seed, targets_name(d.targets));

        let m = &self.model;
        let _ = writeln!(
            s,
            "\n[model]\nkind = {}\nkernel = {}\ngamma = {}\nc0 = {}\ndegree = {}\ndepth = {}\nlambda = {}\nsteps = {}\nlr = {}",
            m.kind,
            family_name(m.kernel),
            m.gamma,
            m.c0,
            m.degree,
            m.depth,
            m.lambda,
            m.steps,
            m.lr
        );

        let a = &self.attack;
        let _ = writeln!(
            s,
            "\n[attack]\nn = {}\nm = {}\nsteps = {}\nseeds = {}",
            opt(a.n.map(|v| v.to_string())),
            opt(a.m.map(|v| v.to_string())),
            a.steps,
            join(a.seeds.iter().map(u64::to_string).collect())
        );
        match &a.queries {
            QueryChoice::Normal { sigma } => {
                let _ = writeln!(s, "queries = normal\nquery_sigma = {sigma}");
            }
            QueryChoice::Uniform { low, high } => {
                let _ = writeln!(s, "queries = uniform\nquery_low = {low}\nquery_high = {high}");
            }
            QueryChoice::Mixture { means, sigma } => {
                let means: Vec<String> =
                    means.iter().map(|mu| mu.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")).collect();
                let _ = writeln!(s, "queries = mixture\nquery_means = {}\nquery_sigma = {sigma}", means.join(", "));
            }
            QueryChoice::Grid { low, high } => {
                let _ = writeln!(s, "queries = grid\nquery_low = {low}\nquery_high = {high}");
            }
            QueryChoice::File(path) => {
                let _ = writeln!(s, "queries = file\nquery_file = {}", path.display());
            }
        }
        let _ = writeln!(
            s,
            "point_init_std = {}\ncoeff_init_var = {}\ncoeff_init_mean = {}\nlr_points = {}\nlr_coeffs = {}\n\
             lr_bandwidth = {}\npct_start = {}\ndiv_factor = {}\nfinal_div_factor = {}\nbatch_size = {}\n\
             trace_stride = {}\npca_rank = {}\nmerge_tol = {}\ncoeff_tol = {}\nsnapshots = {}",
            a.point_init_std,
            a.coeff_init_var,
            a.coeff_init_mean,
            a.lr_points,
            a.lr_coeffs,
            a.lr_bandwidth,
            a.pct_start,
            a.div_factor,
            a.final_div_factor,
            opt(a.batch_size.map(|v| v.to_string())),
            a.trace_stride,
            opt(a.pca_rank.map(|v| v.to_string())),
            opt(a.merge_tol.map(|v| v.to_string())),
            opt(a.coeff_tol.map(|v| v.to_string())),
            join(a.snapshots.iter().map(usize::to_string).collect())
        );

        let mt = &self.metrics;
        let (kind, tol) = match mt.match_tol {
            MatchTolerance::Absolute(t) => ("absolute", t),
            MatchTolerance::Relative(t) => ("relative", t),
        };
        let _ = writeln!(
            s,
            "\n[metrics]\ndistance = {}\nimage_shape = {}\ndata_range = {}\nmatch = {kind}\nmatch_tol = {tol}",
            match mt.distance {
                DistanceKind::L2 => "l2",
                DistanceKind::Dssim => "dssim",
            },
            opt(mt.image_shape.map(|sh| format!("{}x{}x{}", sh.height, sh.width, sh.channels))),
            opt(mt.data_range.map(|v| v.to_string()))
        );

        let ab = &self.ablate;
        let _ = writeln!(
            s,
            "\n[ablate]\nm_values = {}\ngammas = {}\ngamma_scale = {}",
            join(ab.m_values.iter().map(usize::to_string).collect()),
            join(ab.gammas.iter().map(f64::to_string).collect()),
            match ab.gamma_scale {
                GammaScale::None => "none",
                GammaScale::DataNorm => "data-norm",
            }
        );
        let (sd, u) = (&self.verify.soundness, &self.verify.uniqueness);
        let _ = writeln!(
            s,
            "\n[verify]\npoints = {}\ndim = {}\nm = {}\ngamma = {}\nseeds = {}\nsteps = {}\nloss_threshold = {}\n\
             match_tol = {}\ninstances = {}\nmax_points = {}\nmax_dim = {}\ninstance_seed = {}\neig_threshold = {}",
            sd.points,
            sd.dim,
            opt(sd.m.map(|v| v.to_string())),
            sd.gamma,
            join(sd.seeds.iter().map(u64::to_string).collect()),
            sd.steps,
            sd.loss_threshold,
            sd.match_tol,
            u.instances,
            u.max_points,
            u.max_dim,
            u.seed,
            u.threshold
        );
        let _ = writeln!(s, "\n[output]\ndir = {}", self.out.display());
        s
    }
}

fn parse_targets(e: &Entry) -> CliResult<TargetKind> {
    Ok(match e.value.as_str() {
        "normal" => TargetKind::Normal,
        "one-hot" => TargetKind::OneHot,
        "pm1" => TargetKind::PlusMinusOne,
        "labels" => TargetKind::Labels,
        other => return Err(e.err(format!("unknown targets {other:?} (expected normal, one-hot, pm1 or labels)"))),
    })
}

fn targets_name(t: TargetKind) -> &'static str {
    match t {
        TargetKind::Normal => "normal",
        TargetKind::OneHot => "one-hot",
        TargetKind::PlusMinusOne => "pm1",
        TargetKind::Labels => "labels",
    }
}

fn parse_family(e: &Entry) -> CliResult<KernelFamily> {
    Ok(match e.value.as_str() {
        "laplace" => KernelFamily::Laplace,
        "rbf" => KernelFamily::Rbf,
        "polynomial" => KernelFamily::Polynomial,
        "ntk" => KernelFamily::Ntk,
        other => return Err(e.err(format!("unknown kernel {other:?} (expected laplace, rbf, polynomial or ntk)"))),
    })
}

fn family_name(k: KernelFamily) -> &'static str {
    match k {
        KernelFamily::Laplace => "laplace",
        KernelFamily::Rbf => "rbf",
        KernelFamily::Polynomial => "polynomial",
        KernelFamily::Ntk => "ntk",
    }
}

/// Comma-separated means, coordinates separated by spaces: `2 2, -2 -2`.
fn parse_means(e: &Entry) -> CliResult<Vec<Vec<f64>>> {
    e.value
        .split(',')
        .map(|mu| {
            mu.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| e.err(format!("bad mean coordinate {t:?}"))))
                .collect()
        })
        .collect()
}

fn parse_shape(e: &Entry) -> CliResult<Option<ImageShape>> {
    if e.value == "none" {
        return Ok(None);
    }
    let dims: Vec<usize> = e
        .value
        .split('x')
        .map(|t| t.trim().parse().map_err(|_| e.err(format!("image_shape must be HxWxC, got {:?}", e.value))))
        .collect::<CliResult<_>>()?;
    let [h, w, c] = dims[..] else {
        return Err(e.err(format!("image_shape must be HxWxC, got {:?}", e.value)));
    };
    Ok(Some(ImageShape::new(h, w, c).map_err(|err| e.err(err.to_string()))?))
}

fn resolve_data(k: DataKeys) -> CliResult<DataInput> {
    let source = k.source.as_deref().unwrap_or("gaussian");
    let unused = |present: bool, key: &str| {
        if present {
            Err(CliError::Config(format!("data key `{key}` does not apply to source {source}")))
        } else {
            Ok(())
        }
    };
    if source != "file" {
        unused(k.x_file.is_some(), "x_file")?;
        unused(k.y_file.is_some(), "y_file")?;
    }
    if !matches!(source, "gaussian" | "subspace") {
        unused(k.sigma.is_some(), "sigma")?;
    }
    if source != "two-gaussians" {
        unused(k.offset.is_some(), "offset")?;
    }
    if source != "subspace" {
        unused(k.rank.is_some(), "rank")?;
    }
    if source != "uniform" {
        unused(k.low.is_some(), "low")?;
        unused(k.high.is_some(), "high")?;
    }
    Ok(match source {
        "gaussian" => DataInput::Synthetic(DataSource::Gaussian { sigma: k.sigma.unwrap_or(1.0) }),
        "two-gaussians" => DataInput::Synthetic(DataSource::TwoGaussians { offset: k.offset.unwrap_or(2.0) }),
        "subspace" => DataInput::Synthetic(DataSource::Subspace {
            rank: k.rank.ok_or_else(|| CliError::Config("source = subspace needs `rank`".into()))?,
            sigma: k.sigma.unwrap_or(1.0),
        }),
        "uniform" => DataInput::Synthetic(DataSource::Uniform { low: k.low.unwrap_or(-1.0), high: k.high.unwrap_or(1.0) }),
        "file" => DataInput::Files {
            x: k.x_file.ok_or_else(|| CliError::Config("source = file needs `x_file`".into()))?,
            y: k.y_file,
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown data source {other:?} (expected gaussian, two-gaussians, subspace, uniform or file)"
            )))
        }
    })
}

fn resolve_queries(k: QueryKeys) -> CliResult<QueryChoice> {
    let kind = k.kind.as_deref().unwrap_or("normal");
    let unused = |present: bool, key: &str| {
        if present {
            Err(CliError::Config(format!("attack key `{key}` does not apply to queries = {kind}")))
        } else {
            Ok(())
        }
    };
    if !matches!(kind, "normal" | "mixture") {
        unused(k.sigma.is_some(), "query_sigma")?;
    }
    if !matches!(kind, "uniform" | "grid") {
        unused(k.low.is_some(), "query_low")?;
        unused(k.high.is_some(), "query_high")?;
    }
    if kind != "mixture" {
        unused(k.means.is_some(), "query_means")?;
    }
    if kind != "file" {
        unused(k.file.is_some(), "query_file")?;
    }
    Ok(match kind {
        "normal" => QueryChoice::Normal { sigma: k.sigma.unwrap_or(1.0) },
        "uniform" => QueryChoice::Uniform { low: k.low.unwrap_or(-1.0), high: k.high.unwrap_or(1.0) },
        "grid" => QueryChoice::Grid { low: k.low.unwrap_or(-6.0), high: k.high.unwrap_or(6.0) },
        "mixture" => QueryChoice::Mixture {
            means: k.means.ok_or_else(|| CliError::Config("queries = mixture needs `query_means`".into()))?,
            sigma: k.sigma.unwrap_or(1.0),
        },
        "file" => QueryChoice::File(k.file.ok_or_else(|| CliError::Config("queries = file needs `query_file`".into()))?),
        other => {
            return Err(CliError::Config(format!(
                "unknown queries {other:?} (expected normal, uniform, grid, mixture or file)"
            )))
        }
    })
}
