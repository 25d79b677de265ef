//! Persisted models.
//!
//! ```text
//! krecon-model 1
//! kind krr
//! kernel {"Laplace":{"gamma":0.15}}
//! support
//! <matrix block>
//! coeffs
//! <matrix block>
//! ```
//!
//! The kernel line is JSON; matrix blocks use the [`crate::matrix_file`]
//! format. Loading checks the version tag exactly.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use krecon::kernels::KernelSpec;
use krecon::models::{KdeModel, KernelOracle, TrainedKernelModel};
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};
use crate::matrix_file;

pub const MAGIC: &str = "krecon-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Krr,
    Svm,
    Kde,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Krr => "krr",
            ModelKind::Svm => "svm",
            ModelKind::Kde => "kde",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "krr" => Ok(ModelKind::Krr),
            "svm" => Ok(ModelKind::Svm),
            "kde" => Ok(ModelKind::Kde),
            other => Err(format!("unknown model kind {other:?} (expected krr, svm or kde)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub model: TrainedKernelModel,
}

impl ModelFile {
    pub fn to_text(&self) -> String {
        let kernel = serde_json::to_string(self.model.spec()).expect("kernel specs serialize");
        format!(
            "{MAGIC} {FORMAT_VERSION}\nkind {}\nkernel {kernel}\nsupport\n{}coeffs\n{}",
            self.kind,
            matrix_file::to_string(self.model.support()),
            matrix_file::to_string(self.model.coeffs()),
        )
    }

    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let bad = |msg: String| CliError::Format { path: origin.to_path_buf(), msg };
        let lines: Vec<&str> = text.lines().collect();
        let header = lines.first().copied().unwrap_or_default();
        let expected = format!("{MAGIC} {FORMAT_VERSION}");
        if header.trim() != expected {
            return Err(bad(format!("unsupported model header {header:?}, expected {expected:?}")));
        }
        let field = |idx: usize, name: &str| -> CliResult<&str> {
            lines
                .get(idx)
                .and_then(|l| l.strip_prefix(name))
                .and_then(|rest| rest.strip_prefix(' '))
                .ok_or_else(|| bad(format!("line {}: expected `{name} ...`", idx + 1)))
        };
        let kind: ModelKind = field(1, "kind")?.trim().parse().map_err(bad)?;
        let spec: KernelSpec =
            serde_json::from_str(field(2, "kernel")?).map_err(|e| bad(format!("kernel spec: {e}")))?;
        let (support, next) = block(&lines, 3, "support", origin)?;
        let (coeffs, end) = block(&lines, next, "coeffs", origin)?;
        if lines[end..].iter().any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing content after coeffs block".into()));
        }
        let model = TrainedKernelModel::new(spec, support, coeffs)?;
        Ok(ModelFile { kind, model })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The query-only view of this model. KDE models hide their bandwidth.
    pub fn into_oracle(self) -> CliResult<KernelOracle> {
        match (self.kind, self.model.spec().clone()) {
            (ModelKind::Kde, KernelSpec::BandwidthGaussian { h_diag }) => {
                Ok(KdeModel::new(self.model.support().clone(), h_diag)?.into_oracle())
            }
            (ModelKind::Kde, other) => Err(CliError::Config(format!(
                "kde model file carries a {} kernel",
                other.family()
            ))),
            _ => Ok(self.model.into_oracle()),
        }
    }
}

/// Serving path: loads a model file and returns only its query interface.
/// The parsed support and coefficients are moved into the oracle and are not
/// reachable from the returned handle.
pub fn open_oracle(path: &Path) -> CliResult<KernelOracle> {
    ModelFile::read(path)?.into_oracle()
}

/// Reads `name` then a matrix block starting at `start`; returns the matrix
/// and the index of the first line after it.
fn block(lines: &[&str], start: usize, name: &str, origin: &Path) -> CliResult<(DMatrix<f64>, usize)> {
    let bad = |msg: String| CliError::Format { path: origin.to_path_buf(), msg };
    if lines.get(start).map(|l| l.trim()) != Some(name) {
        return Err(bad(format!("line {}: expected `{name}`", start + 1)));
    }
    let header = lines.get(start + 1).ok_or_else(|| bad(format!("missing {name} header")))?;
    let rows: usize = header
        .split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad(format!("bad {name} header {header:?}")))?;
    let end = start + 2 + rows;
    if end > lines.len() {
        return Err(bad(format!("{name} block truncated")));
    }
    let body = lines[start + 1..end].join("\n");
    Ok((matrix_file::parse(&body, origin)?, end))
}
