//! Plain-text parameter checkpoints.
//!
//! ```text
//! graphae-params 1
//! kind gcn_vae
//! layout trunk=1 sigma_trunk=0
//! matrix 3 2
//! 0.25 -1.5
//! ...
//! ```
//!
//! Matrices follow [`ParamSet::matrices`] order, one row per line. Values use
//! the shortest representation that parses back to the same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{ModelKind, ParamSet};

const MAGIC: &str = "graphae-params 1";

impl ParamSet {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "kind {}", self.kind()).unwrap();
        match self {
            ParamSet::LinearAe { .. } | ParamSet::LinearVae { .. } => writeln!(out, "layout").unwrap(),
            ParamSet::GcnAe { layers } => writeln!(out, "layout layers={}", layers.len()).unwrap(),
            ParamSet::GcnVae { trunk, sigma_trunk, .. } => writeln!(
                out,
                "layout trunk={} sigma_trunk={}",
                trunk.len(),
                sigma_trunk.as_ref().map_or(0, Vec::len)
            )
            .unwrap(),
        }
        for m in self.matrices() {
            writeln!(out, "matrix {} {}", m.nrows(), m.ncols()).unwrap();
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<ParamSet> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, expected {what}")))
        };
        let (ln, magic) = next("header")?;
        if magic != MAGIC {
            return Err(Error::parse(path, ln, format!("expected `{MAGIC}`")));
        }
        let (ln, kind_line) = next("kind")?;
        let kind: ModelKind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::parse(path, ln, "expected `kind <name>`"))?
            .parse()
            .map_err(|e: Error| Error::parse(path, ln, e.to_string()))?;
        let (ln, layout_line) = next("layout")?;
        let fields = layout_line
            .strip_prefix("layout")
            .ok_or_else(|| Error::parse(path, ln, "expected `layout ...`"))?;
        let field = |name: &str| -> Result<usize> {
            fields
                .split_whitespace()
                .find_map(|f| f.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::parse(path, ln, format!("layout is missing `{name}`")))?
                .parse()
                .map_err(|_| Error::parse(path, ln, format!("bad `{name}` count")))
        };
        let count = match kind {
            ModelKind::LinearAe => 1,
            ModelKind::LinearVae => 2,
            ModelKind::GcnAe => field("layers")?,
            ModelKind::GcnVae => field("trunk")? + field("sigma_trunk")? + 2,
        };

        let mut matrices = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, header) = next("matrix header")?;
            let dims: Vec<usize> = header
                .strip_prefix("matrix ")
                .map(|r| r.split_whitespace().filter_map(|t| t.parse().ok()).collect())
                .unwrap_or_default();
            let [rows, cols] = dims[..] else {
                return Err(Error::parse(path, ln, "expected `matrix <rows> <cols>`"));
            };
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, line) = next("matrix row")?;
                let before = values.len();
                for tok in line.split_whitespace() {
                    values.push(
                        tok.parse::<f64>()
                            .map_err(|_| Error::parse(path, ln, format!("bad value {tok:?}")))?,
                    );
                }
                if values.len() - before != cols {
                    return Err(Error::parse(path, ln, format!("expected {cols} values")));
                }
            }
            matrices.push(Array2::from_shape_vec((rows, cols), values).unwrap());
        }

        let params = match kind {
            ModelKind::LinearAe => ParamSet::LinearAe {
                w: matrices.pop().unwrap(),
            },
            ModelKind::LinearVae => {
                let w_sigma = matrices.pop().unwrap();
                let w_mu = matrices.pop().unwrap();
                ParamSet::LinearVae { w_mu, w_sigma }
            }
            ModelKind::GcnAe => ParamSet::GcnAe { layers: matrices },
            ModelKind::GcnVae => {
                let head_sigma = matrices.pop().unwrap();
                let head_mu = matrices.pop().unwrap();
                let sigma_len = field("sigma_trunk")?;
                let sigma = matrices.split_off(matrices.len() - sigma_len);
                ParamSet::GcnVae {
                    trunk: matrices,
                    sigma_trunk: (sigma_len > 0).then_some(sigma),
                    head_mu,
                    head_sigma,
                }
            }
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamSet::from_text(&text, path)
    }
}
