//! Text checkpoints tagged `mixhar-ckpt-v1`.
//!
//! ```text
//! mixhar-ckpt-v1
//! model {"spec":{...},"calibration":true}
//! norm {"mean":[...],"std":[...]}
//! param conv1.weight 32x3x5
//! <values, space separated>
//! ...
//! ```
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle is exact. Parameters appear in declaration order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mixhar_core::data::NormStats;
use mixhar_core::model::{HarModel, ModelSpec};
use mixhar_core::tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const FORMAT: &str = "mixhar-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    spec: ModelSpec,
    calibration: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: HarModel,
    pub params: ParamStore,
    /// Normalisation fitted on the training fold, if known.
    pub norm: Option<NormStats>,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let header = ModelHeader {
            spec: self.model.spec().clone(),
            calibration: self.model.uses_calibration(),
        };
        let mut out = format!("{FORMAT}\nmodel {}\n", serde_json::to_string(&header).expect("header"));
        if let Some(n) = &self.norm {
            let _ = writeln!(out, "norm {}", serde_json::to_string(n).expect("norm"));
        }
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "param {name} {}", dims.join("x"));
            let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| LabError::Checkpoint(msg);
        let mut lines = text.lines();
        match lines.next() {
            Some(FORMAT) => {}
            other => return Err(bad(format!("expected format tag {FORMAT}, found {other:?}"))),
        }
        let header: ModelHeader = lines
            .next()
            .and_then(|l| l.strip_prefix("model "))
            .ok_or_else(|| bad("missing model line".into()))
            .and_then(|j| serde_json::from_str(j).map_err(|e| bad(format!("model line: {e}"))))?;
        let model = HarModel::new(header.spec, header.calibration)?;
        let mut norm = None;
        let mut params = ParamStore::new();
        let expected = model.param_shapes();
        let mut lines = lines.peekable();
        if let Some(j) = lines.peek().and_then(|l| l.strip_prefix("norm ")) {
            norm = Some(serde_json::from_str(j).map_err(|e| bad(format!("norm line: {e}")))?);
            lines.next();
        }
        while let Some(line) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some("param"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(format!("malformed parameter line {line:?}")));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape {dims:?} for {name}"))))
                .collect::<Result<_>>()?;
            let values: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad(format!("missing values for {name}")))?
                .split_ascii_whitespace()
                .map(|v| v.parse().map_err(|_| bad(format!("bad value {v:?} in {name}"))))
                .collect::<Result<_>>()?;
            let k = params.len();
            match expected.get(k) {
                Some((n, s)) if *n == name && *s == shape => {}
                Some((n, s)) => {
                    return Err(bad(format!(
                        "parameter {k} is {name} {shape:?}, model expects {n} {s:?}"
                    )))
                }
                None => return Err(bad(format!("unexpected extra parameter {name}"))),
            }
            let t = Tensor::new(shape, values).map_err(|e| bad(format!("{name}: {e}")))?;
            params.push(name, t);
        }
        model.check_params(&params).map_err(|e| bad(e.to_string()))?;
        Ok(Self { model, params, norm })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            LabError::Checkpoint(m) => LabError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
