//! Encoders turning data columns into design columns, reusable on new data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ModelError, PenaltyOptions};
use crate::basis::{build_marginal, build_smooth, tensor_product, DesignBlock, SmoothBasis, SmoothConfig};
use crate::data::{Column, DataError, DataFrame};
use crate::formula::{BasisTag, Term};

pub const DEFAULT_BASIS: BasisTag = BasisTag::Tp;
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TENSOR_K: usize = 5;
pub const DEFAULT_ORDER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    Intercept,
    Numeric { var: String },
    Factor {
        var: String,
        levels: Vec<String>,
        drop_first: bool,
    },
    Smooth { label: String, basis: SmoothBasis },
}

impl Encoder {
    pub fn ncols(&self) -> usize {
        match self {
            Encoder::Intercept | Encoder::Numeric { .. } => 1,
            Encoder::Factor { levels, drop_first, .. } => levels.len() - usize::from(*drop_first),
            Encoder::Smooth { basis, .. } => basis.constraint.ncols(),
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        match self {
            Encoder::Intercept => vec!["(Intercept)".into()],
            Encoder::Numeric { var } => vec![var.clone()],
            Encoder::Factor {
                var,
                levels,
                drop_first,
            } => levels
                .iter()
                .skip(usize::from(*drop_first))
                .map(|l| format!("{var}.{l}"))
                .collect(),
            Encoder::Smooth { label, basis } => (1..=basis.constraint.ncols()).map(|j| format!("{label}.{j}")).collect(),
        }
    }

    pub fn variables(&self) -> Vec<&str> {
        match self {
            Encoder::Intercept => Vec::new(),
            Encoder::Numeric { var } | Encoder::Factor { var, .. } => vec![var.as_str()],
            Encoder::Smooth { basis, .. } => basis.margins.iter().map(|m| m.var.as_str()).collect(),
        }
    }

    /// Encodes `data`; the second value flags rows where a smooth was
    /// extrapolated beyond its training range.
    pub fn encode(&self, data: &DataFrame) -> Result<(DMatrix<f64>, Vec<bool>), ModelError> {
        let n = data.nrows();
        match self {
            Encoder::Intercept => Ok((DMatrix::from_element(n, 1, 1.0), vec![false; n])),
            Encoder::Numeric { var } => {
                let v = data.numeric(var)?;
                if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                    return Err(ModelError::NonFinite {
                        column: var.clone(),
                        row,
                    });
                }
                Ok((DMatrix::from_column_slice(n, 1, v), vec![false; n]))
            }
            Encoder::Factor {
                var,
                levels,
                drop_first,
            } => {
                let labels = match data.column(var)? {
                    Column::Factor { .. } => data.column(var)?.labels().expect("factor"),
                    Column::Numeric(_) => {
                        return Err(DataError::UnseenLevels {
                            column: var.clone(),
                            levels: vec!["<numeric values>".into()],
                        }
                        .into())
                    }
                };
                let skip = usize::from(*drop_first);
                let mut out = DMatrix::zeros(n, levels.len() - skip);
                let mut unseen: Vec<String> = Vec::new();
                for (i, label) in labels.iter().enumerate() {
                    match levels.iter().position(|l| l == label) {
                        Some(code) if code >= skip => out[(i, code - skip)] = 1.0,
                        Some(_) => {}
                        None => {
                            if !unseen.iter().any(|u| u == label) {
                                unseen.push(label.to_string());
                            }
                        }
                    }
                }
                if !unseen.is_empty() {
                    return Err(DataError::UnseenLevels {
                        column: var.clone(),
                        levels: unseen,
                    }
                    .into());
                }
                Ok((out, vec![false; n]))
            }
            Encoder::Smooth { basis, .. } => {
                let cols: Vec<&[f64]> = basis
                    .margins
                    .iter()
                    .map(|m| data.numeric(&m.var))
                    .collect::<Result<_, _>>()?;
                Ok(basis.design(&cols)?)
            }
        }
    }
}

/// Concatenation of encoders making up one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEncoder {
    pub parts: Vec<Encoder>,
}

impl TermEncoder {
    pub fn ncols(&self) -> usize {
        self.parts.iter().map(Encoder::ncols).sum()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.parts.iter().flat_map(Encoder::column_names).collect()
    }

    pub fn encode(&self, data: &DataFrame) -> Result<DMatrix<f64>, ModelError> {
        Ok(self.encode_flagged(data)?.0)
    }

    pub fn encode_flagged(&self, data: &DataFrame) -> Result<(DMatrix<f64>, Vec<bool>), ModelError> {
        let n = data.nrows();
        let mut out = DMatrix::zeros(n, self.ncols());
        let mut flags = vec![false; n];
        let mut at = 0;
        for part in &self.parts {
            let (m, f) = part.encode(data)?;
            out.columns_mut(at, m.ncols()).copy_from(&m);
            at += m.ncols();
            for (a, b) in flags.iter_mut().zip(f) {
                *a |= b;
            }
        }
        Ok((out, flags))
    }
}

fn linear_parts(vars: &[String], data: &DataFrame, has_intercept: bool) -> Result<Vec<Encoder>, ModelError> {
    vars.iter()
        .map(|v| {
            Ok(match data.column(v)? {
                Column::Numeric(_) => Encoder::Numeric { var: v.clone() },
                Column::Factor { levels, .. } => Encoder::Factor {
                    var: v.clone(),
                    levels: levels.clone(),
                    drop_first: has_intercept && levels.len() > 1,
                },
            })
        })
        .collect()
}

/// Network inputs: numeric columns as-is, factors fully dummy coded.
pub fn network_encoder(inputs: &[String], data: &DataFrame) -> Result<TermEncoder, ModelError> {
    Ok(TermEncoder {
        parts: linear_parts(inputs, data, false)?,
    })
}

/// Encoder of a structured term plus the smooth block (design, penalty, λ)
/// for smooth terms.
pub fn structured_encoder(
    term: &Term,
    data: &DataFrame,
    has_intercept: bool,
    options: &PenaltyOptions,
) -> Result<(TermEncoder, Option<DesignBlock>), ModelError> {
    match term {
        Term::Intercept => Ok((
            TermEncoder {
                parts: vec![Encoder::Intercept],
            },
            None,
        )),
        Term::Linear { vars } | Term::Ridge { vars, .. } | Term::Lasso { vars, .. } => Ok((
            TermEncoder {
                parts: linear_parts(vars, data, has_intercept)?,
            },
            None,
        )),
        Term::Smooth {
            var,
            basis,
            df,
            k,
            order,
        } => {
            let x = data.numeric(var)?;
            let cfg = SmoothConfig {
                basis: basis.unwrap_or(DEFAULT_BASIS),
                k: k.unwrap_or(DEFAULT_K),
                penalty_order: order.unwrap_or(DEFAULT_ORDER),
                df_target: Some(df.unwrap_or(options.df_default)),
                sum_to_zero: true,
                hat1: options.hat1,
            };
            let mut block = build_smooth(x, var, &cfg)?;
            block.term_id = term.label();
            Ok((smooth_encoder(&block), Some(block)))
        }
        Term::TensorSmooth { vars, basis, k, df, .. } => {
            let ks: Vec<usize> = match k.as_deref() {
                None => vec![DEFAULT_TENSOR_K; vars.len()],
                Some([one]) => vec![*one; vars.len()],
                Some(list) if list.len() == vars.len() => list.to_vec(),
                Some(list) => {
                    return Err(ModelError::InvalidOption(format!(
                        "{}: {} basis dimensions for {} variables",
                        term.label(),
                        list.len(),
                        vars.len()
                    )))
                }
            };
            let margins = vars
                .iter()
                .zip(&ks)
                .map(|(v, &kk)| {
                    let cfg = SmoothConfig {
                        basis: basis.unwrap_or(DEFAULT_BASIS),
                        k: kk,
                        penalty_order: DEFAULT_ORDER.min(kk - 1),
                        df_target: None,
                        sum_to_zero: false,
                        hat1: options.hat1,
                    };
                    build_marginal(data.numeric(v)?, v, &cfg).map_err(ModelError::from)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut block = tensor_product(&margins, Some(df.unwrap_or(options.df_default)), options.hat1)?;
            block.term_id = term.label();
            Ok((smooth_encoder(&block), Some(block)))
        }
        Term::Offset { .. } | Term::Network(_) | Term::Orthogonalized { .. } => Err(ModelError::InvalidOption(
            format!("{} is not a structured term", term.label()),
        )),
    }
}

fn smooth_encoder(block: &DesignBlock) -> TermEncoder {
    TermEncoder {
        parts: vec![Encoder::Smooth {
            label: block.term_id.clone(),
            basis: block.basis.clone().expect("smooth blocks carry a basis"),
        }],
    }
}
