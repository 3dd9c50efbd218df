use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;

use super::diagram::{PathDiagram, Role, AIP, CUE, HP, OVER_UNDER, RELIANCE, TRUST};
use crate::error::{Error, Result};

/// One participant's time series, stored column-major: `columns[var][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub id: String,
    pub columns: Vec<Vec<Option<f64>>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first `len` steps.
    pub fn prefix(&self, len: usize) -> Series {
        Series {
            id: self.id.clone(),
            columns: self.columns.iter().map(|c| c[..len.min(c.len())].to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub variables: Vec<String>,
    pub series: Vec<Series>,
}

impl PanelDataset {
    pub fn new(variables: Vec<String>, series: Vec<Series>) -> Result<Self> {
        let mut ids = std::collections::BTreeSet::new();
        for s in &series {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Panel(format!("participant {} appears twice", s.id)));
            }
            if s.columns.len() != variables.len() {
                return Err(Error::Panel(format!(
                    "participant {} has {} columns, expected {}",
                    s.id,
                    s.columns.len(),
                    variables.len()
                )));
            }
            let n = s.len();
            if s.columns.iter().any(|c| c.len() != n) {
                return Err(Error::Panel(format!("participant {} has ragged columns", s.id)));
            }
        }
        Ok(Self { variables, series })
    }

    pub fn n_participants(&self) -> usize {
        self.series.len()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }

    pub fn total_steps(&self) -> usize {
        self.series.iter().map(Series::len).sum()
    }

    pub fn min_len(&self) -> usize {
        self.series.iter().map(Series::len).min().unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.series.iter().map(Series::len).max().unwrap_or(0)
    }

    /// Every series truncated to its first `len` steps.
    pub fn prefix(&self, len: usize) -> PanelDataset {
        PanelDataset {
            variables: self.variables.clone(),
            series: self.series.iter().map(|s| s.prefix(len)).collect(),
        }
    }

    /// Verify the panel can feed `diagram`: observed variables present,
    /// complete and in range; latent columns may be absent or missing.
    pub fn check_against(&self, diagram: &PathDiagram) -> Result<()> {
        for v in &diagram.variables {
            let idx = self.var_index(&v.name);
            if v.role == Role::Latent {
                if let Some(i) = idx {
                    for s in &self.series {
                        for (t, val) in s.columns[i].iter().enumerate() {
                            if let Some(x) = val {
                                if !v.admits(*x) {
                                    return Err(out_of_range(&v.name, s, t, *x));
                                }
                            }
                        }
                    }
                }
                continue;
            }
            let i = idx.ok_or_else(|| Error::Panel(format!("panel lacks column `{}`", v.name)))?;
            for s in &self.series {
                for (t, val) in s.columns[i].iter().enumerate() {
                    match val {
                        None => {
                            return Err(Error::MissingObserved {
                                variable: v.name.clone(),
                                participant: s.id.clone(),
                                step: t,
                            })
                        }
                        Some(x) if !v.admits(*x) => return Err(out_of_range(&v.name, s, t, *x)),
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy with every latent column of `diagram` blanked out.
    pub fn mask_latent(&self, diagram: &PathDiagram) -> PanelDataset {
        let mut out = self.clone();
        for v in diagram.variables.iter().filter(|v| v.role == Role::Latent) {
            if let Some(i) = out.var_index(&v.name) {
                for s in &mut out.series {
                    s.columns[i].iter_mut().for_each(|x| *x = None);
                }
            }
        }
        out
    }
}

fn out_of_range(var: &str, s: &Series, t: usize, value: f64) -> Error {
    Error::OutOfRange {
        variable: var.to_string(),
        participant: s.id.clone(),
        step: t,
        value,
    }
}

/// Panel CSV header, in column order.
pub const PANEL_HEADER: [&str; 8] = [
    "participant",
    "t",
    "AIP",
    "HP",
    "E_AIP",
    "reliance",
    "cue",
    "over_under",
];

/// Diagram variable names for the six value columns of the panel CSV.
pub const PANEL_VARIABLES: [&str; 6] = [AIP, HP, TRUST, RELIANCE, CUE, OVER_UNDER];

pub fn read_panel_csv<R: Read>(reader: R) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != PANEL_HEADER {
        return Err(Error::Panel(format!(
            "unexpected header `{}`, expected `{}`",
            header.join(","),
            PANEL_HEADER.join(",")
        )));
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Series> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let id = rec[0].to_string();
        let t: usize = rec[1]
            .parse()
            .map_err(|_| Error::Panel(format!("line {line}: bad step `{}`", &rec[1])))?;
        let series = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Series {
                id: id.clone(),
                columns: vec![Vec::new(); PANEL_VARIABLES.len()],
            }
        });
        if t != series.len() {
            return Err(Error::Panel(format!(
                "line {line}: participant {id} step {t} out of sequence (expected {})",
                series.len()
            )));
        }
        for (k, col) in series.columns.iter_mut().enumerate() {
            let cell = rec[k + 2].trim();
            let value = if cell.is_empty() {
                None
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Panel(format!("line {line}: bad number `{cell}`")))?;
                if !v.is_finite() {
                    return Err(Error::Panel(format!("line {line}: non-finite value")));
                }
                Some(v)
            };
            col.push(value);
        }
    }
    let series = order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("grouped"))
        .collect();
    PanelDataset::new(PANEL_VARIABLES.iter().map(|s| s.to_string()).collect(), series)
}

pub fn write_panel_csv(panel: &PanelDataset) -> Result<String> {
    let idx: Vec<usize> = PANEL_VARIABLES
        .iter()
        .map(|v| {
            panel
                .var_index(v)
                .ok_or_else(|| Error::Panel(format!("panel lacks column `{v}`")))
        })
        .collect::<Result<_>>()?;
    let mut out = PANEL_HEADER.join(",");
    out.push('\n');
    for s in &panel.series {
        for t in 0..s.len() {
            let _ = write!(out, "{},{}", s.id, t);
            for &i in &idx {
                out.push(',');
                if let Some(v) = s.columns[i][t] {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}
