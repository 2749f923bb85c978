//! CSV tables exchanged between commands. Empty cells mean "undefined".

use std::path::Path;

use bos_core::dumps::SetRole;

use crate::CliError;

const KEY_COLUMNS: [&str; 4] = ["set_id", "source_name", "role", "images"];
pub const MAP_COLUMNS: [&str; 3] = ["map", "map50", "map75"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub set_id: String,
    pub source_name: String,
    pub role: SetRole,
    pub images: usize,
    pub values: Vec<Option<f64>>,
}

/// Rows of per-set values under named columns. Used for both score files
/// and map files (whose columns are `map,map50,map75`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub columns: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

pub type MapRow = ScoreRow;

pub(crate) fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => String::new(),
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

impl ScoreTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = KEY_COLUMNS
            .iter()
            .copied()
            .chain(self.columns.iter().map(String::as_str))
            .collect();
        let to_err = csv_err(Path::new("<memory>"));
        w.write_record(&header).map_err(&to_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.set_id.clone(),
                r.source_name.clone(),
                r.role.as_str().into(),
                r.images.to_string(),
            ];
            rec.extend(r.values.iter().map(|v| cell(*v)));
            w.write_record(&rec).map_err(&to_err)?;
        }
        w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let to_err = csv_err(path);
        let mut rdr = csv::Reader::from_path(path).map_err(&to_err)?;
        let header = rdr.headers().map_err(&to_err)?.clone();
        if header.len() < KEY_COLUMNS.len() || header.iter().zip(KEY_COLUMNS).any(|(a, b)| a != b) {
            return Err(CliError::Usage(format!(
                "{}: header must start with {}",
                path.display(),
                KEY_COLUMNS.join(",")
            )));
        }
        let columns: Vec<String> = header
            .iter()
            .skip(KEY_COLUMNS.len())
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(&to_err)?;
            let bad = |what: &str| {
                CliError::Usage(format!("{}: row {}: bad {what}", path.display(), i + 2))
            };
            let role: SetRole = rec[2].parse().map_err(|_| bad("role"))?;
            let images: usize = rec[3].parse().map_err(|_| bad("images"))?;
            let values = rec
                .iter()
                .skip(KEY_COLUMNS.len())
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>().map(Some).map_err(|_| bad("value"))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(ScoreRow {
                set_id: rec[0].to_string(),
                source_name: rec[1].to_string(),
                role,
                images,
                values,
            });
        }
        Ok(Self { columns, rows })
    }
}
