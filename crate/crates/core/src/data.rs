//! Column-oriented tables of numeric and categorical columns read from CSV.

use std::path::Path;

use indexmap::IndexMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("cannot read '{path}': {message}")]
    Io { path: String, message: String },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("column '{0}' not found in the data")]
    MissingColumn(String),
    #[error("column '{0}' is categorical where a numeric column is required")]
    NotNumeric(String),
    #[error("column '{column}' has levels not seen in training: {levels:?}")]
    UnseenLevels { column: String, levels: Vec<String> },
    #[error("column '{column}' has {got} rows, expected {expected}")]
    Length {
        column: String,
        got: usize,
        expected: usize,
    },
    #[error("no rows left after dropping missing values")]
    Empty,
    #[error("response column '{column}' has a value {value} in row {row} that the log transform cannot take")]
    BadTransform { column: String, row: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Levels are sorted; `codes[i]` indexes into `levels`.
    Factor { levels: Vec<String>, codes: Vec<usize> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Factor { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a factor from raw strings, with sorted levels.
    pub fn factor<S: AsRef<str>>(values: &[S]) -> Column {
        let mut levels: Vec<String> = values.iter().map(|v| v.as_ref().to_string()).collect();
        levels.sort();
        levels.dedup();
        let codes = values
            .iter()
            .map(|v| levels.binary_search_by(|l| l.as_str().cmp(v.as_ref())).expect("level present"))
            .collect();
        Column::Factor { levels, codes }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Factor { levels, codes } => Column::Factor {
                levels: levels.clone(),
                codes: rows.iter().map(|&i| codes[i]).collect(),
            },
        }
    }

    /// Level label of each row of a factor column.
    pub fn labels(&self) -> Option<Vec<&str>> {
        match self {
            Column::Numeric(_) => None,
            Column::Factor { levels, codes } => Some(codes.iter().map(|&c| levels[c].as_str()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataFrame {
    columns: IndexMap<String, Column>,
    nrows: usize,
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t == "NA"
}

impl DataFrame {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    /// Adds or replaces a column; all columns must have equal length.
    pub fn insert(&mut self, name: &str, column: Column) -> Result<(), DataError> {
        if !self.columns.is_empty() && column.len() != self.nrows {
            return Err(DataError::Length {
                column: name.to_string(),
                got: column.len(),
                expected: self.nrows,
            });
        }
        self.nrows = column.len();
        self.columns.insert(name.to_string(), column);
        Ok(())
    }

    pub fn with_numeric(mut self, name: &str, values: Vec<f64>) -> Result<Self, DataError> {
        self.insert(name, Column::Numeric(values))?;
        Ok(self)
    }

    pub fn column(&self, name: &str) -> Result<&Column, DataError> {
        self.columns
            .get(name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], DataError> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Factor { .. } => Err(DataError::NotNumeric(name.to_string())),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> DataFrame {
        DataFrame {
            columns: self
                .columns
                .iter()
                .map(|(k, c)| (k.clone(), c.select(rows)))
                .collect(),
            nrows: rows.len(),
        }
    }

    /// Reads a CSV file with a header row. A column is numeric when every
    /// non-missing entry parses as a number, categorical otherwise. Rows with
    /// a missing entry (`NA` or empty) in any of `used` (all columns when
    /// `None`) are dropped; the count of dropped rows is returned.
    pub fn read_csv(path: &Path, used: Option<&[String]>) -> Result<(DataFrame, usize), DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse_csv(&text, used)
    }

    pub fn parse_csv(text: &str, used: Option<&[String]>) -> Result<(DataFrame, usize), DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| DataError::Csv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if let Some(used) = used {
            if let Some(missing) = used.iter().find(|u| !headers.contains(u)) {
                return Err(DataError::MissingColumn(missing.clone()));
            }
        }
        let keep: Vec<usize> = match used {
            None => (0..headers.len()).collect(),
            Some(used) => (0..headers.len()).filter(|&j| used.contains(&headers[j])).collect(),
        };
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); keep.len()];
        let mut dropped = 0;
        for record in reader.records() {
            let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
            if keep.iter().any(|&j| record.get(j).is_none_or(is_missing)) {
                dropped += 1;
                continue;
            }
            for (slot, &j) in raw.iter_mut().zip(&keep) {
                slot.push(record[j].to_string());
            }
        }
        let mut frame = DataFrame::new();
        for (values, &j) in raw.into_iter().zip(&keep) {
            let parsed: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
            let column = match parsed {
                Some(v) => Column::Numeric(v),
                None => Column::factor(&values),
            };
            frame.insert(&headers[j], column)?;
        }
        if frame.nrows == 0 {
            return Err(DataError::Empty);
        }
        Ok((frame, dropped))
    }
}
