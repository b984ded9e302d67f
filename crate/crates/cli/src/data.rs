//! CSV input and output.

use std::path::Path;

use nalgebra::DMatrix;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Table {
    pub names: Vec<String>,
    pub data: DMatrix<f64>,
}

/// Public data files mapped to their five-column sub-problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    /// `wine.data`: class label, then 13 constituents.
    Wine,
    /// `wdbc.data`: id, diagnosis, then 30 nucleus features.
    BreastCancer,
}

impl Dataset {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "wine" => Ok(Self::Wine),
            "breast-cancer" => Ok(Self::BreastCancer),
            other => Err(CliError::input(format!(
                "unknown dataset {other:?} (expected wine or breast-cancer)"
            ))),
        }
    }

    fn first_feature(self) -> usize {
        match self {
            Self::Wine => 1,
            Self::BreastCancer => 2,
        }
    }

    fn names(self) -> [&'static str; 5] {
        match self {
            Self::Wine => ["alcohol", "malic_acid", "ash", "alcalinity_of_ash", "magnesium"],
            Self::BreastCancer => [
                "radius_mean",
                "texture_mean",
                "perimeter_mean",
                "area_mean",
                "smoothness_mean",
            ],
        }
    }

    /// Mixture components used for the dataset when `--k` is absent.
    pub fn default_k(self) -> usize {
        match self {
            Self::Wine => 3,
            Self::BreastCancer => 2,
        }
    }
}

fn parse_cell(cell: &str, line: u64, column: usize, name: &str) -> Result<f64, CliError> {
    let v: f64 = cell.trim().parse().map_err(|_| {
        CliError::input(format!(
            "line {line}, column {} ({name}): cannot parse {cell:?} as a number",
            column + 1
        ))
    })?;
    if !v.is_finite() {
        return Err(CliError::input(format!(
            "line {line}, column {} ({name}): value {cell:?} is not finite",
            column + 1
        )));
    }
    Ok(v)
}

fn finish(names: Vec<String>, rows: Vec<Vec<f64>>, path: &Path) -> Result<Table, CliError> {
    if rows.is_empty() {
        return Err(CliError::input(format!("{}: no data rows", path.display())));
    }
    let d = names.len();
    let data = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok(Table { names, data })
}

/// Comma-separated file with a header row and numeric cells.
pub fn read_csv(path: &Path) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::input(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if names.is_empty() || names.iter().any(|n| n.is_empty()) {
        return Err(CliError::input(format!("{}: header has empty column names", path.display())));
    }
    for (j, n) in names.iter().enumerate() {
        if names[..j].contains(n) {
            return Err(CliError::input(format!("{}: duplicate column name {n:?}", path.display())));
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| parse_cell(cell, line, j, &names[j]))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    finish(names, rows, path)
}

/// Headerless public file reduced to its first five features. A leading
/// header line is skipped if present.
pub fn read_dataset(path: &Path, dataset: Dataset) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let first = dataset.first_feature();
    let names = dataset.names();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < first + names.len() {
            return Err(CliError::input(format!(
                "line {line}: expected at least {} fields, found {}",
                first + names.len(),
                record.len()
            )));
        }
        let row: Result<Vec<f64>, CliError> = names
            .iter()
            .enumerate()
            .map(|(c, name)| parse_cell(&record[first + c], line, first + c, name))
            .collect();
        match row {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(e),
        }
    }
    finish(names.iter().map(|s| s.to_string()).collect(), rows, path)
}

pub fn load(path: &Path, dataset: Option<Dataset>) -> Result<Table, CliError> {
    match dataset {
        Some(d) => read_dataset(path, d),
        None => read_csv(path),
    }
}

pub fn to_csv(names: &[String], data: &DMatrix<f64>) -> String {
    let mut s = names.join(",");
    s.push('\n');
    for i in 0..data.nrows() {
        let row: Vec<String> = data.row(i).iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Writes to `path`, or standard output when absent.
pub fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| CliError::input(format!("cannot write {}: {e}", p.display()))),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| CliError::input(format!("cannot write to standard output: {e}")))
        }
    }
}

/// One number per line (or comma separated); blank lines and `#` comments
/// are ignored.
pub fn read_grid(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read grid {}: {e}", path.display())))?;
    let mut grid = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        for cell in line.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            grid.push(parse_cell(cell, i as u64 + 1, 0, "grid")?);
        }
    }
    if grid.is_empty() {
        return Err(CliError::input(format!("grid {} is empty", path.display())));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::input(format!("grid {} must be sorted ascending", path.display())));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_header_and_numbers() {
        let f = file("a,b\n1,2\n3.5,-4e1\n");
        let t = read_csv(f.path()).unwrap();
        assert_eq!(t.names, vec!["a", "b"]);
        assert_eq!(t.data[(1, 1)], -40.0);
    }

    #[test]
    fn text_cell_names_its_location() {
        let f = file("a,b\n1,2\n3,oops\n");
        let e = read_csv(f.path()).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("line 3"), "{}", e.message);
        assert!(e.message.contains("column 2 (b)"), "{}", e.message);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let f = file("a,b\n1,2\n3\n");
        assert_eq!(read_csv(f.path()).unwrap_err().code, 2);
    }

    #[test]
    fn wine_layout_keeps_five_features() {
        let f = file("1,14.23,1.71,2.43,15.6,127,2.8,3.06\n2,12.37,.94,1.36,10.6,88,1.98,.57\n");
        let t = read_dataset(f.path(), Dataset::Wine).unwrap();
        assert_eq!(t.names[0], "alcohol");
        assert_eq!(t.data.shape(), (2, 5));
        assert_eq!(t.data[(1, 1)], 0.94);
        assert_eq!(t.data[(0, 4)], 127.0);
    }

    #[test]
    fn breast_cancer_layout_skips_id_and_diagnosis() {
        let f = file("id,diagnosis,r,t,p,a,s\n842302,M,17.99,10.38,122.8,1001,0.1184,0.2776\n");
        let t = read_dataset(f.path(), Dataset::BreastCancer).unwrap();
        assert_eq!(t.data.shape(), (1, 5));
        assert_eq!(t.data[(0, 0)], 17.99);
        assert_eq!(t.data[(0, 4)], 0.1184);
    }

    #[test]
    fn grid_must_be_sorted_numbers() {
        assert_eq!(read_grid(file("0\n1,2\n# c\n3\n").path()).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
        assert!(read_grid(file("1\n0\n").path()).is_err());
        assert!(read_grid(file("x\n").path()).is_err());
    }
}
