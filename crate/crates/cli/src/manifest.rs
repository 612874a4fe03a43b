//! Dataset manifest: CSV with header `path,mos,split`.

use std::path::{Path, PathBuf};

use iqa_core::trainer::Split;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// Image or feature-cache path, resolved against the manifest directory.
    pub path: PathBuf,
    pub mos: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Parses manifest text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| CliError::Data(format!("manifest header: {e}")))?
            .clone();
        let column = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Data(format!("manifest is missing column `{name}`")))
        };
        let (path_col, mos_col, split_col) = (column("path")?, column("mos")?, column("split")?);
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| CliError::Data(format!("manifest line {line}: {e}")))?;
            let field = |c: usize| record.get(c).unwrap_or("");
            let path = field(path_col);
            if path.is_empty() {
                return Err(CliError::Data(format!("manifest line {line}: empty path")));
            }
            let mos: f64 = field(mos_col)
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CliError::Data(format!("manifest line {line}: invalid mos `{}`", field(mos_col))))?;
            let split = Split::parse(field(split_col))
                .ok_or_else(|| CliError::Data(format!("manifest line {line}: invalid split `{}`", field(split_col))))?;
            let path = PathBuf::from(path);
            let path = if path.is_absolute() { path } else { base.join(path) };
            rows.push(ManifestRow { path, mos, split });
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_and_resolves_paths() {
        let m = Manifest::parse(
            "path,mos,split\na.png,0.5,train\n/abs/b.ppm, 3.25 ,val\nc.ugqf,1,test\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.rows[0].path, PathBuf::from("/data/a.png"));
        assert_eq!(m.rows[1].path, PathBuf::from("/abs/b.ppm"));
        assert_eq!(m.rows[1].mos, 3.25);
        assert_eq!(m.split(Split::Test).len(), 1);
    }

    #[test]
    fn column_order_is_free() {
        let m = Manifest::parse("split,path,mos\ntrain,x.png,2\n", Path::new(".")).unwrap();
        assert_eq!(m.rows[0].mos, 2.0);
    }

    #[test]
    fn rejects_bad_rows() {
        for text in [
            "path,mos\na.png,1\n",
            "path,mos,split\n,1,train\n",
            "path,mos,split\na.png,nan,train\n",
            "path,mos,split\na.png,x,train\n",
            "path,mos,split\na.png,1,holdout\n",
        ] {
            assert!(matches!(Manifest::parse(text, Path::new(".")), Err(CliError::Data(_))), "{text}");
        }
    }
}
