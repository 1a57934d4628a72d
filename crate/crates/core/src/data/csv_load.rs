use std::path::Path;

use super::LabeledDataset;
use crate::error::{FedError, Result};
use crate::nn::Matrix;
use crate::scalar::Scalar;

/// Columns whose variance falls below this are mapped to zero.
const VARIANCE_FLOOR: f64 = 1e-12;

/// Reads `label,feat_1,...,feat_m` rows (no header) and standardizes every
/// feature column to zero mean and unit variance over the file.
pub fn load_csv_dataset<T: Scalar>(path: impl AsRef<Path>, num_classes: usize) -> Result<LabeledDataset<T>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => FedError::Io(io),
            other => FedError::Parse {
                line: 0,
                message: format!("{other:?}"),
            },
        })?;

    let mut width: Option<usize> = None;
    let mut labels = Vec::new();
    let mut raw: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| FedError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let m = record.len() - 1;
        match width {
            None if m == 0 => {
                return Err(FedError::Parse {
                    line,
                    message: "row has a label but no features".into(),
                })
            }
            None => width = Some(m),
            Some(w) if w != m => {
                return Err(FedError::Parse {
                    line,
                    message: format!("expected {w} features, found {m}"),
                })
            }
            Some(_) => {}
        }
        let label_field = &record[0];
        let label: usize = label_field.parse().map_err(|_| FedError::Parse {
            line,
            message: format!("label `{label_field}` is not a non-negative integer"),
        })?;
        if label >= num_classes {
            return Err(FedError::Parse {
                line,
                message: format!("label {label} is not below the category count {num_classes}"),
            });
        }
        labels.push(label);
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| FedError::Parse {
                line,
                message: format!("feature {} `{field}` is not a number", j + 1),
            })?;
            if !v.is_finite() {
                return Err(FedError::Parse {
                    line,
                    message: format!("feature {} is not finite", j + 1),
                });
            }
            raw.push(v);
        }
    }

    let m = width.unwrap_or(0);
    let n = labels.len();
    standardize_columns(&mut raw, n, m);
    let data = raw.into_iter().map(T::of).collect();
    LabeledDataset::new(Matrix::from_vec(n, m, data)?, labels, num_classes)
}

fn standardize_columns(data: &mut [f64], n: usize, m: usize) {
    if n == 0 {
        return;
    }
    for j in 0..m {
        let mean = (0..n).map(|i| data[i * m + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| {
                let d = data[i * m + j] - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        for i in 0..n {
            let v = &mut data[i * m + j];
            *v = if var < VARIANCE_FLOOR {
                0.0
            } else {
                (*v - mean) / var.sqrt()
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn well_formed_file() {
        let f = write("0,1.0,2.0\n1,3.0,2.0\n2,5.0,2.0\n");
        let ds = load_csv_dataset::<f64>(f.path(), 3).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.labels(), &[0, 1, 2]);
        // column 1: mean 3, population std sqrt(8/3)
        let s = (8.0f64 / 3.0).sqrt();
        assert!((ds.inputs().get(0, 0) + 2.0 / s).abs() < 1e-12);
        assert!(ds.inputs().get(1, 0).abs() < 1e-12);
        // constant column goes to zero
        assert!((0..3).all(|i| ds.inputs().get(i, 1) == 0.0));
    }

    #[test]
    fn label_out_of_range_names_line() {
        let f = write("0,1.0\n1,2.0\n3,0.5\n");
        match load_csv_dataset::<f64>(f.path(), 3) {
            Err(FedError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_and_non_numeric_rows() {
        let f = write("0,1.0,2.0\n1,2.0\n");
        assert!(matches!(
            load_csv_dataset::<f64>(f.path(), 2),
            Err(FedError::Parse { line: 2, .. })
        ));
        let f = write("0,1.0\n1,abc\n");
        assert!(matches!(
            load_csv_dataset::<f64>(f.path(), 2),
            Err(FedError::Parse { line: 2, .. })
        ));
        let f = write("x,1.0\n");
        assert!(matches!(
            load_csv_dataset::<f64>(f.path(), 2),
            Err(FedError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_csv_dataset::<f64>("/nonexistent/data.csv", 2),
            Err(FedError::Io(_))
        ));
    }
}
