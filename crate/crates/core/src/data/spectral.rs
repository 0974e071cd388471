//! Labeled spectra from CSV: band values followed by an integer class.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::LabeledDataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpectralOptions {
    /// Expected band count; inferred from the first row when `None`.
    pub bands: Option<usize>,
    pub has_header: bool,
}

pub fn load_spectral_csv<T: Scalar>(path: &Path, opts: SpectralOptions) -> Result<LabeledDataset<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_spectral_csv(file, &path.display().to_string(), opts)
}

/// Parses rows, rescales all band values with one dataset-wide min-max map
/// to `[0, 1]` (a constant dataset maps to 0) and zero-pads every spectrum to
/// the next power of two.
pub fn read_spectral_csv<T: Scalar, R: Read>(
    reader: R,
    source_name: &str,
    opts: SpectralOptions,
) -> Result<LabeledDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let err = |line: u64, message: String| Error::ParseLine {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut bands = opts.bands;
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let width = rec.len();
        if width < 2 {
            return Err(err(line, format!("expected band values and a label, got {width} field(s)")));
        }
        let b = *bands.get_or_insert(width - 1);
        if width != b + 1 {
            return Err(err(line, format!("expected {} fields, got {width}", b + 1)));
        }
        for (col, cell) in rec.iter().take(b).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(line, format!("column {}: `{cell}` is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(err(line, format!("column {}: non-finite value", col + 1)));
            }
            values.push(v);
        }
        let cell = &rec[b];
        let label: usize = cell
            .parse()
            .map_err(|_| err(line, format!("label `{cell}` is not a nonnegative integer")))?;
        labels.push(label);
    }
    let bands = bands.unwrap_or(0);
    if labels.is_empty() || bands == 0 {
        return Err(Error::InvalidDimension(format!("{source_name}: no spectra")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let padded = bands.next_power_of_two();
    let mut data = vec![T::zero(); labels.len() * padded];
    for (i, row) in values.chunks(bands).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let s = if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            data[i * padded + j] = T::lit(s);
        }
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(Matrix::new(labels.len(), padded, data)?, labels, num_classes, "spectral")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, opts: SpectralOptions) -> Result<LabeledDataset<f64>> {
        read_spectral_csv(text.as_bytes(), "mem", opts)
    }

    #[test]
    fn constant_row_maps_to_zero() {
        let ds = parse("3,3,3,1\n", SpectralOptions::default()).unwrap();
        assert_eq!(ds.num_pixels(), 4);
        assert!(ds.sample(0).iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels(), &[1]);
    }

    #[test]
    fn pads_224_to_256_and_keeps_labels() {
        let mut text = String::from("header\n");
        for (k, label) in [(0usize, 7usize), (1, 2)] {
            let row: Vec<String> = (0..224).map(|j| ((j + k) % 13).to_string()).collect();
            text.push_str(&format!("{},{label}\n", row.join(",")));
        }
        let opts = SpectralOptions {
            bands: Some(224),
            has_header: true,
        };
        let ds = parse(&text, opts).unwrap();
        assert_eq!(ds.num_pixels(), 256);
        assert!(ds.sample(1)[224..].iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels(), &[7, 2]);
        assert_eq!(ds.num_classes(), 8);
        let max = ds.samples().as_slice().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse("1,2,0\n1,2\n", SpectralOptions::default()).unwrap_err();
        assert!(matches!(e, Error::ParseLine { line: 2, .. }), "{e}");
        let e = parse("1,2,0\n1,x,1\n", SpectralOptions::default()).unwrap_err();
        assert!(matches!(e, Error::ParseLine { line: 2, .. }), "{e}");
        let e = parse("1,2,-1\n", SpectralOptions::default()).unwrap_err();
        assert!(matches!(e, Error::ParseLine { line: 1, .. }), "{e}");
    }
}
