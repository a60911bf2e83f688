//! File formats: tagged CSV for matrices, bases, points, and permutations,
//! plus JSON for kernel specifications and model manifests.
//!
//! Every CSV file starts with a one-line header naming its content and
//! dimensions, e.g. `# stiefel n=8 k=2`. Readers reject malformed headers and
//! any row whose width disagrees with the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grassmann::StiefelBasis;
use crate::kernel::{KernelFamily, KernelSpec, ParameterPoint};
use crate::scalar::Real;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses a header like `# stiefel n=8 k=2` against an expected tag and field names.
fn parse_header(path: &Path, line: &str, tag: &str, fields: &[&str]) -> Result<Vec<usize>> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some("#") || tokens.next() != Some(tag) {
        return Err(parse_err(
            path,
            1,
            format!("expected header `# {tag} ...`, got `{line}`"),
        ));
    }
    let mut out = Vec::with_capacity(fields.len());
    for field in fields {
        let token = tokens
            .next()
            .ok_or_else(|| parse_err(path, 1, format!("missing `{field}=` in header")))?;
        let value = token
            .strip_prefix(&format!("{field}="))
            .ok_or_else(|| parse_err(path, 1, format!("expected `{field}=<int>`, got `{token}`")))?;
        out.push(
            value
                .parse::<usize>()
                .map_err(|_| parse_err(path, 1, format!("`{field}` is not an integer: `{value}`")))?,
        );
    }
    if tokens.next().is_some() {
        return Err(parse_err(path, 1, "trailing tokens in header"));
    }
    Ok(out)
}

fn write_rows<T: Real>(path: &Path, header: String, m: &DMatrix<T>) -> Result<()> {
    let mut text = header;
    text.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)].as_f64())).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_rows<T: Real>(path: &Path, tag: &str, fields: &[&str]) -> Result<(Vec<usize>, DMatrix<T>)> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let dims = parse_header(path, header, tag, fields)?;
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    let mut count = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entries: Vec<&str> = line.split(',').collect();
        if entries.len() != cols {
            return Err(parse_err(
                path,
                lineno + 2,
                format!("expected {cols} entries, got {}", entries.len()),
            ));
        }
        for e in entries {
            let v: f64 = e.trim().parse().map_err(|_| {
                parse_err(path, lineno + 2, format!("not a number: `{}`", e.trim()))
            })?;
            data.push(T::of(v));
        }
        count += 1;
    }
    if count != rows {
        return Err(parse_err(
            path,
            count + 1,
            format!("expected {rows} data rows, got {count}"),
        ));
    }
    Ok((dims, DMatrix::from_row_slice(rows, cols, &data)))
}

/// Writes an orthonormal basis as `# stiefel n=<n> k=<k>` plus one row per matrix row.
pub fn write_stiefel<T: Real>(path: impl AsRef<Path>, basis: &StiefelBasis<T>) -> Result<()> {
    let path = path.as_ref();
    let header = format!("# stiefel n={} k={}", basis.n(), basis.k());
    write_rows(path, header, basis.matrix())
}

/// Reads a basis file, validating the header and orthonormality of the content.
pub fn read_stiefel<T: Real>(path: impl AsRef<Path>) -> Result<StiefelBasis<T>> {
    let path = path.as_ref();
    let (_, matrix) = read_rows::<T>(path, "stiefel", &["n", "k"])?;
    StiefelBasis::new(matrix).map_err(|e| parse_err(path, 1, format!("invalid basis: {e}")))
}

/// Writes a plain real matrix as `# matrix rows=<r> cols=<c>`.
pub fn write_matrix<T: Real>(path: impl AsRef<Path>, m: &DMatrix<T>) -> Result<()> {
    let path = path.as_ref();
    let header = format!("# matrix rows={} cols={}", m.nrows(), m.ncols());
    write_rows(path, header, m)
}

pub fn read_matrix<T: Real>(path: impl AsRef<Path>) -> Result<DMatrix<T>> {
    Ok(read_rows::<T>(path.as_ref(), "matrix", &["rows", "cols"])?.1)
}

/// Writes parameter points as `# points l=<l> d=<d>`, one point per row.
pub fn write_points<T: Real>(path: impl AsRef<Path>, points: &[ParameterPoint<T>]) -> Result<()> {
    let path = path.as_ref();
    let l = points.len();
    let d = points.first().map_or(0, ParameterPoint::dim);
    let mut m = DMatrix::zeros(l, d);
    for (i, p) in points.iter().enumerate() {
        for (j, &c) in p.coords().iter().enumerate() {
            m[(i, j)] = c;
        }
    }
    write_rows(path, format!("# points l={l} d={d}"), &m)
}

pub fn read_points<T: Real>(path: impl AsRef<Path>) -> Result<Vec<ParameterPoint<T>>> {
    let path = path.as_ref();
    let (_, m) = read_rows::<T>(path, "points", &["l", "d"])?;
    (0..m.nrows())
        .map(|i| {
            ParameterPoint::new(m.row(i).iter().copied().collect())
                .map_err(|e| parse_err(path, i + 2, format!("invalid point: {e}")))
        })
        .collect()
}

/// Writes a permutation as `# perm len=<m>` with a single row of indices.
pub fn write_perm(path: impl AsRef<Path>, perm: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let row: Vec<String> = perm.iter().map(|i| i.to_string()).collect();
    let text = format!("# perm len={}\n{}\n", perm.len(), row.join(","));
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_perm(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let dims = parse_header(path, header, "perm", &["len"])?;
    let row = lines
        .next()
        .ok_or_else(|| parse_err(path, 2, "missing permutation row"))?;
    let perm: Vec<usize> = row
        .split(',')
        .map(|e| {
            e.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, 2, format!("not an index: `{}`", e.trim())))
        })
        .collect::<Result<_>>()?;
    if perm.len() != dims[0] {
        return Err(parse_err(
            path,
            2,
            format!("expected {} indices, got {}", dims[0], perm.len()),
        ));
    }
    let mut seen = vec![false; perm.len()];
    for &p in &perm {
        if p >= perm.len() || seen[p] {
            return Err(parse_err(path, 2, "not a permutation"));
        }
        seen[p] = true;
    }
    Ok(perm)
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelJson {
    family: String,
    lengthscales: Vec<f64>,
    jitter: f64,
}

/// Serializes a kernel as `{"family":"se","lengthscales":[...],"jitter":...}`.
pub fn kernel_to_json<T: Real>(spec: &KernelSpec<T>) -> Result<String> {
    let doc = KernelJson {
        family: match spec.family() {
            KernelFamily::SquaredExponential => "se".to_string(),
        },
        lengthscales: spec.lengthscales().iter().map(|b| b.as_f64()).collect(),
        jitter: spec.jitter().as_f64(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn kernel_from_json<T: Real>(text: &str) -> Result<KernelSpec<T>> {
    let doc: KernelJson = serde_json::from_str(text)?;
    match doc.family.as_str() {
        "se" => KernelSpec::squared_exponential(
            doc.lengthscales.into_iter().map(T::of).collect(),
            T::of(doc.jitter),
        ),
        other => Err(Error::invalid(format!("unknown kernel family `{other}`"))),
    }
}

pub fn write_kernel<T: Real>(path: impl AsRef<Path>, spec: &KernelSpec<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(kernel_to_json(spec)?.as_bytes())
        .map_err(|e| io_err(path, e))
}

pub fn read_kernel<T: Real>(path: impl AsRef<Path>) -> Result<KernelSpec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    kernel_from_json(&text)
}

/// Metadata describing a persisted model directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelManifest {
    pub format_version: u32,
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub r: usize,
    pub eta: f64,
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &ModelManifest) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<ModelManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stiefel_roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = crate::grassmann::sample_uniform::<f64, _>(5, 2, &mut rng).unwrap();
        write_stiefel(&path, &x).unwrap();
        let back = read_stiefel::<f64>(&path).unwrap();
        assert_eq!(back.matrix(), x.matrix());
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        for bad in [
            "stiefel n=2 k=1\n1\n0\n",
            "# stiefel n=2\n1\n0\n",
            "# matrix n=2 k=1\n1\n0\n",
            "# stiefel n=two k=1\n1\n0\n",
            "# stiefel n=2 k=1 extra=3\n1\n0\n",
            "",
        ] {
            std::fs::write(&path, bad).unwrap();
            match read_stiefel::<f64>(&path) {
                Err(Error::Parse { .. }) => {}
                other => panic!("expected Parse error for {bad:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_row_counts_and_widths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "# stiefel n=3 k=1\n1\n0\n").unwrap();
        assert!(matches!(read_stiefel::<f64>(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, "# stiefel n=2 k=1\n1,0\n0,1\n").unwrap();
        assert!(matches!(read_stiefel::<f64>(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn non_orthonormal_basis_content_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "# stiefel n=2 k=1\n1\n1\n").unwrap();
        assert!(matches!(read_stiefel::<f64>(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn matrix_points_perm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[1.5, -2.0, 0.25, 1e-10, 3.0, -7.125]);
        let mp = dir.path().join("m.csv");
        write_matrix(&mp, &m).unwrap();
        assert_eq!(read_matrix::<f64>(&mp).unwrap(), m);

        let points = vec![
            ParameterPoint::new(vec![0.1, 0.2]).unwrap(),
            ParameterPoint::new(vec![0.3, 0.4]).unwrap(),
        ];
        let pp = dir.path().join("p.csv");
        write_points(&pp, &points).unwrap();
        assert_eq!(read_points::<f64>(&pp).unwrap(), points);

        let perm = vec![2usize, 0, 1];
        let qp = dir.path().join("perm.csv");
        write_perm(&qp, &perm).unwrap();
        assert_eq!(read_perm(&qp).unwrap(), perm);

        std::fs::write(&qp, "# perm len=3\n0,0,1\n").unwrap();
        assert!(matches!(read_perm(&qp), Err(Error::Parse { .. })));
    }

    #[test]
    fn kernel_json_roundtrip() {
        let spec = KernelSpec::squared_exponential(vec![2.8, 0.5], 1e-10).unwrap();
        let text = kernel_to_json(&spec).unwrap();
        assert!(text.contains("\"family\": \"se\""));
        let back: KernelSpec<f64> = kernel_from_json(&text).unwrap();
        assert_eq!(back, spec);
        assert!(kernel_from_json::<f64>("{\"family\":\"matern\",\"lengthscales\":[1],\"jitter\":0}").is_err());
    }
}
