//! Text file formats and audited file access.
//!
//! Every format is line oriented with a magic header. Readers report the
//! 1-based line of the first problem.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::{DMatrix, Matrix2xX, Matrix3, Matrix3xX};

use crate::error::{Error, Result};
use crate::geometry::{Ensemble3, GramMatrix, Rotation3};
use crate::imaging::{PixelGrid, Profile};
use crate::mixture::RadialMixture3;
use crate::profile_estimation::{ProfileEstimate, RejectReason};
use crate::reconstruction::VolumeGrid;

/// Records every path read through it.
#[derive(Debug, Default)]
pub struct ReadAudit {
    reads: Mutex<Vec<PathBuf>>,
}

impl ReadAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_to_string(&self, path: &Path) -> Result<String> {
        self.reads.lock().expect("audit lock").push(path.to_path_buf());
        log::debug!("reading {}", path.display());
        Ok(fs::read_to_string(path)?)
    }

    pub fn reads(&self) -> Vec<PathBuf> {
        self.reads.lock().expect("audit lock").clone()
    }

    /// Whether any recorded read refers to the same file as `path`.
    pub fn touched(&self, path: &Path) -> bool {
        let target = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        self.reads()
            .iter()
            .any(|p| p == path || fs::canonicalize(p).map(|c| c == target).unwrap_or(false))
    }
}

/// Writes `contents`, creating parent directories.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Round-trip exact.
fn full(x: f64) -> String {
    format!("{x:.16e}")
}

/// Ten significant digits, for pixel data.
fn short(x: f64) -> String {
    format!("{x:.9e}")
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { inner: text.lines().enumerate(), line: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    /// Next line that is not blank (comments are returned).
    fn next_raw(&mut self) -> Option<&'a str> {
        for (i, l) in self.inner.by_ref() {
            self.line = i + 1;
            if !l.trim().is_empty() {
                return Some(l.trim());
            }
        }
        None
    }

    /// Next non-blank, non-comment line.
    fn next_data(&mut self) -> Option<&'a str> {
        while let Some(l) = self.next_raw() {
            if !l.starts_with('#') {
                return Some(l);
            }
        }
        None
    }

    fn expect_data(&mut self, what: &str) -> Result<&'a str> {
        self.next_data().ok_or_else(|| Error::Parse { line: self.line + 1, msg: format!("unexpected end of file, expected {what}") })
    }

    fn floats(&self, l: &str, n: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(format!("not a number: {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != n {
            return Err(self.err(format!("expected {n} numbers, found {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err("non-finite value"));
        }
        Ok(v)
    }

    fn header(&mut self, magic: &str) -> Result<Vec<&'a str>> {
        let l = self.expect_data(magic)?;
        let mut toks = l.split_whitespace();
        if toks.next() != Some(magic) {
            return Err(self.err(format!("expected {magic} header")));
        }
        Ok(toks.collect())
    }

    fn int(&self, tok: Option<&&str>, what: &str) -> Result<usize> {
        tok.and_then(|t| t.parse().ok()).ok_or_else(|| self.err(format!("expected integer {what}")))
    }

    fn float(&self, tok: Option<&&str>, what: &str) -> Result<f64> {
        tok.and_then(|t| t.parse::<f64>().ok())
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.err(format!("expected number {what}")))
    }

    fn finish(&mut self) -> Result<()> {
        match self.next_data() {
            Some(_) => Err(self.err("trailing data")),
            None => Ok(()),
        }
    }
}

// ---- RM3: radial mixture ----

pub fn format_rm3(m: &RadialMixture3) -> String {
    let mut s = format!("RM3 {} {} {}\n", m.k(), full(m.kernel_sigma()), full(m.total_mass()));
    for (k, q) in m.weights().iter().enumerate() {
        let p = m.means().point(k);
        let _ = writeln!(s, "{} {} {} {}", full(*q), full(p.x), full(p.y), full(p.z));
    }
    s
}

pub fn parse_rm3(text: &str) -> Result<RadialMixture3> {
    let mut l = Lines::new(text);
    let h = l.header("RM3")?;
    if h.len() != 3 {
        return Err(l.err("RM3 header needs K sigma total_mass"));
    }
    let k = l.int(h.first(), "K")?;
    let sigma = l.float(h.get(1), "sigma")?;
    let total = l.float(h.get(2), "total_mass")?;
    let mut w = Vec::with_capacity(k);
    let mut pts = Vec::with_capacity(k);
    for _ in 0..k {
        let line = l.expect_data("component line")?;
        let v = l.floats(line, 4)?;
        w.push(v[0]);
        pts.push(nalgebra::Vector3::new(v[1], v[2], v[3]));
    }
    let sum: f64 = w.iter().sum();
    if (sum - total).abs() > 1e-6 * total.abs().max(1.0) {
        return Err(l.err(format!("total_mass {total} disagrees with weight sum {sum}")));
    }
    l.finish()?;
    RadialMixture3::new(Ensemble3::from_points(&pts), w, sigma)
}

// ---- PFS1: profile stack ----

pub fn format_pfs1(profiles: &[Profile]) -> Result<String> {
    let Some(first) = profiles.first() else {
        return Ok("PFS1\n0 0 0\n".into());
    };
    let grid = first.grid;
    let t = grid.t();
    let mut s = String::with_capacity(profiles.len() * t * t * 17);
    let _ = write!(s, "PFS1\n{} {} {}\n", profiles.len(), t, full(grid.extent()));
    for p in profiles {
        if p.grid != grid {
            return Err(Error::GridMismatch);
        }
        let _ = writeln!(s, "# profile {}", p.id);
        for i in 0..t {
            let row: Vec<String> = (0..t).map(|j| short(p.pixels[(i, j)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    Ok(s)
}

pub fn parse_pfs1(text: &str) -> Result<Vec<Profile>> {
    let mut l = Lines::new(text);
    let magic = l.expect_data("PFS1")?;
    if magic != "PFS1" {
        return Err(l.err("expected PFS1 header"));
    }
    let dims = l.expect_data("N T L")?;
    let toks: Vec<&str> = dims.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(l.err("expected `N T L`"));
    }
    let n = l.int(toks.first(), "N")?;
    let t = l.int(toks.get(1), "T")?;
    let extent = l.float(toks.get(2), "L")?;
    if n == 0 {
        l.finish()?;
        return Ok(Vec::new());
    }
    let grid = PixelGrid::new(t, extent).map_err(|e| l.err(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let head = l.next_raw().ok_or_else(|| l.err("missing `# profile n` line"))?;
        let id = head
            .strip_prefix('#')
            .map(str::trim)
            .and_then(|r| r.strip_prefix("profile"))
            .and_then(|r| r.trim().parse::<usize>().ok())
            .ok_or_else(|| l.err("expected `# profile n`"))?;
        let mut pixels = DMatrix::zeros(t, t);
        for i in 0..t {
            let line = l.expect_data("pixel row")?;
            let row = l.floats(line, t)?;
            for (j, v) in row.into_iter().enumerate() {
                pixels[(i, j)] = v;
            }
        }
        out.push(Profile::new(grid, pixels, id)?);
    }
    l.finish()?;
    Ok(out)
}

// ---- estimates ----

/// Kept estimates as data blocks, rejected ones as comment lines.
pub fn format_estimates(kept: &[ProfileEstimate], rejected: &[(ProfileEstimate, RejectReason)]) -> String {
    let mut s = String::new();
    for e in kept {
        let _ = writeln!(s, "profile {} {} {}", e.profile_id, e.k(), full(e.mass));
        for k in 0..e.k() {
            let _ = writeln!(s, "{} {} {} {}", k + 1, full(e.weights[k]), full(e.means2d[(0, k)]), full(e.means2d[(1, k)]));
        }
    }
    for (e, why) in rejected {
        let _ = writeln!(s, "# rejected profile {} K={} {}", e.profile_id, e.k(), why);
    }
    s
}

pub fn parse_estimates(text: &str) -> Result<Vec<ProfileEstimate>> {
    let mut l = Lines::new(text);
    let mut out = Vec::new();
    while let Some(line) = l.next_data() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.first() != Some(&"profile") || toks.len() != 4 {
            return Err(l.err("expected `profile n K m_hat`"));
        }
        let id = l.int(toks.get(1), "profile id")?;
        let k = l.int(toks.get(2), "K")?;
        let mass = l.float(toks.get(3), "m_hat")?;
        let mut means = Matrix2xX::zeros(k);
        let mut weights = vec![0.0; k];
        for _ in 0..k {
            let c = l.expect_data("component line")?;
            let v = l.floats(c, 4)?;
            let label = v[0] as usize;
            if v[0].fract() != 0.0 || label == 0 || label > k {
                return Err(l.err(format!("label must be an integer in 1..={k}")));
            }
            weights[label - 1] = v[1];
            means[(0, label - 1)] = v[2];
            means[(1, label - 1)] = v[3];
        }
        out.push(ProfileEstimate { profile_id: id, means2d: means, weights, labels: (0..k).collect(), mass, oversized: false });
    }
    Ok(out)
}

// ---- GRAM / ENS ----

pub fn format_gram(g: &GramMatrix, ensemble: Option<&Ensemble3>) -> String {
    let k = g.dim();
    let mut s = format!("GRAM {k}\n");
    for i in 0..k {
        let row: Vec<String> = (0..k).map(|j| full(g.matrix()[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    if let Some(e) = ensemble {
        let _ = writeln!(s, "ENS 3 {}", e.k());
        for r in 0..3 {
            let row: Vec<String> = (0..e.k()).map(|c| full(e.columns()[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    }
    s
}

pub fn parse_gram(text: &str) -> Result<(GramMatrix, Option<Ensemble3>)> {
    let mut l = Lines::new(text);
    let h = l.header("GRAM")?;
    let k = l.int(h.first(), "K")?;
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        let line = l.expect_data("Gram row")?;
        for (j, v) in l.floats(line, k)?.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    let g = GramMatrix::new(m).map_err(|e| l.err(e.to_string()))?;
    let ens = match l.next_data() {
        None => None,
        Some(line) => {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.first() != Some(&"ENS") || toks.get(1) != Some(&"3") || l.int(toks.get(2), "K")? != k {
                return Err(l.err(format!("expected `ENS 3 {k}`")));
            }
            let mut v = Matrix3xX::zeros(k);
            for r in 0..3 {
                let row = l.expect_data("ensemble row")?;
                for (c, x) in l.floats(row, k)?.into_iter().enumerate() {
                    v[(r, c)] = x;
                }
            }
            l.finish()?;
            Some(Ensemble3::new(v))
        }
    };
    Ok((g, ens))
}

// ---- VOL1 ----

pub fn format_vol1(v: &VolumeGrid) -> String {
    let n = v.v;
    let mut s = String::with_capacity(n * n * n * 17);
    let _ = write!(s, "VOL1\n{} {}\n", n, full(v.extent));
    for x in 0..n {
        for y in 0..n {
            let row: Vec<String> = (0..n).map(|z| short(v.at(x, y, z))).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        if x + 1 < n {
            s.push('\n');
        }
    }
    s
}

pub fn parse_vol1(text: &str) -> Result<VolumeGrid> {
    let mut l = Lines::new(text);
    if l.expect_data("VOL1")? != "VOL1" {
        return Err(l.err("expected VOL1 header"));
    }
    let dims = l.expect_data("V extent")?;
    let toks: Vec<&str> = dims.split_whitespace().collect();
    let n = l.int(toks.first(), "V")?;
    let extent = l.float(toks.get(1), "extent")?;
    if toks.len() != 2 || n < 2 {
        return Err(l.err("expected `V extent` with V >= 2"));
    }
    let mut values = Vec::with_capacity(n * n * n);
    for _ in 0..n * n {
        let line = l.expect_data("volume row")?;
        values.extend(l.floats(line, n)?);
    }
    l.finish()?;
    Ok(VolumeGrid { v: n, extent, values })
}

// ---- rotation sidecar ----

pub fn format_rotations(rotations: &[Rotation3]) -> String {
    let mut s = format!("ROT1 {}\n", rotations.len());
    for r in rotations {
        let m = r.matrix();
        let row: Vec<String> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| full(m[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn parse_rotations(text: &str) -> Result<Vec<Rotation3>> {
    let mut l = Lines::new(text);
    let h = l.header("ROT1")?;
    let n = l.int(h.first(), "N")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let line = l.expect_data("rotation row")?;
        let v = l.floats(line, 9)?;
        out.push(Rotation3::from_matrix(Matrix3::from_row_slice(&v)).map_err(|e| l.err(e.to_string()))?);
    }
    l.finish()?;
    Ok(out)
}

// ---- key = value reports ----

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn add_f(&mut self, key: impl Into<String>, value: f64) {
        self.add(key, full(value));
    }

    pub fn add_list(&mut self, key: impl Into<String>, values: &[f64]) {
        self.add(key, values.iter().map(|v| full(*v)).collect::<Vec<_>>().join(", "));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn get_list(&self, key: &str) -> Option<Vec<f64>> {
        self.get(key)?.split(',').map(|t| t.trim().parse().ok()).collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn format(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Report> {
        let mut r = Report::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse { line: i + 1, msg: "expected `key = value`".into() })?;
            r.add(k.trim(), v.trim());
        }
        Ok(r)
    }
}

// ---- PGM ----

/// Linearly maps `[lo, hi]` to 0..=255 and writes a binary PGM; rows of the
/// matrix become image rows.
pub fn write_pgm(path: &Path, data: &DMatrix<f64>, lo: f64, hi: f64) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::{ExtendedColorType, ImageEncoder};
    let (h, w) = data.shape();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut buf = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            buf.push((((data[(i, j)] - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&buf, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::pyramid_fixture;
    use approx::assert_relative_eq;

    #[test]
    fn rm3_round_trip_is_exact() {
        let m = pyramid_fixture();
        let back = parse_rm3(&format_rm3(&m)).unwrap();
        assert_eq!(back, m);
        assert!(format_rm3(&m).starts_with("RM3 4 "));
    }

    #[test]
    fn rm3_rejects_bad_total() {
        let text = "RM3 1 0.5 2.0\n1.0 0 0 0\n";
        assert!(matches!(parse_rm3(text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn pfs1_round_trip() {
        let grid = PixelGrid::new(3, 1.5).unwrap();
        let p = Profile::new(grid, DMatrix::from_fn(3, 3, |i, j| (i as f64 - 0.3) * 1e-3 + j as f64 / 7.0), 5).unwrap();
        let text = format_pfs1(&[p.clone(), p.clone().with_id(9)]).unwrap();
        assert!(text.starts_with("PFS1\n2 3 "));
        assert!(text.contains("# profile 9\n"));
        let back = parse_pfs1(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].id, 9);
        assert_relative_eq!(back[0].pixels, p.pixels, max_relative = 1e-9);
        let bad = text.replace("# profile 9", "# profle 9");
        assert!(parse_pfs1(&bad).is_err());
    }

    #[test]
    fn estimates_round_trip_with_rejections() {
        let e = ProfileEstimate {
            profile_id: 3,
            means2d: Matrix2xX::from_column_slice(&[0.1, 0.2, -0.3, 0.4]),
            weights: vec![0.6, 0.4],
            labels: vec![0, 1],
            mass: 1.0,
            oversized: false,
        };
        let text = format_estimates(std::slice::from_ref(&e), &[(e.clone(), RejectReason::LeftOutlier)]);
        let back = parse_estimates(&text).unwrap();
        assert_eq!(back, vec![e]);
    }

    #[test]
    fn gram_with_ensemble() {
        let m = pyramid_fixture();
        let e = m.means().centered();
        let text = format_gram(&e.gram(), Some(&e));
        let (g, back) = parse_gram(&text).unwrap();
        assert_eq!(g, e.gram());
        assert_eq!(back.unwrap(), e);
        assert!(parse_gram("GRAM 2\n1 0\n0 1\nENS 3 3\n").is_err());
    }

    #[test]
    fn volume_and_rotations_round_trip() {
        let v = VolumeGrid { v: 2, extent: 1.0, values: (0..8).map(|i| i as f64 * 0.5).collect() };
        assert_eq!(parse_vol1(&format_vol1(&v)).unwrap(), v);
        let r = vec![Rotation3::identity(), Rotation3::from_axis_angle(&nalgebra::Vector3::z(), 0.3)];
        let back = parse_rotations(&format_rotations(&r)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn report_lookup() {
        let mut r = Report::new();
        r.add("count", 3);
        r.add_list("w", &[0.5, 0.25]);
        let back = Report::parse(&r.format()).unwrap();
        assert_eq!(back.get("count"), Some("3"));
        assert_eq!(back.get_list("w").unwrap(), vec![0.5, 0.25]);
    }

    #[test]
    fn audit_records_reads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_text(&p, "x").unwrap();
        let audit = ReadAudit::new();
        assert!(!audit.touched(&p));
        assert_eq!(audit.read_to_string(&p).unwrap(), "x");
        assert!(audit.touched(&p));
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pgm");
        write_pgm(&p, &DMatrix::from_row_slice(2, 3, &[0.0, 0.5, 1.0, 1.0, 0.5, 0.0]), 0.0, 1.0).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 255, 128, 0]);
    }
}
