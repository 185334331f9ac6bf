//! Artifact directory with rollback, and minimal SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use wflow::numcore::Tensor;

use crate::error::CliError;

/// Tracks every file written so a failed run leaves nothing behind.
pub struct OutputDir {
    root: PathBuf,
    created_root: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        let created_root = !root.exists();
        fs::create_dir_all(root)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            created_root,
            written: Vec::new(),
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Registers `name` before it is written.
    pub fn claim(&mut self, name: &str) -> PathBuf {
        let p = self.path(name);
        self.written.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.claim(name);
        fs::write(&p, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display())))
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_root {
            let _ = fs::remove_dir(&self.root);
        }
    }
}

/// Rows of `x` as CSV with columns `x0, x1, …`.
pub fn points_csv(x: &Tensor) -> String {
    let mut s = String::new();
    let header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 20.0;

/// A 2D plot on a fixed square canvas; the data box is set once up front.
pub struct Svg {
    lower: [f64; 2],
    upper: [f64; 2],
    body: String,
}

impl Svg {
    /// Viewport covering every row of `sets`, padded by 5%.
    pub fn covering(sets: &[&Tensor]) -> Self {
        let mut lower = [f64::INFINITY; 2];
        let mut upper = [f64::NEG_INFINITY; 2];
        for t in sets {
            for i in 0..t.rows() {
                for j in 0..2 {
                    let v = t.get(i, j);
                    if v.is_finite() {
                        lower[j] = lower[j].min(v);
                        upper[j] = upper[j].max(v);
                    }
                }
            }
        }
        for j in 0..2 {
            if !(lower[j] < upper[j]) {
                let c = if lower[j].is_finite() { lower[j] } else { 0.0 };
                lower[j] = c - 1.0;
                upper[j] = c + 1.0;
            }
            let pad = 0.05 * (upper[j] - lower[j]);
            lower[j] -= pad;
            upper[j] += pad;
        }
        Self {
            lower,
            upper,
            body: String::new(),
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let span = SIZE - 2.0 * MARGIN;
        let u = MARGIN + span * (x - self.lower[0]) / (self.upper[0] - self.lower[0]);
        let v = SIZE - MARGIN - span * (y - self.lower[1]) / (self.upper[1] - self.lower[1]);
        (u, v)
    }

    pub fn scatter(&mut self, x: &Tensor, color: &str) -> &mut Self {
        let _ = writeln!(self.body, "<g fill=\"{color}\" fill-opacity=\"0.5\">");
        for i in 0..x.rows() {
            let (u, v) = self.map(x.get(i, 0), x.get(i, 1));
            let _ = writeln!(self.body, "<circle cx=\"{u:.2}\" cy=\"{v:.2}\" r=\"1.5\"/>");
        }
        self.body.push_str("</g>\n");
        self
    }

    /// One polyline per row index through the successive snapshots.
    pub fn trajectories(&mut self, snapshots: &[Tensor], rows: usize, color: &str) -> &mut Self {
        let Some(first) = snapshots.first() else {
            return self;
        };
        let _ = writeln!(
            self.body,
            "<g fill=\"none\" stroke=\"{color}\" stroke-opacity=\"0.4\" stroke-width=\"0.8\">"
        );
        for i in 0..rows.min(first.rows()) {
            let pts: Vec<String> = snapshots
                .iter()
                .map(|s| {
                    let (u, v) = self.map(s.get(i, 0), s.get(i, 1));
                    format!("{u:.2},{v:.2}")
                })
                .collect();
            let _ = writeln!(self.body, "<polyline points=\"{}\"/>", pts.join(" "));
        }
        self.body.push_str("</g>\n");
        self
    }

    pub fn render(&self, title: &str) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
             <title>{title}</title>\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"#888\"/>\n\
             {}</svg>\n",
            self.body,
            w = SIZE - 2.0 * MARGIN,
        )
    }
}
