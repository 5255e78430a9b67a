//! CSV emission: manifest headers, trajectories, state dumps and tables.
//!
//! Every file starts with `#` comment lines (the manifest); readers skip
//! them. Reals are written with 17 significant digits so that parsing the
//! file reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use bros_core::blockmat::BlockVar;
use bros_core::linalg::Matrix;
use bros_core::solvers::{EvalRecord, SolverState};
use sha2::{Digest, Sha256};

pub const TOOL: &str = concat!("bros ", env!("CARGO_PKG_VERSION"));

/// Formats a real with 17 significant digits (`-1.2345678901234567e-3`).
pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Git-style content hash: SHA-256 of `"blob <len>\0" + content`.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub subcommand: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration, as TOML.
    pub config: String,
}

impl Manifest {
    pub fn new(subcommand: &str, seed: Option<u64>, config: String) -> Self {
        Manifest {
            subcommand: subcommand.to_string(),
            seed,
            config,
        }
    }

    pub fn write(&self, w: &mut dyn Write) -> io::Result<()> {
        writeln!(w, "# tool: {TOOL}")?;
        writeln!(w, "# subcommand: {}", self.subcommand)?;
        match self.seed {
            Some(s) => writeln!(w, "# seed: {s}")?,
            None => writeln!(w, "# seed: none")?,
        }
        writeln!(w, "# config-sha256: {}", content_hash(&self.config))?;
        writeln!(w, "# config:")?;
        for line in self.config.lines() {
            if line.is_empty() {
                writeln!(w, "#")?;
            } else {
                writeln!(w, "#   {line}")?;
            }
        }
        Ok(())
    }
}

/// Writes `path` through a sibling temporary file and renames it into
/// place, so a failed write never leaves a truncated file behind.
pub fn write_file_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".partial-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn write_trajectory(w: &mut dyn Write, manifest: &Manifest, records: &[EvalRecord]) -> io::Result<()> {
    manifest.write(w)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(EvalRecord::COLUMNS).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.k.to_string()];
        row.extend(r.values().iter().map(|&v| fmt_real(v)));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush()
}

fn invalid_data(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn parse_real(s: &str) -> io::Result<f64> {
    s.parse().map_err(|_| invalid_data(format!("bad number {s:?}")))
}

pub fn read_trajectory(r: impl Read) -> io::Result<Vec<EvalRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(EvalRecord::COLUMNS) {
        return Err(invalid_data(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let k = rec[0]
            .parse()
            .map_err(|_| invalid_data(format!("bad k {:?}", &rec[0])))?;
        let v: Vec<f64> = rec.iter().skip(1).map(parse_real).collect::<io::Result<_>>()?;
        out.push(EvalRecord {
            k,
            grad_norm: v[0],
            phi: v[1],
            upper_at_iterate: v[2],
            y_err: v[3],
            z_err: v[4],
            h_err: v[5],
            wall_time: v[6],
        });
    }
    Ok(out)
}

fn write_matrix(wtr: &mut csv::Writer<&mut dyn Write>, name: &str, layer: usize, m: &Matrix) -> io::Result<()> {
    wtr.write_record([
        name.to_string(),
        layer.to_string(),
        m.rows().to_string(),
        m.cols().to_string(),
    ])
    .map_err(csv_err)?;
    for i in 0..m.rows() {
        wtr.write_record(m.row(i).iter().map(|&v| fmt_real(v)))
            .map_err(csv_err)?;
    }
    Ok(())
}

/// Named matrices in dump order: `name,layer,m,n` followed by `m` rows of
/// `n` entries each.
pub fn write_blocks(w: &mut dyn Write, manifest: &Manifest, blocks: &[(&str, &BlockVar)]) -> io::Result<()> {
    manifest.write(w)?;
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(w);
    for (name, var) in blocks {
        for (l, m) in var.blocks().iter().enumerate() {
            write_matrix(&mut wtr, name, l, m)?;
        }
    }
    wtr.flush()
}

/// Inverse of [`write_blocks`]: name → layers in order.
pub fn read_blocks(r: impl Read) -> io::Result<BTreeMap<String, Vec<Matrix>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(r);
    let mut out: BTreeMap<String, Vec<Matrix>> = BTreeMap::new();
    let mut records = rdr.records();
    while let Some(head) = records.next() {
        let head = head.map_err(csv_err)?;
        if head.len() != 4 {
            return Err(invalid_data("expected a `name,layer,m,n` record"));
        }
        let dim = |i: usize| head[i].parse::<usize>().map_err(|_| invalid_data("bad block header"));
        let (layer, m, n) = (dim(1)?, dim(2)?, dim(3)?);
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            let row = records
                .next()
                .ok_or_else(|| invalid_data("truncated block"))?
                .map_err(csv_err)?;
            if row.len() != n {
                return Err(invalid_data(format!("expected {n} entries per row")));
            }
            for v in row.iter() {
                data.push(parse_real(v)?);
            }
        }
        let layers = out.entry(head[0].to_string()).or_default();
        if layers.len() != layer {
            return Err(invalid_data(format!("layer {layer} of {} out of order", &head[0])));
        }
        layers.push(Matrix::from_vec(m, n, data).map_err(|e| invalid_data(e.to_string()))?);
    }
    Ok(out)
}

/// Dumps `x` and `h` as `1 × d` rows and `Y`, `Z` layer by layer.
pub fn write_state(w: &mut dyn Write, manifest: &Manifest, state: &SolverState) -> io::Result<()> {
    let row = |v: &[f64]| BlockVar::single(Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector"));
    let k = BlockVar::single(Matrix::from_vec(1, 1, vec![state.k as f64]).expect("scalar"));
    let (x, h) = (row(&state.x), row(&state.h));
    write_blocks(
        w,
        manifest,
        &[("k", &k), ("x", &x), ("h", &h), ("Y", &state.y), ("Z", &state.z)],
    )
}

pub fn read_state(r: impl Read) -> io::Result<SolverState> {
    let mut blocks = read_blocks(r)?;
    let mut take = |name: &str| {
        blocks
            .remove(name)
            .ok_or_else(|| invalid_data(format!("missing {name}")))
    };
    let k = take("k")?[0][(0, 0)] as usize;
    let x = take("x")?.remove(0).into_vec();
    let h = take("h")?.remove(0).into_vec();
    let var = |v: Vec<Matrix>| BlockVar::from_blocks(v).map_err(|e| invalid_data(e.to_string()));
    let y = var(take("Y")?)?;
    let z = var(take("Z")?)?;
    Ok(SolverState { x, y, z, h, k })
}

/// One cell of a generic output table.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i128),
    Real(f64),
    Text(String),
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => fmt_real(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i128)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i128)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, w: &mut dyn Write, manifest: &Manifest) -> io::Result<()> {
        manifest.write(w)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            wtr.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
        }
        wtr.flush()
    }

    /// Right-aligned columns; `render` chooses the text of each cell.
    pub fn write_aligned(&self, w: &mut dyn Write, render: impl Fn(usize, &Cell) -> String) -> io::Result<()> {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|row| row.iter().enumerate().map(|(j, c)| render(j, c)).collect())
            .collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|j| {
                cells
                    .iter()
                    .map(|r| r[j].len())
                    .chain([self.columns[j].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |w: &mut dyn Write, items: &[String]| -> io::Result<()> {
            let parts: Vec<String> = items.iter().zip(&widths).map(|(s, &n)| format!("{s:>n$}")).collect();
            writeln!(w, "{}", parts.join("  ").trim_end())
        };
        line(w, &self.columns)?;
        for row in &cells {
            line(w, row)?;
        }
        Ok(())
    }
}
