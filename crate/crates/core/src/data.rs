//! Containers for the three information sources: the covariate panel, the
//! external working-model summaries and optional univariable summaries.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::Family;

/// Asymmetry allowed in a reported covariance before it is rejected.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    X,
    Z,
    C,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::X, Block::Z, Block::C];

    fn slot(self) -> usize {
        match self {
            Block::X => 0,
            Block::Z => 1,
            Block::C => 2,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Block::X => "X",
            Block::Z => "Z",
            Block::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" | "x" => Ok(Block::X),
            "Z" | "z" => Ok(Block::Z),
            "C" | "c" => Ok(Block::C),
            other => Err(Error::Invalid(format!("unknown block \"{other}\""))),
        }
    }
}

/// Borrowed view of one panel row split into its blocks.
#[derive(Debug, Clone, Copy)]
pub struct PanelRow<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub c: &'a [f64],
}

impl<'a> PanelRow<'a> {
    pub fn block(&self, block: Block) -> &'a [f64] {
        match block {
            Block::X => self.x,
            Block::Z => self.z,
            Block::C => self.c,
        }
    }

    pub fn width(&self, block: Block) -> usize {
        self.block(block).len()
    }
}

/// Individual-level covariates (no outcome). Rows are stored contiguously as
/// `X | Z | C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePanel {
    values: Vec<f64>,
    n_rows: usize,
    widths: [usize; 3],
    names: Vec<String>,
}

impl CovariatePanel {
    /// Builds a panel from three blocks with default column names
    /// (`x1..`, `z1..`, `c1..`).
    pub fn from_blocks(x: &DMatrix<f64>, z: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self> {
        let names = default_names(x.ncols(), z.ncols(), c.ncols());
        Self::from_blocks_named(x, z, c, names)
    }

    pub fn from_blocks_named(x: &DMatrix<f64>, z: &DMatrix<f64>, c: &DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let n = x.nrows();
        if z.nrows() != n {
            return Err(Error::shape("panel Z rows", n, z.nrows()));
        }
        if c.nrows() != n && c.ncols() > 0 {
            return Err(Error::shape("panel C rows", n, c.nrows()));
        }
        let widths = [x.ncols(), z.ncols(), c.ncols()];
        let k = widths.iter().sum::<usize>();
        let mut values = Vec::with_capacity(n * k);
        for i in 0..n {
            values.extend(x.row(i).iter());
            values.extend(z.row(i).iter());
            if widths[2] > 0 {
                values.extend(c.row(i).iter());
            }
        }
        Self::from_row_major(values, n, widths, names)
    }

    /// Builds a panel from row-major storage laid out as `X | Z | C`.
    pub fn from_row_major(values: Vec<f64>, n_rows: usize, widths: [usize; 3], names: Vec<String>) -> Result<Self> {
        let k = widths.iter().sum::<usize>();
        if widths[0] == 0 || widths[1] == 0 {
            return Err(Error::Invalid("panel needs at least one X and one Z column".into()));
        }
        if values.len() != n_rows * k {
            return Err(Error::shape("panel storage", n_rows * k, values.len()));
        }
        if names.len() != k {
            return Err(Error::shape("panel column names", k, names.len()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Invalid(format!("duplicate column name \"{name}\"")));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                row: pos / k.max(1),
                message: format!("non-finite value in column \"{}\"", names[pos % k]),
            });
        }
        Ok(Self {
            values,
            n_rows,
            widths,
            names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn width(&self, block: Block) -> usize {
        self.widths[block.slot()]
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    pub fn p(&self) -> usize {
        self.widths[0]
    }

    pub fn q(&self) -> usize {
        self.widths[1]
    }

    pub fn r(&self) -> usize {
        self.widths[2]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Offset of a block's first column inside a row.
    pub fn block_offset(&self, block: Block) -> usize {
        match block {
            Block::X => 0,
            Block::Z => self.widths[0],
            Block::C => self.widths[0] + self.widths[1],
        }
    }

    pub fn block_names(&self, block: Block) -> &[String] {
        let start = self.block_offset(block);
        &self.names[start..start + self.width(block)]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn row_values(&self, i: usize) -> &[f64] {
        let k = self.n_cols();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn row(&self, i: usize) -> PanelRow<'_> {
        let v = self.row_values(i);
        let (x, rest) = v.split_at(self.widths[0]);
        let (z, c) = rest.split_at(self.widths[1]);
        PanelRow { x, z, c }
    }

    pub fn rows(&self) -> impl Iterator<Item = PanelRow<'_>> + '_ {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    /// Intercept-augmented design over the given blocks, in the given order.
    pub fn design(&self, blocks: &[Block]) -> DMatrix<f64> {
        let cols = 1 + blocks.iter().map(|b| self.width(*b)).sum::<usize>();
        let mut out = DMatrix::zeros(self.n_rows, cols);
        for i in 0..self.n_rows {
            let row = self.row(i);
            out[(i, 0)] = 1.0;
            let mut j = 1;
            for b in blocks {
                for &v in row.block(*b) {
                    out[(i, j)] = v;
                    j += 1;
                }
            }
        }
        out
    }

    /// New panel made of the given rows (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let k = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * k);
        for &i in rows {
            values.extend_from_slice(self.row_values(i));
        }
        Self {
            values,
            n_rows: rows.len(),
            widths: self.widths,
            names: self.names.clone(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(&self.names)?;
        for i in 0..self.n_rows {
            w.write_record(self.row_values(i).iter().map(|v| format!("{v:?}")))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn default_names(p: usize, q: usize, r: usize) -> Vec<String> {
    (1..=p)
        .map(|j| format!("x{j}"))
        .chain((1..=q).map(|j| format!("z{j}")))
        .chain((1..=r).map(|j| format!("c{j}")))
        .collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Routing of delimited-file columns into the X/Z/C blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PanelSchema {
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub c: Vec<String>,
}

pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<CovariatePanel> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Invalid(format!("{}: empty file", path.display())));
    }
    let wanted: Vec<&String> = schema.x.iter().chain(&schema.z).chain(&schema.c).collect();
    let mut index = Vec::with_capacity(wanted.len());
    for name in &wanted {
        match headers.iter().position(|h| h == name.as_str()) {
            Some(i) => index.push(i),
            None => return Err(Error::Invalid(format!("{}: missing column \"{name}\"", path.display()))),
        }
    }
    let mut values = Vec::new();
    let mut n_rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (col, &i) in index.iter().enumerate() {
            let cell = record.get(i).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: wanted[col].clone(),
                    message: "missing value".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: wanted[col].clone(),
                message: format!("not a number: \"{cell}\""),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: wanted[col].clone(),
                    message: "non-finite value".into(),
                });
            }
            values.push(v);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::Invalid(format!("{}: empty file", path.display())));
    }
    CovariatePanel::from_row_major(
        values,
        n_rows,
        [schema.x.len(), schema.z.len(), schema.c.len()],
        wanted.into_iter().cloned().collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudyDesign {
    Prospective { n: usize },
    CaseControl { n_cases: usize, n_controls: usize },
}

impl StudyDesign {
    pub fn total(&self) -> usize {
        match *self {
            StudyDesign::Prospective { n } => n,
            StudyDesign::CaseControl { n_cases, n_controls } => n_cases + n_controls,
        }
    }

    /// Case fraction for case-control designs.
    pub fn rho(&self) -> Option<f64> {
        match *self {
            StudyDesign::Prospective { .. } => None,
            StudyDesign::CaseControl { n_cases, n_controls } => Some(n_cases as f64 / (n_cases + n_controls) as f64),
        }
    }

    pub fn is_case_control(&self) -> bool {
        matches!(self, StudyDesign::CaseControl { .. })
    }
}

#[derive(Serialize, Deserialize)]
struct SummaryDoc {
    coefficients: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    design: StudyDesign,
    covered_blocks: Vec<Block>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

/// One external study's working-model fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryInput {
    coefficients: DVector<f64>,
    covariance: DMatrix<f64>,
    design: StudyDesign,
    covered_blocks: Vec<Block>,
    names: Option<Vec<String>>,
}

impl SummaryInput {
    pub fn new(
        coefficients: DVector<f64>,
        covariance: DMatrix<f64>,
        design: StudyDesign,
        covered_blocks: Vec<Block>,
    ) -> Result<Self> {
        let k = coefficients.len();
        if covariance.nrows() != k || covariance.ncols() != k {
            return Err(Error::shape("summary covariance", k, covariance.nrows()));
        }
        if coefficients.iter().any(|v| !v.is_finite()) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("summary holds non-finite values".into()));
        }
        if covered_blocks.is_empty() {
            return Err(Error::Invalid("summary covers no blocks".into()));
        }
        let unique: HashSet<_> = covered_blocks.iter().collect();
        if unique.len() != covered_blocks.len() {
            return Err(Error::Invalid("duplicate covered block".into()));
        }
        match design {
            StudyDesign::Prospective { n } if n == 0 => {
                return Err(Error::Invalid("prospective n must be positive".into()))
            }
            StudyDesign::CaseControl { n_cases, n_controls } if n_cases == 0 || n_controls == 0 => {
                return Err(Error::Invalid("case-control design needs cases and controls".into()))
            }
            _ => {}
        }
        let mut asym = 0.0f64;
        for i in 0..k {
            for j in 0..i {
                asym = asym.max((covariance[(i, j)] - covariance[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOLERANCE {
            return Err(Error::Invalid(format!(
                "covariance not symmetric (max asymmetry {asym:e})"
            )));
        }
        let covariance = if asym > 0.0 {
            (&covariance + covariance.transpose()) * 0.5
        } else {
            covariance
        };
        let min_eig = covariance
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig <= 0.0 || covariance.clone().cholesky().is_none() {
            return Err(Error::Invalid(format!(
                "covariance not positive definite (smallest eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self {
            coefficients,
            covariance,
            design,
            covered_blocks,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.coefficients.len() {
            return Err(Error::shape("summary names", self.coefficients.len(), names.len()));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// Same summary with replaced coefficients (bootstrap draws).
    pub fn with_coefficients(&self, coefficients: DVector<f64>) -> Result<Self> {
        if coefficients.len() != self.coefficients.len() {
            return Err(Error::shape(
                "summary coefficients",
                self.coefficients.len(),
                coefficients.len(),
            ));
        }
        let mut out = self.clone();
        out.coefficients = coefficients;
        Ok(out)
    }

    /// Same summary with the covariance multiplied by `factor`.
    pub fn with_scaled_covariance(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.coefficients.clone(),
            &self.covariance * factor,
            self.design,
            self.covered_blocks.clone(),
        )
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn design(&self) -> StudyDesign {
        self.design
    }

    pub fn covered_blocks(&self) -> &[Block] {
        &self.covered_blocks
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    /// Per-observation information: inverse covariance divided by study size.
    pub fn observed_information(&self) -> Result<DMatrix<f64>> {
        let chol = self
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Invalid("covariance not positive definite".into()))?;
        let inv = chol.inverse();
        let sym = (&inv + inv.transpose()) * 0.5;
        Ok(sym / self.design.total() as f64)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SummaryDoc = serde_json::from_str(text)?;
        let k = doc.coefficients.len();
        let mut cov = DMatrix::zeros(k, k);
        if doc.covariance.len() != k {
            return Err(Error::shape("summary covariance rows", k, doc.covariance.len()));
        }
        for (i, row) in doc.covariance.iter().enumerate() {
            if row.len() != k {
                return Err(Error::shape("summary covariance columns", k, row.len()));
            }
            for (j, v) in row.iter().enumerate() {
                cov[(i, j)] = *v;
            }
        }
        let s = Self::new(DVector::from_vec(doc.coefficients), cov, doc.design, doc.covered_blocks)?;
        match doc.names {
            Some(names) => s.with_names(names),
            None => Ok(s),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let k = self.dim();
        let doc = SummaryDoc {
            coefficients: self.coefficients.iter().cloned().collect(),
            covariance: (0..k)
                .map(|i| (0..k).map(|j| self.covariance[(i, j)]).collect())
                .collect(),
            design: self.design,
            covered_blocks: self.covered_blocks.clone(),
            names: self.names.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

pub fn load_summary(path: impl AsRef<Path>) -> Result<SummaryInput> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SummaryInput::from_json(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEntry {
    pub column: String,
    pub intercept: f64,
    pub slope: f64,
}

/// Univariable (intercept, slope) fits of the outcome on single covariates
/// of one study's block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub block: Block,
    pub entries: Vec<MarginalEntry>,
}

impl MarginalSummary {
    pub fn new(block: Block, entries: Vec<MarginalEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("marginal summary is empty".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !e.intercept.is_finite() || !e.slope.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite marginal estimate for \"{}\"",
                    e.column
                )));
            }
            if !seen.insert(e.column.as_str()) {
                return Err(Error::Invalid(format!("duplicate marginal covariate \"{}\"", e.column)));
            }
        }
        Ok(Self { block, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: MarginalSummary = serde_json::from_str(&text)?;
        Self::new(raw.block, raw.entries)
    }
}

/// Which external summary a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SummarySlot {
    X,
    Z,
}

#[derive(Debug, Clone)]
pub struct FusionProblem {
    pub panel: CovariatePanel,
    pub summary_x: SummaryInput,
    pub summary_z: SummaryInput,
    pub marginals_x: Option<MarginalSummary>,
    pub marginals_z: Option<MarginalSummary>,
    pub family: Family,
}

impl FusionProblem {
    pub fn new(
        panel: CovariatePanel,
        summary_x: SummaryInput,
        summary_z: SummaryInput,
        family: Family,
    ) -> Result<Self> {
        for (label, s) in [("summary_x", &summary_x), ("summary_z", &summary_z)] {
            let width: usize = s.covered_blocks().iter().map(|b| panel.width(*b)).sum();
            if s.dim() == width {
                return Err(Error::Invalid(format!(
                    "{label}: dimension {} equals covered width; intercept row/column missing",
                    s.dim()
                )));
            }
            if s.dim() != 1 + width {
                return Err(Error::shape(label, 1 + width, s.dim()));
            }
        }
        Ok(Self {
            panel,
            summary_x,
            summary_z,
            marginals_x: None,
            marginals_z: None,
            family,
        })
    }

    pub fn with_marginals(
        mut self,
        marginals_x: Option<MarginalSummary>,
        marginals_z: Option<MarginalSummary>,
    ) -> Self {
        self.marginals_x = marginals_x;
        self.marginals_z = marginals_z;
        self
    }

    pub fn summary(&self, slot: SummarySlot) -> &SummaryInput {
        match slot {
            SummarySlot::X => &self.summary_x,
            SummarySlot::Z => &self.summary_z,
        }
    }

    pub fn full_dim(&self) -> usize {
        1 + self.panel.n_cols()
    }

    /// Same problem over a different panel (bootstrap resamples).
    pub fn with_panel(&self, panel: CovariatePanel) -> Self {
        Self { panel, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub equations: usize,
    pub unknowns: usize,
    pub tilt_ceiling_x: usize,
    pub tilt_ceiling_z: usize,
    pub coverage_complete: bool,
    pub issues: Vec<String>,
}

impl Diagnostics {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }

    /// Records a tilt model's feature count against the identifiability ceiling.
    pub fn check_tilt(&mut self, slot: SummarySlot, name: &str, features: usize) {
        let ceiling = match slot {
            SummarySlot::X => self.tilt_ceiling_x,
            SummarySlot::Z => self.tilt_ceiling_z,
        };
        if features > ceiling {
            self.issues.push(format!(
                "tilt \"{name}\" for summary_{slot:?} has {features} parameters, ceiling is {ceiling}"
            ));
        }
    }
}

/// Counts equations and unknowns of the stacked system, the tilt ceilings
/// `l(l+1)/2`, `m(m+1)/2`, and block coverage.
pub fn validate_problem(problem: &FusionProblem) -> Diagnostics {
    let panel = &problem.panel;
    let l = problem.summary_x.dim();
    let m = problem.summary_z.dim();
    let mut issues = Vec::new();
    let covered: HashSet<Block> = problem
        .summary_x
        .covered_blocks()
        .iter()
        .chain(problem.summary_z.covered_blocks())
        .cloned()
        .collect();
    let mut coverage_complete = true;
    for b in Block::ALL {
        if panel.width(b) > 0 && !covered.contains(&b) {
            coverage_complete = false;
            issues.push(format!("block {b} is not covered by either summary"));
        }
    }
    for (label, s) in [("summary_x", &problem.summary_x), ("summary_z", &problem.summary_z)] {
        let width: usize = s.covered_blocks().iter().map(|b| panel.width(*b)).sum();
        if s.dim() != 1 + width {
            issues.push(format!(
                "{label}: dimension {} does not match 1 + covered width {width}",
                s.dim()
            ));
        }
    }
    for (label, marg, s) in [
        ("marginals_x", &problem.marginals_x, &problem.summary_x),
        ("marginals_z", &problem.marginals_z, &problem.summary_z),
    ] {
        if let Some(mg) = marg {
            if !s.covered_blocks().contains(&mg.block) {
                issues.push(format!("{label}: block {} not covered by its summary", mg.block));
            }
            for e in &mg.entries {
                if !panel.block_names(mg.block).contains(&e.column) {
                    issues.push(format!("{label}: unknown column \"{}\"", e.column));
                }
            }
        }
    }
    let nuisance = [&problem.summary_x, &problem.summary_z]
        .iter()
        .filter(|s| s.design().is_case_control())
        .count();
    let unknowns = problem.full_dim() + nuisance;
    let equations = l + m;
    if unknowns > equations {
        issues.push(format!("{unknowns} unknowns exceed {equations} stacked equations"));
    }
    Diagnostics {
        equations,
        unknowns,
        tilt_ceiling_x: l * (l + 1) / 2,
        tilt_ceiling_z: m * (m + 1) / 2,
        coverage_complete,
        issues,
    }
}
