//! Virtual projection of 3D token coordinates onto the 1D lines or 2D planes
//! of a frozen source transformer, and lookup of that transformer's
//! positional embeddings at the projected locations.
//!
//! No image or sequence is ever produced: a token at `p` receives, for each
//! of `M` lines (or views), the embedding stored at `v_j · p` (or at the
//! orthographic image location of `p` in view `j`), and the `M` embeddings
//! are averaged into the token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{dot3, Point};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::TokenSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// 3D-to-1D: language-style sequence positions.
    Line1d,
    /// 3D-to-2D: vision/audio-style patch grids.
    Plane2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub mode: ProjectionMode,
    pub m_views: usize,
    /// Plane width and height in pixels (2D mode).
    pub plane_extent: (usize, usize),
    pub patch_size: usize,
    /// Number of positions on the line (1D mode).
    pub line_length: usize,
    /// Grouping granularity along the line (1D mode).
    pub segment_size: usize,
    pub elevation_deg: f64,
}

impl ProjectionConfig {
    /// 77-position line, segment width 2, six lines.
    pub fn language() -> Self {
        Self {
            mode: ProjectionMode::Line1d,
            m_views: 6,
            plane_extent: (512, 512),
            patch_size: 26,
            line_length: 77,
            segment_size: 2,
            elevation_deg: 30.0,
        }
    }

    /// 512x512 plane, patch 26, six views.
    pub fn vision() -> Self {
        Self {
            mode: ProjectionMode::Plane2d,
            ..Self::language()
        }
    }

    /// 192x304 plane, patch 16, six views.
    pub fn audio() -> Self {
        Self {
            mode: ProjectionMode::Plane2d,
            plane_extent: (304, 192),
            patch_size: 16,
            ..Self::language()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.m_views < 1 {
            return bad("m_views must be >= 1".into());
        }
        match self.mode {
            ProjectionMode::Line1d => {
                if self.line_length < 1 {
                    return bad("line_length must be >= 1".into());
                }
                if self.segment_size < 1 {
                    return bad("segment_size must be >= 1".into());
                }
            }
            ProjectionMode::Plane2d => {
                let (w, h) = self.plane_extent;
                if w < 1 || h < 1 {
                    return bad("plane extent must be positive".into());
                }
                if self.patch_size < 1 || self.patch_size > w.min(h) {
                    return bad(format!("patch_size {} does not fit the plane", self.patch_size));
                }
            }
        }
        Ok(())
    }

    /// Shape of the positional-embedding table this geometry indexes. A
    /// partial trailing patch still gets its own row/column.
    pub fn pe_layout(&self) -> PeLayout {
        match self.mode {
            ProjectionMode::Line1d => PeLayout::Line {
                length: self.line_length,
            },
            ProjectionMode::Plane2d => {
                let (w, h) = self.plane_extent;
                PeLayout::Grid {
                    rows: h.div_ceil(self.patch_size),
                    cols: w.div_ceil(self.patch_size),
                }
            }
        }
    }

    /// Flat table row for a projected position (floor, then clamp).
    pub fn pe_index<T: Scalar>(&self, position: [T; 2]) -> usize {
        match self.pe_layout() {
            PeLayout::Line { length } => floor_clamp(position[0], length),
            PeLayout::Grid { rows, cols } => {
                let p = T::of_usize(self.patch_size);
                let row = floor_clamp(position[1] / p, rows);
                let col = floor_clamp(position[0] / p, cols);
                row * cols + col
            }
        }
    }
}

#[inline]
fn floor_clamp<T: Scalar>(x: T, n: usize) -> usize {
    let f = x.floor();
    if !(f > T::zero()) {
        0
    } else {
        f.to_usize().unwrap_or(usize::MAX).min(n - 1)
    }
}

/// Largest value strictly below `extent`.
#[inline]
fn below<T: Scalar>(extent: T) -> T {
    extent - extent * T::epsilon()
}

/// Maps `s ∈ [-1, 1]` onto `[0, extent)`, clamping outside values.
#[inline]
fn to_table_units<T: Scalar>(s: T, extent: usize) -> T {
    let e = T::of_usize(extent);
    let x = (s + T::one()) * T::of(0.5) * e;
    x.max(T::zero()).min(below(e))
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViewBasis<T> {
    /// Unit direction of each line.
    Lines(Vec<Point<T>>),
    /// Rows of each view rotation: image-u axis, image-v axis, depth axis.
    Views(Vec<[Point<T>; 3]>),
}

impl<T: Scalar> ViewBasis<T> {
    pub fn len(&self) -> usize {
        match self {
            ViewBasis::Lines(v) => v.len(),
            ViewBasis::Views(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> ProjectionMode {
        match self {
            ViewBasis::Lines(_) => ProjectionMode::Line1d,
            ViewBasis::Views(_) => ProjectionMode::Plane2d,
        }
    }
}

/// `M` lines (or orthographic views) at azimuths `2πj/M`. Views additionally
/// tilt by the configured elevation about the image-u axis.
pub fn make_view_basis<T: Scalar>(cfg: &ProjectionConfig) -> ViewBasis<T> {
    let m = cfg.m_views;
    let azimuth = |j: usize| std::f64::consts::TAU * j as f64 / m as f64;
    match cfg.mode {
        ProjectionMode::Line1d => ViewBasis::Lines(
            (0..m)
                .map(|j| {
                    let (s, c) = azimuth(j).sin_cos();
                    [T::of(c), T::zero(), T::of(s)]
                })
                .collect(),
        ),
        ProjectionMode::Plane2d => {
            let (se, ce) = cfg.elevation_deg.to_radians().sin_cos();
            ViewBasis::Views(
                (0..m)
                    .map(|j| {
                        let (s, c) = azimuth(j).sin_cos();
                        // rows of E(elevation) · R_y(azimuth), with R_y matching `rotate_y`
                        let ry = [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]];
                        let e = [[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]];
                        let mut rows = [[T::zero(); 3]; 3];
                        for (r, row) in rows.iter_mut().enumerate() {
                            for (k, slot) in row.iter_mut().enumerate() {
                                *slot = T::of((0..3).map(|l| e[r][l] * ry[l][k]).sum::<f64>());
                            }
                        }
                        rows
                    })
                    .collect(),
            )
        }
    }
}

/// Signed length of `p` along line `j`.
pub fn project_1d<T: Scalar>(p: Point<T>, basis: &ViewBasis<T>, j: usize) -> Result<T> {
    match basis {
        ViewBasis::Lines(v) => Ok(dot3(v[j], p)),
        ViewBasis::Views(_) => Err(Error::ModeMismatch("project_1d needs a line basis".into())),
    }
}

/// Orthographic image location of `p` in view `j`, in plane pixels.
pub fn project_2d<T: Scalar>(p: Point<T>, basis: &ViewBasis<T>, j: usize, cfg: &ProjectionConfig) -> Result<(T, T)> {
    match basis {
        ViewBasis::Views(v) => {
            let r = &v[j];
            let (w, h) = cfg.plane_extent;
            Ok((to_table_units(dot3(r[0], p), w), to_table_units(dot3(r[1], p), h)))
        }
        ViewBasis::Lines(_) => Err(Error::ModeMismatch("project_2d needs a view basis".into())),
    }
}

/// Per-token, per-view positions in table units plus the table row each
/// position selects.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPositions<T> {
    mode: ProjectionMode,
    n_tokens: usize,
    m_views: usize,
    /// `[j * n_tokens + i]`; the second component is 0 in 1D mode.
    positions: Vec<[T; 2]>,
    pe_index: Vec<usize>,
}

impl<T: Scalar> ProjectedPositions<T> {
    pub fn compute(coords: &[Point<T>], basis: &ViewBasis<T>, cfg: &ProjectionConfig) -> Result<Self> {
        cfg.validate()?;
        if basis.mode() != cfg.mode || basis.len() != cfg.m_views {
            return Err(Error::ModeMismatch("view basis does not match projection config".into()));
        }
        let n = coords.len();
        let mut positions = Vec::with_capacity(n * cfg.m_views);
        for j in 0..cfg.m_views {
            for &p in coords {
                let pos = match cfg.mode {
                    ProjectionMode::Line1d => [to_table_units(project_1d(p, basis, j)?, cfg.line_length), T::zero()],
                    ProjectionMode::Plane2d => {
                        let (u, v) = project_2d(p, basis, j, cfg)?;
                        [u, v]
                    }
                };
                positions.push(pos);
            }
        }
        let pe_index = positions.iter().map(|&p| cfg.pe_index(p)).collect();
        Ok(Self {
            mode: cfg.mode,
            n_tokens: n,
            m_views: cfg.m_views,
            positions,
            pe_index,
        })
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn m_views(&self) -> usize {
        self.m_views
    }

    pub fn position(&self, token: usize, view: usize) -> [T; 2] {
        self.positions[view * self.n_tokens + token]
    }

    pub fn pe_index(&self, token: usize, view: usize) -> usize {
        self.pe_index[view * self.n_tokens + token]
    }

    /// Reorders tokens: output token `k` is input token `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_tokens;
        let mut positions = Vec::with_capacity(self.positions.len());
        let mut pe_index = Vec::with_capacity(self.pe_index.len());
        for j in 0..self.m_views {
            for &i in perm {
                positions.push(self.positions[j * n + i]);
                pe_index.push(self.pe_index[j * n + i]);
            }
        }
        Self {
            positions,
            pe_index,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum PeLayout {
    Line { length: usize },
    Grid { rows: usize, cols: usize },
}

impl PeLayout {
    pub fn entries(&self) -> usize {
        match *self {
            PeLayout::Line { length } => length,
            PeLayout::Grid { rows, cols } => rows * cols,
        }
    }

    pub fn mode(&self) -> ProjectionMode {
        match self {
            PeLayout::Line { .. } => ProjectionMode::Line1d,
            PeLayout::Grid { .. } => ProjectionMode::Plane2d,
        }
    }
}

/// Frozen positional-embedding table of the source modality. There is no
/// mutable access to the entries once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct PeTable<T> {
    layout: PeLayout,
    entries: Matrix<T>,
    frozen: bool,
}

impl<T: Scalar> PeTable<T> {
    pub fn new(layout: PeLayout, entries: Matrix<T>) -> Result<Self> {
        if entries.rows() != layout.entries() {
            return Err(Error::ShapeError {
                tensor: "pe_table".into(),
                detail: format!("{layout:?} needs {} rows, got {}", layout.entries(), entries.rows()),
            });
        }
        if !entries.is_finite() {
            return Err(Error::Numeric("non-finite positional embedding".into()));
        }
        Ok(Self {
            layout,
            entries,
            frozen: true,
        })
    }

    /// Sinusoidal embeddings: `sin`/`cos` pairs at geometric frequencies of
    /// the position. Grids split the channels in half between row and column
    /// index. Every row has norm `sqrt(dim / 2)`.
    pub fn sinusoidal(layout: PeLayout, dim: usize) -> Result<Self> {
        let mut m = Matrix::zeros(layout.entries(), dim);
        match layout {
            PeLayout::Line { length } => {
                if dim % 2 != 0 {
                    return Err(Error::InvalidConfig("1D sinusoidal table needs an even dim".into()));
                }
                for pos in 0..length {
                    fill_sinusoid(m.row_mut(pos), pos as f64);
                }
            }
            PeLayout::Grid { rows, cols } => {
                if dim % 4 != 0 {
                    return Err(Error::InvalidConfig("2D sinusoidal table needs dim divisible by 4".into()));
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let row = m.row_mut(r * cols + c);
                        let (a, b) = row.split_at_mut(dim / 2);
                        fill_sinusoid(a, r as f64);
                        fill_sinusoid(b, c as f64);
                    }
                }
            }
        }
        Self::new(layout, m)
    }

    pub fn layout(&self) -> PeLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Matrix<T> {
        &self.entries
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn row(&self, index: usize) -> &[T] {
        self.entries.row(index)
    }
}

fn fill_sinusoid<T: Scalar>(out: &mut [T], pos: f64) {
    let d = out.len();
    for i in 0..d / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / d as f64);
        out[2 * i] = T::of((pos * freq).sin());
        out[2 * i + 1] = T::of((pos * freq).cos());
    }
}

/// Embedding stored at a projected position. No interpolation.
pub fn pe_lookup<'a, T: Scalar>(table: &'a PeTable<T>, cfg: &ProjectionConfig, position: [T; 2]) -> Result<&'a [T]> {
    if table.layout() != cfg.pe_layout() {
        return Err(Error::ModeMismatch(format!(
            "table layout {:?} does not match projection geometry {:?}",
            table.layout(),
            cfg.pe_layout()
        )));
    }
    Ok(table.row(cfg.pe_index(position)))
}

/// `(1/M) Σ_j PE(p_ij)` for every token.
pub fn average_pe<T: Scalar>(positions: &ProjectedPositions<T>, table: &PeTable<T>) -> Result<Matrix<T>> {
    if table.layout().mode() != positions.mode() {
        return Err(Error::ModeMismatch("PE table and positions disagree on mode".into()));
    }
    let (n, m, d) = (positions.n_tokens(), positions.m_views(), table.dim());
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let row = out.row_mut(i);
        for j in 0..m {
            for (o, &v) in row.iter_mut().zip(table.row(positions.pe_index(i, j))) {
                *o += v;
            }
        }
        let inv = T::of_usize(m);
        for o in row.iter_mut() {
            *o /= inv;
        }
    }
    Ok(out)
}

/// Adds the view-averaged source-modality PE to every token. Returns the
/// updated tokens together with the projected positions, which the guided
/// adapters reuse for grouping.
pub fn assign_positional_encoding<T: Scalar>(
    tokens: &TokenSet<T>,
    basis: &ViewBasis<T>,
    cfg: &ProjectionConfig,
    table: &PeTable<T>,
) -> Result<(TokenSet<T>, ProjectedPositions<T>)> {
    if table.layout() != cfg.pe_layout() {
        return Err(Error::ModeMismatch(format!(
            "table layout {:?} does not match projection geometry {:?}",
            table.layout(),
            cfg.pe_layout()
        )));
    }
    if table.dim() != tokens.features.cols() {
        return Err(Error::DimMismatch(format!(
            "PE dim {} vs token dim {}",
            table.dim(),
            tokens.features.cols()
        )));
    }
    let positions = ProjectedPositions::compute(&tokens.coords, basis, cfg)?;
    let pe = average_pe(&positions, table)?;
    let mut features = tokens.features.clone();
    features.add_assign(&pe);
    Ok((
        TokenSet {
            features,
            coords: tokens.coords.clone(),
        },
        positions,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::rotate_y;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_cfg(m: usize) -> ProjectionConfig {
        ProjectionConfig {
            m_views: m,
            ..ProjectionConfig::language()
        }
    }

    fn identity_plane() -> ProjectionConfig {
        ProjectionConfig {
            m_views: 1,
            elevation_deg: 0.0,
            ..ProjectionConfig::vision()
        }
    }

    #[test]
    fn four_lines_are_axis_aligned() {
        let ViewBasis::Lines(v) = make_view_basis::<f64>(&line_cfg(4)) else { panic!() };
        let expect = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]];
        for (a, b) in v.iter().zip(expect) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn line_directions_are_unit_and_evenly_spaced() {
        for m in 1..13 {
            let ViewBasis::Lines(v) = make_view_basis::<f64>(&line_cfg(m)) else { panic!() };
            for d in &v {
                assert!((dot3(*d, *d).sqrt() - 1.0).abs() < 1e-9);
            }
            if m == 6 {
                for j in 0..6 {
                    let angle = dot3(v[j], v[(j + 1) % 6]).clamp(-1.0, 1.0).acos();
                    assert!((angle - std::f64::consts::FRAC_PI_3).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn project_1d_axis_and_origin() {
        let basis = ViewBasis::Lines(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(project_1d([0.3, 0.4, 0.5], &basis, 0).unwrap(), 0.3);
        let basis = make_view_basis::<f64>(&line_cfg(5));
        assert_eq!(project_1d([0.0; 3], &basis, 3).unwrap(), 0.0);
    }

    #[test]
    fn project_2d_center_and_edge() {
        let cfg = identity_plane();
        let basis = make_view_basis::<f64>(&cfg);
        assert_eq!(project_2d([0.0; 3], &basis, 0, &cfg).unwrap(), (256.0, 256.0));
        let (u, _) = project_2d([1.0, 0.0, 0.0], &basis, 0, &cfg).unwrap();
        assert!(u < 512.0 && u > 512.0 - 1e-9);
    }

    #[test]
    fn rotated_cloud_in_view_zero_matches_rotated_view() {
        let cfg = ProjectionConfig::vision();
        let basis = make_view_basis::<f64>(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for j in 0..cfg.m_views {
            let theta = std::f64::consts::TAU * j as f64 / cfg.m_views as f64;
            for _ in 0..50 {
                let p = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
                let a = project_2d(rotate_y(p, theta), &basis, 0, &cfg).unwrap();
                let b = project_2d(p, &basis, j, &cfg).unwrap();
                assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lookup_floor_and_clamp() {
        let cfg = line_cfg(1);
        let table = PeTable::<f64>::sinusoidal(cfg.pe_layout(), 8).unwrap();
        assert_eq!(cfg.pe_index([5.9, 0.0]), 5);
        assert_eq!(pe_lookup(&table, &cfg, [5.9, 0.0]).unwrap(), table.row(5));
        assert_eq!(cfg.pe_index([500.0, 0.0]), 76);
        assert_eq!(cfg.pe_index([-3.0, 0.0]), 0);

        let cfg = ProjectionConfig::vision();
        assert_eq!(cfg.pe_layout(), PeLayout::Grid { rows: 20, cols: 20 });
        assert_eq!(cfg.pe_index([0.0f64, 0.0]), 0);
        assert_eq!(cfg.pe_index([511.99f64, 511.99]), 20 * 20 - 1);
        assert_eq!(cfg.pe_index([1e6f64, 30.0]), 20 + 19);
    }

    #[test]
    fn lookup_rejects_mismatched_table() {
        let table = PeTable::<f64>::sinusoidal(PeLayout::Line { length: 10 }, 4).unwrap();
        assert!(pe_lookup(&table, &ProjectionConfig::vision(), [0.0, 0.0]).is_err());
    }

    #[test]
    fn sinusoidal_rows_have_fixed_norm() {
        for layout in [PeLayout::Line { length: 77 }, PeLayout::Grid { rows: 20, cols: 20 }] {
            let t = PeTable::<f64>::sinusoidal(layout, 16).unwrap();
            for r in 0..layout.entries() {
                let n: f64 = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 8f64.sqrt()).abs() < 1e-6);
            }
        }
    }

    fn tokens(n: usize, d: usize, seed: u64) -> TokenSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n)
            .map(|_| {
                let p: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let s = dot3(p, p).sqrt().max(1.0);
                [p[0] / s, p[1] / s, p[2] / s]
            })
            .collect();
        TokenSet {
            features: Matrix::uniform(n, d, 1.0, &mut rng),
            coords,
        }
    }

    #[test]
    fn single_view_adds_exactly_one_embedding() {
        let cfg = ProjectionConfig {
            m_views: 1,
            ..ProjectionConfig::vision()
        };
        let basis = make_view_basis(&cfg);
        let t = tokens(10, 8, 1);
        let table = PeTable::sinusoidal(cfg.pe_layout(), 8).unwrap();
        let (out, pos) = assign_positional_encoding(&t, &basis, &cfg, &table).unwrap();
        for i in 0..10 {
            let pe = table.row(pos.pe_index(i, 0));
            for k in 0..8 {
                assert_eq!(out.features.get(i, k), t.features.get(i, k) + pe[k]);
            }
        }
        assert_eq!(out.coords, t.coords);
    }

    #[test]
    fn zero_table_is_identity() {
        let cfg = line_cfg(6);
        let basis = make_view_basis(&cfg);
        let t = tokens(10, 8, 2);
        let table = PeTable::new(cfg.pe_layout(), Matrix::zeros(77, 8)).unwrap();
        let (out, _) = assign_positional_encoding(&t, &basis, &cfg, &table).unwrap();
        assert_eq!(out.features, t.features);
    }

    #[test]
    fn mode_mismatch_is_reported() {
        let cfg = line_cfg(6);
        let basis = make_view_basis(&cfg);
        let table = PeTable::<f64>::sinusoidal(PeLayout::Grid { rows: 20, cols: 20 }, 8).unwrap();
        assert!(matches!(
            assign_positional_encoding(&tokens(4, 8, 3), &basis, &cfg, &table),
            Err(Error::ModeMismatch(_))
        ));
    }
}
