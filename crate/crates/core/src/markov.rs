//! Exact checks of the equivariant Markov chain on finite groups.
//!
//! States and conditions are both group elements, acted on by left
//! multiplication. A kernel is one row-stochastic matrix per condition,
//! `M_c[x][y] = p(y | x, c)`, and the three symmetric kinds are
//!
//! * p1: `p(y | x, T c) = p(y | x, c)`
//! * p2: `p(T y | x, T c) = p(y | x, c)`
//! * p3: `p(T y | T x, T c) = p(y | x, c)`
//!
//! Chaining `K − n + 1` p1 kernels, one p2 and `n − 2` p3 from a
//! condition-independent start yields `p(T x | T c) = p(x | c)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub const PASS_THRESHOLD: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSpec {
    Cyclic(usize),
    Dihedral(usize),
    Octahedral,
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupSpec::Cyclic(m) => write!(f, "cyclic({m})"),
            GroupSpec::Dihedral(m) => write!(f, "dihedral({m})"),
            GroupSpec::Octahedral => f.write_str("octahedral"),
        }
    }
}

impl FromStr for GroupSpec {
    type Err = Error;
    /// `octahedral`, `cyclic(4)`, `dihedral(6)`; `cyclic:4` is accepted too.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "octahedral" {
            return Ok(GroupSpec::Octahedral);
        }
        let bad = || Error::BadParameter(format!("unknown group {s:?}"));
        let (family, arg) = s
            .strip_suffix(')')
            .and_then(|t| t.split_once('('))
            .or_else(|| s.split_once(':'))
            .ok_or_else(bad)?;
        let m: usize = arg.trim().parse().map_err(|_| bad())?;
        match family.trim() {
            "cyclic" => Ok(GroupSpec::Cyclic(m)),
            "dihedral" => Ok(GroupSpec::Dihedral(m)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FiniteGroup {
    name: String,
    mult: Vec<Vec<usize>>,
    inverse: Vec<usize>,
}

impl FiniteGroup {
    /// Validates a multiplication table: identity at index 0, closure,
    /// associativity (exhaustively) and two-sided inverses.
    pub fn from_table(name: impl Into<String>, mult: Vec<Vec<usize>>) -> Result<Self> {
        let n = mult.len();
        if n == 0 || mult.iter().any(|row| row.len() != n) {
            return Err(Error::AxiomViolation("table is not square".into()));
        }
        if mult.iter().flatten().any(|&v| v >= n) {
            return Err(Error::AxiomViolation("table is not closed".into()));
        }
        for a in 0..n {
            if mult[0][a] != a || mult[a][0] != a {
                return Err(Error::AxiomViolation(format!("index 0 is not an identity for {a}")));
            }
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    if mult[mult[a][b]][c] != mult[a][mult[b][c]] {
                        return Err(Error::AxiomViolation(format!("({a}{b}){c} != {a}({b}{c})")));
                    }
                }
            }
        }
        let mut inverse = Vec::with_capacity(n);
        for a in 0..n {
            let inv = (0..n)
                .find(|&b| mult[a][b] == 0 && mult[b][a] == 0)
                .ok_or_else(|| Error::AxiomViolation(format!("{a} has no inverse")))?;
            inverse.push(inv);
        }
        Ok(Self {
            name: name.into(),
            mult,
            inverse,
        })
    }

    pub fn build(spec: GroupSpec) -> Result<Self> {
        match spec {
            GroupSpec::Cyclic(m) => Self::cyclic(m),
            GroupSpec::Dihedral(m) => Self::dihedral(m),
            GroupSpec::Octahedral => Self::octahedral(),
        }
    }

    pub fn cyclic(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::BadParameter(format!("cyclic group needs m >= 2, got {m}")));
        }
        let mult = (0..m).map(|a| (0..m).map(|b| (a + b) % m).collect()).collect();
        Self::from_table(GroupSpec::Cyclic(m).to_string(), mult)
    }

    /// Symmetries of the regular m-gon; `r^i s^j` sits at index `i + m·j`.
    pub fn dihedral(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::BadParameter(format!("dihedral group needs m >= 2, got {m}")));
        }
        let n = 2 * m;
        let mult = (0..n)
            .map(|a| {
                let (i1, j1) = (a % m, a / m);
                (0..n)
                    .map(|b| {
                        let (i2, j2) = (b % m, b / m);
                        // s r^i = r^{-i} s
                        let i = if j1 == 0 { i1 + i2 } else { i1 + m - i2 } % m;
                        i + m * ((j1 + j2) % 2)
                    })
                    .collect()
            })
            .collect();
        Self::from_table(GroupSpec::Dihedral(m).to_string(), mult)
    }

    /// Rotations of the cube, generated by quarter turns about x and z.
    pub fn octahedral() -> Result<Self> {
        type M = [[i8; 3]; 3];
        let mul = |a: &M, b: &M| -> M {
            let mut c = [[0i8; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            c
        };
        let identity: M = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];
        let rx: M = [[1, 0, 0], [0, 0, -1], [0, 1, 0]];
        let rz: M = [[0, -1, 0], [1, 0, 0], [0, 0, 1]];
        let mut elems = vec![identity];
        let mut frontier = 0;
        while frontier < elems.len() {
            let e = elems[frontier];
            for g in [&rx, &rz] {
                let p = mul(g, &e);
                if !elems.contains(&p) {
                    elems.push(p);
                }
            }
            frontier += 1;
        }
        let index = |m: &M| elems.iter().position(|e| e == m);
        let mut mult = Vec::with_capacity(elems.len());
        for a in &elems {
            let mut row = Vec::with_capacity(elems.len());
            for b in &elems {
                row.push(index(&mul(a, b)).ok_or_else(|| Error::AxiomViolation("product left the set".into()))?);
            }
            mult.push(row);
        }
        Self::from_table("octahedral", mult)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn order(&self) -> usize {
        self.mult.len()
    }

    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.mult[a][b]
    }

    pub fn inv(&self, a: usize) -> usize {
        self.inverse[a]
    }

    pub fn is_abelian(&self) -> bool {
        (0..self.order()).all(|a| (0..self.order()).all(|b| self.mul(a, b) == self.mul(b, a)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    P1,
    P2,
    P3,
    /// No symmetry; used for negative controls.
    Unconstrained,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::P1 => "p1",
            KernelKind::P2 => "p2",
            KernelKind::P3 => "p3",
            KernelKind::Unconstrained => "unconstrained",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupKernel {
    kind: KernelKind,
    n: usize,
    /// `matrices[c][x * n + y] = p(y | x, c)`.
    matrices: Vec<Vec<f64>>,
}

fn random_stochastic<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut m = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = row.iter().sum();
        m.extend(row.iter().map(|v| v / total));
    }
    m
}

impl GroupKernel {
    /// A random kernel of the given kind. p1 averages independent per-condition
    /// matrices; p2 and p3 permute the identity-condition matrix by the condition.
    pub fn random<R: Rng + ?Sized>(g: &FiniteGroup, kind: KernelKind, rng: &mut R) -> Self {
        let n = g.order();
        let matrices = match kind {
            KernelKind::P1 => {
                let draws: Vec<Vec<f64>> = (0..n).map(|_| random_stochastic(n, rng)).collect();
                let mut avg = vec![0.0; n * n];
                for d in &draws {
                    for (a, v) in avg.iter_mut().zip(d) {
                        *a += v;
                    }
                }
                avg.iter_mut().for_each(|a| *a /= n as f64);
                vec![avg; n]
            }
            KernelKind::P2 | KernelKind::P3 => {
                let base = random_stochastic(n, rng);
                (0..n)
                    .map(|c| {
                        let ci = g.inv(c);
                        let mut m = vec![0.0; n * n];
                        for x in 0..n {
                            let src = if kind == KernelKind::P3 { g.mul(ci, x) } else { x };
                            for y in 0..n {
                                m[x * n + y] = base[src * n + g.mul(ci, y)];
                            }
                        }
                        m
                    })
                    .collect()
            }
            KernelKind::Unconstrained => (0..n).map(|_| random_stochastic(n, rng)).collect(),
        };
        Self { kind, n, matrices }
    }

    /// Uniform rows; satisfies every kind's identity at once.
    pub fn uniform(g: &FiniteGroup, kind: KernelKind) -> Self {
        let n = g.order();
        Self {
            kind,
            n,
            matrices: vec![vec![1.0 / n as f64; n * n]; n],
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn prob(&self, c: usize, x: usize, y: usize) -> f64 {
        self.matrices[c][x * self.n + y]
    }

    /// Largest deviation from the defining identity of `kind` over all `T, c, x, y`.
    pub fn symmetry_defect(&self, g: &FiniteGroup, kind: KernelKind) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for t in 0..n {
            for c in 0..n {
                let tc = g.mul(t, c);
                for x in 0..n {
                    for y in 0..n {
                        let moved = match kind {
                            KernelKind::P1 => self.prob(tc, x, y),
                            KernelKind::P2 => self.prob(tc, x, g.mul(t, y)),
                            KernelKind::P3 => self.prob(tc, g.mul(t, x), g.mul(t, y)),
                            KernelKind::Unconstrained => return 0.0,
                        };
                        worst = worst.max((moved - self.prob(c, x, y)).abs());
                    }
                }
            }
        }
        worst
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.matrices
            .iter()
            .flat_map(|m| m.chunks(self.n).map(|row| (row.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Kernel kinds in application order, from `x^K → x^{K−1}` down to `x^1 → x^0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLayout {
    kinds: Vec<KernelKind>,
}

impl KernelLayout {
    /// `K − n + 1` p1, one p2, `n − 2` p3.
    pub fn prop1(k: usize, n: usize) -> Result<Self> {
        if k < 1 || n < 2 || n > k + 1 {
            return Err(Error::BadParameter(format!("layout needs K >= 1 and 2 <= n <= K + 1, got K = {k}, n = {n}")));
        }
        let mut kinds = vec![KernelKind::P1; k + 1 - n];
        kinds.push(KernelKind::P2);
        kinds.extend(std::iter::repeat_n(KernelKind::P3, n - 2));
        Ok(Self { kinds })
    }

    pub fn all_p3(k: usize) -> Self {
        Self {
            kinds: vec![KernelKind::P3; k],
        }
    }

    pub fn from_kinds(kinds: Vec<KernelKind>) -> Self {
        Self { kinds }
    }

    pub fn kinds(&self) -> &[KernelKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn sample_kernels<R: Rng + ?Sized>(&self, g: &FiniteGroup, rng: &mut R) -> Vec<GroupKernel> {
        self.kinds.iter().map(|k| GroupKernel::random(g, *k, rng)).collect()
    }
}

/// `p(x^0 | c)` by exact matrix-vector products from a condition-independent start.
pub fn marginal(layout: &KernelLayout, kernels: &[GroupKernel], initial: &[f64], c: usize) -> Result<Vec<f64>> {
    if kernels.len() != layout.len() {
        return Err(Error::LayoutMismatch {
            position: kernels.len().min(layout.len()),
            expected: format!("{} kernels", layout.len()),
            got: format!("{} kernels", kernels.len()),
        });
    }
    for (i, (kernel, kind)) in kernels.iter().zip(layout.kinds()).enumerate() {
        if kernel.kind() != *kind {
            return Err(Error::LayoutMismatch {
                position: i,
                expected: kind.to_string(),
                got: kernel.kind().to_string(),
            });
        }
        if kernel.n != initial.len() {
            return Err(Error::BadParameter("kernel size does not match the state space".into()));
        }
    }
    if (initial.iter().sum::<f64>() - 1.0).abs() > 1e-12 || initial.iter().any(|p| *p < 0.0) {
        return Err(Error::BadParameter("initial distribution must be a probability vector".into()));
    }
    let n = initial.len();
    let mut p = initial.to_vec();
    for kernel in kernels {
        let m = &kernel.matrices[c];
        let mut next = vec![0.0; n];
        for (x, px) in p.iter().enumerate() {
            for (y, q) in next.iter_mut().enumerate() {
                *q += px * m[x * n + y];
            }
        }
        p = next;
    }
    Ok(p)
}

/// `max_{T, c, x} |p(x | c) − p(T x | T c)|` over the whole group.
pub fn equivariance_residual(g: &FiniteGroup, layout: &KernelLayout, kernels: &[GroupKernel], initial: &[f64]) -> Result<f64> {
    let n = g.order();
    let marginals = (0..n).map(|c| marginal(layout, kernels, initial, c)).collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    for t in 0..n {
        for c in 0..n {
            let tc = g.mul(t, c);
            for x in 0..n {
                worst = worst.max((marginals[c][x] - marginals[tc][g.mul(t, x)]).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Check {
    pub residual: f64,
    pub pass: bool,
}

pub fn check_prop1(g: &FiniteGroup, layout: &KernelLayout, kernels: &[GroupKernel], initial: &[f64]) -> Result<Prop1Check> {
    let residual = equivariance_residual(g, layout, kernels, initial)?;
    Ok(Prop1Check {
        residual,
        pass: residual < PASS_THRESHOLD,
    })
}

/// Random initial distribution shared by every condition.
pub fn random_initial<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MarkovReport {
    pub group: String,
    pub K: usize,
    pub n: usize,
    pub seeds: usize,
    /// Worst residual over all seeds.
    pub residual: f64,
    pub pass: bool,
    pub negative_control_residuals: Vec<f64>,
    /// Fraction of negative-control seeds with residual above 1e-3.
    pub negative_control_failure_rate: f64,
}

/// Prop.-1 layout checked over `seeds` kernel draws, plus `controls` draws
/// with the p2 slot replaced by an unconstrained kernel.
pub fn verify_layout(g: &FiniteGroup, k: usize, n: usize, seeds: usize, controls: usize, base_seed: u64) -> Result<MarkovReport> {
    let layout = KernelLayout::prop1(k, n)?;
    let mut residual: f64 = 0.0;
    for s in 0..seeds {
        let mut rng = stream(derive_seed(base_seed, s as u64), 1);
        let kernels = layout.sample_kernels(g, &mut rng);
        let initial = random_initial(g.order(), &mut rng);
        residual = residual.max(equivariance_residual(g, &layout, &kernels, &initial)?);
    }
    let mut control_kinds = layout.kinds().to_vec();
    control_kinds[k + 1 - n] = KernelKind::Unconstrained;
    let control = KernelLayout::from_kinds(control_kinds);
    let mut negative_control_residuals = Vec::with_capacity(controls);
    for s in 0..controls {
        let mut rng = stream(derive_seed(base_seed, s as u64), 2);
        let kernels = control.sample_kernels(g, &mut rng);
        let initial = random_initial(g.order(), &mut rng);
        negative_control_residuals.push(equivariance_residual(g, &control, &kernels, &initial)?);
    }
    let failing = negative_control_residuals.iter().filter(|r| **r > 1e-3).count();
    Ok(MarkovReport {
        group: g.name().to_string(),
        K: k,
        n,
        seeds,
        residual,
        pass: residual < PASS_THRESHOLD,
        negative_control_failure_rate: if controls == 0 { 0.0 } else { failing as f64 / controls as f64 },
        negative_control_residuals,
    })
}
