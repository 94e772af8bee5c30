//! Sparse multivariate polynomials over a fixed, ordered set of real variables.
//!
//! Exponent vectors are ordered graded-lexicographically: lower total degree
//! first, then by the exponent of the first variable (descending), and so on.
//! With variables `(x1, x2)` the degree-2 basis reads `1, x1, x2, x1^2, x1*x2, x2^2`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Coefficients with magnitude below this are dropped after every operation.
pub const COEFF_EPS: f64 = 1e-14;

/// A named variable and its position in the global ordering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variable {
    pub name: String,
    pub index: usize,
}

/// Ordered set of variable names. Position defines the exponent slot.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct VarSet {
    names: Vec<String>,
}

impl VarSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut out: Vec<String> = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            if !is_identifier(n) {
                return Err(Error::InvalidConfig(alloc::format!("invalid variable name `{n}`")));
            }
            if out.iter().any(|m| m == n) {
                return Err(Error::InvalidConfig(alloc::format!("duplicate variable `{n}`")));
            }
            out.push(n.to_string());
        }
        Ok(Self { names: out })
    }

    /// `x1..xn` followed by `e1..en`.
    pub fn state_and_error(n: usize) -> Self {
        let mut names: Vec<String> = (1..=n).map(|i| alloc::format!("x{i}")).collect();
        names.extend((1..=n).map(|i| alloc::format!("e{i}")));
        Self { names }
    }

    pub fn states(n: usize) -> Self {
        Self { names: (1..=n).map(|i| alloc::format!("x{i}")).collect() }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn variables(&self) -> impl Iterator<Item = Variable> + '_ {
        self.names.iter().enumerate().map(|(index, name)| Variable { name: name.clone(), index })
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Exponent vector, one entry per variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Self(exps)
    }

    pub fn one(nvars: usize) -> Self {
        Self(vec![0; nvars])
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Self(e)
    }

    pub fn exps(&self) -> &[u32] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `Some(self / other)` when `other` divides `self`.
    pub fn div(&self, other: &Monomial) -> Option<Monomial> {
        let mut out = Vec::with_capacity(self.0.len());
        for (a, b) in self.0.iter().zip(&other.0) {
            out.push(a.checked_sub(*b)?);
        }
        Some(Monomial(out))
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        let mut v = 1.0;
        for (&e, &x) in self.0.iter().zip(point) {
            for _ in 0..e {
                v *= x;
            }
        }
        v
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All exponent vectors over `vars` (a subset of `0..nvars`) with total degree in
/// `min_deg..=max_deg`, in graded-lexicographic order.
pub fn monomials(nvars: usize, vars: &[usize], min_deg: u32, max_deg: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    for d in min_deg..=max_deg {
        let mut exps = vec![0u32; nvars];
        fill_degree(vars, d, &mut exps, &mut out);
    }
    out
}

fn fill_degree(vars: &[usize], d: u32, exps: &mut Vec<u32>, out: &mut Vec<Monomial>) {
    match vars.split_first() {
        None => {
            if d == 0 {
                out.push(Monomial(exps.clone()));
            }
        }
        Some((&v, rest)) => {
            if rest.is_empty() {
                exps[v] = d;
                out.push(Monomial(exps.clone()));
                exps[v] = 0;
                return;
            }
            for e in (0..=d).rev() {
                exps[v] = e;
                fill_degree(rest, d - e, exps, out);
            }
            exps[v] = 0;
        }
    }
}

/// Monomials (coefficient 1) in the variables `vars` up to `max_deg`.
pub fn monomial_basis(nvars: usize, vars: &[usize], max_deg: u32, include_constant: bool) -> Vec<Polynomial> {
    let min = if include_constant { 0 } else { 1 };
    if max_deg < min {
        return Vec::new();
    }
    monomials(nvars, vars, min, max_deg)
        .into_iter()
        .map(|m| Polynomial::monomial(m, 1.0))
        .collect()
}

/// A real polynomial stored as a sparse map from exponent vectors to coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self::monomial(Monomial::one(nvars), c)
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        Self::monomial(Monomial::var(nvars, i), 1.0)
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let nvars = m.nvars();
        let mut terms = BTreeMap::new();
        if c.abs() >= COEFF_EPS {
            terms.insert(m, c);
        }
        Self { nvars, terms }
    }

    /// Builds from `(exponents, coeff)` pairs; repeated exponents accumulate.
    pub fn from_terms<I>(nvars: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let mut p = Self::zero(nvars);
        for (e, c) in terms {
            if e.len() != nvars {
                return Err(Error::DimensionMismatch { expected: nvars, found: e.len() });
            }
            p.add_term(Monomial(e), c);
        }
        Ok(p)
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Maximum total degree; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Minimum total degree over stored terms; 0 for the zero polynomial.
    pub fn min_degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).min().unwrap_or(0)
    }

    pub fn constant_term(&self) -> f64 {
        self.coeff(&Monomial::one(self.nvars))
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub(crate) fn add_term(&mut self, m: Monomial, c: f64) {
        let e = self.terms.entry(m).or_insert(0.0);
        *e += c;
        if e.abs() < COEFF_EPS {
            let key = self.terms.iter().find(|(_, v)| v.abs() < COEFF_EPS).map(|(k, _)| k.clone());
            if let Some(k) = key {
                self.terms.remove(&k);
            }
        }
    }

    fn prune(mut self) -> Self {
        self.terms.retain(|_, c| c.abs() >= COEFF_EPS);
        self
    }

    fn check_same(&self, other: &Polynomial) -> Result<()> {
        if self.nvars != other.nvars {
            return Err(Error::VariableMismatch { left: self.nvars, right: other.nvars });
        }
        Ok(())
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.nvars {
            return Err(Error::DimensionMismatch { expected: self.nvars, found: point.len() });
        }
        Ok(self.eval_unchecked(point))
    }

    pub(crate) fn eval_unchecked(&self, point: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.eval(point)).sum()
    }

    pub fn checked_add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_same(other)?;
        let mut terms = self.terms.clone();
        for (m, c) in &other.terms {
            *terms.entry(m.clone()).or_insert(0.0) += c;
        }
        Ok(Polynomial { nvars: self.nvars, terms }.prune())
    }

    pub fn checked_sub(&self, other: &Polynomial) -> Result<Polynomial> {
        self.checked_add(&other.scale(-1.0))
    }

    pub fn checked_mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_same(other)?;
        let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                *terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        Ok(Polynomial { nvars: self.nvars, terms }.prune())
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, v)| (m.clone(), v * c)).collect(),
        }
        .prune()
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    /// Partial derivative with respect to variable `i`.
    pub fn deriv(&self, i: usize) -> Polynomial {
        let mut terms = BTreeMap::new();
        for (m, c) in &self.terms {
            let e = m.0[i];
            if e == 0 {
                continue;
            }
            let mut ex = m.0.clone();
            ex[i] -= 1;
            *terms.entry(Monomial(ex)).or_insert(0.0) += c * e as f64;
        }
        Polynomial { nvars: self.nvars, terms }.prune()
    }

    /// Gradient restricted to `vars`, in the order given.
    pub fn grad(&self, vars: &[usize]) -> Vec<Polynomial> {
        vars.iter().map(|&i| self.deriv(i)).collect()
    }

    /// Replaces variable `i` by `images[i]` and expands. All images must share
    /// one variable set, which becomes the variable set of the result.
    pub fn subst(&self, images: &[Polynomial]) -> Result<Polynomial> {
        if images.len() != self.nvars {
            return Err(Error::DimensionMismatch { expected: self.nvars, found: images.len() });
        }
        let out_n = images.first().map_or(0, Polynomial::nvars);
        if let Some(bad) = images.iter().find(|p| p.nvars != out_n) {
            return Err(Error::VariableMismatch { left: out_n, right: bad.nvars });
        }
        // powers[i][k] = images[i]^k, built lazily
        let mut powers: Vec<Vec<Polynomial>> = images
            .iter()
            .map(|_| vec![Polynomial::constant(out_n, 1.0)])
            .collect();
        let mut out = Polynomial::zero(out_n);
        for (m, c) in &self.terms {
            let mut term = Polynomial::constant(out_n, *c);
            for (i, &e) in m.0.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                while powers[i].len() <= e as usize {
                    let next = powers[i].last().unwrap() * &images[i];
                    powers[i].push(next);
                }
                term = &term * &powers[i][e as usize];
            }
            out = &out + &term;
        }
        Ok(out)
    }

    /// Re-indexes into a larger variable set: variable `i` becomes `i + offset`.
    pub fn embed(&self, nvars: usize, offset: usize) -> Result<Polynomial> {
        if offset + self.nvars > nvars {
            return Err(Error::DimensionMismatch { expected: nvars, found: offset + self.nvars });
        }
        let terms = self
            .terms
            .iter()
            .map(|(m, c)| {
                let mut e = vec![0; nvars];
                e[offset..offset + self.nvars].copy_from_slice(&m.0);
                (Monomial(e), *c)
            })
            .collect();
        Ok(Polynomial { nvars, terms })
    }

    /// Inverse of [`embed`](Self::embed); fails if a dropped variable appears.
    pub fn restrict(&self, nvars: usize, offset: usize) -> Result<Polynomial> {
        let mut terms = BTreeMap::new();
        for (m, c) in &self.terms {
            let outside = m.0.iter().enumerate().any(|(i, &e)| e > 0 && (i < offset || i >= offset + nvars));
            if outside {
                return Err(Error::InvalidConfig("polynomial depends on variables outside the target set".into()));
            }
            terms.insert(Monomial(m.0[offset..offset + nvars].to_vec()), *c);
        }
        Ok(Polynomial { nvars, terms })
    }

    /// Drops terms with `|c| <= tol * max|c|`.
    pub fn truncate_relative(&self, tol: f64) -> Polynomial {
        let cut = tol * self.max_abs_coeff();
        Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().filter(|(_, c)| c.abs() > cut).map(|(m, c)| (m.clone(), *c)).collect(),
        }
    }

    pub fn display<'a>(&'a self, vars: &'a VarSet) -> PolyDisplay<'a> {
        PolyDisplay { poly: self, vars }
    }

    pub fn parse(s: &str, vars: &VarSet) -> Result<Polynomial> {
        Parser::new(s, vars).parse()
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    /// Panics on mismatched variable sets; see [`Polynomial::checked_add`].
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.checked_add(rhs).expect("polynomial variable sets differ")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.checked_sub(rhs).expect("polynomial variable sets differ")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.checked_mul(rhs).expect("polynomial variable sets differ")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

/// Human-readable rendering, highest degree first: `-1.3*x1^3 - 4*x1^2*x2 + 2`.
pub struct PolyDisplay<'a> {
    poly: &'a Polynomial,
    vars: &'a VarSet,
}

impl fmt::Display for PolyDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.poly.is_zero() {
            return f.write_str("0");
        }
        let mut terms: Vec<(&Monomial, f64)> = self.poly.terms().collect();
        terms.sort_by(|a, b| b.0.degree().cmp(&a.0.degree()).then_with(|| a.0.cmp(b.0)));
        for (k, (m, c)) in terms.into_iter().enumerate() {
            let mag = c.abs();
            if k == 0 {
                if c < 0.0 {
                    f.write_str("-")?;
                }
            } else if c < 0.0 {
                f.write_str(" - ")?;
            } else {
                f.write_str(" + ")?;
            }
            let mut first = true;
            if mag != 1.0 || m.is_one() {
                write!(f, "{mag:?}")?;
                first = false;
            }
            for (i, &e) in m.exps().iter().enumerate() {
                if e == 0 {
                    continue;
                }
                if !first {
                    f.write_str("*")?;
                }
                first = false;
                f.write_str(&self.vars.names[i])?;
                if e > 1 {
                    write!(f, "^{e}")?;
                }
            }
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a VarSet,
}

impl<'a> Parser<'a> {
    fn new(s: &'a str, vars: &'a VarSet) -> Self {
        Self { src: s.as_bytes(), pos: 0, vars }
    }

    fn err(&self, msg: &str) -> Error {
        Error::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn parse(mut self) -> Result<Polynomial> {
        let p = self.expr()?;
        if self.peek().is_some() {
            return Err(self.err("unexpected trailing input"));
        }
        Ok(p)
    }

    fn expr(&mut self) -> Result<Polynomial> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = &acc + &self.term()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = &acc - &self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial> {
        let mut acc = self.unary()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            acc = &acc * &self.unary()?;
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Polynomial> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(-&self.unary()?)
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.err("expected integer exponent"));
            }
            let text = core::str::from_utf8(&self.src[start..self.pos]).unwrap();
            let e: u32 = text.parse().map_err(|_| self.err("exponent out of range"))?;
            return Ok(base.pow(e));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial> {
        let n = self.vars.len();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let p = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(p)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
                    self.pos += 1;
                }
                if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
                    let save = self.pos;
                    self.pos += 1;
                    if self.pos < self.src.len() && matches!(self.src[self.pos], b'+' | b'-') {
                        self.pos += 1;
                    }
                    let digits = self.pos;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    if digits == self.pos {
                        self.pos = save;
                    }
                }
                let text = core::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let v: f64 = text.parse().map_err(|_| Error::Parse { pos: start, msg: "bad number".into() })?;
                Ok(Polynomial::constant(n, v))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = core::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let i = self
                    .vars
                    .index_of(name)
                    .ok_or_else(|| Error::Parse { pos: start, msg: alloc::format!("unknown variable `{name}`") })?;
                Ok(Polynomial::var(n, i))
            }
            Some(_) => Err(self.err("unexpected character")),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

/// Dense rectangular grid of polynomials over a common variable set.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Polynomial>,
}

impl PolyMatrix {
    pub fn zeros(rows: usize, cols: usize, nvars: usize) -> Self {
        Self { rows, cols, entries: vec![Polynomial::zero(nvars); rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<Polynomial>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let nvars = rows.first().and_then(|row| row.first()).map_or(0, Polynomial::nvars);
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch { expected: c, found: row.len() });
            }
            for p in row {
                if p.nvars() != nvars {
                    return Err(Error::VariableMismatch { left: nvars, right: p.nvars() });
                }
                entries.push(p);
            }
        }
        Ok(Self { rows: r, cols: c, entries })
    }

    /// Column vector.
    pub fn column(entries: Vec<Polynomial>) -> Result<Self> {
        Self::from_rows(entries.into_iter().map(|p| vec![p]).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nvars(&self) -> usize {
        self.entries.first().map_or(0, Polynomial::nvars)
    }

    pub fn get(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Polynomial) {
        self.entries[i * self.cols + j] = p;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows, self.nvars());
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j).clone());
            }
        }
        out
    }

    /// Term-for-term symmetry check.
    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Matrix-vector product with a numeric vector.
    pub fn mul_vec(&self, v: &[Polynomial]) -> Result<Vec<Polynomial>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, found: v.len() });
        }
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let mut acc = Polynomial::zero(self.nvars());
            for (j, vj) in v.iter().enumerate() {
                acc = acc.checked_add(&self.get(i, j).checked_mul(vj)?)?;
            }
            out.push(acc);
        }
        Ok(out)
    }

    pub fn embed(&self, nvars: usize, offset: usize) -> Result<Self> {
        let entries = self.entries.iter().map(|p| p.embed(nvars, offset)).collect::<Result<Vec<_>>>()?;
        Ok(Self { rows: self.rows, cols: self.cols, entries })
    }

    pub fn eval(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m[(i, j)] = self.get(i, j).eval(point)?;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn xy() -> VarSet {
        VarSet::new(&["x1", "x2"]).unwrap()
    }

    fn p(s: &str, v: &VarSet) -> Polynomial {
        Polynomial::parse(s, v).unwrap()
    }

    fn random_poly(rng: &mut ChaCha8Rng, nvars: usize, deg: u32, int: bool) -> Polynomial {
        let vars: Vec<usize> = (0..nvars).collect();
        let mut out = Polynomial::zero(nvars);
        for m in monomials(nvars, &vars, 0, deg) {
            if rng.gen_bool(0.6) {
                let c = if int { rng.gen_range(-5i32..=5) as f64 } else { rng.gen_range(-2.0..2.0) };
                out = &out + &Polynomial::monomial(m, c);
            }
        }
        out
    }

    #[test]
    fn basis_counts_and_order() {
        let b = monomial_basis(2, &[0, 1], 2, true);
        let v = xy();
        let shown: Vec<_> = b.iter().map(|q| q.display(&v).to_string()).collect();
        assert_eq!(shown, ["1.0", "x1", "x2", "x1^2", "x1*x2", "x2^2"]);
        assert_eq!(monomial_basis(1, &[0], 0, true).len(), 1);
        let b4 = monomial_basis(4, &[0, 1, 2, 3], 1, false);
        assert_eq!(b4.len(), 4);
        for (i, q) in b4.iter().enumerate() {
            assert_eq!(q, &Polynomial::var(4, i));
        }
    }

    #[test]
    fn eval_examples() {
        let v = xy();
        assert_eq!(p("x1^2 + 2*x1*x2", &v).eval(&[1.0, 2.0]).unwrap(), 5.0);
        assert_eq!(p("3*x1 - x1*x2^2", &v).eval(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(p("x1", &v).eval(&[1.0]), Err(Error::DimensionMismatch { .. })));

        let x = VarSet::new(&["x"]).unwrap();
        let q = p("x^2 - 1", &x);
        let sq = q.pow(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = rng.gen_range(-3.0..3.0);
            let a = q.eval(&[t]).unwrap();
            let b = sq.eval(&[t]).unwrap();
            assert!((a * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn mul_examples() {
        let v = xy();
        assert_eq!(&p("x1 + x2", &v) * &p("x1 - x2", &v), p("x1^2 - x2^2", &v));
        let q = p("3*x1^2 - x2 + 7", &v);
        assert_eq!(&q * &Polynomial::constant(2, 1.0), q);
        assert!(matches!(q.checked_mul(&Polynomial::zero(3)), Err(Error::VariableMismatch { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_poly(&mut rng, 2, 3, false);
            let b = random_poly(&mut rng, 2, 3, false);
            let ab = &a * &b;
            let pt = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let lhs = ab.eval(&pt).unwrap();
            let rhs = a.eval(&pt).unwrap() * b.eval(&pt).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            assert!(ab.degree() <= a.degree() + b.degree());
        }
    }

    #[test]
    fn grad_examples() {
        let v = xy();
        let g = p("x1^2 + x2^2", &v).grad(&[0, 1]);
        assert_eq!(g, vec![p("2*x1", &v), p("2*x2", &v)]);
        let g0 = Polynomial::constant(2, 4.0).grad(&[0, 1]);
        assert!(g0.iter().all(Polynomial::is_zero));
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..50 {
            let q = random_poly(&mut rng, 2, 4, false);
            let g = q.grad(&[0, 1]);
            let pt = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            for i in 0..2 {
                let mut a = pt;
                let mut b = pt;
                a[i] += h;
                b[i] -= h;
                let fd = (q.eval(&a).unwrap() - q.eval(&b).unwrap()) / (2.0 * h);
                let exact = g[i].eval(&pt).unwrap();
                assert!((fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()), "{fd} vs {exact}");
            }
        }
    }

    #[test]
    fn subst_shifted_controller() {
        let x = xy();
        let xe = VarSet::state_and_error(2);
        let k = p("-x1^3 - 8*x2", &x);
        let images: Vec<Polynomial> = (0..2)
            .map(|i| &Polynomial::var(4, i) + &Polynomial::var(4, i + 2))
            .collect();
        let shifted = k.subst(&images).unwrap();
        assert_eq!(shifted, p("-(x1 + e1)^3 - 8*(x2 + e2)", &xe));
        assert_eq!(shifted.num_terms(), 6);

        let ident: Vec<Polynomial> = (0..2).map(|i| Polynomial::var(2, i)).collect();
        assert_eq!(k.subst(&ident).unwrap(), k);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let pt: [f64; 4] = core::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let a = shifted.eval(&pt).unwrap();
            let b = k.eval(&[pt[0] + pt[2], pt[1] + pt[3]]).unwrap();
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn parse_and_render() {
        let v = xy();
        let q = p("-1.3188*x1^3 - 4.1114*x1^2*x2 + 0.5", &v);
        assert_eq!(q.display(&v).to_string(), "-1.3188*x1^3 - 4.1114*x1^2*x2 + 0.5");
        assert_eq!(p(&q.display(&v).to_string(), &v), q);
        assert_eq!(p("2e-3*x1", &v).coeff(&Monomial::var(2, 0)), 2e-3);
        assert!(matches!(Polynomial::parse("x1 + y", &v), Err(Error::Parse { pos: 5, .. })));
        assert!(Polynomial::parse("x1 +", &v).is_err());
        assert!(Polynomial::parse("(x1", &v).is_err());
        assert!(p("x1 - x1", &v).is_zero());
    }

    #[test]
    fn embed_restrict_roundtrip() {
        let v = xy();
        let q = p("x1^2*x2 - 3", &v);
        let big = q.embed(4, 0).unwrap();
        assert_eq!(big.eval(&[1.0, 2.0, 9.0, 9.0]).unwrap(), q.eval(&[1.0, 2.0]).unwrap());
        assert_eq!(big.restrict(2, 0).unwrap(), q);
        assert!(Polynomial::var(4, 3).restrict(2, 0).is_err());
    }

    #[test]
    fn poly_matrix_symmetry() {
        let v = xy();
        let m = PolyMatrix::from_rows(vec![
            vec![p("1", &v), p("x1", &v)],
            vec![p("x1", &v), p("x1^2", &v)],
        ])
        .unwrap();
        assert!(m.is_symmetric());
        assert_eq!(m.transpose(), m);
        let e = m.eval(&[2.0, 0.0]).unwrap();
        assert_eq!(e[(1, 1)], 4.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_poly() -> impl Strategy<Value = Polynomial> {
            proptest::collection::vec(((0u32..3, 0u32..3), -4i32..=4), 0..6).prop_map(|ts| {
                Polynomial::from_terms(2, ts.into_iter().map(|((a, b), c)| (vec![a, b], c as f64))).unwrap()
            })
        }

        proptest! {
            #[test]
            fn ring_axioms(a in small_poly(), b in small_poly(), c in small_poly()) {
                prop_assert_eq!(&(&a * &b) * &c, &a * &(&b * &c));
                prop_assert_eq!(&a * &b, &b * &a);
                prop_assert_eq!(&a + &b, &b + &a);
                prop_assert_eq!(&a * &(&b + &c), &(&a * &b) + &(&a * &c));
                let zero_free = |q: &Polynomial| q.terms().all(|(_, v)| v.abs() >= COEFF_EPS);
                prop_assert!(zero_free(&(&a * &b)) && zero_free(&(&a - &a)));
            }

            #[test]
            fn eval_is_homomorphism(a in small_poly(), b in small_poly(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
                let pt = [x, y];
                let (ea, eb) = (a.eval(&pt).unwrap(), b.eval(&pt).unwrap());
                let s = (&a + &b).eval(&pt).unwrap();
                let m = (&a * &b).eval(&pt).unwrap();
                prop_assert!((s - (ea + eb)).abs() <= 1e-12 * (1.0 + s.abs()));
                prop_assert!((m - ea * eb).abs() <= 1e-12 * (1.0 + m.abs()));
            }
        }
    }
}
