//! Input spaces, Latin hypercube designs with maximin improvement, feasibility
//! filtering and line-segment scans.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box of admissible inputs in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpace {
    names: Vec<String>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl InputSpace {
    pub fn new(names: Vec<String>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if names.is_empty() || names.len() != lo.len() || lo.len() != hi.len() {
            return Err(Error::Input(format!(
                "space needs matching nonempty names/min/max (got {}/{}/{})",
                names.len(),
                lo.len(),
                hi.len()
            )));
        }
        for (k, name) in names.iter().enumerate() {
            if !(lo[k].is_finite() && hi[k].is_finite() && lo[k] < hi[k]) {
                return Err(Error::Input(format!(
                    "parameter `{name}`: need finite min < max, got [{}, {}]",
                    lo[k], hi[k]
                )));
            }
        }
        Ok(Self { names, lo, hi })
    }

    /// The 11-parameter fuel-pin study: cycle length, plutonium content, hole
    /// diameter, external clad diameter, fuel gap, clad thickness, pin height,
    /// average pin power, axial form factor, power shift, volume of expansion.
    pub fn fuel_pin() -> Self {
        let names = [
            "cycle_length",
            "plutonium_content",
            "hole_diameter",
            "external_clad_diameter",
            "fuel_gap",
            "clad_thickness",
            "pin_height",
            "average_pin_power",
            "axial_form_factor",
            "power_shift",
            "volume_of_expansion",
        ];
        let lo = vec![360.0, 10.0, 0.125, 6.2, 0.1, 0.5, 60.0, 150.0, 1.0, 0.8, 32.0];
        let hi = vec![440.0, 30.0, 3.0, 12.8, 0.2, 0.6, 160.0, 440.0, 1.6, 1.2, 94.0];
        Self::new(names.iter().map(|s| s.to_string()).collect(), lo, hi).expect("valid default space")
    }

    pub fn unit(d: usize) -> Self {
        Self::new((1..=d).map(|k| format!("x{k}")).collect(), vec![0.0; d], vec![1.0; d])
            .expect("valid unit space")
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn normalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(k, v)| (v - self.lo[k]) / (self.hi[k] - self.lo[k]))
            .collect()
    }

    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(k, v)| self.lo[k] + v * (self.hi[k] - self.lo[k]))
            .collect()
    }

    pub fn normalize_matrix(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(rows.nrows(), rows.ncols(), |i, k| {
            (rows[(i, k)] - self.lo[k]) / (self.hi[k] - self.lo[k])
        })
    }

    pub fn denormalize_matrix(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(u.nrows(), u.ncols(), |i, k| self.lo[k] + u[(i, k)] * (self.hi[k] - self.lo[k]))
    }

    /// Whether a physical row lies inside the box, with a small relative slack.
    pub fn contains(&self, row: &[f64]) -> bool {
        row.len() == self.dim()
            && row.iter().enumerate().all(|(k, v)| {
                let slack = 1e-9 * (self.hi[k] - self.lo[k]);
                v.is_finite() && *v >= self.lo[k] - slack && *v <= self.hi[k] + slack
            })
    }

    /// Read a `name,min,max` CSV.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |want: &str| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(want))
                .ok_or_else(|| Error::Input(format!("space file is missing the `{want}` column")))
        };
        let (cn, clo, chi) = (col("name")?, col("min")?, col("max")?);
        let (mut names, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let name = rec.get(cn).unwrap_or("").to_string();
            let parse = |c: usize, field: &str| -> Result<f64> {
                rec.get(c).unwrap_or("").parse::<f64>().map_err(|_| {
                    Error::Input(format!(
                        "space file row {}: field `{field}` of `{name}` is not a number",
                        line + 1
                    ))
                })
            };
            lo.push(parse(clo, "min")?);
            hi.push(parse(chi, "max")?);
            names.push(name);
        }
        Self::new(names, lo, hi)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["name", "min", "max"])?;
        for k in 0..self.dim() {
            w.write_record([self.names[k].clone(), fmt(self.lo[k]), fmt(self.hi[k])])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest text that round-trips the value.
pub(crate) fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// A set of input points, kept both in physical units and normalized to `[0,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    rows: DMatrix<f64>,
    normalized: DMatrix<f64>,
    seed: Option<u64>,
    /// Position along the segment for scan designs.
    position: Option<Vec<f64>>,
}

impl Design {
    pub fn from_normalized(space: &InputSpace, normalized: DMatrix<f64>, seed: Option<u64>) -> Self {
        Self { rows: space.denormalize_matrix(&normalized), normalized, seed, position: None }
    }

    pub fn from_rows(space: &InputSpace, rows: DMatrix<f64>) -> Result<Self> {
        if rows.ncols() != space.dim() {
            return Err(Error::Input(format!(
                "design has {} columns but the space has {}",
                rows.ncols(),
                space.dim()
            )));
        }
        for i in 0..rows.nrows() {
            let r: Vec<f64> = rows.row(i).iter().copied().collect();
            if !space.contains(&r) {
                return Err(Error::Input(format!("design row {} lies outside the input space", i + 1)));
            }
        }
        Ok(Self { normalized: space.normalize_matrix(&rows), rows, seed: None, position: None })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn normalized(&self) -> &DMatrix<f64> {
        &self.normalized
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn position(&self) -> Option<&[f64]> {
        self.position.as_deref()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }

    fn select(&self, keep: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(keep.len(), m.ncols(), |i, k| m[(keep[i], k)]);
        Self {
            rows: pick(&self.rows),
            normalized: pick(&self.normalized),
            seed: self.seed,
            position: self.position.as_ref().map(|p| keep.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Write a CSV with the parameter names as header. Scan designs get a leading `t` column.
    pub fn write_csv<W: Write>(&self, space: &InputSpace, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = Vec::new();
        if self.position.is_some() {
            header.push("t".into());
        }
        header.extend(space.names().iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = Vec::new();
            if let Some(p) = &self.position {
                rec.push(fmt(p[i]));
            }
            rec.extend(self.rows.row(i).iter().map(|v| fmt(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a design CSV; columns are matched to the space by name, and an
    /// optional `index` or `t` column is accepted.
    pub fn read_csv<R: Read>(space: &InputSpace, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols: Vec<usize> = space
            .names()
            .iter()
            .map(|n| {
                headers
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| Error::Input(format!("design file is missing column `{n}`")))
            })
            .collect::<Result<_>>()?;
        let tcol = headers.iter().position(|h| h == "t");
        let mut data = Vec::new();
        let mut pos = Vec::new();
        let mut n = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (k, &c) in cols.iter().enumerate() {
                let v = rec.get(c).unwrap_or("").parse::<f64>().map_err(|_| {
                    Error::Input(format!(
                        "design row {}: field `{}` is not a number",
                        line + 1,
                        space.names()[k]
                    ))
                })?;
                data.push(v);
            }
            if let Some(c) = tcol {
                pos.push(rec.get(c).unwrap_or("").parse::<f64>().map_err(|_| {
                    Error::Input(format!("design row {}: field `t` is not a number", line + 1))
                })?);
            }
            n += 1;
        }
        let rows = DMatrix::from_row_slice(n, space.dim(), &data);
        let mut design = Self::from_rows(space, rows)?;
        if tcol.is_some() {
            design.position = Some(pos);
        }
        Ok(design)
    }
}

fn sq_dist(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..m.ncols()).map(|k| (m[(i, k)] - m[(j, k)]).powi(2)).sum()
}

/// Smallest pairwise Euclidean distance between rows.
pub fn min_distance(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            best = best.min(sq_dist(m, i, j));
        }
    }
    best.sqrt()
}

/// Random Latin hypercube in `[0,1]^d`: one point per stratum per column,
/// uniformly placed within the stratum.
pub fn latin_hypercube(n: usize, d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, d);
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..d {
        perm.shuffle(rng);
        for i in 0..n {
            m[(i, k)] = (perm[i] as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    m
}

/// Improve the minimum pairwise distance of a Latin hypercube by swapping two
/// entries of one column, keeping a swap only if the minimum distance grows.
///
/// Only swaps touching a row of the closest pair can help, so the first row is
/// drawn from that pair.
pub fn maximin_improve(m: &mut DMatrix<f64>, iterations: usize, rng: &mut impl Rng) {
    let n = m.nrows();
    let d = m.ncols();
    if n < 3 || d == 0 {
        return;
    }
    let mut dist = DMatrix::from_fn(n, n, |i, j| if i == j { f64::INFINITY } else { sq_dist(m, i, j) });
    let closest = |dist: &DMatrix<f64>| {
        let mut best = (f64::INFINITY, 0, 1);
        for i in 0..n {
            for j in i + 1..n {
                if dist[(i, j)] < best.0 {
                    best = (dist[(i, j)], i, j);
                }
            }
        }
        best
    };
    let (mut current, mut p, mut q) = closest(&dist);
    let mut row_i = vec![0.0; n];
    let mut row_j = vec![0.0; n];
    for _ in 0..iterations {
        let i = if rng.gen::<bool>() { p } else { q };
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let k = rng.gen_range(0..d);
        let (vi, vj) = (m[(i, k)], m[(j, k)]);
        let mut local = f64::INFINITY;
        for r in 0..n {
            if r == i || r == j {
                continue;
            }
            let x = m[(r, k)];
            row_i[r] = dist[(i, r)] - (vi - x).powi(2) + (vj - x).powi(2);
            row_j[r] = dist[(j, r)] - (vj - x).powi(2) + (vi - x).powi(2);
            local = local.min(row_i[r]).min(row_j[r]);
        }
        local = local.min(dist[(i, j)]);
        if local <= current {
            continue;
        }
        let mut rest = f64::INFINITY;
        let mut rest_pair = (0, 0);
        for a in 0..n {
            if a == i || a == j {
                continue;
            }
            for b in a + 1..n {
                if b != i && b != j && dist[(a, b)] < rest {
                    rest = dist[(a, b)];
                    rest_pair = (a, b);
                }
            }
        }
        if rest.min(local) <= current {
            continue;
        }
        m[(i, k)] = vj;
        m[(j, k)] = vi;
        for r in 0..n {
            if r == i || r == j {
                continue;
            }
            dist[(i, r)] = row_i[r];
            dist[(r, i)] = row_i[r];
            dist[(j, r)] = row_j[r];
            dist[(r, j)] = row_j[r];
        }
        (current, p, q) = if rest <= local {
            (rest, rest_pair.0, rest_pair.1)
        } else {
            let mut best = (dist[(i, j)], i.min(j), i.max(j));
            for r in 0..n {
                if r != i && r != j {
                    if row_i[r] < best.0 {
                        best = (row_i[r], i.min(r), i.max(r));
                    }
                    if row_j[r] < best.0 {
                        best = (row_j[r], j.min(r), j.max(r));
                    }
                }
            }
            best
        };
    }
}

/// Latin hypercube of `n` points improved for `sweeps · n` swap proposals.
pub fn lhs_maximin(space: &InputSpace, n: usize, seed: u64, sweeps: usize) -> Result<Design> {
    if n < 2 {
        return Err(Error::Domain(format!("a design needs at least 2 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = latin_hypercube(n, space.dim(), &mut rng);
    maximin_improve(&mut m, sweeps * n, &mut rng);
    Ok(Design::from_normalized(space, m, Some(seed)))
}

/// Keep the rows satisfying `predicate` (evaluated on physical units); also
/// returns how many rows were removed.
pub fn feasibility_filter(design: &Design, predicate: impl Fn(&[f64]) -> bool) -> (Design, usize) {
    let keep: Vec<usize> = (0..design.len()).filter(|&i| predicate(&design.row(i))).collect();
    let removed = design.len() - keep.len();
    if keep.is_empty() && !design.is_empty() {
        log::warn!("feasibility filter removed all {} rows", design.len());
    }
    (design.select(&keep), removed)
}

/// Stand-in geometry check for the fuel-pin space: the external clad diameter
/// must exceed the hole diameter plus twice the clad thickness and twice the gap.
pub fn pin_geometry_feasible(row: &[f64]) -> bool {
    row[3] > row[2] + 2.0 * row[5] + 2.0 * row[4]
}

/// `count` equally spaced points from `a` to `b` (both normalized), each tagged
/// with its position `t ∈ [0, 1]`.
pub fn segment_scan(space: &InputSpace, a: &[f64], b: &[f64], count: usize) -> Result<Design> {
    let d = space.dim();
    if a.len() != d || b.len() != d {
        return Err(Error::Input(format!("scan endpoints must have dimension {d}")));
    }
    if count < 2 {
        return Err(Error::Domain(format!("a scan needs at least 2 points, got {count}")));
    }
    if a.iter().chain(b).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("scan endpoints must lie in [0,1]^d".into()));
    }
    if a == b {
        return Err(Error::Input("scan endpoints coincide".into()));
    }
    let t: Vec<f64> = (0..count).map(|i| i as f64 / (count - 1) as f64).collect();
    let m = DMatrix::from_fn(count, d, |i, k| {
        if i == count - 1 {
            b[k]
        } else {
            a[k] + t[i] * (b[k] - a[k])
        }
    });
    let mut design = Design::from_normalized(space, m, None);
    design.position = Some(t);
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_latin(m: &DMatrix<f64>) {
        let n = m.nrows();
        for k in 0..m.ncols() {
            let mut col: Vec<f64> = m.column(k).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            for (i, v) in col.iter().enumerate() {
                assert!(*v >= i as f64 / n as f64 && *v < (i + 1) as f64 / n as f64, "col {k}: {v} not in stratum {i}");
            }
        }
    }

    #[test]
    fn two_points_one_dimension() {
        let d = lhs_maximin(&InputSpace::unit(1), 2, 3, 10).unwrap();
        let (a, b) = (d.normalized()[(0, 0)], d.normalized()[(1, 0)]);
        assert!((a < 0.5) != (b < 0.5));
    }

    #[test]
    fn latin_property_after_maximin() {
        let space = InputSpace::fuel_pin();
        for seed in 0..5 {
            let d = lhs_maximin(&space, 40, seed, 20).unwrap();
            assert_latin(d.normalized());
        }
    }

    #[test]
    fn maximin_never_worse() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = latin_hypercube(30, 4, &mut rng);
            let before = min_distance(&m);
            maximin_improve(&mut m, 600, &mut rng);
            let after = min_distance(&m);
            assert!(after >= before);
            assert_latin(&m);
        }
    }

    #[test]
    fn maximin_tracks_true_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = latin_hypercube(25, 3, &mut rng);
        let before = min_distance(&m);
        maximin_improve(&mut m, 2000, &mut rng);
        assert!(min_distance(&m) > before);
    }

    #[test]
    fn design_is_reproducible() {
        let s = InputSpace::fuel_pin();
        assert_eq!(lhs_maximin(&s, 20, 5, 5).unwrap(), lhs_maximin(&s, 20, 5, 5).unwrap());
        assert!(lhs_maximin(&s, 1, 5, 5).is_err());
    }

    #[test]
    fn filter_identity_and_empty() {
        let s = InputSpace::fuel_pin();
        let d = lhs_maximin(&s, 30, 1, 2).unwrap();
        let (same, removed) = feasibility_filter(&d, |_| true);
        assert_eq!(same, d);
        assert_eq!(removed, 0);
        let (none, removed) = feasibility_filter(&d, |_| false);
        assert!(none.is_empty());
        assert_eq!(removed, 30);
    }

    #[test]
    fn geometry_filter_removes_only_violators() {
        // Widen the hole so that some pins become infeasible.
        let mut s = InputSpace::fuel_pin();
        s.hi[2] = 9.0;
        let d = lhs_maximin(&s, 200, 2, 2).unwrap();
        let (kept, removed) = feasibility_filter(&d, pin_geometry_feasible);
        assert!(removed > 0 && kept.len() + removed == 200);
        for i in 0..kept.len() {
            assert!(pin_geometry_feasible(&kept.row(i)));
        }
        let kept_rows: Vec<Vec<f64>> = (0..kept.len()).map(|i| kept.row(i)).collect();
        for i in 0..d.len() {
            let r = d.row(i);
            if !kept_rows.contains(&r) {
                assert!(!pin_geometry_feasible(&r));
            }
        }
    }

    #[test]
    fn scans() {
        let s = InputSpace::unit(3);
        let two = segment_scan(&s, &[0.0, 0.2, 0.4], &[1.0, 0.2, 0.0], 2).unwrap();
        assert_eq!(two.row(0), vec![0.0, 0.2, 0.4]);
        assert_eq!(two.row(1), vec![1.0, 0.2, 0.0]);
        let three = segment_scan(&s, &[0.0, 0.2, 0.4], &[1.0, 0.2, 0.0], 3).unwrap();
        assert_eq!(three.row(1), vec![0.5, 0.2, 0.2]);
        let (a, b) = ([0.1, 0.3, 0.9], [0.8, 0.6, 0.05]);
        let scan = segment_scan(&s, &a, &b, 97).unwrap();
        let len = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        for i in 1..97 {
            let step = sq_dist(scan.normalized(), i, i - 1).sqrt();
            assert!((step - len / 96.0).abs() < 1e-12);
        }
        assert_eq!(scan.position().unwrap()[48], 0.5);
        assert!(segment_scan(&s, &a, &a, 5).is_err());
        assert!(segment_scan(&s, &a, &b, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = InputSpace::fuel_pin();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(InputSpace::read_csv(buf.as_slice()).unwrap(), s);

        let d = lhs_maximin(&s, 10, 4, 2).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&s, &mut buf).unwrap();
        let back = Design::read_csv(&s, buf.as_slice()).unwrap();
        assert_eq!(back.rows(), d.rows());

        let scan = segment_scan(&s, &[0.2; 11], &[0.7; 11], 5).unwrap();
        let mut buf = Vec::new();
        scan.write_csv(&s, &mut buf).unwrap();
        assert_eq!(Design::read_csv(&s, buf.as_slice()).unwrap().position(), scan.position());
    }

    #[test]
    fn malformed_space_names_field() {
        let bad = "name,min,max\na,0,1\nb,zero,1\n";
        let msg = InputSpace::read_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("`min`") && msg.contains("`b`"), "{msg}");
        let inverted = "name,min,max\na,2,1\n";
        assert!(InputSpace::read_csv(inverted.as_bytes()).is_err());
        assert!(InputSpace::read_csv("name,lo,max\na,0,1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn normalize_round_trip(u in proptest::collection::vec(0.0f64..1.0, 11)) {
            let s = InputSpace::fuel_pin();
            let x = s.denormalize(&u);
            let back = s.denormalize(&s.normalize(&x));
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn marginal_kolmogorov_distance(n in 2usize..60, seed in 0u64..1000) {
            let d = lhs_maximin(&InputSpace::unit(2), n, seed, 3).unwrap();
            for k in 0..2 {
                let mut col: Vec<f64> = d.normalized().column(k).iter().copied().collect();
                col.sort_by(f64::total_cmp);
                let ks = col
                    .iter()
                    .enumerate()
                    .map(|(i, v)| ((i + 1) as f64 / n as f64 - v).max(v - i as f64 / n as f64))
                    .fold(0.0, f64::max);
                prop_assert!(ks < 1.0 / n as f64 + 1e-12);
            }
        }
    }
}
