//! Binary segmentation metrics: IoU, 95th-percentile Hausdorff distance,
//! false-positive rate (over background) and false-negative rate (over foreground).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
    /// Physical size of a pixel as `(row, col)`.
    spacing: (f64, f64),
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask of {h}×{w} needs {} pixels, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(BinaryMask {
            h,
            w,
            data,
            spacing: (1.0, 1.0),
        })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![false; h * w],
            spacing: (1.0, 1.0),
        }
    }

    pub fn with_spacing(mut self, row: f64, col: f64) -> Self {
        self.spacing = (row, col);
        self
    }

    /// Foreground wherever the tensor (any shape with `h·w` elements) is nonzero.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, t.data().iter().map(|&v| v != T::zero()).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / self.w, i % self.w))
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Shape(format!(
                "mask shapes differ: {}×{} vs {}×{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// `prob > threshold`, strictly; probabilities must lie in `[0, 1]`.
pub fn binarize<T: Scalar>(prob: &[T], h: usize, w: usize, threshold: f64) -> Result<BinaryMask> {
    let t = T::from_f64_lossy(threshold);
    if let Some(bad) = prob.iter().find(|&&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Value(format!("probability {bad} is outside [0, 1]")));
    }
    BinaryMask::new(h, w, prob.iter().map(|&p| p > t).collect())
}

/// `|pred ∩ gt| / |pred ∪ gt|`, with both-empty defined as 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `(FP / (FP + TN), FN / (FN + TP))`; `None` where the denominator is empty.
pub fn fp_fn_rates(pred: &BinaryMask, gt: &BinaryMask) -> Result<(Option<f64>, Option<f64>)> {
    pred.check_same(gt)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok((rate(fp, fp + tn), rate(fn_, fn_ + tp)))
}

/// Exact squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `mask` (separable lower-envelope transform). Empty masks give `inf`.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.h, mask.w);
    let (sy, sx) = mask.spacing;
    let mut grid: Vec<f64> = mask
        .data
        .iter()
        .map(|&v| if v { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for r in 0..h {
        line.clear();
        line.extend_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&line, sx, &mut out);
        grid[r * w..(r + 1) * w].copy_from_slice(&out);
    }
    for c in 0..w {
        line.clear();
        line.extend((0..h).map(|r| grid[r * w + c]));
        edt_1d(&line, sy, &mut out);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    grid
}

/// 1-D squared distance transform of sampled function `f` with sample spacing `s`.
fn edt_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    let pos = |q: usize| q as f64 * s;
    // parabola vertices and the boundaries between their regions
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let inter = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                        / (2.0 * (pos(q) - pos(p)));
                    if inter <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(inter);
                        break;
                    }
                }
            }
        }
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Linear-interpolated percentile (`0 ≤ pct ≤ 100`) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

fn directed_p95(from: &BinaryMask, to_dist2: &[f64]) -> f64 {
    let mut d: Vec<f64> = from
        .data
        .iter()
        .zip(to_dist2)
        .filter(|(&v, _)| v)
        .map(|(_, &d2)| d2.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    percentile_sorted(&d, 95.0)
}

/// Symmetric 95th-percentile Hausdorff distance over foreground pixel centers.
/// `None` when either mask is empty.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.check_same(gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Ok(None);
    }
    let to_gt = squared_distance_transform(gt);
    let to_pred = squared_distance_transform(pred);
    Ok(Some(
        directed_p95(pred, &to_gt).max(directed_p95(gt, &to_pred)),
    ))
}

/// Metrics for one case; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub fp_rate: Option<f64>,
    pub fn_rate: Option<f64>,
}

pub fn case_metrics(case_id: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask) -> Result<CaseMetrics> {
    let (fp_rate, fn_rate) = fp_fn_rates(pred, gt)?;
    Ok(CaseMetrics {
        case_id: case_id.into(),
        iou: iou(pred, gt)?,
        hd95: hd95(pred, gt)?,
        fp_rate,
        fn_rate,
    })
}

/// Mean ± sample standard deviation over defined values, with the count of exclusions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub excluded: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => excluded += 1,
            }
        }
        let n = defined.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / n as f64
        };
        let std = if n < 2 {
            0.0
        } else {
            (defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary {
            mean,
            std,
            n,
            excluded,
        }
    }

    fn csv_field(&self) -> String {
        if self.n == 0 {
            String::new()
        } else {
            format!("{}±{}", self.mean, self.std)
        }
    }
}

/// Per-case metrics plus aggregates for one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub iou: Summary,
    pub hd95: Summary,
    pub fp_rate: Summary,
    pub fn_rate: Summary,
    pub param_count: usize,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>, param_count: usize) -> Self {
        MetricsReport {
            iou: Summary::of(cases.iter().map(|c| Some(c.iou))),
            hd95: Summary::of(cases.iter().map(|c| c.hd95)),
            fp_rate: Summary::of(cases.iter().map(|c| c.fp_rate)),
            fn_rate: Summary::of(cases.iter().map(|c| c.fn_rate)),
            cases,
            param_count,
        }
    }

    /// `case_id,iou,hd95,fp_rate,fn_rate` rows plus a final `mean±std` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("case_id,iou,hd95,fp_rate,fn_rate\n");
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.case_id,
                c.iou,
                opt(c.hd95),
                opt(c.fp_rate),
                opt(c.fn_rate)
            );
        }
        let _ = writeln!(
            s,
            "mean±std,{},{},{},{}",
            self.iou.csv_field(),
            self.hd95.csv_field(),
            self.fp_rate.csv_field(),
            self.fn_rate.csv_field()
        );
        s
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "cases     {}", self.cases.len())?;
        writeln!(f, "params    {}", self.param_count)?;
        writeln!(f, "IoU       {:.4} ± {:.4}", self.iou.mean, self.iou.std)?;
        writeln!(
            f,
            "HD95      {:.4} ± {:.4} ({} undefined)",
            self.hd95.mean, self.hd95.std, self.hd95.excluded
        )?;
        writeln!(f, "FP rate   {:.6} ± {:.6}", self.fp_rate.mean, self.fp_rate.std)?;
        write!(f, "FN rate   {:.4} ± {:.4}", self.fn_rate.mean, self.fn_rate.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::new(h, w, rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect()).unwrap()
    }

    #[test]
    fn binarize_is_strict() {
        assert!(binarize(&[0.5f32; 4], 2, 2, 0.5).unwrap().is_empty());
        assert_eq!(binarize(&[0.51f32; 4], 2, 2, 0.5).unwrap().count(), 4);
        assert!(binarize(&[1.5f32], 1, 1, 0.5).is_err());
    }

    #[test]
    fn iou_cases() {
        let full = mask(&["####", "####", "####", "####"]);
        let left = mask(&["##..", "##..", "##..", "##.."]);
        let right = mask(&["..##", "..##", "..##", "..##"]);
        assert_eq!(iou(&full, &full).unwrap(), 1.0);
        assert_eq!(iou(&left, &right).unwrap(), 0.0);
        assert_eq!(iou(&left, &full).unwrap(), 0.5);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(iou(&e, &BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn hd95_single_pixels() {
        let mut a = BinaryMask::empty(5, 5);
        a.set(0, 0, true);
        let mut b = BinaryMask::empty(5, 5);
        b.set(3, 4, true);
        assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hd95(&a, &a).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &BinaryMask::empty(5, 5)).unwrap(), None);
    }

    #[test]
    fn anisotropic_spacing_scales_distances() {
        let mut a = BinaryMask::empty(4, 4);
        a.set(0, 0, true);
        let mut b = BinaryMask::empty(4, 4);
        b.set(3, 0, true);
        let a = a.with_spacing(2.0, 1.0);
        let b = b.with_spacing(2.0, 1.0);
        assert_eq!(hd95(&a, &b).unwrap(), Some(6.0));
    }

    #[test]
    fn rates() {
        let gt = mask(&["##..", "##..", "....", "...."]);
        assert_eq!(fp_fn_rates(&gt, &gt).unwrap(), (Some(0.0), Some(0.0)));
        let inv = BinaryMask::new(4, 4, gt.data().iter().map(|v| !v).collect()).unwrap();
        assert_eq!(fp_fn_rates(&inv, &gt).unwrap(), (Some(1.0), Some(1.0)));
        let half = mask(&["##..", "....", "....", "...."]);
        assert_eq!(fp_fn_rates(&half, &gt).unwrap(), (Some(0.0), Some(0.5)));
        let all = mask(&["####", "####", "####", "####"]);
        assert_eq!(fp_fn_rates(&all, &all).unwrap(), (None, Some(0.0)));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 50.0), 2.0);
        assert!((percentile_sorted(&v, 95.0) - 3.8).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn csv_serializes_undefined_as_empty() {
        let cases = vec![
            CaseMetrics { case_id: "a".into(), iou: 1.0, hd95: None, fp_rate: Some(0.0), fn_rate: None },
            CaseMetrics { case_id: "b".into(), iou: 0.5, hd95: Some(2.0), fp_rate: Some(0.25), fn_rate: Some(0.5) },
        ];
        let r = MetricsReport::from_cases(cases, 10);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "case_id,iou,hd95,fp_rate,fn_rate");
        assert_eq!(lines[1], "a,1,,0,");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean±std,0.75±"));
        assert_eq!(r.hd95.excluded, 1);
    }
}
