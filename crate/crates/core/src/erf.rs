//! Effective receptive field measurement.
//!
//! A unit gradient is placed on channel 0 of the center output pixel and
//! propagated back to the input; the absolute input gradient, summed over
//! channels and averaged over random standard-normal inputs, is the ERF map.
//! Its size is summarised by the Chebyshev radius holding a fixed fraction of
//! the total gradient mass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BoundParams, ConvLayer, ParamStore};
use crate::model::Network;
use crate::tensor::{Scalar, Tensor};

/// Two-sigma mass fraction of a Gaussian.
pub const DEFAULT_MASS_FRACTION: f64 = 0.9545;

/// Samples pushed through the network per backward pass.
const SAMPLE_CHUNK: usize = 8;

/// Anything whose input gradient can be probed.
pub trait ErfProbe<T: Scalar> {
    fn in_channels(&self) -> usize;
    /// Output `[B, C_out, H', W']` with the same spatial extent as the input.
    fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var>;
    /// Theoretical receptive-field side length, when known.
    fn rf_extent(&self) -> Option<usize>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabArch {
    Plain,
    Dilated,
}

/// A stack of 3×3 convs with ReLU between them and no normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabSpec {
    pub depth: usize,
    pub dilation: usize,
    /// `h ← h + relu(conv(h))` after the first layer instead of `h ← relu(conv(h))`.
    pub residual: bool,
    pub width: usize,
    pub in_channels: usize,
}

impl LabSpec {
    pub fn plain(depth: usize) -> Self {
        LabSpec {
            depth,
            dilation: 1,
            residual: false,
            width: 16,
            in_channels: 4,
        }
    }

    pub fn dilated(depth: usize, dilation: usize) -> Self {
        LabSpec {
            dilation,
            ..Self::plain(depth)
        }
    }

    pub fn residual(depth: usize) -> Self {
        LabSpec {
            residual: true,
            ..Self::plain(depth)
        }
    }

    pub fn arch(&self) -> LabArch {
        if self.dilation > 1 {
            LabArch::Dilated
        } else {
            LabArch::Plain
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.arch(), self.residual) {
            (LabArch::Plain, false) => "plain",
            (LabArch::Plain, true) => "residual",
            (LabArch::Dilated, false) => "dilated",
            (LabArch::Dilated, true) => "dilated-residual",
        }
    }

    /// `1 + depth · dilation · (k − 1)` for 3×3 kernels.
    pub fn rf_extent(&self) -> usize {
        1 + self.depth * self.dilation * 2
    }

    /// Odd input side with a margin around the receptive field.
    pub fn default_input_extent(&self) -> usize {
        self.rf_extent() + 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dilation == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(Error::Config("lab depth, dilation and widths must be ≥ 1".into()));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<ConvLayer> {
        (0..self.depth)
            .map(|i| {
                let cin = if i == 0 { self.in_channels } else { self.width };
                ConvLayer::new(
                    format!("lab.layer{i}.conv"),
                    ConvSpec::same(cin, self.width, 3).dilated(self.dilation),
                    false,
                )
            })
            .collect()
    }
}

/// A [`LabSpec`] with initialised weights.
#[derive(Debug, Clone)]
pub struct LabNet<T> {
    pub spec: LabSpec,
    layers: Vec<ConvLayer>,
    params: ParamStore<T>,
}

impl<T: Scalar> LabNet<T> {
    pub fn new(spec: LabSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        let defs: Vec<_> = layers.iter().flat_map(|l| l.param_defs()).collect();
        Ok(LabNet {
            spec,
            layers,
            params: ParamStore::init(&defs, seed)?,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn run(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let relu = i != last;
            if self.spec.residual && i > 0 {
                let branch = layer.forward(tape, bound, h, relu)?;
                h = tape.add(h, branch)?;
            } else {
                h = layer.forward(tape, bound, h, relu)?;
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> ErfProbe<T> for LabNet<T> {
    fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let bound = self.params.bind(tape, false);
        self.run(tape, &bound, input)
    }

    fn rf_extent(&self) -> Option<usize> {
        Some(self.spec.rf_extent())
    }
}

/// A segmentation network with fixed parameters, probed at its logits.
pub struct NetworkProbe<'a, T> {
    pub network: &'a Network,
    pub params: &'a ParamStore<T>,
}

impl<T: Scalar> ErfProbe<T> for NetworkProbe<'_, T> {
    fn in_channels(&self) -> usize {
        self.network.spec().in_channels
    }

    fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let bound = self.params.bind(tape, false);
        Ok(self.network.forward(tape, &bound, input)?.logits)
    }

    fn rf_extent(&self) -> Option<usize> {
        None
    }
}

/// Mean absolute input gradient of the center output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub h: usize,
    pub w: usize,
    pub grid: Vec<f64>,
    pub center: (usize, usize),
    pub n_samples: usize,
    pub seed: u64,
}

impl ErfMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.grid[r * self.w + c]
    }

    pub fn total_mass(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// Side length of the bounding square (centered) containing all nonzero cells.
    pub fn support_extent(&self) -> usize {
        let mut reach = None;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) != 0.0 {
                    let d = chebyshev((r, c), self.center);
                    reach = Some(reach.map_or(d, |m: usize| m.max(d)));
                }
            }
        }
        reach.map_or(0, |d| 2 * d + 1)
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(vec![self.h, self.w], self.grid.clone()).expect("grid size")
    }
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Measures the ERF of `probe` on `h×w` inputs.
pub fn compute_erf<T: Scalar, P: ErfProbe<T> + ?Sized>(
    probe: &P,
    h: usize,
    w: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ErfMap> {
    if h == 0 || w == 0 || n_samples == 0 {
        return Err(Error::Value("ERF needs a non-empty input and at least one sample".into()));
    }
    let c = probe.in_channels();
    let center = (h / 2, w / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![0.0f64; h * w];
    let mut done = 0;
    while done < n_samples {
        let batch = SAMPLE_CHUNK.min(n_samples - done);
        let input = Tensor::<T>::randn(&[batch, c, h, w], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.param(input);
        let out = probe.forward(&mut tape, x)?;
        let [ob, oc, oh, ow] = tape.value(out).dims4()?;
        if oh == 0 || ow == 0 || oc == 0 {
            return Err(Error::Shape("probe produced an empty output".into()));
        }
        if (oh, ow) != (h, w) || ob != batch {
            return Err(Error::Shape(format!(
                "ERF probe must preserve spatial extent: {h}×{w} in, {oh}×{ow} out"
            )));
        }
        let mut seed_grad = Tensor::zeros(&[ob, oc, oh, ow]);
        for b in 0..ob {
            seed_grad.data_mut()[(b * oc * oh + center.0) * ow + center.1] = T::one();
        }
        let grads = tape.backward_from(out, seed_grad)?;
        let gx = grads.get(x);
        // accumulate in sample order, channel order
        for b in 0..batch {
            for ch in 0..c {
                let plane = &gx.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for (acc, &g) in grid.iter_mut().zip(plane) {
                    *acc += g.to_f64_lossy().abs();
                }
            }
        }
        done += batch;
    }
    grid.iter_mut().for_each(|v| *v /= n_samples as f64);
    Ok(ErfMap {
        h,
        w,
        grid,
        center,
        n_samples,
        seed,
    })
}

/// Smallest Chebyshev radius around the center holding at least `mass_fraction`
/// of the total mass.
pub fn erf_radius(map: &ErfMap, mass_fraction: f64) -> Result<usize> {
    let total = map.total_mass();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Value("ERF map has no mass".into()));
    }
    let max_r = [
        map.center.0,
        map.h - 1 - map.center.0,
        map.center.1,
        map.w - 1 - map.center.1,
    ]
    .into_iter()
    .max()
    .unwrap();
    let mut rings = vec![0.0f64; max_r + 1];
    for r in 0..map.h {
        for c in 0..map.w {
            rings[chebyshev((r, c), map.center)] += map.get(r, c);
        }
    }
    let target = mass_fraction * total;
    let mut acc = 0.0;
    for (radius, m) in rings.iter().enumerate() {
        acc += m;
        // relative slack absorbs summation-order rounding at exact boundaries
        if acc >= target * (1.0 - 1e-12) {
            return Ok(radius);
        }
    }
    Ok(max_r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErfReport {
    pub rf_extent: usize,
    pub erf_radius: usize,
    /// `(2·radius + 1) / rf_extent`
    pub ratio: f64,
}

pub fn erf_report(map: &ErfMap, rf_extent: usize, mass_fraction: f64) -> Result<ErfReport> {
    let r = erf_radius(map, mass_fraction)?;
    Ok(ErfReport {
        rf_extent,
        erf_radius: r,
        ratio: (2 * r + 1) as f64 / rf_extent as f64,
    })
}

/// One measured lab network.
#[derive(Debug, Clone, PartialEq)]
pub struct LabMeasurement {
    pub spec: LabSpec,
    pub seed: u64,
    pub map: ErfMap,
    pub report: ErfReport,
}

/// Builds `spec` with weights from `seed`, measures on `extent×extent` inputs
/// drawn from the same seed.
pub fn measure_lab<T: Scalar>(
    spec: &LabSpec,
    extent: usize,
    n_samples: usize,
    seed: u64,
) -> Result<LabMeasurement> {
    let net = LabNet::<T>::new(*spec, seed)?;
    let map = compute_erf(&net, extent, extent, n_samples, seed.wrapping_add(0x5EED))?;
    let report = erf_report(&map, spec.rf_extent(), DEFAULT_MASS_FRACTION)?;
    Ok(LabMeasurement {
        spec: *spec,
        seed,
        map,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErfComparison {
    pub a: Vec<LabMeasurement>,
    pub b: Vec<LabMeasurement>,
    pub mean_radius_a: f64,
    pub mean_radius_b: f64,
}

impl ErfComparison {
    /// Seeds where `a`'s radius is strictly larger than `b`'s.
    pub fn seeds_a_larger(&self) -> usize {
        self.a
            .iter()
            .zip(&self.b)
            .filter(|(x, y)| x.report.erf_radius > y.report.erf_radius)
            .count()
    }
}

/// Measures two lab architectures on identical input geometry for every seed.
pub fn compare_erf<T: Scalar>(
    a: &LabSpec,
    b: &LabSpec,
    n_samples: usize,
    seeds: &[u64],
) -> Result<ErfComparison> {
    if a.in_channels != b.in_channels {
        return Err(Error::Shape(format!(
            "compared networks take {} and {} input channels",
            a.in_channels, b.in_channels
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Value("compare_erf needs at least one seed".into()));
    }
    let extent = a.default_input_extent().max(b.default_input_extent());
    let mut ma = Vec::new();
    let mut mb = Vec::new();
    for &s in seeds {
        ma.push(measure_lab::<T>(a, extent, n_samples, s)?);
        mb.push(measure_lab::<T>(b, extent, n_samples, s)?);
    }
    let mean = |m: &[LabMeasurement]| {
        m.iter().map(|x| x.report.erf_radius as f64).sum::<f64>() / m.len() as f64
    };
    Ok(ErfComparison {
        mean_radius_a: mean(&ma),
        mean_radius_b: mean(&mb),
        a: ma,
        b: mb,
    })
}
