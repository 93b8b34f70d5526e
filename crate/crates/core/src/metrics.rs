//! Overlap, distance and confusion metrics over the nested tumour regions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{label_channel, LabelVolume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Labels 1, 2 and 4.
    WT,
    /// Labels 1 and 4.
    TC,
    /// Label 4.
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::ET, Region::WT, Region::TC];

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::WT => matches!(label, 1 | 2 | 4),
            Region::TC => matches!(label, 1 | 4),
            Region::ET => label == 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub extents: [usize; 3],
    pub region: Option<Region>,
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(extents: [usize; 3], mask: Vec<bool>) -> Result<Self> {
        if mask.len() != extents.iter().product::<usize>() {
            return Err(Error::contract(format!(
                "mask of {} voxels does not fill {extents:?}",
                mask.len()
            )));
        }
        Ok(Self {
            extents,
            region: None,
            mask,
        })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.contains(&true)
    }

    fn coords(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.extents;
        [i / (h * w), (i / w) % h, i % w]
    }
}

pub fn region_mask(labels: &LabelVolume, region: Region) -> Result<RegionMask> {
    let mut mask = Vec::with_capacity(labels.labels.len());
    for (i, &l) in labels.labels.iter().enumerate() {
        if label_channel(l).is_none() {
            return Err(Error::Data {
                index: i,
                message: format!("label {l} outside {{0,1,2,4}}"),
            });
        }
        mask.push(region.contains(l));
    }
    Ok(RegionMask {
        extents: labels.extents,
        region: Some(region),
        mask,
    })
}

fn same_grid(op: &'static str, a: &RegionMask, b: &RegionMask) -> Result<()> {
    if a.extents != b.extents {
        return Err(Error::shape(op, &a.extents, &b.extents));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(pred: &RegionMask, truth: &RegionMask) -> Result<ConfusionCounts> {
    same_grid("confusion", pred, truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.mask.iter().zip(&truth.mask) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dsc(pred: &RegionMask, truth: &RegionMask) -> Result<f64> {
    let c = confusion(pred, truth)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    })
}

/// `(tp / (tp + fn), tn / (tn + fp))`, `None` where a denominator vanishes.
pub fn sensitivity_specificity(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (ratio(c.tp, c.tp + c.fn_), ratio(c.tn, c.tn + c.fp))
}

/// Symmetric Hausdorff distance between foreground voxel centres, in the
/// units of `spacing`. `Some(0)` when both masks are empty, `None` when
/// exactly one is.
pub fn hausdorff(pred: &RegionMask, truth: &RegionMask, spacing: [f64; 3]) -> Result<Option<f64>> {
    same_grid("hausdorff", pred, truth)?;
    match (pred.is_empty(), truth.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let to_truth = squared_distance_transform(truth, spacing);
    let to_pred = squared_distance_transform(pred, spacing);
    let directed = |from: &RegionMask, field: &[f64]| {
        from.mask
            .iter()
            .zip(field)
            .filter(|(&m, _)| m)
            .map(|(_, &d)| d)
            .fold(0.0f64, f64::max)
    };
    let worst = directed(pred, &to_truth).max(directed(truth, &to_pred));
    Ok(Some(worst.sqrt()))
}

/// Brute-force `O(|A|·|B|)` Hausdorff distance, summing squared axis
/// offsets in the same order as the distance transform.
pub fn hausdorff_brute_force(
    pred: &RegionMask,
    truth: &RegionMask,
    spacing: [f64; 3],
) -> Result<Option<f64>> {
    same_grid("hausdorff", pred, truth)?;
    let points = |m: &RegionMask| -> Vec<[usize; 3]> {
        (0..m.mask.len())
            .filter(|&i| m.mask[i])
            .map(|i| m.coords(i))
            .collect()
    };
    let (a, b) = (points(pred), points(truth));
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let sq = |p: &[usize; 3], q: &[usize; 3]| {
        let d = |k: usize| (p[k] as f64 - q[k] as f64) * spacing[k];
        (d(2) * d(2) + d(1) * d(1)) + d(0) * d(0)
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0f64, f64::max)
    };
    Ok(Some(directed(&a, &b).max(directed(&b, &a)).sqrt()))
}

/// Exact squared Euclidean distance from every voxel to the nearest
/// foreground voxel: lower envelopes of parabolas, one axis at a time
/// (W, then H, then D).
pub fn squared_distance_transform(mask: &RegionMask, spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = mask.extents;
    let mut field: Vec<f64> = mask
        .mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    let axes = [
        (w, 1, spacing[2]),
        (h, w, spacing[1]),
        (d, h * w, spacing[0]),
    ];
    for (len, stride, step) in axes {
        let total = d * h * w;
        for start in 0..total {
            // a line starts at every voxel whose coordinate on this axis is 0
            if (start / stride) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|k| field[start + k * stride]));
            envelope_1d(&line, step, &mut out);
            for (k, &v) in out.iter().enumerate() {
                field[start + k * stride] = v;
            }
        }
    }
    field
}

/// `out[p] = min_q f[q] + (step·(p − q))²` over finite `f[q]`.
fn envelope_1d(f: &[f64], step: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let s2 = step * step;
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    let intersect = |q: usize, r: usize| {
        let (q, r) = (q as f64, r as f64);
        ((f[q as usize] + s2 * q * q) - (f[r as usize] + s2 * r * r)) / (2.0 * s2 * (q - r))
    };
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match sites.last() {
                Some(&r) => {
                    let x = intersect(q, r);
                    if x <= *bounds.last().expect("bound per site") {
                        sites.pop();
                        bounds.pop();
                    } else {
                        sites.push(q);
                        bounds.push(x);
                        break;
                    }
                }
                None => {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    if sites.is_empty() {
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < p as f64 {
            k += 1;
        }
        // ties at a boundary: both parabolas agree there, take the smaller
        let mut best = f64::INFINITY;
        for j in [k, (k + 1).min(sites.len() - 1)] {
            let q = sites[j];
            let dq = (p as f64 - q as f64) * step;
            best = best.min(f[q] + dq * dq);
        }
        *o = best;
    }
}

/// A metric value that is either a number or explicitly undefined.
pub type MaybeMetric = Option<f64>;

mod undefined_or_number {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Number(*x),
            None => Repr::Text("undefined".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(Some(x)),
            Repr::Text(t) if t == "undefined" => Ok(None),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "unexpected metric value {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    #[serde(with = "undefined_or_number")]
    pub dsc: MaybeMetric,
    #[serde(with = "undefined_or_number")]
    pub sensitivity: MaybeMetric,
    #[serde(with = "undefined_or_number")]
    pub specificity: MaybeMetric,
    #[serde(with = "undefined_or_number")]
    pub hausdorff_mm: MaybeMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub regions: BTreeMap<String, RegionMetrics>,
    /// Mean over regions of each defined value.
    pub mean: RegionMetrics,
}

impl MetricsReport {
    pub fn region(&self, r: Region) -> &RegionMetrics {
        &self.regions[r.name()]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate_case(
    case_id: &str,
    pred: &LabelVolume,
    truth: &LabelVolume,
    spacing: [f64; 3],
) -> Result<MetricsReport> {
    if pred.extents != truth.extents {
        return Err(Error::shape("evaluate_case", &pred.extents, &truth.extents));
    }
    let mut regions = BTreeMap::new();
    for r in Region::ALL {
        let (p, t) = (region_mask(pred, r)?, region_mask(truth, r)?);
        let c = confusion(&p, &t)?;
        let (sensitivity, specificity) = sensitivity_specificity(&c);
        regions.insert(
            r.name().to_string(),
            RegionMetrics {
                dsc: Some(dsc(&p, &t)?),
                sensitivity,
                specificity,
                hausdorff_mm: hausdorff(&p, &t, spacing)?,
            },
        );
    }
    let mean_of = |f: fn(&RegionMetrics) -> MaybeMetric| {
        let vals: Vec<f64> = regions.values().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mean = RegionMetrics {
        dsc: mean_of(|m| m.dsc),
        sensitivity: mean_of(|m| m.sensitivity),
        specificity: mean_of(|m| m.specificity),
        hausdorff_mm: mean_of(|m| m.hausdorff_mm),
    };
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        regions,
        mean,
    })
}
