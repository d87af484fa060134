//! Three-anchor self-localization from inter-anchor distances.
//!
//! Frame convention: anchor 0 at the origin, anchor 1 on the +x axis and
//! anchor 2 in the `y < 0` half plane, all at a common height.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::manifold::Vec3;

/// Tolerance on the squared y coordinate of anchor 2 before the layout is
/// declared collinear.
const DISCRIMINANT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSurvey {
    pub d01: f64,
    pub d02: f64,
    pub d12: f64,
    pub anchor_height: f64,
}

impl AnchorSurvey {
    /// Distances between three known anchor positions.
    pub fn from_positions(a0: &Vec3, a1: &Vec3, a2: &Vec3, anchor_height: f64) -> Self {
        AnchorSurvey {
            d01: (a1 - a0).norm(),
            d02: (a2 - a0).norm(),
            d12: (a2 - a1).norm(),
            anchor_height,
        }
    }
}

/// Anchor id to world position.
pub type AnchorMap = BTreeMap<u32, Vec3>;

/// Closed-form positions of anchors `ids = [a0, a1, a2]`.
pub fn self_localize(survey: &AnchorSurvey, ids: [u32; 3]) -> Result<AnchorMap> {
    let AnchorSurvey { d01, d02, d12, anchor_height: h } = *survey;
    if !(d01 > 0.0 && d02 > 0.0 && d12 > 0.0) {
        return Err(Error::DegenerateAnchors("distances must be positive".into()));
    }
    if d01 + d02 <= d12 || d01 + d12 <= d02 || d02 + d12 <= d01 {
        return Err(Error::DegenerateAnchors(format!(
            "distances ({d01}, {d02}, {d12}) violate the strict triangle inequality"
        )));
    }
    let x2 = (d01 * d01 + d02 * d02 - d12 * d12) / (2.0 * d01);
    let disc = d02 * d02 - x2 * x2;
    if disc < DISCRIMINANT_TOL {
        return Err(Error::DegenerateAnchors(format!(
            "anchors are collinear (y² = {disc:e})"
        )));
    }
    let mut map = AnchorMap::new();
    map.insert(ids[0], Vec3::new(0.0, 0.0, h));
    map.insert(ids[1], Vec3::new(d01, 0.0, h));
    map.insert(ids[2], Vec3::new(x2, -disc.sqrt(), h));
    Ok(map)
}

/// One inter-anchor range sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorRange {
    pub anchor_i: u32,
    pub anchor_j: u32,
    pub distance: f64,
    pub stamp: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Aggregates raw samples into per-pair median distances for anchors `ids`.
///
/// Pairs are unordered. Each pair needs at least `min_samples` samples.
pub fn survey_from_network(
    samples: &[AnchorRange],
    ids: [u32; 3],
    min_samples: usize,
    anchor_height: f64,
) -> Result<AnchorSurvey> {
    let pair = |a: u32, b: u32| -> Result<f64> {
        let mut d: Vec<f64> = samples
            .iter()
            .filter(|s| (s.anchor_i == a && s.anchor_j == b) || (s.anchor_i == b && s.anchor_j == a))
            .map(|s| s.distance)
            .filter(|d| d.is_finite())
            .collect();
        if d.is_empty() || d.len() < min_samples {
            return Err(Error::MissingAnchorPair(a, b));
        }
        Ok(median(&mut d))
    };
    Ok(AnchorSurvey {
        d01: pair(ids[0], ids[1])?,
        d02: pair(ids[0], ids[2])?,
        d12: pair(ids[1], ids[2])?,
        anchor_height,
    })
}
