//! Resampling of single bands to a common ground resolution: bilinear for
//! upsampling, pixel-area averaging for downsampling. NoData pixels never
//! contribute to a destination value; a destination pixel without any valid
//! source becomes NoData.

use super::{IngestError, IngestResult, NODATA};

/// One square band with its NoData mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub side: usize,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl Raster {
    pub fn new(side: usize, values: Vec<f32>) -> Self {
        let mask = vec![false; values.len()];
        Self { side, values, mask }
    }

    pub fn with_mask(side: usize, values: Vec<f32>, mask: Vec<bool>) -> Self {
        Self { side, values, mask }
    }

    fn valid(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.side + x;
        (!self.mask[i]).then(|| f64::from(self.values[i]))
    }
}

pub fn resample_band(band: &Raster, src_res: f64, dst_res: f64) -> IngestResult<Raster> {
    if !(src_res > 0.0 && dst_res > 0.0) {
        return Err(IngestError::InvalidArgument(
            "resolutions must be positive".into(),
        ));
    }
    if band.side == 0 || band.values.is_empty() {
        return Err(IngestError::EmptyBand);
    }
    if band.values.len() != band.side * band.side || band.mask.len() != band.values.len() {
        return Err(IngestError::Format("raster dimensions inconsistent".into()));
    }
    if band.mask.iter().all(|&m| m) {
        return Err(IngestError::AllNoData);
    }
    if src_res == dst_res {
        return Ok(band.clone());
    }
    let out_side = ((band.side as f64 * src_res / dst_res).round() as usize).max(1);
    let mut values = vec![NODATA; out_side * out_side];
    let mut mask = vec![true; out_side * out_side];
    let write = |v: Option<f64>, i: usize, values: &mut [f32], mask: &mut [bool]| {
        if let Some(v) = v {
            values[i] = v as f32;
            mask[i] = false;
        }
    };
    if dst_res < src_res {
        for y in 0..out_side {
            for x in 0..out_side {
                let v = bilinear(band, y, x, src_res, dst_res);
                write(v, y * out_side + x, &mut values, &mut mask);
            }
        }
    } else {
        for y in 0..out_side {
            for x in 0..out_side {
                let v = area_average(band, y, x, src_res, dst_res);
                write(v, y * out_side + x, &mut values, &mut mask);
            }
        }
    }
    Ok(Raster {
        side: out_side,
        values,
        mask,
    })
}

/// Source-pixel coordinate of destination pixel `i`'s centre.
fn source_coord(i: usize, src_res: f64, dst_res: f64, n: usize) -> f64 {
    ((i as f64 + 0.5) * dst_res / src_res - 0.5).clamp(0.0, (n - 1) as f64)
}

fn bilinear(band: &Raster, y: usize, x: usize, src_res: f64, dst_res: f64) -> Option<f64> {
    let n = band.side;
    let u = source_coord(y, src_res, dst_res, n);
    let v = source_coord(x, src_res, dst_res, n);
    let (y0, x0) = (u.floor() as usize, v.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
    let (fy, fx) = (u - y0 as f64, v - x0 as f64);
    let taps = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ];
    let (mut acc, mut wsum) = (0.0, 0.0);
    for (ty, tx, w) in taps {
        if let Some(val) = band.valid(ty, tx) {
            acc += w * val;
            wsum += w;
        }
    }
    (wsum > 0.0).then(|| acc / wsum)
}

fn area_average(band: &Raster, y: usize, x: usize, src_res: f64, dst_res: f64) -> Option<f64> {
    let n = band.side;
    let extent = n as f64 * src_res;
    let span = |i: usize| {
        let lo = i as f64 * dst_res;
        let hi = ((i + 1) as f64 * dst_res).min(extent);
        (lo, hi)
    };
    let (ylo, yhi) = span(y);
    let (xlo, xhi) = span(x);
    if ylo >= extent || xlo >= extent {
        return None;
    }
    let first = |lo: f64| (lo / src_res).floor() as usize;
    let last = |hi: f64| (((hi / src_res).ceil() as usize).max(1) - 1).min(n - 1);
    let (mut acc, mut wsum) = (0.0, 0.0);
    for sy in first(ylo)..=last(yhi) {
        let oy = (yhi.min((sy + 1) as f64 * src_res) - ylo.max(sy as f64 * src_res)).max(0.0);
        for sx in first(xlo)..=last(xhi) {
            let ox =
                (xhi.min((sx + 1) as f64 * src_res) - xlo.max(sx as f64 * src_res)).max(0.0);
            if let Some(v) = band.valid(sy, sx) {
                acc += oy * ox * v;
                wsum += oy * ox;
            }
        }
    }
    (wsum > 0.0).then(|| acc / wsum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_band_downsampled() {
        let r = resample_band(&Raster::new(64, vec![5.0; 64 * 64]), 10.0, 20.0).unwrap();
        assert_eq!(r.side, 32);
        assert!(r.values.iter().all(|&v| (v - 5.0).abs() < 1e-6));
        assert!(r.mask.iter().all(|&m| !m));
    }

    #[test]
    fn coarse_band_upsampled_shape() {
        let r = resample_band(&Raster::new(16, vec![1.0; 256]), 60.0, 20.0).unwrap();
        assert_eq!(r.side, 48);
    }

    #[test]
    fn ramp_matches_analytic_bilinear() {
        let n = 12;
        let ramp = |x: f64| 0.3 + 0.05 * x;
        let values = (0..n * n).map(|i| ramp((i % n) as f64) as f32).collect();
        let r = resample_band(&Raster::new(n, values), 30.0, 20.0).unwrap();
        assert_eq!(r.side, 18);
        for y in 0..r.side {
            for x in 0..r.side {
                // independent mapping of the destination centre in metres
                let metres = (x as f64 + 0.5) * 20.0;
                let src = (metres / 30.0 - 0.5).clamp(0.0, (n - 1) as f64);
                let expected = ramp(src);
                let got = f64::from(r.values[y * r.side + x]);
                assert!((got - expected).abs() < 1e-3, "({y},{x}) {got} vs {expected}");
            }
        }
    }

    #[test]
    fn nodata_is_excluded_and_propagated() {
        let mut values = vec![2.0f32; 16];
        let mut mask = vec![false; 16];
        // mask the top-left 2×2 block entirely
        for i in [0, 1, 4, 5] {
            values[i] = 100.0;
            mask[i] = true;
        }
        // one extra masked pixel inside the second block
        values[2] = 100.0;
        mask[2] = true;
        let r = resample_band(&Raster::with_mask(4, values, mask), 10.0, 20.0).unwrap();
        assert_eq!(r.side, 2);
        assert!(r.mask[0]);
        assert_eq!(r.values[0], NODATA);
        assert!(!r.mask[1]);
        assert!((r.values[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            resample_band(&Raster::new(0, vec![]), 10.0, 20.0),
            Err(IngestError::EmptyBand)
        ));
        let all = Raster::with_mask(2, vec![1.0; 4], vec![true; 4]);
        assert!(matches!(resample_band(&all, 10.0, 20.0), Err(IngestError::AllNoData)));
        assert!(resample_band(&Raster::new(2, vec![1.0; 4]), 0.0, 20.0).is_err());
    }

    proptest! {
        #[test]
        fn equal_resolution_is_identity(
            values in proptest::collection::vec(0.0f32..1.0, 25),
            res in 1.0f64..100.0,
        ) {
            let r = Raster::new(5, values);
            prop_assert_eq!(resample_band(&r, res, res).unwrap(), r);
        }
    }
}
