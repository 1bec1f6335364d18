use super::Grid;
use crate::error::{Error, Result};

pub const IDW_POWER: i32 = 2;
pub const IDW_NEIGHBOURS: usize = 4;
const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Equirectangular domain with pixel-centre registration; row 0 is the northern edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, n: usize) -> Result<Self> {
        let spec = GridSpec {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            n,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default domain bounds (32.0–42.24°N, 93.49–83.25°W) at extent `n`.
    pub fn default_with_extent(n: usize) -> Result<Self> {
        GridSpec::new(32.0, 42.24, -93.49, -83.25, n)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lat_max <= self.lat_min || self.lon_max <= self.lon_min {
            return Err(Error::InvalidArgument(format!(
                "degenerate grid bounds {self:?}"
            )));
        }
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid extent {} must be at least 2",
                self.n
            )));
        }
        Ok(())
    }

    pub fn dlat(&self) -> f64 {
        (self.lat_max - self.lat_min) / self.n as f64
    }

    pub fn dlon(&self) -> f64 {
        (self.lon_max - self.lon_min) / self.n as f64
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lat_max - (row as f64 + 0.5) * self.dlat(),
            self.lon_min + (col as f64 + 0.5) * self.dlon(),
        )
    }

    /// Fractional `(row, col)` such that pixel centres sit at integers.
    pub fn to_pixel(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (self.lat_max - lat) / self.dlat() - 0.5,
            (lon - self.lon_min) / self.dlon() - 0.5,
        )
    }

    pub fn to_latlon(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.lat_max - (row + 0.5) * self.dlat(),
            self.lon_min + (col + 0.5) * self.dlon(),
        )
    }

    /// Half the north–south cell size, the coincidence radius for interpolation.
    pub fn half_cell_km(&self) -> f64 {
        0.5 * EARTH_RADIUS_KM * self.dlat().to_radians()
    }
}

/// Great-circle distance in km.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Inverse-distance weighting over the nearest stations of each pixel.
///
/// `points` holds `(lat, lon, value)`. A station within half a cell of a pixel
/// centre sets that pixel exactly.
pub fn interpolate_pwv(points: &[(f64, f64, f64)], spec: &GridSpec) -> Result<Grid> {
    if points.is_empty() {
        return Err(Error::NoStations);
    }
    spec.validate()?;
    let half = spec.half_cell_km();
    let k = IDW_NEIGHBOURS.min(points.len());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    Ok(Grid::from_fn(spec.n, |r, c| {
        let (lat, lon) = spec.pixel_center(r, c);
        dist.clear();
        dist.extend(
            points
                .iter()
                .enumerate()
                .map(|(i, &(plat, plon, _))| (haversine_km(lat, lon, plat, plon), i)),
        );
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, by_dist);
            dist.truncate(k);
        }
        dist.sort_by(by_dist);
        let (d0, i0) = dist[0];
        if d0 < half {
            return points[i0].2;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &(d, i) in &dist {
            let w = d.powi(-IDW_POWER);
            num += w * points[i].2;
            den += w;
        }
        num / den
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GridSpec {
        GridSpec::default_with_extent(n).unwrap()
    }

    #[test]
    fn single_station_is_constant() {
        let g = interpolate_pwv(&[(35.0, -90.0, 27.5)], &spec(6)).unwrap();
        assert!(g.values().iter().all(|&v| (v - 27.5).abs() < 1e-12));
    }

    #[test]
    fn station_on_pixel_sets_it_exactly() {
        let s = spec(8);
        let (lat, lon) = s.pixel_center(3, 5);
        let pts = [(lat, lon, 11.0), (33.0, -92.0, 50.0), (41.0, -84.0, 70.0)];
        let g = interpolate_pwv(&pts, &s).unwrap();
        assert_eq!(g.get(3, 5), 11.0);
    }

    #[test]
    fn equidistant_pair_gives_mean() {
        let s = spec(5);
        let (lat, lon) = s.pixel_center(2, 2);
        let d = 1.5;
        let pts = [(lat, lon - d, 10.0), (lat, lon + d, 30.0)];
        let g = interpolate_pwv(&pts, &s).unwrap();
        assert!((g.get(2, 2) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn no_station_is_an_error() {
        assert!(matches!(
            interpolate_pwv(&[], &spec(4)),
            Err(Error::NoStations)
        ));
    }

    #[test]
    fn pixel_mapping_round_trips() {
        let s = spec(16);
        let (lat, lon) = s.pixel_center(4, 11);
        let (r, c) = s.to_pixel(lat, lon);
        assert!((r - 4.0).abs() < 1e-9 && (c - 11.0).abs() < 1e-9);
        assert!(
            s.pixel_center(0, 0).0 > s.pixel_center(1, 0).0,
            "rows run north to south"
        );
    }

    #[test]
    fn haversine_reference() {
        // One degree of latitude on the mean sphere.
        let d = haversine_km(0.0, 0.0, 1.0, 0.0);
        assert!((d - EARTH_RADIUS_KM * std::f64::consts::PI / 180.0).abs() < 1e-9);
        assert_eq!(haversine_km(35.0, -90.0, 35.0, -90.0), 0.0);
    }
}
