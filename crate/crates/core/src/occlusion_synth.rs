//! Synthetic occluders for self-supervised training: axis-aligned rectangles
//! in normalized image space that live for a contiguous run of frames and
//! drift linearly. A joint is occluded in a frame when its clean coordinate
//! falls inside any rectangle active in that frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_repr::{apply_occlusion_token, Map2D, OccludedMap2D, OcclusionMask, OcclusionToken};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccluderTrack {
    pub start_frame: usize,
    /// Inclusive.
    pub end_frame: usize,
    /// Rectangle center for each active frame, `start_frame..=end_frame`.
    pub center_path: Vec<[f64; 2]>,
    pub half_extent: [f64; 2],
    pub drift_velocity: [f64; 2],
}

impl OccluderTrack {
    pub fn new(
        start_frame: usize,
        end_frame: usize,
        start_center: [f64; 2],
        half_extent: [f64; 2],
        drift_velocity: [f64; 2],
    ) -> Result<Self> {
        if start_frame > end_frame {
            return Err(Error::InvalidConfig(format!(
                "occluder starts at {start_frame} after it ends at {end_frame}"
            )));
        }
        if !(half_extent[0] > 0.0 && half_extent[1] > 0.0) {
            return Err(Error::InvalidConfig("occluder half extent must be positive".into()));
        }
        let center_path = (0..=end_frame - start_frame)
            .map(|i| {
                [
                    start_center[0] + drift_velocity[0] * i as f64,
                    start_center[1] + drift_velocity[1] * i as f64,
                ]
            })
            .collect();
        Ok(Self {
            start_frame,
            end_frame,
            center_path,
            half_extent,
            drift_velocity,
        })
    }

    pub fn is_active(&self, frame: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }

    pub fn covers(&self, frame: usize, point: [f64; 2]) -> bool {
        self.covers_scaled(frame, point, 1.0)
    }

    fn covers_scaled(&self, frame: usize, point: [f64; 2], scale: f64) -> bool {
        if !self.is_active(frame) {
            return false;
        }
        let c = self.center_path[frame - self.start_frame];
        (point[0] - c[0]).abs() <= self.half_extent[0] * scale
            && (point[1] - c[1]).abs() <= self.half_extent[1] * scale
    }

    fn scaled(&self, scale: f64) -> Self {
        Self {
            half_extent: [self.half_extent[0] * scale, self.half_extent[1] * scale],
            ..self.clone()
        }
    }

    fn spanning(&self, frames: usize) -> Self {
        let first = self.center_path[0];
        let d = self.drift_velocity;
        let back = self.start_frame as f64;
        Self::new(
            0,
            frames - 1,
            [first[0] - d[0] * back, first[1] - d[1] * back],
            self.half_extent,
            d,
        )
        .expect("valid track")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Fraction of joint-frames to occlude, in [0, 0.5].
    pub target_ratio: f64,
    pub occluder_count_range: (usize, usize),
    /// Half extent of each rectangle side, normalized units.
    pub size_range: (f64, f64),
    /// Track lifetime as a fraction of the sequence length.
    pub lifetime_range: (f64, f64),
    /// Drift speed per frame, normalized units.
    pub drift_range: (f64, f64),
    pub seed: u64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            target_ratio: 0.2,
            occluder_count_range: (1, 3),
            size_range: (0.1, 0.4),
            lifetime_range: (0.25, 1.0),
            drift_range: (0.0, 0.02),
            seed: 0,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("occlusion: {msg}")));
        if !(0.0..=0.5).contains(&self.target_ratio) {
            return bad("target_ratio must lie in [0, 0.5]");
        }
        let (c0, c1) = self.occluder_count_range;
        if c0 > c1 {
            return bad("empty occluder_count_range");
        }
        let (s0, s1) = self.size_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad("size_range must be positive and non-empty");
        }
        let (l0, l1) = self.lifetime_range;
        if !(l0 > 0.0 && l0 <= l1 && l1 <= 1.0) {
            return bad("lifetime_range must lie in (0, 1]");
        }
        let (d0, d1) = self.drift_range;
        if !(d0 >= 0.0 && d0 <= d1) {
            return bad("drift_range must be non-negative and non-empty");
        }
        Ok(())
    }

    pub fn with_ratio(&self, target_ratio: f64) -> Self {
        Self {
            target_ratio,
            ..self.clone()
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws occluder tracks for a sequence of `frames` frames. Sizes come
/// straight from the configured range; see [`occlude_to_ratio`] for the
/// ratio-calibrated variant.
pub fn sample_occluders(cfg: &OcclusionConfig, frames: usize, rng: &mut impl Rng) -> Vec<OccluderTrack> {
    let (c0, c1) = cfg.occluder_count_range;
    let count = rng.random_range(c0..=c1);
    (0..count)
        .map(|_| {
            let life = ((uniform(rng, cfg.lifetime_range) * frames as f64).round() as usize).clamp(1, frames);
            let start = rng.random_range(0..=frames - life);
            let center = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
            let half = [uniform(rng, cfg.size_range), uniform(rng, cfg.size_range)];
            let speed = uniform(rng, cfg.drift_range);
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let drift = [speed * heading.cos(), speed * heading.sin()];
            OccluderTrack::new(start, start + life - 1, center, half, drift).expect("sampled track is valid")
        })
        .collect()
}

pub fn occlusion_mask(map: &Map2D, tracks: &[OccluderTrack]) -> OcclusionMask {
    mask_scaled(map, tracks, 1.0)
}

fn mask_scaled(map: &Map2D, tracks: &[OccluderTrack], scale: f64) -> OcclusionMask {
    let mut mask = OcclusionMask::none(map.frames(), map.joints());
    for f in 0..map.frames() {
        for k in 0..map.joints() {
            let p = map.get(f, k);
            if tracks.iter().any(|t| t.covers_scaled(f, p, scale)) {
                mask.set(f, k, true);
            }
        }
    }
    mask
}

pub fn synthesize_occlusion(
    map: &Map2D,
    tracks: &[OccluderTrack],
    token: OcclusionToken,
) -> OccludedMap2D {
    let mask = occlusion_mask(map, tracks);
    apply_occlusion_token(map, &mask, token).expect("mask built from the same map")
}

/// Samples tracks and rescales their rectangles so the occluded fraction of
/// this map lands as close to `cfg.target_ratio` as the joint granularity
/// allows. Tracks are stretched to the full sequence when even very large
/// rectangles cannot reach the target within their lifetimes.
pub fn occlude_to_ratio(
    map: &Map2D,
    cfg: &OcclusionConfig,
    token: OcclusionToken,
    rng: &mut impl Rng,
) -> (Vec<OccluderTrack>, OccludedMap2D) {
    let target = cfg.target_ratio;
    let mut tracks = sample_occluders(cfg, map.frames(), rng);
    if target <= 0.0 || tracks.is_empty() {
        let none = OcclusionMask::none(map.frames(), map.joints());
        let out = apply_occlusion_token(map, &none, token).expect("shapes agree");
        return (Vec::new(), out);
    }
    let ratio = |tracks: &[OccluderTrack], s: f64| mask_scaled(map, tracks, s).ratio();
    // large enough for any rectangle to cover the whole normalized frame
    let min_half = tracks
        .iter()
        .flat_map(|t| t.half_extent)
        .fold(f64::INFINITY, f64::min);
    let s_max = 8.0 / min_half;
    if ratio(&tracks, s_max) < target {
        tracks = tracks.iter().map(|t| t.spanning(map.frames())).collect();
    }
    let (mut lo, mut hi) = (0.0, s_max);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if ratio(&tracks, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = if (ratio(&tracks, lo) - target).abs() < (ratio(&tracks, hi) - target).abs() {
        lo
    } else {
        hi
    };
    let tracks: Vec<_> = tracks.iter().map(|t| t.scaled(s)).collect();
    let out = synthesize_occlusion(map, &tracks, token);
    (tracks, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut impl Rng, frames: usize, joints: usize) -> Map2D {
        let vals = (0..frames * joints * 2).map(|_| rng.random_range(-0.45..0.45)).collect();
        Map2D::from_values(frames, joints, vals).unwrap()
    }

    #[test]
    fn zero_count_gives_no_tracks() {
        let cfg = OcclusionConfig {
            occluder_count_range: (0, 0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_occluders(&cfg, 16, &mut rng).is_empty());
    }

    #[test]
    fn same_seed_same_tracks() {
        let cfg = OcclusionConfig::default();
        let a = sample_occluders(&cfg, 16, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_occluders(&cfg, 16, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(OcclusionConfig::default().validate().is_ok());
        assert!(OcclusionConfig::default().with_ratio(0.6).validate().is_err());
        let cfg = OcclusionConfig {
            occluder_count_range: (3, 1),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = OcclusionConfig {
            size_range: (0.0, 0.3),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(OccluderTrack::new(5, 2, [0.0; 2], [0.1; 2], [0.0; 2]).is_err());
        assert!(OccluderTrack::new(0, 2, [0.0; 2], [0.0, 0.1], [0.0; 2]).is_err());
    }

    #[test]
    fn no_tracks_no_occlusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_map(&mut rng, 8, 14);
        let out = synthesize_occlusion(&map, &[], OcclusionToken([3.0, 3.0]));
        assert_eq!(out.mask.count(), 0);
        assert_eq!(out.map, map);
    }

    #[test]
    fn full_cover_occludes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_map(&mut rng, 8, 14);
        let track = OccluderTrack::new(0, 7, [0.0, 0.0], [1.0, 1.0], [0.0, 0.0]).unwrap();
        let out = synthesize_occlusion(&map, &[track], OcclusionToken([3.0, 3.0]));
        assert_eq!(out.mask.count(), 8 * 14);
    }

    #[test]
    fn exact_block() {
        // joints 2 and 3 sit in a corner, the rest far away
        let mut map = Map2D::zeros(10, 14);
        for f in 0..10 {
            for k in 0..14 {
                let p = match k {
                    2 => [0.5, 0.5],
                    3 => [0.55, 0.45],
                    _ => [-0.4 + 0.01 * k as f64, -0.3],
                };
                map.set(f, k, p);
            }
        }
        let track = OccluderTrack::new(4, 6, [0.52, 0.48], [0.1, 0.1], [0.0, 0.0]).unwrap();
        let out = synthesize_occlusion(&map, &[track.clone()], OcclusionToken([0.0, 0.0]));
        for f in 0..10 {
            for k in 0..14 {
                let inside = {
                    let c = if track.is_active(f) {
                        Some(track.center_path[f - 4])
                    } else {
                        None
                    };
                    c.is_some_and(|c| {
                        let p = map.get(f, k);
                        (p[0] - c[0]).abs() <= 0.1 && (p[1] - c[1]).abs() <= 0.1
                    })
                };
                assert_eq!(out.mask.get(f, k), inside);
                assert_eq!(out.mask.get(f, k), (4..=6).contains(&f) && (k == 2 || k == 3));
            }
        }
        assert_eq!(out.mask.count(), 6);
    }

    #[test]
    fn tracks_are_contiguous_and_drift_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            for t in sample_occluders(&OcclusionConfig::default(), 16, &mut rng) {
                assert!(t.start_frame <= t.end_frame && t.end_frame < 16);
                assert_eq!(t.center_path.len(), t.end_frame - t.start_frame + 1);
                let active: Vec<usize> = (0..16).filter(|f| t.is_active(*f)).collect();
                assert_eq!(active.len(), active.last().unwrap() - active[0] + 1);
                for w in t.center_path.windows(2) {
                    assert!((w[1][0] - w[0][0] - t.drift_velocity[0]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mask_consistency_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let map = random_map(&mut rng, 6, 5);
            let tracks = sample_occluders(&OcclusionConfig::default(), 6, &mut rng);
            let out = synthesize_occlusion(&map, &tracks, OcclusionToken([9.0, 9.0]));
            for f in 0..6 {
                for k in 0..5 {
                    let p = map.get(f, k);
                    let expect = tracks.iter().any(|t| {
                        t.is_active(f) && {
                            let c = t.center_path[f - t.start_frame];
                            (p[0] - c[0]).abs() <= t.half_extent[0]
                                && (p[1] - c[1]).abs() <= t.half_extent[1]
                        }
                    });
                    assert_eq!(out.mask.get(f, k), expect);
                    if expect {
                        assert_eq!(out.map.get(f, k), [9.0, 9.0]);
                    } else {
                        assert_eq!(out.map.get(f, k), p);
                    }
                }
            }
        }
    }

    #[test]
    fn calibrated_ratio_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for target in [0.1, 0.3, 0.5] {
            let cfg = OcclusionConfig::default().with_ratio(target);
            let mut total = 0.0;
            for _ in 0..100 {
                let map = random_map(&mut rng, 16, 14);
                let (_, out) = occlude_to_ratio(&map, &cfg, OcclusionToken([0.0; 2]), &mut rng);
                total += out.mask.ratio();
            }
            assert!((total / 100.0 - target).abs() < 0.05, "{target}: {}", total / 100.0);
        }
    }

    #[test]
    fn calibrated_is_deterministic() {
        let map = random_map(&mut ChaCha8Rng::seed_from_u64(6), 16, 14);
        let cfg = OcclusionConfig::default().with_ratio(0.3);
        let a = occlude_to_ratio(&map, &cfg, OcclusionToken([0.0; 2]), &mut ChaCha8Rng::seed_from_u64(7));
        let b = occlude_to_ratio(&map, &cfg, OcclusionToken([0.0; 2]), &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.1.mask, b.1.mask);
        assert_eq!(a.0, b.0);
    }
}
