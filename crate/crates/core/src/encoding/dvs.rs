//! Dynamic vision sensor emulation by moving a static image under the sensor.

use serde::{Deserialize, Serialize};

use super::{check_unit, EncoderConfig, EncodingError, Polarity, Scheme, SpikeEvent, SpikeEvents};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaccadeConfig {
    /// Displacement waypoints `(dx, dy)` in pixels; `dx` moves the image
    /// right and `dy` moves it down.
    pub path: Vec<(f64, f64)>,
    pub steps_per_segment: u32,
    /// Log-intensity change θ that triggers an event.
    pub contrast_threshold: f64,
    /// Offset added to intensities before taking the logarithm.
    pub log_epsilon: f64,
    /// The image is edge-replicated this many pixels on every side; the path
    /// must stay within that margin.
    pub canvas_padding: usize,
}

impl Default for SaccadeConfig {
    /// Three equal segments: right-down, left-down, then straight back up.
    fn default() -> Self {
        Self {
            path: vec![(0.0, 0.0), (2.0, 2.0), (0.0, 4.0), (0.0, 0.0)],
            steps_per_segment: 10,
            contrast_threshold: 0.2,
            log_epsilon: 0.05,
            canvas_padding: 4,
        }
    }
}

impl SaccadeConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        let bad = |m: String| Err(EncodingError::InvalidConfig(m));
        if self.path.len() < 2 {
            return bad("a saccade path needs at least two waypoints".into());
        }
        if self.steps_per_segment == 0 {
            return bad("steps_per_segment must be positive".into());
        }
        if !(self.contrast_threshold > 0.0 && self.contrast_threshold.is_finite()) {
            return bad(format!(
                "contrast threshold must be positive, got {}",
                self.contrast_threshold
            ));
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon.is_finite()) {
            return bad(format!(
                "log epsilon must be positive, got {}",
                self.log_epsilon
            ));
        }
        let pad = self.canvas_padding as f64;
        for &(dx, dy) in &self.path {
            if !(dx.abs() <= pad && dy.abs() <= pad) {
                return Err(EncodingError::PathOutOfBounds {
                    dx,
                    dy,
                    padding: self.canvas_padding,
                });
            }
        }
        Ok(())
    }

    /// Steps needed to traverse the whole path.
    pub fn path_steps(&self) -> u32 {
        (self.path.len() as u32 - 1) * self.steps_per_segment
    }

    /// Displacement at step `s`: linear between waypoints, holding the last
    /// waypoint once the path is complete.
    pub fn displacement(&self, s: u32) -> (f64, f64) {
        let segment = (s / self.steps_per_segment) as usize;
        if segment + 1 >= self.path.len() {
            return *self.path.last().expect("validated path");
        }
        let f = (s % self.steps_per_segment) as f64 / self.steps_per_segment as f64;
        let (a, b) = (self.path[segment], self.path[segment + 1]);
        (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
    }
}

/// Emulate DVS events for an image with values in `[0, 1]`, stored row-major
/// as `rows x cols`. Events are polarity-tagged and indexed by sensor pixel.
pub fn dvs_emulate(
    image: &[f64],
    rows: usize,
    cols: usize,
    sac: &SaccadeConfig,
    cfg: &EncoderConfig,
) -> Result<SpikeEvents, EncodingError> {
    check_unit(image)?;
    let irradiance: Vec<f64> = image.iter().map(|v| v + sac.log_epsilon).collect();
    dvs_emulate_irradiance(&irradiance, rows, cols, sac, cfg)
}

/// Like [`dvs_emulate`] but on positive irradiance values that already
/// include the log offset. Only ratios of irradiance matter, so scaling the
/// whole input by a constant gain yields the same events.
pub fn dvs_emulate_irradiance(
    irradiance: &[f64],
    rows: usize,
    cols: usize,
    sac: &SaccadeConfig,
    cfg: &EncoderConfig,
) -> Result<SpikeEvents, EncodingError> {
    cfg.expect(Scheme::Dvs)?;
    sac.validate()?;
    if rows == 0 || cols == 0 || irradiance.len() != rows * cols {
        return Err(EncodingError::InvalidConfig(format!(
            "{} values do not form a {rows}x{cols} image",
            irradiance.len()
        )));
    }
    if let Some(index) = irradiance.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(EncodingError::InvalidConfig(format!(
            "irradiance {} at {index} must be positive",
            irradiance[index]
        )));
    }
    let log: Vec<f64> = irradiance.iter().map(|v| v.ln()).collect();
    let frame = |s: u32| -> Vec<f64> {
        let (dx, dy) = sac.displacement(s);
        let mut out = Vec::with_capacity(rows * cols);
        for y in 0..rows {
            for x in 0..cols {
                out.push(sample(
                    irradiance,
                    &log,
                    rows,
                    cols,
                    x as f64 - dx,
                    y as f64 - dy,
                ));
            }
        }
        out
    };
    let theta = sac.contrast_threshold;
    let mut reference = frame(0);
    let mut events = Vec::new();
    // Once the path holds still no pixel changes; later steps are silent.
    let last = cfg.horizon_steps.min(sac.path_steps() + 1);
    for s in 1..last {
        let current = frame(s);
        for (i, (r, &e)) in reference.iter_mut().zip(&current).enumerate() {
            let polarity = if e - *r >= theta {
                Polarity::On
            } else if *r - e >= theta {
                Polarity::Off
            } else {
                continue;
            };
            *r = e;
            events.push(SpikeEvent {
                t: s,
                neuron: i as u32,
                polarity: Some(polarity),
            });
        }
    }
    SpikeEvents::new(events, cfg.horizon_steps, cfg.dt)
}

/// Log irradiance at a real-valued image coordinate: bilinear in irradiance
/// over the edge-replicated image. Integer coordinates read the stored
/// logarithm directly so that pure translations reproduce it exactly.
fn sample(irr: &[f64], log: &[f64], rows: usize, cols: usize, x: f64, y: f64) -> f64 {
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let (x, y) = (clamp(x, cols), clamp(y, rows));
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    if fx == 0.0 && fy == 0.0 {
        return log[y0 * cols + x0];
    }
    let (x1, y1) = ((x0 + 1).min(cols - 1), (y0 + 1).min(rows - 1));
    let at = |yy: usize, xx: usize| irr[yy * cols + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dvs_cfg(t: u32) -> EncoderConfig {
        EncoderConfig {
            scheme: Scheme::Dvs,
            horizon_steps: t,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn default_path_is_valid_and_closed() {
        let sac = SaccadeConfig::default();
        sac.validate().unwrap();
        assert_eq!(sac.displacement(0), (0.0, 0.0));
        assert_eq!(sac.displacement(10), (2.0, 2.0));
        assert_eq!(sac.displacement(20), (0.0, 4.0));
        assert_eq!(sac.displacement(5), (1.0, 1.0));
        assert_eq!(sac.displacement(30), (0.0, 0.0));
        assert_eq!(sac.displacement(1000), (0.0, 0.0));
    }

    #[test]
    fn path_outside_padding_is_rejected() {
        let sac = SaccadeConfig {
            path: vec![(0.0, 0.0), (5.0, 0.0)],
            ..SaccadeConfig::default()
        };
        assert!(matches!(
            dvs_emulate(&[0.5; 9], 3, 3, &sac, &dvs_cfg(50)),
            Err(EncodingError::PathOutOfBounds { .. })
        ));
    }

    #[test]
    fn interior_subpixel_sample_interpolates_irradiance() {
        let irr = [1.0, 3.0];
        let log: Vec<f64> = irr.iter().map(|v: &f64| v.ln()).collect();
        assert!((sample(&irr, &log, 1, 2, 0.5, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sample(&irr, &log, 1, 2, -3.0, 0.0), log[0]);
        assert_eq!(sample(&irr, &log, 1, 2, 7.0, 0.0), log[1]);
    }

    #[test]
    fn events_stop_once_path_holds() {
        let mut image = vec![0.0; 64];
        image[27] = 1.0;
        let ev = dvs_emulate(&image, 8, 8, &SaccadeConfig::default(), &dvs_cfg(200)).unwrap();
        assert!(!ev.is_empty());
        assert!(ev.events().iter().all(|e| e.t >= 1 && e.t <= 30));
    }
}
