//! Middlebury color-wheel rendering of flow fields.

use std::f64::consts::PI;

use super::ImageBuffer;
use crate::error::{Error, Result};
use crate::matching::FlowField;

/// Segment lengths red-yellow, yellow-green, green-cyan, cyan-blue,
/// blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    // Each segment ramps one channel while the other two are fixed.
    let ramps: [([usize; 3], bool); 6] = [
        ([0, 1, 2], true),  // R=1, G rises
        ([1, 0, 2], false), // G=1, R falls
        ([1, 2, 0], true),  // G=1, B rises
        ([2, 1, 0], false), // B=1, G falls
        ([2, 0, 1], true),  // B=1, R rises
        ([0, 2, 1], false), // R=1, B falls
    ];
    for (len, (ch, rising)) in SEGMENTS.iter().zip(ramps) {
        for t in 0..*len {
            let f = t as f64 / *len as f64;
            let mut c = [0.0; 3];
            c[ch[0]] = 1.0;
            c[ch[1]] = if rising { f } else { 1.0 - f };
            wheel.push(c);
        }
    }
    wheel
}

/// RGB rendering: hue from the flow direction, saturation from the
/// magnitude relative to `max_magnitude` (clamped at 1), invalid pixels black.
pub fn flow_to_color(flow: &FlowField, max_magnitude: f64) -> Result<ImageBuffer> {
    if !(max_magnitude > 0.0) || !max_magnitude.is_finite() {
        return Err(Error::config(format!(
            "max_magnitude must be positive, got {max_magnitude}"
        )));
    }
    let wheel = color_wheel();
    let n = wheel.len();
    let mut data = Vec::with_capacity(flow.len() * 3);
    for px in 0..flow.len() {
        let Some([u, v]) = flow.get_index(px) else {
            data.extend([0u8; 3]);
            continue;
        };
        let (u, v) = (u / max_magnitude, v / max_magnitude);
        let rad = (u * u + v * v).sqrt().min(1.0);
        let a = (-v).atan2(-u) / PI;
        let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
        let k0 = (fk.floor() as usize).min(n - 1);
        let k1 = (k0 + 1) % n;
        let f = fk - k0 as f64;
        for ch in 0..3 {
            let col = (1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch];
            let col = 1.0 - rad * (1.0 - col);
            data.push((255.0 * col).floor().clamp(0.0, 255.0) as u8);
        }
    }
    ImageBuffer::new(flow.width(), flow.height(), 3, data)
}
