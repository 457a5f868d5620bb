use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: u8,
    pub name: String,
    pub base_signature: [f64; 3],
}

/// Land-cover classes with an RGB signature and a per-stage seasonal offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub classes: Vec<ClassEntry>,
    /// `stage_deltas[class][stage]`.
    pub stage_deltas: Vec<Vec<[f64; 3]>>,
}

const NAMES: [&str; 10] = [
    "water", "vegetation", "cropland", "built-up", "bare", "shrub", "paddy", "grassland", "fallow", "other",
];

const BASE: [[f64; 3]; 10] = [
    [0.10, 0.22, 0.55],
    [0.15, 0.50, 0.15],
    [0.62, 0.52, 0.20],
    [0.72, 0.70, 0.74],
    [0.55, 0.38, 0.28],
    [0.30, 0.38, 0.12],
    [0.20, 0.45, 0.45],
    [0.45, 0.62, 0.30],
    [0.50, 0.45, 0.40],
    [0.85, 0.25, 0.45],
];

/// Seasonal offsets of the first four classes over four stages.
const SEASONS: [[[f64; 3]; 4]; 4] = [
    // water: clear, algal, turbid, ice
    [[0.0, 0.0, 0.0], [0.0, 0.14, -0.12], [0.14, 0.08, -0.20], [0.16, 0.20, 0.12]],
    // vegetation: spring, summer, autumn, winter
    [[0.0, 0.0, 0.0], [-0.05, 0.16, 0.0], [0.30, 0.05, -0.05], [0.18, -0.12, 0.16]],
    // cropland: growing, green, harvested, fallow
    [[0.0, 0.0, 0.0], [-0.35, 0.08, -0.02], [-0.12, -0.22, -0.08], [0.08, 0.10, 0.26]],
    // built-up: dry, wet, shadowed, snow-covered
    [[0.0, 0.0, 0.0], [-0.16, -0.14, -0.10], [-0.30, -0.30, -0.12], [0.14, 0.16, 0.18]],
];

impl ClassPalette {
    /// Built-in palette for `num_classes ≤ 10` and `num_stages ≥ 2`.
    pub fn standard(num_classes: usize, num_stages: usize) -> Result<Self> {
        if !(2..=NAMES.len()).contains(&num_classes) {
            return Err(Error::config("num_classes", format!("must be in 2..={}", NAMES.len())));
        }
        if num_stages < 2 {
            return Err(Error::config("num_stages", "must be at least 2"));
        }
        let classes = (0..num_classes)
            .map(|c| ClassEntry {
                class_id: c as u8,
                name: NAMES[c].to_string(),
                base_signature: BASE[c],
            })
            .collect();
        let stage_deltas = (0..num_classes)
            .map(|c| {
                (0..num_stages)
                    .map(|s| {
                        if c < 4 && s < 4 {
                            SEASONS[c][s]
                        } else {
                            // procedural cycle for extra classes/stages
                            let phase = std::f64::consts::TAU * s as f64 / num_stages as f64 + c as f64;
                            let amp = if s == 0 { 0.0 } else { 0.18 };
                            [amp * phase.cos(), amp * (phase * 1.3).sin(), amp * (phase * 0.7).cos() * 0.5]
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { classes, stage_deltas })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_stages(&self) -> usize {
        self.stage_deltas.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("palette.classes", "need at least 2 classes"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id as usize != i {
                return Err(Error::config("palette.classes", "class ids must be contiguous from 0"));
            }
            if c.base_signature.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("palette.classes", format!("signature of `{}` outside [0,1]", c.name)));
            }
        }
        if self.stage_deltas.len() != self.classes.len() {
            return Err(Error::config("palette.stage_deltas", "one row per class required"));
        }
        let s = self.num_stages();
        if s < 2 || self.stage_deltas.iter().any(|row| row.len() != s) {
            return Err(Error::config("palette.stage_deltas", "every class needs the same S >= 2 stages"));
        }
        Ok(())
    }

    /// `clamp(base + delta, 0, 1)` for one class and stage.
    pub fn signature(&self, class: usize, stage: usize) -> [f64; 3] {
        let b = self.classes[class].base_signature;
        let d = self.stage_deltas[class][stage];
        [
            (b[0] + d[0]).clamp(0.0, 1.0),
            (b[1] + d[1]).clamp(0.0, 1.0),
            (b[2] + d[2]).clamp(0.0, 1.0),
        ]
    }
}

pub fn rgb_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_palette_is_valid() {
        for k in 2..=10 {
            for s in 2..=6 {
                ClassPalette::standard(k, s).unwrap().validate().unwrap();
            }
        }
        assert!(ClassPalette::standard(1, 4).is_err());
        assert!(ClassPalette::standard(4, 1).is_err());
    }

    #[test]
    fn seasonal_offsets_are_separable() {
        let p = ClassPalette::standard(4, 4).unwrap();
        let mut within = f64::INFINITY;
        let mut across = f64::INFINITY;
        for c in 0..4 {
            for s in 0..4 {
                for c2 in 0..4 {
                    for s2 in 0..4 {
                        if (c, s) >= (c2, s2) {
                            continue;
                        }
                        let d = rgb_distance(p.signature(c, s), p.signature(c2, s2));
                        if c == c2 {
                            within = within.min(d);
                        } else {
                            across = across.min(d);
                        }
                    }
                }
            }
        }
        // stages of one class differ by far more than typical noise, and no
        // stage of one class collides with another class
        assert!(within > 0.15, "within-class stage separation {within}");
        assert!(across > 0.1, "cross-class separation {across}");
    }
}
