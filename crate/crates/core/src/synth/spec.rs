//! Generator configuration, read from `key=value` text.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Target colours by name, RGB in `[0, 1]`.
pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("black", [0.08, 0.08, 0.1]),
    ("white", [0.95, 0.95, 0.92]),
    ("grey", [0.55, 0.55, 0.58]),
    ("red", [0.85, 0.15, 0.12]),
    ("blue", [0.15, 0.3, 0.85]),
    ("orange", [0.95, 0.55, 0.1]),
];

/// Background names with their base tint, RGB in `[0, 1]`.
pub const BACKGROUNDS: [(&str, [f64; 3]); 5] = [
    ("a city", [0.45, 0.45, 0.47]),
    ("a forest", [0.2, 0.38, 0.18]),
    ("farmland", [0.55, 0.5, 0.3]),
    ("the sea", [0.15, 0.3, 0.45]),
    ("a cloudy sky", [0.7, 0.72, 0.78]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSpec {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    /// Initial target centre, frame pixels.
    pub target_x: f64,
    pub target_y: f64,
    /// Initial target velocity, px per frame.
    pub target_vx: f64,
    pub target_vy: f64,
    pub target_w: f64,
    pub target_h: f64,
    /// Std of the per-frame velocity change.
    pub accel_sigma: f64,
    /// Global image translation of the scene, px per frame.
    pub camera_vx: f64,
    pub camera_vy: f64,
    /// Std of the per-frame camera shake, px.
    pub camera_jitter: f64,
    /// Relative zoom per frame about the frame centre.
    pub zoom_rate: f64,
    /// Relative aspect change per frame (width grows, height shrinks).
    pub aspect_rate: f64,
    pub distractors: usize,
    /// Distractor speed in the world, px per frame.
    pub distractor_speed: f64,
    /// Blend weight of the target over the background; 0 hides it.
    pub contrast: f64,
    /// Amplitude of the sinusoidal global brightness modulation.
    pub brightness_amplitude: f64,
    pub brightness_period: f64,
    /// Background texture strength.
    pub noise: f64,
    pub color: String,
    pub background: String,
    /// Draw the initial position, heading, colour and background from the
    /// seed. Speeds keep the magnitude of the given velocities.
    pub vary: bool,
    /// Reflect world velocities so that centres stay at least one target
    /// side inside the frame-0 view.
    pub bounce: bool,
    pub seed: u64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            length: 60,
            target_x: 128.0,
            target_y: 128.0,
            target_vx: 0.0,
            target_vy: 0.0,
            target_w: 20.0,
            target_h: 14.0,
            accel_sigma: 0.0,
            camera_vx: 0.0,
            camera_vy: 0.0,
            camera_jitter: 0.0,
            zoom_rate: 0.0,
            aspect_rate: 0.0,
            distractors: 0,
            distractor_speed: 0.0,
            contrast: 1.0,
            brightness_amplitude: 0.0,
            brightness_period: 40.0,
            noise: 0.25,
            color: "grey".into(),
            background: "a city".into(),
            vary: false,
            bounce: false,
            seed: 0,
        }
    }
}

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

pub fn background_rgb(name: &str) -> Option<[f64; 3]> {
    BACKGROUNDS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("frame size {}x{}", self.width, self.height));
        }
        if self.length < 2 {
            return bad(format!("length {} is below 2", self.length));
        }
        if !(self.target_w > 0.0 && self.target_h > 0.0) {
            return bad(format!("target size {}x{}", self.target_w, self.target_h));
        }
        for (name, v) in [
            ("accel_sigma", self.accel_sigma),
            ("camera_jitter", self.camera_jitter),
            ("distractor_speed", self.distractor_speed),
            ("brightness_amplitude", self.brightness_amplitude),
            ("noise", self.noise),
            ("contrast", self.contrast),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.brightness_amplitude >= 1.0 {
            return bad("brightness_amplitude must be below 1".into());
        }
        if !(self.brightness_period > 0.0) {
            return bad("brightness_period must be positive".into());
        }
        if !(self.zoom_rate > -1.0 && self.aspect_rate > -1.0) {
            return bad("zoom_rate and aspect_rate must exceed -1".into());
        }
        let finite = [self.target_x, self.target_y, self.target_vx, self.target_vy, self.camera_vx, self.camera_vy];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("positions and velocities must be finite".into());
        }
        if color_rgb(&self.color).is_none() {
            return bad(format!("unknown colour `{}`", self.color));
        }
        if background_rgb(&self.background).is_none() {
            return bad(format!("unknown background `{}`", self.background));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        let real = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
        let flag = |v: &str| match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(bad(&"expected true or false")),
        };
        match key {
            "width" => self.width = num(value)?,
            "height" => self.height = num(value)?,
            "length" => self.length = num(value)?,
            "target_x" => self.target_x = real(value)?,
            "target_y" => self.target_y = real(value)?,
            "target_vx" => self.target_vx = real(value)?,
            "target_vy" => self.target_vy = real(value)?,
            "target_w" => self.target_w = real(value)?,
            "target_h" => self.target_h = real(value)?,
            "accel_sigma" => self.accel_sigma = real(value)?,
            "camera_vx" => self.camera_vx = real(value)?,
            "camera_vy" => self.camera_vy = real(value)?,
            "camera_jitter" => self.camera_jitter = real(value)?,
            "zoom_rate" => self.zoom_rate = real(value)?,
            "aspect_rate" => self.aspect_rate = real(value)?,
            "distractors" => self.distractors = num(value)?,
            "distractor_speed" => self.distractor_speed = real(value)?,
            "contrast" => self.contrast = real(value)?,
            "brightness_amplitude" => self.brightness_amplitude = real(value)?,
            "brightness_period" => self.brightness_period = real(value)?,
            "noise" => self.noise = real(value)?,
            "color" => self.color = value.to_string(),
            "background" => self.background = value.to_string(),
            "vary" => self.vary = flag(value)?,
            "bounce" => self.bounce = flag(value)?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{raw}`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(text)?;
        Ok(s)
    }

    /// Every field as `key=value` lines, readable by [`MotionSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("length", self.length.to_string());
        kv("target_x", self.target_x.to_string());
        kv("target_y", self.target_y.to_string());
        kv("target_vx", self.target_vx.to_string());
        kv("target_vy", self.target_vy.to_string());
        kv("target_w", self.target_w.to_string());
        kv("target_h", self.target_h.to_string());
        kv("accel_sigma", self.accel_sigma.to_string());
        kv("camera_vx", self.camera_vx.to_string());
        kv("camera_vy", self.camera_vy.to_string());
        kv("camera_jitter", self.camera_jitter.to_string());
        kv("zoom_rate", self.zoom_rate.to_string());
        kv("aspect_rate", self.aspect_rate.to_string());
        kv("distractors", self.distractors.to_string());
        kv("distractor_speed", self.distractor_speed.to_string());
        kv("contrast", self.contrast.to_string());
        kv("brightness_amplitude", self.brightness_amplitude.to_string());
        kv("brightness_period", self.brightness_period.to_string());
        kv("noise", self.noise.to_string());
        kv("color", self.color.clone());
        kv("background", self.background.clone());
        kv("vary", self.vary.to_string());
        kv("bounce", self.bounce.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    pub fn prompt(&self) -> String {
        format!("a {} multi-rotor drone flying over {}", self.color, self.background)
    }
}
