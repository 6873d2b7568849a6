//! Flat `key = value` pipeline configuration.

use std::path::{Path, PathBuf};

use cdr_tensor::Precision;

use crate::camera::Vec3;
use crate::error::{CdrError, Result};
use crate::fragments::{KeyframePolicy, KeyframeRule};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub precision: Precision,

    pub theta_key: f64,
    pub t_key: f64,
    pub frames_per_fragment: usize,
    pub keyframe_rule: KeyframeRule,

    pub voxel_size: f64,
    pub fbv_extent: f64,
    pub truncation_voxels: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub depth_planes: usize,

    pub num_classes: usize,
    pub stem_channels: usize,
    pub channels_p2: usize,
    pub channels_p3: usize,
    pub channels_p4: usize,
    pub head2d_channels: usize,
    pub reg_channels: usize,
    pub volume_channels: usize,
    pub cond_channels: usize,
    pub ref_channels: usize,

    pub theta_occ: f64,
    pub tau_occ_factor: f64,
    pub anchor_radius: i32,
    pub enable_anchor: bool,
    pub enable_pv_match: bool,
    pub enable_binomial_sem: bool,
    pub soft_intersection: bool,
    pub share_pointflow: bool,
    pub freeze_backbone: bool,

    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub gamma: [f64; 3],
    pub lambda_occ: f64,
    pub mu: f64,

    pub lr: f64,
    pub train_steps: usize,
    pub checkpoint_every: usize,
    pub log_terms: bool,
    pub weights: Option<PathBuf>,

    pub mesh_skip_absent: bool,
    pub eval_tau: f64,
    pub eval_samples: usize,
    pub miou_voxels: bool,

    pub synth_frames: usize,
    pub synth_width: u32,
    pub synth_height: u32,
    pub synth_hfov: f64,
    pub synth_room: Vec3,
    pub synth_orbit_radius: f64,
    pub synth_orbit_height: f64,
    pub synth_orbit_turns: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            precision: Precision::F32,
            theta_key: 15.0,
            t_key: 0.1,
            frames_per_fragment: 9,
            keyframe_rule: KeyframeRule::Or,
            voxel_size: 0.04,
            fbv_extent: 4.8,
            truncation_voxels: 3.0,
            d_min: 0.25,
            d_max: 5.0,
            depth_planes: 32,
            num_classes: 5,
            stem_channels: 16,
            channels_p2: 24,
            channels_p3: 40,
            channels_p4: 80,
            head2d_channels: 16,
            reg_channels: 8,
            volume_channels: 16,
            cond_channels: 4,
            ref_channels: 8,
            theta_occ: 0.5,
            tau_occ_factor: 1.5,
            anchor_radius: 1,
            enable_anchor: true,
            enable_pv_match: true,
            enable_binomial_sem: true,
            soft_intersection: false,
            share_pointflow: true,
            freeze_backbone: false,
            alpha: [0.64, 0.8, 1.0],
            beta: [0.64, 0.8, 1.0],
            gamma: [0.64, 0.8, 1.0],
            lambda_occ: 1.5,
            mu: 1.0,
            lr: 1e-3,
            train_steps: 500,
            checkpoint_every: 100,
            log_terms: false,
            weights: None,
            mesh_skip_absent: false,
            eval_tau: 0.0,
            eval_samples: 10_000,
            miou_voxels: false,
            synth_frames: 120,
            synth_width: 96,
            synth_height: 64,
            synth_hfov: 70.0,
            synth_room: Vec3::new(2.4, 2.4, 1.6),
            synth_orbit_radius: 0.75,
            synth_orbit_height: 0.9,
            synth_orbit_turns: 1.0,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Some(true),
        "off" | "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Ablation rows over the refinement toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// No binomial semantic input.
    A,
    /// No anchored or point-to-vertex refinement.
    B,
    /// No anchored refinement.
    C,
    /// No point-to-vertex refinement.
    D,
    /// Everything on.
    E,
}

impl PipelineConfig {
    /// Laptop-sized defaults used by the synthetic tests: 8 cm voxels and
    /// narrow channels.
    pub fn desk() -> Self {
        PipelineConfig {
            voxel_size: 0.08,
            fbv_extent: 3.2,
            d_max: 4.0,
            channels_p2: 12,
            channels_p3: 16,
            channels_p4: 16,
            stem_channels: 8,
            head2d_channels: 8,
            volume_channels: 8,
            frames_per_fragment: 5,
            ..Default::default()
        }
    }

    pub fn keyframe_policy(&self) -> KeyframePolicy {
        KeyframePolicy {
            theta_deg: self.theta_key,
            t_key: self.t_key,
            frames_per_fragment: self.frames_per_fragment,
            rule: self.keyframe_rule,
        }
    }

    /// Threshold for mesh metrics; defaults to two finest voxels.
    pub fn eval_threshold(&self) -> f64 {
        if self.eval_tau > 0.0 {
            self.eval_tau
        } else {
            2.0 * self.voxel_size
        }
    }

    pub fn apply_ablation(&mut self, row: Ablation) {
        let (bin, ar, pvr) = match row {
            Ablation::A => (false, true, true),
            Ablation::B => (true, false, false),
            Ablation::C => (true, false, true),
            Ablation::D => (true, true, false),
            Ablation::E => (true, true, true),
        };
        self.enable_binomial_sem = bin;
        self.enable_anchor = ar;
        self.enable_pv_match = pvr;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || CdrError::Config(format!("bad value {value:?} for {key}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        let flag = || parse_bool(value).ok_or_else(bad);
        match key {
            "seed" => self.seed = num!(),
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad()),
                }
            }
            "theta_key" => self.theta_key = num!(),
            "t_key" => self.t_key = num!(),
            "frames_per_fragment" => self.frames_per_fragment = num!(),
            "keyframe_rule" => {
                self.keyframe_rule = match value {
                    "or" => KeyframeRule::Or,
                    "and" => KeyframeRule::And,
                    _ => return Err(bad()),
                }
            }
            "voxel_size" => self.voxel_size = num!(),
            "fbv_extent" => self.fbv_extent = num!(),
            "truncation_voxels" => self.truncation_voxels = num!(),
            "d_min" => self.d_min = num!(),
            "d_max" => self.d_max = num!(),
            "depth_planes" => self.depth_planes = num!(),
            "num_classes" => self.num_classes = num!(),
            "stem_channels" => self.stem_channels = num!(),
            "channels_p2" => self.channels_p2 = num!(),
            "channels_p3" => self.channels_p3 = num!(),
            "channels_p4" => self.channels_p4 = num!(),
            "head2d_channels" => self.head2d_channels = num!(),
            "reg_channels" => self.reg_channels = num!(),
            "volume_channels" => self.volume_channels = num!(),
            "cond_channels" => self.cond_channels = num!(),
            "ref_channels" => self.ref_channels = num!(),
            "theta_occ" => self.theta_occ = num!(),
            "tau_occ_factor" => self.tau_occ_factor = num!(),
            "anchor_radius" => self.anchor_radius = num!(),
            "enable_anchor" => self.enable_anchor = flag()?,
            "enable_pv_match" => self.enable_pv_match = flag()?,
            "enable_binomial_sem" => self.enable_binomial_sem = flag()?,
            "soft_intersection" => self.soft_intersection = flag()?,
            "share_pointflow" => self.share_pointflow = flag()?,
            "freeze_backbone" => self.freeze_backbone = flag()?,
            "alpha_2" => self.alpha[0] = num!(),
            "alpha_3" => self.alpha[1] = num!(),
            "alpha_4" => self.alpha[2] = num!(),
            "beta_2" => self.beta[0] = num!(),
            "beta_3" => self.beta[1] = num!(),
            "beta_4" => self.beta[2] = num!(),
            "gamma_2" => self.gamma[0] = num!(),
            "gamma_3" => self.gamma[1] = num!(),
            "gamma_4" => self.gamma[2] = num!(),
            "lambda_occ" => self.lambda_occ = num!(),
            "mu" => self.mu = num!(),
            "lr" => self.lr = num!(),
            "train_steps" => self.train_steps = num!(),
            "checkpoint_every" => self.checkpoint_every = num!(),
            "log_terms" => self.log_terms = flag()?,
            "weights" => self.weights = (!value.is_empty()).then(|| PathBuf::from(value)),
            "mesh_skip_absent" => self.mesh_skip_absent = flag()?,
            "eval_tau" => self.eval_tau = num!(),
            "eval_samples" => self.eval_samples = num!(),
            "miou_voxels" => self.miou_voxels = flag()?,
            "synth_frames" => self.synth_frames = num!(),
            "synth_width" => self.synth_width = num!(),
            "synth_height" => self.synth_height = num!(),
            "synth_hfov" => self.synth_hfov = num!(),
            "synth_room" => {
                let v: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(bad());
                }
                self.synth_room = Vec3::new(v[0], v[1], v[2]);
            }
            "synth_orbit_radius" => self.synth_orbit_radius = num!(),
            "synth_orbit_height" => self.synth_orbit_height = num!(),
            "synth_orbit_turns" => self.synth_orbit_turns = num!(),
            "preset" => match value {
                "desk" => {
                    let seed = self.seed;
                    *self = PipelineConfig::desk();
                    self.seed = seed;
                }
                "default" => *self = PipelineConfig::default(),
                _ => return Err(bad()),
            },
            "ablation" => {
                let row = match value {
                    "a" => Ablation::A,
                    "b" => Ablation::B,
                    "c" => Ablation::C,
                    "d" => Ablation::D,
                    "e" => Ablation::E,
                    _ => return Err(bad()),
                };
                self.apply_ablation(row);
            }
            _ => return Err(CdrError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `NAME=on|off` override of a boolean key.
    pub fn apply_toggle(&mut self, toggle: &str) -> Result<()> {
        let (k, v) = toggle
            .split_once('=')
            .ok_or_else(|| CdrError::Config(format!("toggle {toggle:?} is not NAME=on|off")))?;
        let (k, v) = (k.trim(), v.trim());
        if parse_bool(v).is_none() {
            return Err(CdrError::Config(format!("toggle {toggle:?} is not NAME=on|off")));
        }
        self.set(k, v)
    }

    /// Applies `key = value` lines in order; `#` starts a comment. A
    /// `preset` line resets everything set before it.
    pub fn parse_into(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CdrError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CdrError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = PipelineConfig::default();
        c.parse_into(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CdrError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        check(self.theta_key > 0.0 && self.t_key > 0.0, "key-frame thresholds must be positive");
        check(self.frames_per_fragment >= 2, "frames_per_fragment must be at least 2");
        check(self.voxel_size > 0.0, "voxel_size must be positive");
        check(self.fbv_extent > 0.0, "fbv_extent must be positive");
        check(self.truncation_voxels > 0.0, "truncation_voxels must be positive");
        check(self.d_min > 0.0 && self.d_min < self.d_max, "need 0 < d_min < d_max");
        check(self.depth_planes >= 2, "depth_planes must be at least 2");
        check(self.num_classes >= 1 && self.num_classes < 255, "num_classes must be in 1..255");
        let widths = [
            self.stem_channels,
            self.channels_p2,
            self.channels_p3,
            self.channels_p4,
            self.head2d_channels,
            self.reg_channels,
            self.volume_channels,
            self.cond_channels,
            self.ref_channels,
        ];
        check(widths.iter().all(|w| *w > 0), "channel widths must be positive");
        check(self.theta_occ > 0.0 && self.theta_occ < 1.0, "theta_occ must be in (0, 1)");
        check(self.tau_occ_factor > 0.0, "tau_occ_factor must be positive");
        check(self.anchor_radius >= 0, "anchor_radius must be non-negative");
        let w = self.alpha.iter().chain(&self.beta).chain(&self.gamma);
        check(w.clone().all(|v| *v >= 0.0), "loss weights must be non-negative");
        check(self.alpha.iter().any(|v| *v > 0.0), "at least one alpha must be positive");
        check(self.lambda_occ >= 0.0 && self.mu >= 0.0, "lambda_occ and mu must be non-negative");
        check(self.lr > 0.0, "lr must be positive");
        check(self.eval_samples > 0, "eval_samples must be positive");
        check(
            self.synth_width % 16 == 0 && self.synth_height % 16 == 0 && self.synth_width > 0 && self.synth_height > 0,
            "synthetic image size must be a positive multiple of 16",
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CdrError::Config(errs.join("; ")))
        }
    }

    /// Truncation distance at stage `s`.
    pub fn truncation(&self, stage: u8) -> f64 {
        self.truncation_voxels * self.voxel_size * f64::from(1u32 << (stage - 2))
    }

    pub fn stage_channels(&self, stage: u8) -> usize {
        match stage {
            2 => self.channels_p2,
            3 => self.channels_p3,
            _ => self.channels_p4,
        }
    }

    /// Index into the per-stage weight arrays.
    pub fn stage_slot(stage: u8) -> usize {
        (stage - 2) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_comments() {
        let c = PipelineConfig::parse("seed = 7 # trailing\n\n# full line\nenable_anchor = off\nalpha_4=2\n").unwrap();
        assert_eq!(c.seed, 7);
        assert!(!c.enable_anchor);
        assert_eq!(c.alpha[2], 2.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::parse("enable_anchr = on").unwrap_err();
        assert!(matches!(err, CdrError::Config(m) if m.contains("enable_anchr")));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::parse("d_min = 5\nd_max = 1").is_err());
        assert!(PipelineConfig::parse("theta_occ = maybe").is_err());
        assert!(PipelineConfig::parse("frames_per_fragment = 1").is_err());
    }

    #[test]
    fn toggles_override_flags() {
        let mut c = PipelineConfig::default();
        c.apply_toggle("enable_pv_match=off").unwrap();
        assert!(!c.enable_pv_match);
        assert!(c.apply_toggle("enable_pv_match").is_err());
        assert!(c.apply_toggle("voxel_size=on").is_err());
    }

    #[test]
    fn ablation_rows() {
        let mut c = PipelineConfig::default();
        c.apply_ablation(Ablation::B);
        assert!(!c.enable_anchor && !c.enable_pv_match && c.enable_binomial_sem);
        c.apply_ablation(Ablation::A);
        assert!(c.enable_anchor && c.enable_pv_match && !c.enable_binomial_sem);
    }

    #[test]
    fn preset_resets_earlier_keys() {
        let c = PipelineConfig::parse("mu = 3\npreset = desk\nlr = 0.01").unwrap();
        assert_eq!(c.mu, 1.0);
        assert_eq!(c.voxel_size, 0.08);
        assert_eq!(c.lr, 0.01);
    }
}
