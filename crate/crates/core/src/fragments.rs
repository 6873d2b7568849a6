//! Key-frame selection and fragment assembly.

use crate::camera::{Intrinsics, Pose};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyframeRule {
    /// Accept when either threshold is exceeded.
    Or,
    /// Accept only when both thresholds are exceeded.
    And,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframePolicy {
    pub theta_deg: f64,
    pub t_key: f64,
    pub frames_per_fragment: usize,
    pub rule: KeyframeRule,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        KeyframePolicy {
            theta_deg: 15.0,
            t_key: 0.1,
            frames_per_fragment: 9,
            rule: KeyframeRule::Or,
        }
    }
}

impl KeyframePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_deg > 0.0 && self.t_key > 0.0 && self.frames_per_fragment >= 2) {
            return invalid(format!("bad key-frame policy {self:?}"));
        }
        Ok(())
    }
}

pub fn is_keyframe(candidate: &Pose, last_key: &Pose, policy: &KeyframePolicy) -> bool {
    let rotated = candidate.rotation_angle_to(last_key) > policy.theta_deg;
    let moved = candidate.translation_to(last_key) > policy.t_key;
    match policy.rule {
        KeyframeRule::Or => rotated || moved,
        KeyframeRule::And => rotated && moved,
    }
}

/// A frame of the input stream; images are looked up by `index`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosedFrame {
    pub index: usize,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub index: usize,
    pub frames: Vec<PosedFrame>,
}

impl Fragment {
    pub fn reference(&self) -> &PosedFrame {
        &self.frames[0]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Streaming key-frame selector and fragment builder.
#[derive(Clone, Debug)]
pub struct FragmentAssembler {
    policy: KeyframePolicy,
    last_key: Option<Pose>,
    pending: Vec<PosedFrame>,
    emitted: usize,
    frames_seen: usize,
    keyframes: usize,
}

impl FragmentAssembler {
    pub fn new(policy: KeyframePolicy) -> Result<Self> {
        policy.validate()?;
        Ok(FragmentAssembler {
            policy,
            last_key: None,
            pending: Vec::new(),
            emitted: 0,
            frames_seen: 0,
            keyframes: 0,
        })
    }

    /// Feeds one frame; returns a fragment once `N_k` key frames are pending.
    pub fn push(&mut self, frame: PosedFrame) -> Option<Fragment> {
        self.frames_seen += 1;
        let accept = match &self.last_key {
            None => true,
            Some(last) => is_keyframe(&frame.pose, last, &self.policy),
        };
        if !accept {
            return None;
        }
        self.last_key = Some(frame.pose);
        self.keyframes += 1;
        self.pending.push(frame);
        if self.pending.len() < self.policy.frames_per_fragment {
            return None;
        }
        let frag = Fragment {
            index: self.emitted,
            frames: std::mem::take(&mut self.pending),
        };
        self.emitted += 1;
        Some(frag)
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn keyframes(&self) -> usize {
        self.keyframes
    }

    /// Key frames accepted but not yet part of an emitted fragment.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }
}

pub fn assemble_fragments(frames: impl IntoIterator<Item = PosedFrame>, policy: &KeyframePolicy) -> Result<Vec<Fragment>> {
    let mut asm = FragmentAssembler::new(*policy)?;
    Ok(frames.into_iter().filter_map(|f| asm.push(f)).collect())
}
