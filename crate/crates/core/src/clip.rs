//! Clip layout: frames with reference / adjacent / current roles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameRole {
    Reference,
    Adjacent,
    Current,
}

/// Role sequence for a clip of `t` frames whose first `r` frames are
/// references (capped so the last frame is always current).
pub fn role_layout(t: usize, r: usize) -> Vec<FrameRole> {
    if t == 0 {
        return Vec::new();
    }
    let r = r.min(t - 1);
    (0..t)
        .map(|i| {
            if i + 1 == t {
                FrameRole::Current
            } else if i < r {
                FrameRole::Reference
            } else {
                FrameRole::Adjacent
            }
        })
        .collect()
}

/// Check the `reference*, adjacent*, current` ordering.
pub fn validate_roles(roles: &[FrameRole]) -> Result<()> {
    let Some((last, rest)) = roles.split_last() else {
        return Err(Error::RoleLayout("clip has no frames".into()));
    };
    if *last != FrameRole::Current {
        return Err(Error::RoleLayout("last frame must be current".into()));
    }
    let mut seen_adjacent = false;
    for (i, r) in rest.iter().enumerate() {
        match r {
            FrameRole::Current => {
                return Err(Error::RoleLayout(format!("frame {i} is current but not last")))
            }
            FrameRole::Adjacent => seen_adjacent = true,
            FrameRole::Reference if seen_adjacent => {
                return Err(Error::RoleLayout(format!(
                    "reference frame {i} follows an adjacent frame"
                )))
            }
            FrameRole::Reference => {}
        }
    }
    Ok(())
}

/// Ordered frames of one clip with exact masks.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[3, H, W]` intensities in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// `[H, W]` binary masks.
    pub masks: Vec<Tensor>,
    pub roles: Vec<FrameRole>,
    pub timestamps: Vec<usize>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_references(&self) -> usize {
        self.roles.iter().filter(|r| **r == FrameRole::Reference).count()
    }

    pub fn current_mask(&self) -> Option<&Tensor> {
        self.masks.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use FrameRole::*;

    #[test]
    fn layout_for_six_frames_two_refs() {
        assert_eq!(
            role_layout(6, 2),
            vec![Reference, Reference, Adjacent, Adjacent, Adjacent, Current]
        );
        assert_eq!(role_layout(1, 2), vec![Current]);
        assert_eq!(role_layout(2, 2), vec![Reference, Current]);
    }

    #[test]
    fn invalid_layouts_rejected() {
        assert!(validate_roles(&[]).is_err());
        assert!(validate_roles(&[Reference, Adjacent]).is_err());
        assert!(validate_roles(&[Adjacent, Reference, Current]).is_err());
        assert!(validate_roles(&[Current, Current]).is_err());
        assert!(validate_roles(&[Reference, Adjacent, Current]).is_ok());
    }
}
