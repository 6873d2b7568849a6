//! Strided-convolution feature pyramid and the 2D semantic head.

use cdr_tensor::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::PipelineConfig;
use crate::error::{invalid, Result};

/// Per-view feature maps `[C_s, H/2^s, W/2^s]` for s = 2, 3, 4.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
    pub height: usize,
    pub width: usize,
}

impl Pyramid {
    pub fn level(&self, stage: u8) -> Var {
        match stage {
            2 => self.p2,
            3 => self.p3,
            _ => self.p4,
        }
    }

    /// `(rows, cols)` of the stage-`s` map.
    pub fn size(&self, stage: u8) -> (usize, usize) {
        (self.height >> stage, self.width >> stage)
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &PipelineConfig, rng: &mut impl Rng) {
    let widths = [3, cfg.stem_channels, cfg.channels_p2, cfg.channels_p3, cfg.channels_p4];
    for i in 0..4 {
        let (ci, co) = (widths[i], widths[i + 1]);
        store.init_uniform(&format!("bb.conv{i}.w"), &[co, ci, 3, 3], ci * 9, co * 9, rng);
        store.init_const(&format!("bb.conv{i}.b"), &[co], 0.0);
    }
    let (c2, ch, nc) = (cfg.channels_p2, cfg.head2d_channels, cfg.num_classes);
    store.init_uniform("sem2d.w1", &[ch, c2, 1, 1], c2, ch, rng);
    store.init_const("sem2d.b1", &[ch], 0.0);
    store.init_uniform("sem2d.w2", &[nc, ch, 1, 1], ch, nc, rng);
    store.init_const("sem2d.b2", &[nc], 0.0);
}

/// `image` is `[3, H, W]` with H and W divisible by 16.
pub fn extract_pyramid(tape: &mut Tape, p: &Bindings, image: Var) -> Result<Pyramid> {
    let s = tape.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 || s[1] == 0 || s[2] == 0 {
        return invalid(format!("extract_pyramid: need [3, H, W] with H, W divisible by 16, got {s:?}"));
    }
    let mut x = image;
    let mut levels = Vec::with_capacity(4);
    for i in 0..4 {
        let y = tape.conv2d(x, p.var(&format!("bb.conv{i}.w")), Some(p.var(&format!("bb.conv{i}.b"))), 2, 1)?;
        x = tape.relu(y);
        levels.push(x);
    }
    Ok(Pyramid {
        p2: levels[1],
        p3: levels[2],
        p4: levels[3],
        height: s[1],
        width: s[2],
    })
}

/// Pointwise decoder on P2 pooled to 1/16 resolution: `[N_c, H/16, W/16]` logits.
pub fn semantic_head_2d(tape: &mut Tape, p: &Bindings, p2: Var) -> Result<Var> {
    let h = tape.conv2d(p2, p.var("sem2d.w1"), Some(p.var("sem2d.b1")), 1, 0)?;
    let h = tape.relu(h);
    let h = tape.avg_pool2d(h, 4)?;
    Ok(tape.conv2d(h, p.var("sem2d.w2"), Some(p.var("sem2d.b2")), 1, 0)?)
}

/// Column index of each row maximum; ties go to the smallest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
