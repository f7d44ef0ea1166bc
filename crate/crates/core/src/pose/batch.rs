use super::{DataError, GlossSequence, PoseSequence, BOS, EOS, PAD};

/// Zero-padded poses and BOS/EOS-shifted token rows with validity masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_frames: usize,
    pub joints: usize,
    /// `size × max_frames × joints × 2`
    pub poses: Vec<f64>,
    /// `size × max_frames`
    pub pose_mask: Vec<bool>,
    pub frame_lengths: Vec<usize>,
    /// Width of each token row, `L_max + 1`.
    pub text_len: usize,
    /// BOS followed by the glosses, PAD-filled.
    pub tokens_in: Vec<usize>,
    /// The glosses followed by EOS, PAD-filled.
    pub tokens_out: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub gloss_lengths: Vec<usize>,
}

impl Batch {
    pub fn frame_width(&self) -> usize {
        self.joints * 2
    }

    /// Poses of sample `i`, `max_frames × joints × 2`.
    pub fn sample_poses(&self, i: usize) -> &[f64] {
        let w = self.max_frames * self.frame_width();
        &self.poses[i * w..(i + 1) * w]
    }
}

pub fn pad_and_mask(samples: &[(&PoseSequence, &GlossSequence)]) -> Result<Batch, DataError> {
    let Some((first, _)) = samples.first() else {
        return Err(DataError::Batch("empty sample list".into()));
    };
    let joints = first.joints();
    if samples.iter().any(|(p, _)| p.joints() != joints) {
        return Err(DataError::Batch("samples disagree on joint count".into()));
    }
    let size = samples.len();
    let max_frames = samples.iter().map(|(p, _)| p.n_frames()).max().unwrap_or(0);
    let max_gloss = samples.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
    let text_len = max_gloss + 1;
    let fw = joints * 2;

    let mut poses = vec![0.0; size * max_frames * fw];
    let mut pose_mask = vec![false; size * max_frames];
    let mut tokens_in = vec![PAD; size * text_len];
    let mut tokens_out = vec![PAD; size * text_len];
    let mut token_mask = vec![false; size * text_len];
    for (i, (p, g)) in samples.iter().enumerate() {
        let n = p.n_frames();
        let o = i * max_frames * fw;
        poses[o..o + n * fw].copy_from_slice(p.frames());
        pose_mask[i * max_frames..i * max_frames + n].fill(true);
        let row = i * text_len;
        tokens_in[row] = BOS;
        for (t, &id) in g.ids().iter().enumerate() {
            tokens_in[row + t + 1] = id;
            tokens_out[row + t] = id;
        }
        tokens_out[row + g.len()] = EOS;
        token_mask[row..row + g.len() + 1].fill(true);
    }
    Ok(Batch {
        size,
        max_frames,
        joints,
        poses,
        pose_mask,
        frame_lengths: samples.iter().map(|(p, _)| p.n_frames()).collect(),
        text_len,
        tokens_in,
        tokens_out,
        token_mask,
        gloss_lengths: samples.iter().map(|(_, g)| g.len()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{KeypointLayout, Part};

    fn hands(t: usize, fill: f64) -> PoseSequence {
        let layout = KeypointLayout::from_parts(&[Part::LeftHand, Part::RightHand]);
        PoseSequence::new(vec![fill; t * 84], t, layout).unwrap()
    }

    #[test]
    fn pose_padding_and_mask() {
        let (a, b) = (hands(4, 1.5), hands(2, -2.0));
        let g = GlossSequence::new(vec![4]).unwrap();
        let batch = pad_and_mask(&[(&a, &g), (&b, &g)]).unwrap();
        assert_eq!(batch.max_frames, 4);
        assert_eq!(&batch.pose_mask[4..8], &[true, true, false, false]);
        let s1 = batch.sample_poses(1);
        assert!(s1[..2 * 84].iter().all(|&v| v == -2.0));
        assert!(s1[2 * 84..].iter().all(|&v| v == 0.0));
        assert!(batch.sample_poses(0).iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_sample_masks_are_full() {
        let a = hands(3, 1.0);
        let g = GlossSequence::new(vec![5, 6]).unwrap();
        let batch = pad_and_mask(&[(&a, &g)]).unwrap();
        assert!(batch.pose_mask.iter().all(|&m| m));
        assert!(batch.token_mask.iter().all(|&m| m));
    }

    #[test]
    fn token_shift_construction() {
        let a = hands(1, 1.0);
        let g1 = GlossSequence::new(vec![7, 8]).unwrap();
        let g2 = GlossSequence::new(vec![4, 5, 6]).unwrap();
        let batch = pad_and_mask(&[(&a, &g1), (&a, &g2)]).unwrap();
        assert_eq!(batch.text_len, 4);
        assert_eq!(&batch.tokens_in[0..4], &[BOS, 7, 8, PAD]);
        assert_eq!(&batch.tokens_out[0..4], &[7, 8, EOS, PAD]);
        assert_eq!(&batch.token_mask[0..4], &[true, true, true, false]);
        assert_eq!(&batch.tokens_in[4..8], &[BOS, 4, 5, 6]);
        assert_eq!(&batch.tokens_out[4..8], &[4, 5, 6, EOS]);
        // tokens_out is tokens_in shifted left by one, then EOS
        for r in 0..2 {
            let len = batch.gloss_lengths[r];
            for t in 0..len {
                assert_eq!(batch.tokens_out[r * 4 + t], batch.tokens_in[r * 4 + t + 1]);
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(pad_and_mask(&[]), Err(DataError::Batch(_))));
        let a = hands(1, 1.0);
        let b = PoseSequence::new(vec![1.0; 172], 1, KeypointLayout::full()).unwrap();
        let g = GlossSequence::new(vec![4]).unwrap();
        assert!(pad_and_mask(&[(&a, &g), (&b, &g)]).is_err());
    }
}
