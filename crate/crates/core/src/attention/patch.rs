use crate::backend::{Backend, Eval};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cuts `[T×C×H×W]` frames into non-overlapping `patch×patch` blocks.
///
/// Returns `[T·S × C·patch²]`, tokens in raster order within each frame and
/// each row flattened as `(channel, row, column)`.
pub fn extract_patches(frames: &Tensor, patch: usize) -> Result<Tensor> {
    if frames.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: frames.shape().to_vec(),
            reason: "patchify expects [frames×channels×height×width]".into(),
        });
    }
    let (t, c, h, w) = (
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    );
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!(
            "patchify: {h}x{w} frames are not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let x = frames.data();
    let mut out = Vec::with_capacity(frames.len());
    for f in 0..t {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for r in 0..patch {
                        let row = ((f * c + ch) * h + py * patch + r) * w + px * patch;
                        out.extend_from_slice(&x[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![t * gh * gw, c * patch * patch], out)
}

/// Linear patch embedding: `w: [C·patch² × D]`, `b: [D]`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub w: Tensor,
    pub b: Tensor,
}

/// Embeds every patch, giving `[T × S × D]` tokens.
pub fn patchify(frames: &Tensor, patch: usize, embed: &PatchEmbed) -> Result<Tensor> {
    let rows = extract_patches(frames, patch)?;
    let tokens = Eval.linear(&rows, &embed.w, &embed.b)?;
    let t = frames.shape()[0];
    let dim = tokens.shape()[1];
    tokens.reshape(vec![t, rows.shape()[0] / t, dim])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let f = Tensor::zeros(vec![2, 3, 32, 32]).unwrap();
        assert_eq!(extract_patches(&f, 16).unwrap().shape(), &[8, 768]);
        let big = Tensor::zeros(vec![1, 3, 224, 224]).unwrap();
        assert_eq!(extract_patches(&big, 16).unwrap().shape()[0], 196);
        assert!(extract_patches(&Tensor::zeros(vec![1, 3, 30, 32]).unwrap(), 16).is_err());
    }

    #[test]
    fn one_hot_pixel_lands_in_its_token() {
        // Pixel (row 5, col 9) of a 1×1×8×12 frame with 4×4 patches: token (1, 2).
        let frame = Tensor::from_fn(
            vec![1, 1, 8, 12],
            |i| if i == 5 * 12 + 9 { 1.0 } else { 0.0 },
        )
        .unwrap();
        let embed = PatchEmbed {
            w: Tensor::from_fn(vec![16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 }).unwrap(),
            b: Tensor::zeros(vec![16]).unwrap(),
        };
        let tokens = patchify(&frame, 4, &embed).unwrap();
        assert_eq!(tokens.shape(), &[1, 6, 16]);
        for s in 0..6 {
            let nonzero = (0..16).filter(|&c| tokens.get(&[0, s, c]) != 0.0).count();
            assert_eq!(nonzero, usize::from(s == 5), "token {s}");
        }
        assert_eq!(tokens.get(&[0, 5, 4 + 1]), 1.0);
    }
}
