use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Assignment of head channels to temporal offsets `-t_w ..= t_w`.
///
/// Channel `c` of a mixed key/value is read from the frame at the offset
/// whose block contains `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlan {
    t_w: usize,
    head_dim: usize,
    /// `blocks[j]` holds the channels for offset `j - t_w`.
    blocks: Vec<Vec<usize>>,
}

impl ChannelPlan {
    /// Contiguous equal blocks in offset order; the remainder goes to offset 0.
    pub fn build(head_dim: usize, t_w: usize) -> Result<Self> {
        let n = 2 * t_w + 1;
        if head_dim < n {
            return Err(Error::invalid(format!(
                "channel plan: head_dim {head_dim} < 2*t_w+1 = {n}"
            )));
        }
        let base = head_dim / n;
        let extra = head_dim - base * n;
        let mut blocks = Vec::with_capacity(n);
        let mut next = 0;
        for j in 0..n {
            let size = if j == t_w { base + extra } else { base };
            blocks.push((next..next + size).collect());
            next += size;
        }
        Ok(Self {
            t_w,
            head_dim,
            blocks,
        })
    }

    /// Validates an explicit partition; `blocks[j]` is offset `j - t_w`.
    pub fn from_blocks(t_w: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        if blocks.len() != 2 * t_w + 1 {
            return Err(Error::invalid(format!(
                "channel plan: expected {} offsets, got {}",
                2 * t_w + 1,
                blocks.len()
            )));
        }
        let head_dim: usize = blocks.iter().map(Vec::len).sum();
        let mut seen = vec![false; head_dim];
        for block in &blocks {
            if block.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid("channel plan: block not strictly ascending"));
            }
            for &c in block {
                if c >= head_dim || std::mem::replace(&mut seen[c], true) {
                    return Err(Error::invalid(format!(
                        "channel plan: channel {c} repeated or out of range"
                    )));
                }
            }
        }
        Ok(Self {
            t_w,
            head_dim,
            blocks,
        })
    }

    pub fn t_w(&self) -> usize {
        self.t_w
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn offsets(&self) -> impl Iterator<Item = isize> {
        let t_w = self.t_w as isize;
        -t_w..=t_w
    }

    pub fn channels(&self, offset: isize) -> &[usize] {
        let j = offset + self.t_w as isize;
        assert!(
            j >= 0 && (j as usize) < self.blocks.len(),
            "offset {offset} outside window"
        );
        &self.blocks[j as usize]
    }

    /// Temporal offset for every channel.
    pub fn channel_offsets(&self) -> Vec<isize> {
        let mut out = vec![0; self.head_dim];
        for delta in self.offsets() {
            for &c in self.channels(delta) {
                out[c] = delta;
            }
        }
        out
    }

    /// One `offset δ: c0,c1,...` line per offset.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for delta in self.offsets() {
            let list: Vec<String> = self.channels(delta).iter().map(|c| c.to_string()).collect();
            writeln!(out, "offset {delta}: {}", list.join(",")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let parse_err = |reason: String| Error::Parse {
                line: i + 1,
                reason,
            };
            let rest = line
                .trim()
                .strip_prefix("offset ")
                .ok_or_else(|| parse_err(format!("expected `offset δ: ...`, got `{line}`")))?;
            let (delta, list) = rest
                .split_once(':')
                .ok_or_else(|| parse_err("missing `:`".into()))?;
            let delta: isize = delta
                .trim()
                .trim_start_matches('+')
                .parse()
                .map_err(|e| parse_err(format!("bad offset: {e}")))?;
            let channels = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| parse_err(format!("bad channel `{s}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push((delta, channels));
        }
        if entries.is_empty() || entries.len() % 2 == 0 {
            return Err(Error::Parse {
                line: entries.len(),
                reason: "need an odd, non-zero number of offsets".into(),
            });
        }
        let t_w = entries.len() / 2;
        entries.sort_by_key(|(d, _)| *d);
        for (j, (delta, _)) in entries.iter().enumerate() {
            if *delta != j as isize - t_w as isize {
                return Err(Error::Parse {
                    line: j + 1,
                    reason: format!("offsets must cover -{t_w}..={t_w} once each"),
                });
            }
        }
        Self::from_blocks(t_w, entries.into_iter().map(|(_, c)| c).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_blocks() {
        let p = ChannelPlan::build(6, 1).unwrap();
        assert_eq!(p.channels(-1), &[0, 1]);
        assert_eq!(p.channels(0), &[2, 3]);
        assert_eq!(p.channels(1), &[4, 5]);
    }

    #[test]
    fn zero_window_keeps_every_channel() {
        let p = ChannelPlan::build(5, 0).unwrap();
        assert_eq!(p.channels(0), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn remainder_goes_to_current_frame() {
        let p = ChannelPlan::build(64, 1).unwrap();
        let sizes: Vec<usize> = p.offsets().map(|d| p.channels(d).len()).collect();
        assert_eq!(sizes, vec![21, 22, 21]);
        assert_eq!(p.channels(0)[0], 21);
    }

    #[test]
    fn too_narrow_head_is_rejected() {
        assert!(ChannelPlan::build(4, 2).is_err());
        assert!(ChannelPlan::build(5, 2).is_ok());
    }

    #[test]
    fn text_format() {
        let p = ChannelPlan::build(6, 1).unwrap();
        assert_eq!(
            p.to_text(),
            "offset -1: 0,1\noffset 0: 2,3\noffset 1: 4,5\n"
        );
        assert_eq!(ChannelPlan::from_text(&p.to_text()).unwrap(), p);
        assert!(ChannelPlan::from_text("offset 0: 0,0\n").is_err());
        assert!(ChannelPlan::from_text("offset -1: 0\noffset 1: 1\n").is_err());
    }

    #[test]
    fn explicit_partition_validation() {
        assert!(ChannelPlan::from_blocks(1, vec![vec![0], vec![2, 1], vec![3]]).is_err());
        assert!(ChannelPlan::from_blocks(1, vec![vec![1], vec![0, 2], vec![3]]).is_ok());
        assert!(ChannelPlan::from_blocks(0, vec![vec![0, 2]]).is_err());
    }
}
