use rand::Rng;

use crate::encoder::{TokenSequence, TokenTag};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Representation-level augmentation applied to the backbone tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentationKind {
    /// Zero every token of one uniformly chosen view.
    ViewCutoff,
    /// Zero each content token independently with probability `p`.
    TokenCutoff { p: f64 },
    /// Zero each feature column (across all tokens of a sample) with probability `p`.
    FeatureCutoff { p: f64 },
    None,
}

impl AugmentationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentationKind::ViewCutoff => "view_cutoff",
            AugmentationKind::TokenCutoff { .. } => "token_cutoff",
            AugmentationKind::FeatureCutoff { .. } => "feature_cutoff",
            AugmentationKind::None => "none",
        }
    }
}

/// Multiplicative 0/1 mask over a `(batch · len) × d` token matrix plus, for
/// view cutoff, the view chosen for each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffMask {
    pub mask: Tensor,
    pub selected_views: Vec<usize>,
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("cutoff probability must be in (0, 1), got {p}")));
    }
    Ok(())
}

/// Mask zeroing the tokens of `views[s]` in sample `s`.
pub fn view_mask(view_map: &[TokenTag], d: usize, views: &[usize]) -> Tensor {
    let n = view_map.len();
    let mut mask = Tensor::full(&[views.len() * n, d], 1.0);
    for (s, &sel) in views.iter().enumerate() {
        for (t, tag) in view_map.iter().enumerate() {
            if *tag == TokenTag::View(sel) {
                let r = s * n + t;
                mask.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    mask
}

/// Draws the mask for `kind`. Instruction and summarization tokens are never
/// removed by view cutoff; token cutoff may drop any non-summarization token.
pub fn cutoff_mask<R: Rng>(
    kind: &AugmentationKind,
    view_map: &[TokenTag],
    batch: usize,
    d: usize,
    rng: &mut R,
) -> Result<CutoffMask> {
    let n = view_map.len();
    match *kind {
        AugmentationKind::ViewCutoff => {
            let v = view_map
                .iter()
                .filter_map(|t| match t {
                    TokenTag::View(i) => Some(i + 1),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            if v < 2 {
                return Err(Error::InvalidArgument(format!("view cutoff needs at least 2 views, got {v}")));
            }
            let selected: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..v)).collect();
            Ok(CutoffMask {
                mask: view_mask(view_map, d, &selected),
                selected_views: selected,
            })
        }
        AugmentationKind::TokenCutoff { p } => {
            check_p(p)?;
            let mut mask = Tensor::full(&[batch * n, d], 1.0);
            for r in 0..batch * n {
                if view_map[r % n] != TokenTag::Summarization && rng.gen_bool(p) {
                    mask.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Ok(CutoffMask {
                mask,
                selected_views: vec![],
            })
        }
        AugmentationKind::FeatureCutoff { p } => {
            check_p(p)?;
            let mut mask = Tensor::full(&[batch * n, d], 1.0);
            for s in 0..batch {
                for c in 0..d {
                    if rng.gen_bool(p) {
                        for t in 0..n {
                            if view_map[t] != TokenTag::Summarization {
                                mask.data_mut()[(s * n + t) * d + c] = 0.0;
                            }
                        }
                    }
                }
            }
            Ok(CutoffMask {
                mask,
                selected_views: vec![],
            })
        }
        AugmentationKind::None => Ok(CutoffMask {
            mask: Tensor::full(&[batch * n, d], 1.0),
            selected_views: vec![],
        }),
    }
}

/// Applies a precomputed mask to a token sequence.
pub fn apply_mask(g: &mut Graph, seq: &TokenSequence, mask: &CutoffMask) -> Result<TokenSequence> {
    let m = g.constant(mask.mask.clone())?;
    let tokens = g.mul(seq.tokens, m)?;
    Ok(TokenSequence {
        tokens,
        batch: seq.batch,
        view_map: seq.view_map.clone(),
    })
}

/// View cutoff on a token sequence; returns the masked sequence and the view
/// chosen for each sample.
pub fn view_cutoff<R: Rng>(g: &mut Graph, seq: &TokenSequence, rng: &mut R) -> Result<(TokenSequence, Vec<usize>)> {
    let d = g.value(seq.tokens).cols();
    let mask = cutoff_mask(&AugmentationKind::ViewCutoff, &seq.view_map, seq.batch, d, rng)?;
    Ok((apply_mask(g, seq, &mask)?, mask.selected_views))
}

pub fn token_cutoff<R: Rng>(g: &mut Graph, seq: &TokenSequence, rng: &mut R, p: f64) -> Result<TokenSequence> {
    let d = g.value(seq.tokens).cols();
    let mask = cutoff_mask(&AugmentationKind::TokenCutoff { p }, &seq.view_map, seq.batch, d, rng)?;
    apply_mask(g, seq, &mask)
}

pub fn feature_cutoff<R: Rng>(g: &mut Graph, seq: &TokenSequence, rng: &mut R, p: f64) -> Result<TokenSequence> {
    let d = g.value(seq.tokens).cols();
    let mask = cutoff_mask(&AugmentationKind::FeatureCutoff { p }, &seq.view_map, seq.batch, d, rng)?;
    apply_mask(g, seq, &mask)
}

/// Embedding-level variant of view cutoff: splits the `d_proj` features of
/// `z` into `views` contiguous slices and zeroes the slice of a random view
/// per sample.
pub fn embedding_cutoff_mask<R: Rng>(batch: usize, d_proj: usize, views: usize, rng: &mut R) -> Result<CutoffMask> {
    if views < 2 {
        return Err(Error::InvalidArgument(format!("view cutoff needs at least 2 views, got {views}")));
    }
    let mut mask = Tensor::full(&[batch, d_proj], 1.0);
    let mut selected = Vec::with_capacity(batch);
    for s in 0..batch {
        let v = rng.gen_range(0..views);
        let (lo, hi) = (v * d_proj / views, (v + 1) * d_proj / views);
        mask.data_mut()[s * d_proj + lo..s * d_proj + hi].iter_mut().for_each(|x| *x = 0.0);
        selected.push(v);
    }
    Ok(CutoffMask {
        mask,
        selected_views: selected,
    })
}

pub fn apply_embedding_mask(g: &mut Graph, z: Var, mask: &CutoffMask) -> Result<Var> {
    let m = g.constant(mask.mask.clone())?;
    Ok(g.mul(z, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use TokenTag::*;

    fn view_map() -> Vec<TokenTag> {
        vec![View(0), View(0), View(0), View(0), View(1), View(1), View(1), View(1), Instruction]
    }

    fn seq_in(g: &mut Graph, batch: usize) -> TokenSequence {
        let n = view_map().len();
        let data = (0..batch * n * 5).map(|i| (i as f64 * 0.37).sin() + 0.1).collect();
        let tokens = g.constant(Tensor::new(vec![batch * n, 5], data).unwrap()).unwrap();
        TokenSequence {
            tokens,
            batch,
            view_map: view_map(),
        }
    }

    #[test]
    fn masking_view_one_zeroes_first_tokens_only() {
        let mut g = Graph::new();
        let seq = seq_in(&mut g, 1);
        let mask = CutoffMask {
            mask: view_mask(&seq.view_map, 5, &[0]),
            selected_views: vec![0],
        };
        let out = apply_mask(&mut g, &seq, &mask).unwrap();
        let (before, after) = (g.value(seq.tokens), g.value(out.tokens));
        for r in 0..9 {
            if r < 4 {
                assert!(after.row(r).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(after.row(r), before.row(r));
            }
        }
    }

    #[test]
    fn instruction_token_survives_every_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let seq = seq_in(&mut g, 1);
        for _ in 0..1000 {
            let (out, sel) = view_cutoff(&mut g, &seq, &mut rng).unwrap();
            assert!(sel[0] < 2);
            assert_eq!(g.value(out.tokens).row(8), g.value(seq.tokens).row(8));
        }
    }

    #[test]
    fn view_selection_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = cutoff_mask(&AugmentationKind::ViewCutoff, &view_map(), 10_000, 1, &mut rng).unwrap();
        let first = m.selected_views.iter().filter(|&&v| v == 0).count();
        assert!((4700..=5300).contains(&first), "{first}");
    }

    #[test]
    fn view_cutoff_requires_two_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vm = vec![View(0), View(0), Instruction];
        assert!(cutoff_mask(&AugmentationKind::ViewCutoff, &vm, 2, 3, &mut rng).is_err());
    }

    #[test]
    fn cutoff_probability_must_be_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [0.0, 1.0, -0.1, 1.5] {
            assert!(cutoff_mask(&AugmentationKind::TokenCutoff { p }, &view_map(), 1, 2, &mut rng).is_err());
            assert!(cutoff_mask(&AugmentationKind::FeatureCutoff { p }, &view_map(), 1, 2, &mut rng).is_err());
        }
    }

    #[test]
    fn tiny_p_is_identity_when_nothing_fires() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = cutoff_mask(&AugmentationKind::TokenCutoff { p: 1e-12 }, &view_map(), 4, 3, &mut rng).unwrap();
        assert!(m.mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn feature_cutoff_zeroes_whole_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = view_map().len();
        let m = cutoff_mask(&AugmentationKind::FeatureCutoff { p: 0.3 }, &view_map(), 5, 8, &mut rng).unwrap();
        for s in 0..5 {
            for c in 0..8 {
                let col: Vec<f64> = (0..n).map(|t| m.mask.at(s * n + t, c)).collect();
                assert!(col.iter().all(|&v| v == col[0]));
            }
        }
    }

    #[test]
    fn zeroed_fraction_matches_p() {
        // 10 000 Bernoulli(p) draws: ±3σ around p.
        let p = 0.25;
        let sigma = (p * (1.0 - p) / 10_000f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vm = vec![View(0), View(1), Instruction, View(0), View(1)];
        let tok = cutoff_mask(&AugmentationKind::TokenCutoff { p }, &vm, 2000, 1, &mut rng).unwrap();
        let frac = tok.mask.data().iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((frac - p).abs() < 3.0 * sigma, "{frac}");

        let feat = cutoff_mask(&AugmentationKind::FeatureCutoff { p }, &[View(0)], 1000, 10, &mut rng).unwrap();
        let frac = feat.mask.data().iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((frac - p).abs() < 3.0 * sigma, "{frac}");
    }

    #[test]
    fn embedding_mask_zeroes_one_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = embedding_cutoff_mask(3, 16, 2, &mut rng).unwrap();
        for s in 0..3 {
            let zeros = m.mask.row(s).iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 8);
        }
    }
}
