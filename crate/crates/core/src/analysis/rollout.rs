use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention maps of one image: per layer, `[heads, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Number of layers the model has; rollout refuses partial records.
    pub depth: usize,
    pub layers: Vec<Tensor<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `[N, N]`
    pub joint: Tensor<f64>,
    /// Class-token row over the patch tokens, `[g, g]`, min-max normalized.
    pub heatmap: Tensor<f64>,
}

impl AttentionRecord {
    /// Pulls sample `index` out of the `[B, heads, N, N]` maps of a forward pass.
    pub fn from_forward<T: Scalar>(g: &Graph<T>, attentions: &[Var], index: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(attentions.len());
        for &a in attentions {
            let t = g.value(a);
            let s = t.shape();
            if s.len() != 4 || index >= s[0] {
                return Err(Error::Contract(format!(
                    "attention map {s:?} has no sample {index}"
                )));
            }
            let per = s[1] * s[2] * s[3];
            let data = t.data()[index * per..(index + 1) * per]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            layers.push(Tensor::new(&s[1..], data)?);
        }
        Ok(Self {
            depth: attentions.len(),
            layers,
        })
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[0])
    }

    /// `[N, N]` map of one head in one layer.
    pub fn head_map(&self, layer: usize, head: usize) -> Result<Tensor<f64>> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("attention record is missing layer {layer}")))?;
        let s = l.shape();
        if head >= s[0] {
            return Err(Error::Contract(format!(
                "head {head} out of range for {} heads",
                s[0]
            )));
        }
        let nn = s[1] * s[2];
        Tensor::new(&s[1..], l.data()[head * nn..(head + 1) * nn].to_vec())
    }
}

/// Spreads smaller than this (relative to the largest magnitude) are treated
/// as rounding noise on a constant map.
pub const FLAT_RELATIVE_RANGE: f64 = 1e-9;

/// Rescales to `[0, 1]`; a constant input (up to [`FLAT_RELATIVE_RANGE`])
/// maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let flat = !(range > FLAT_RELATIVE_RANGE * lo.abs().max(hi.abs()));
    values
        .iter()
        .map(|&v| {
            if flat {
                0.0
            } else {
                ((v - lo) / range).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Class-token row of an `[N, N]` matrix over the patch tokens, reshaped to
/// the patch grid and min-max normalized.
pub fn class_token_map(matrix: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = matrix.shape()[0];
    let grid = ((n - 1) as f64).sqrt().round() as usize;
    if grid * grid + 1 != n {
        return Err(Error::Contract(format!(
            "{n} tokens are not a class token plus a square patch grid"
        )));
    }
    Tensor::new(&[grid, grid], min_max_normalize(&matrix.data()[1..n]))
}

/// Joint attention of one head: `Ā_L·…·Ā_1` with
/// `Ā = row_normalize(½A + ½I)`.
pub fn joint_attention(record: &AttentionRecord, head: usize) -> Result<Tensor<f64>> {
    if record.depth == 0 || record.layers.len() != record.depth {
        return Err(Error::Contract(format!(
            "attention record covers {} of {} layers",
            record.layers.len(),
            record.depth
        )));
    }
    let mut joint: Option<Tensor<f64>> = None;
    for layer in 0..record.depth {
        let a = record.head_map(layer, head)?;
        let n = a.shape()[0];
        let mut bar = a.map(|v| 0.5 * v);
        for (i, row) in bar.data_mut().chunks_mut(n).enumerate() {
            row[i] += 0.5;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        joint = Some(match joint {
            None => bar,
            Some(j) => bar.matmul(&j)?,
        });
    }
    Ok(joint.expect("depth > 0"))
}

/// [`joint_attention`] plus its class-token heatmap.
pub fn attention_rollout(record: &AttentionRecord, head: usize) -> Result<Rollout> {
    let joint = joint_attention(record, head)?;
    let heatmap = class_token_map(&joint)?;
    Ok(Rollout { joint, heatmap })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(layers: Vec<Vec<f64>>, n: usize) -> AttentionRecord {
        AttentionRecord {
            depth: layers.len(),
            layers: layers
                .into_iter()
                .map(|l| Tensor::new(&[1, n, n], l).unwrap())
                .collect(),
        }
    }

    #[test]
    fn identity_layers_give_identity() {
        let eye = Tensor::<f64>::eye(5).into_data();
        let r = attention_rollout(&record(vec![eye.clone(), eye.clone(), eye], 5), 0).unwrap();
        assert_eq!(r.joint, Tensor::eye(5));
    }

    #[test]
    fn single_layer_is_residual_average() {
        let a = vec![
            0.2,
            0.8,
            0.0,
            0.5,
            0.25,
            0.25,
            1.0 / 3.0,
            1.0 / 3.0,
            1.0 / 3.0,
        ];
        let joint = joint_attention(&record(vec![a.clone()], 3), 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = 0.5 * a[i * 3 + j] + if i == j { 0.5 } else { 0.0 };
                assert!((joint.at(&[i, j]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_layers_hand_product() {
        // A1 = uniform, A2 = [[0,1,0],[0,0,1],[1,0,0]]
        let a1 = vec![1.0 / 3.0; 9];
        let a2 = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let joint = joint_attention(&record(vec![a1, a2], 3), 0).unwrap();
        // Ā1 = diag 2/3, off 1/6; Ā2 = ½I + ½P. Row 0 of Ā2·Ā1 = ½(row0 Ā1) + ½(row1 Ā1)
        let want = [
            [5.0 / 12.0, 5.0 / 12.0, 1.0 / 6.0],
            [1.0 / 6.0, 5.0 / 12.0, 5.0 / 12.0],
            [5.0 / 12.0, 1.0 / 6.0, 5.0 / 12.0],
        ];
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((joint.at(&[i, j]) - w).abs() < 1e-15);
            }
        }
        assert!(class_token_map(&joint).is_err());
    }

    #[test]
    fn missing_layer_and_bad_head() {
        let mut rec = record(vec![Tensor::<f64>::eye(5).into_data()], 5);
        assert!(attention_rollout(&rec, 1).is_err());
        rec.depth = 2;
        assert!(matches!(
            attention_rollout(&rec, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn uniform_maps_give_flat_heatmap() {
        let u = vec![0.2; 25];
        let r = attention_rollout(&record(vec![u.clone(), u], 5), 0).unwrap();
        for row in r.joint.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.heatmap.shape(), &[2, 2]);
        assert!(r.heatmap.data().iter().all(|&v| v == 0.0));
    }
}
