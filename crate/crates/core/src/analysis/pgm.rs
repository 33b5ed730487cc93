use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary PGM (P5, maxval 255) of a `[rows, cols]` map in `[0, 1]`,
/// each value quantized as `round(v·255)` and repeated `upscale` times
/// in both directions.
pub fn pgm_bytes(map: &Tensor<f64>, upscale: usize) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 || upscale == 0 {
        return Err(Error::Contract(format!(
            "heatmap must be 2-D with a positive upscale, got {s:?} x{upscale}"
        )));
    }
    if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("heatmap value {v} outside [0, 1]")));
    }
    let (rows, cols) = (s[0], s[1]);
    let mut out = format!("P5\n{} {}\n255\n", cols * upscale, rows * upscale).into_bytes();
    for r in 0..rows {
        let line: Vec<u8> = map.data()[r * cols..(r + 1) * cols]
            .iter()
            .flat_map(|&v| std::iter::repeat_n((v * 255.0).round() as u8, upscale))
            .collect();
        for _ in 0..upscale {
            out.extend_from_slice(&line);
        }
    }
    Ok(out)
}

pub fn export_heatmap(map: &Tensor<f64>, path: impl AsRef<Path>, upscale: usize) -> Result<()> {
    std::fs::write(path, pgm_bytes(map, upscale)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(bytes: &[u8]) -> &[u8] {
        let mut newlines = 0;
        let start = bytes
            .iter()
            .position(|&b| {
                newlines += (b == b'\n') as usize;
                newlines == 3
            })
            .unwrap();
        &bytes[start + 1..]
    }

    #[test]
    fn quantization() {
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let b = pgm_bytes(&m, 1).unwrap();
        assert!(b.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pixels(&b), &[0, 85, 170, 255]);
    }

    #[test]
    fn constants_and_upscale() {
        let z = pgm_bytes(&Tensor::zeros(&[3, 3]), 2).unwrap();
        assert!(z.starts_with(b"P5\n6 6\n255\n"));
        assert!(pixels(&z).iter().all(|&p| p == 0) && pixels(&z).len() == 36);
        let one = pgm_bytes(&Tensor::ones(&[3, 3]), 1).unwrap();
        assert!(pixels(&one).iter().all(|&p| p == 255));
        let m = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(
            pixels(&pgm_bytes(&m, 2).unwrap()),
            &[0, 0, 255, 255, 0, 0, 255, 255]
        );
    }

    #[test]
    fn out_of_range() {
        let m = Tensor::new(&[1, 2], vec![0.0, 1.5]).unwrap();
        assert!(matches!(pgm_bytes(&m, 1), Err(Error::Contract(_))));
        let m = Tensor::new(&[1, 1], vec![f64::NAN]).unwrap();
        assert!(pgm_bytes(&m, 1).is_err());
    }
}
