use crate::tensor::Tensor;

/// Sinusoidal depth encodings for depths `0..=max_depth`, one row per depth.
/// Even columns hold `sin(p·ω_i)`, odd columns `cos(p·ω_i)`, with
/// `ω_i = 10000^(−2i/d)`.
pub fn sinusoidal_table(max_depth: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity((max_depth + 1) * d_model);
    let freqs: Vec<f64> = (0..d_model.div_ceil(2))
        .map(|i| (-(10000f64.ln()) * (2 * i) as f64 / d_model as f64).exp())
        .collect();
    for p in 0..=max_depth {
        for c in 0..d_model {
            let angle = p as f64 * freqs[c / 2];
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![max_depth + 1, d_model], data).expect("table dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_direct_formula() {
        for d in [2usize, 5, 8, 64] {
            let table = sinusoidal_table(40, d);
            for p in 0..=40 {
                for c in 0..d {
                    let i = (c / 2) as f64;
                    let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
                    let want = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                    let got = table.row(p)[c];
                    assert!((got - want).abs() < 1e-12, "d={d} p={p} c={c}");
                }
            }
        }
    }

    #[test]
    fn depth_zero_row_alternates_zero_one() {
        let t = sinusoidal_table(0, 6);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
