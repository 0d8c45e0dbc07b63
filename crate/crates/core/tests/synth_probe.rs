//! The synthetic generator plants linearly recoverable attribute signals.

use evprompt::synth::{generate, Dataset, Split, SynthConfig};

const BLOCK: usize = 16;

/// Mean RGB over the two rows each attribute band paints, for all eight band offsets.
fn band_features(rgb: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut f = vec![1.0];
    for off in 0..8 {
        for c in 0..3 {
            let mut s = 0.0;
            let mut n = 0;
            for b in 0..h / BLOCK {
                for y in [b * BLOCK + 2 * off, b * BLOCK + 2 * off + 1] {
                    for x in 0..w {
                        s += rgb[(c * h + y) * w + x] as f64;
                        n += 1;
                    }
                }
            }
            f.push(s / n as f64);
        }
    }
    f
}

/// Ridge least squares via normal equations and Gaussian elimination.
fn fit(x: &[Vec<f64>], y: &[f64], ridge: f64) -> Vec<f64> {
    let d = x[0].len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
            a[i][d] += row[i] * t;
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += ridge;
    }
    for col in 0..d {
        let piv = (col..d).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..d {
            if r != col {
                let k = a[r][col] / a[col][col];
                for c in col..=d {
                    a[r][c] -= k * a[col][c];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

#[test]
fn linear_probe_recovers_every_attribute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n: 240,
        attributes: 8,
        height: 32,
        width: 16,
        rgb_frames: 1,
        ..SynthConfig::default()
    };
    generate(&cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let feats = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                let s = ds.input::<f32>(i, 1, 1).unwrap();
                band_features(s.rgb.data(), 32, 16)
            })
            .collect()
    };
    let (train, test) = (ds.split(Split::Train), ds.split(Split::Test));
    let (xtr, xte) = (feats(&train), feats(&test));
    for j in 0..8 {
        let ytr: Vec<f64> = train.iter().map(|&i| ds.labels.row(i)[j]).collect();
        let wts = fit(&xtr, &ytr, 1e-6);
        let correct = test
            .iter()
            .zip(&xte)
            .filter(|(&i, x)| {
                let score: f64 = x.iter().zip(&wts).map(|(a, b)| a * b).sum();
                (score > 0.5) == (ds.labels.row(i)[j] == 1.0)
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "attribute {j}: probe accuracy {acc:.3}");
    }
}
