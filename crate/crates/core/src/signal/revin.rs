/// Per-channel mean and standard deviation used to undo normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eps: f64,
}

pub const REVIN_EPS: f64 = 1e-5;

/// Standardizes each channel over time by its population standard
/// deviation, floored at `eps` so constant channels map to zero.
pub fn revin_normalize(seg: &[Vec<f64>], eps: f64) -> (Vec<Vec<f64>>, RevinStats) {
    let mut mu = Vec::with_capacity(seg.len());
    let mut sigma = Vec::with_capacity(seg.len());
    let out = seg
        .iter()
        .map(|ch| {
            let n = ch.len().max(1) as f64;
            // a constant channel keeps its exact value as the mean, so it maps
            // to exact zeros and back; the summed mean can be off by an ulp
            let m = match ch.first() {
                Some(&x0) if ch.iter().all(|v| *v == x0) => x0,
                _ => ch.iter().sum::<f64>() / n,
            };
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt().max(eps);
            mu.push(m);
            sigma.push(s);
            ch.iter().map(|v| (v - m) / s).collect()
        })
        .collect();
    (out, RevinStats { mu, sigma, eps })
}

/// Applies stored statistics to new data (e.g. a target window normalized
/// with its context's statistics).
pub fn revin_apply(seg: &[Vec<f64>], stats: &RevinStats) -> Vec<Vec<f64>> {
    seg.iter()
        .zip(stats.mu.iter().zip(&stats.sigma))
        .map(|(ch, (m, s))| ch.iter().map(|v| (v - m) / s).collect())
        .collect()
}

pub fn revin_denormalize(pred: &[Vec<f64>], stats: &RevinStats) -> Vec<Vec<f64>> {
    pred.iter()
        .zip(stats.mu.iter().zip(&stats.sigma))
        .map(|(ch, (m, s))| ch.iter().map(|v| v * s + m).collect())
        .collect()
}
