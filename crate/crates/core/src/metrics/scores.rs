use crate::error::{Error, Result};
use crate::tensor::{Graph, TokenTensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the text-matching terms against the metric term.
    pub alpha: f64,
    /// Temperature for video-text cosine logits.
    pub tau: f64,
    /// Temperature turning distances into probabilities.
    pub tau_d: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 0.07,
            tau_d: 0.1,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.tau > 0.0) || !(self.tau_d > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must be > 0, got tau={} tau_d={}",
                self.tau, self.tau_d
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `cos(a_i, b_j) / tau` for `a: [A, D]`, `b: [B, D]`.
pub fn cosine_logits(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::dim("cosine_logits", &sa, &sb));
    }
    for (v, side) in [(a, "left"), (b, "right")] {
        let d = g.shape(v)[1];
        if let Some(r) = g.data(v).chunks(d).position(|r| r.iter().all(|x| *x == 0.0)) {
            return Err(Error::Input(format!("cosine_logits: {side} row {r} is the zero vector")));
        }
    }
    let an = g.l2_normalize(a, 1e-12)?;
    let bn = g.l2_normalize(b, 1e-12)?;
    let bt = g.permute(bn, &[1, 0])?;
    let sim = g.matmul(an, bt)?;
    Ok(g.scale(sim, 1.0 / tau))
}

/// One-hot rows mixed with the uniform distribution by `eps`.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<TokenTensor> {
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
    }
    let mut t = TokenTensor::full(&[labels.len(), classes], eps / classes as f64);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] += 1.0 - eps;
    }
    Ok(t)
}

/// Mean over rows of `KL(target || softmax(logits))`.
pub fn kl_loss(g: &mut Graph, logits: Var, target: &TokenTensor) -> Result<Var> {
    if g.shape(logits) != target.shape() || target.rank() != 2 {
        return Err(Error::dim("kl_loss", g.shape(logits), target.shape()));
    }
    let n = target.shape()[0] as f64;
    let entropy: f64 = target.data().iter().filter(|&&t| t > 0.0).map(|t| t * t.ln()).sum();
    let logp = g.log_softmax(logits, 1)?;
    let t = g.constant(target.clone());
    let cross = g.mul(t, logp)?;
    let cross = g.sum(cross);
    let cross = g.scale(cross, -1.0 / n);
    Ok(g.add_scalar(cross, entropy / n))
}

/// `alpha * (s2t + q2t) / 2 + (1 - alpha) * q2s`.
pub fn combine_losses(g: &mut Graph, s2t: Var, q2t: Var, q2s: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let text = g.add(s2t, q2t)?;
    let text = g.scale(text, 0.5 * alpha);
    let metric = g.scale(q2s, 1.0 - alpha);
    g.add(text, metric)
}

/// `alpha * p_q2t + (1 - alpha) * p_q2s`.
pub fn fuse_predictions(p_q2t: &[f64], p_q2s: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if p_q2t.len() != p_q2s.len() {
        return Err(Error::dim("fuse_predictions", &[p_q2t.len()], &[p_q2s.len()]));
    }
    Ok(p_q2t
        .iter()
        .zip(p_q2s)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect())
}

/// Per-episode scores; rows are queries (or support videos for `p_s2t`),
/// columns are episode classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBundle {
    pub distances: Vec<Vec<f64>>,
    pub p_q2s: Vec<Vec<f64>>,
    pub p_q2t: Vec<Vec<f64>>,
    pub p_s2t: Vec<Vec<f64>>,
    pub fused: Vec<Vec<f64>>,
}

impl ScoreBundle {
    /// Builds all distributions from raw distances and cosine similarities.
    pub fn from_scores(
        distances: Vec<Vec<f64>>,
        q2t_cos: &[Vec<f64>],
        s2t_cos: &[Vec<f64>],
        cfg: &LossConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if distances.len() != q2t_cos.len() {
            return Err(Error::dim("score_bundle", &[distances.len()], &[q2t_cos.len()]));
        }
        let scaled = |rows: &[Vec<f64>], c: f64| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| softmax(&r.iter().map(|v| v * c).collect::<Vec<_>>()))
                .collect()
        };
        let p_q2s = scaled(&distances, -1.0 / cfg.tau_d);
        let p_q2t = scaled(q2t_cos, 1.0 / cfg.tau);
        let p_s2t = scaled(s2t_cos, 1.0 / cfg.tau);
        let fused = p_q2t
            .iter()
            .zip(&p_q2s)
            .map(|(a, b)| fuse_predictions(a, b, cfg.alpha))
            .collect::<Result<_>>()?;
        Ok(Self {
            distances,
            p_q2s,
            p_q2t,
            p_s2t,
            fused,
        })
    }

    /// Arg-max of the fused distribution per query.
    pub fn predictions(&self) -> Vec<usize> {
        self.fused
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}
