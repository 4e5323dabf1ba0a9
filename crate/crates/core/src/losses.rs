//! Soft-Dice + cross-entropy objective summed over both branches and
//! averaged over each branch's deep-supervision heads.

use serde::{Deserialize, Serialize};

use crate::dataio::View;
use crate::error::{Error, Result};
use crate::network::{BranchOutputs, NetworkOutputs, OutputGrads, Real, Tensor};

/// Integer targets for a batch, `B × H × W` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelBatch {
    pub fn new(batch: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != batch * height * width {
            return Err(Error::validation(format!(
                "label batch has {} values, expected {}×{}×{}",
                labels.len(),
                batch,
                height,
                width
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            labels,
        })
    }

    fn check(&self, t: &Tensor<impl Sized>) -> Result<()> {
        let [b, c, h, w] = t.shape();
        if (b, h, w) != (self.batch, self.height, self.width) {
            return Err(Error::validation(format!(
                "prediction {:?} and target {}×{}×{} differ in shape",
                t.shape(),
                self.batch,
                self.height,
                self.width
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::validation(format!("target label {bad} out of range for {c} classes")));
        }
        Ok(())
    }

    /// One sample's labels.
    pub fn sample(&self, b: usize) -> &[u8] {
        let hw = self.height * self.width;
        &self.labels[b * hw..(b + 1) * hw]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Additive smoothing in the Dice ratio.
    pub dice_smooth: f64,
    /// Average the Dice term over all classes, background included.
    pub dice_include_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_smooth: 1e-5,
            dice_include_background: true,
        }
    }
}

impl LossConfig {
    fn first_class(&self) -> usize {
        usize::from(!self.dice_include_background)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadLoss {
    pub dice: f64,
    pub ce: f64,
}

impl HeadLoss {
    pub fn sum(&self) -> f64 {
        self.dice + self.ce
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLoss {
    /// Coarse to fine, matching the network's head order.
    pub heads: Vec<HeadLoss>,
    /// Mean over heads of `dice + ce`.
    pub total: f64,
}

impl BranchLoss {
    pub fn mean_dice(&self) -> f64 {
        self.heads.iter().map(|h| h.dice).sum::<f64>() / self.heads.len() as f64
    }

    pub fn mean_ce(&self) -> f64 {
        self.heads.iter().map(|h| h.ce).sum::<f64>() / self.heads.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sa: BranchLoss,
    pub la: BranchLoss,
    pub total: f64,
}

impl LossBreakdown {
    pub fn branch(&self, view: View) -> &BranchLoss {
        match view {
            View::Sa => &self.sa,
            View::La => &self.la,
        }
    }
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Soft-Dice loss `1 − mean_c (2Σp·t + ε)/(Σp + Σt + ε)` of a probability map.
pub fn soft_dice_loss<T: Real>(probs: &Tensor<T>, target: &LabelBatch, cfg: &LossConfig) -> Result<f64> {
    target.check(probs)?;
    Ok(dice_terms(&to_f64(probs), probs.channels(), target, cfg, false).0)
}

/// Returns the loss and optionally `∂loss/∂probs` (channel-major).
fn dice_terms(p: &[f64], classes: usize, target: &LabelBatch, cfg: &LossConfig, want_grad: bool) -> (f64, Vec<f64>) {
    let n = target.labels.len();
    let eps = cfg.dice_smooth;
    let c0 = cfg.first_class();
    let counted = (classes - c0) as f64;
    let mut loss = 1.0;
    let mut grad = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
    for c in c0..classes {
        let pc = &p[c * n..(c + 1) * n];
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for (&pv, &l) in pc.iter().zip(&target.labels) {
            psum += pv;
            if l as usize == c {
                inter += pv;
                tsum += 1.0;
            }
        }
        let den = psum + tsum + eps;
        let num = 2.0 * inter + eps;
        loss -= num / den / counted;
        if want_grad {
            let g = &mut grad[c * n..(c + 1) * n];
            let scale = -1.0 / (counted * den * den);
            for (gv, &l) in g.iter_mut().zip(&target.labels) {
                let t = if l as usize == c { 1.0 } else { 0.0 };
                *gv = scale * (2.0 * t * den - num);
            }
        }
    }
    (loss, grad)
}

/// Mean over pixels of `−log softmax(logits)[target]`.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor<T>, target: &LabelBatch) -> Result<f64> {
    target.check(logits)?;
    let z = to_f64(logits);
    let (_, log_p) = softmax_f64(&z, logits.channels(), target.labels.len());
    let n = target.labels.len();
    let sum: f64 = target
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -log_p[l as usize * n + i])
        .sum();
    Ok(sum / n as f64)
}

/// Channel-major softmax and log-softmax.
fn softmax_f64(z: &[f64], classes: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; z.len()];
    let mut lp = vec![0.0; z.len()];
    for i in 0..n {
        let max = (0..classes).map(|c| z[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..classes).map(|c| (z[c * n + i] - max).exp()).sum::<f64>().ln();
        for c in 0..classes {
            lp[c * n + i] = z[c * n + i] - lse;
            p[c * n + i] = lp[c * n + i].exp();
        }
    }
    (p, lp)
}

/// Dice + CE of one head and the gradient of `weight·(dice + ce)` w.r.t. its logits.
fn head_loss<T: Real>(logits: &Tensor<T>, target: &LabelBatch, cfg: &LossConfig, weight: f64, want_grad: bool) -> Result<(HeadLoss, Option<Tensor<T>>)> {
    target.check(logits)?;
    let classes = logits.channels();
    let n = target.labels.len();
    let z = to_f64(logits);
    let (p, lp) = softmax_f64(&z, classes, n);
    let (dice, dgrad) = dice_terms(&p, classes, target, cfg, want_grad);
    let ce = target
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -lp[l as usize * n + i])
        .sum::<f64>()
        / n as f64;
    let grad = want_grad.then(|| {
        let mut g = vec![T::zero(); z.len()];
        for i in 0..n {
            let dot: f64 = (0..classes).map(|c| dgrad[c * n + i] * p[c * n + i]).sum();
            let tl = target.labels[i] as usize;
            for c in 0..classes {
                let pc = p[c * n + i];
                let d_dice = pc * (dgrad[c * n + i] - dot);
                let d_ce = (pc - if c == tl { 1.0 } else { 0.0 }) / n as f64;
                g[c * n + i] = T::lit(weight * (d_dice + d_ce));
            }
        }
        let [b, c, h, w] = logits.shape();
        Tensor::from_raw(b, c, h, w, g)
    });
    Ok((HeadLoss { dice, ce }, grad))
}

fn branch_loss<T: Real>(out: &BranchOutputs<T>, target: &LabelBatch, cfg: &LossConfig, want_grad: bool) -> Result<(BranchLoss, Vec<Tensor<T>>)> {
    let w = 1.0 / out.heads.len() as f64;
    let mut heads = Vec::with_capacity(out.heads.len());
    let mut grads = Vec::new();
    for logits in &out.heads {
        let (hl, g) = head_loss(logits, target, cfg, w, want_grad)?;
        heads.push(hl);
        grads.extend(g);
    }
    let total = heads.iter().map(HeadLoss::sum).sum::<f64>() * w;
    Ok((BranchLoss { heads, total }, grads))
}

/// Full training objective.
pub fn total_loss<T: Real>(outputs: &NetworkOutputs<T>, sa_target: &LabelBatch, la_target: &LabelBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    let (sa, _) = branch_loss(&outputs.sa, sa_target, cfg, false)?;
    let (la, _) = branch_loss(&outputs.la, la_target, cfg, false)?;
    let total = sa.total + la.total;
    Ok(LossBreakdown { sa, la, total })
}

/// [`total_loss`] together with its gradient w.r.t. every head's logits.
pub fn total_loss_with_grad<T: Real>(
    outputs: &NetworkOutputs<T>,
    sa_target: &LabelBatch,
    la_target: &LabelBatch,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    let (sa, sa_g) = branch_loss(&outputs.sa, sa_target, cfg, true)?;
    let (la, la_g) = branch_loss(&outputs.la, la_target, cfg, true)?;
    let total = sa.total + la.total;
    Ok((
        LossBreakdown { sa, la, total },
        NetworkOutputs {
            sa: BranchOutputs { heads: sa_g },
            la: BranchOutputs { heads: la_g },
        },
    ))
}

/// Loss of a single branch only, with gradients; the other branch's logit
/// gradients are zero.
pub fn branch_loss_with_grad<T: Real>(outputs: &NetworkOutputs<T>, view: View, target: &LabelBatch, cfg: &LossConfig) -> Result<(f64, OutputGrads<T>)> {
    let (bl, g) = branch_loss(outputs.view(view), target, cfg, true)?;
    let zeros = |o: &BranchOutputs<T>| BranchOutputs {
        heads: o.heads.iter().map(|t| {
            let [b, c, h, w] = t.shape();
            Tensor::zeros(b, c, h, w)
        }).collect(),
    };
    let grads = match view {
        View::Sa => NetworkOutputs { sa: BranchOutputs { heads: g }, la: zeros(&outputs.la) },
        View::La => NetworkOutputs { sa: zeros(&outputs.sa), la: BranchOutputs { heads: g } },
    };
    Ok((bl.total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(t: &LabelBatch, classes: usize) -> Tensor<f64> {
        let mut out = Tensor::zeros(t.batch, classes, t.height, t.width);
        let hw = t.height * t.width;
        for (i, &l) in t.labels.iter().enumerate() {
            let (b, p) = (i / hw, i % hw);
            out.plane_mut(b, l as usize)[p] = 1.0;
        }
        out
    }

    fn random_case(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> (Tensor<f64>, LabelBatch) {
        let z: Vec<f64> = (0..b * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..b * h * w).map(|_| rng.random_range(0..c as u8)).collect();
        (Tensor::from_nchw([b, c, h, w], &z), LabelBatch::new(b, h, w, labels).unwrap())
    }

    #[test]
    fn perfect_prediction_has_near_zero_dice() {
        let t = LabelBatch::new(1, 2, 2, vec![0, 1, 2, 2]).unwrap();
        let loss = soft_dice_loss(&one_hot(&t, 3), &t, &LossConfig::default()).unwrap();
        assert!(loss.abs() < 1e-5);
    }

    #[test]
    fn uniform_probs_on_single_class_target_match_closed_form() {
        // 2×2 image, all class 0, p = 1/3 everywhere.
        // class 0: (2·4/3 + ε)/(4/3 + 4 + ε); classes 1,2: ε/(4/3 + ε)
        let eps = 1e-5;
        let t = LabelBatch::new(1, 2, 2, vec![0; 4]).unwrap();
        let p = Tensor::from_nchw([1, 3, 2, 2], &[1.0 / 3.0; 12]);
        let d0 = (8.0 / 3.0 + eps) / (4.0 / 3.0 + 4.0 + eps);
        let d1 = eps / (4.0 / 3.0 + eps);
        let expect = 1.0 - (d0 + 2.0 * d1) / 3.0;
        let got = soft_dice_loss(&p, &t, &LossConfig::default()).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn dice_is_symmetric_in_prediction_and_target() {
        let pred = LabelBatch::new(1, 2, 3, vec![0, 1, 1, 2, 0, 2]).unwrap();
        let gt = LabelBatch::new(1, 2, 3, vec![0, 1, 2, 2, 1, 2]).unwrap();
        let cfg = LossConfig::default();
        let a = soft_dice_loss(&one_hot(&pred, 3), &gt, &cfg).unwrap();
        let b = soft_dice_loss(&one_hot(&gt, 3), &pred, &cfg).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn zero_logits_give_ln3() {
        let t = LabelBatch::new(2, 3, 3, vec![1; 18]).unwrap();
        let z = Tensor::<f64>::zeros(2, 3, 3, 3);
        assert!((cross_entropy_loss(&z, &t).unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_decreases_toward_zero_with_margin() {
        let t = LabelBatch::new(1, 1, 2, vec![2, 0]).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 5.0, 10.0, 20.0] {
            let mut z = Tensor::<f64>::zeros(1, 3, 1, 2);
            z.plane_mut(0, 2)[0] = margin;
            z.plane_mut(0, 0)[1] = margin;
            let l = cross_entropy_loss(&z, &t).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (z, t) = random_case(&mut rng, 2, 3, 3, 4);
        let mut sum = 0.0;
        for b in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let l = t.labels[(b * 3 + y) * 4 + x] as usize;
                    let den: f64 = (0..3).map(|c| z.at(b, c, y, x).exp()).sum();
                    sum += -(z.at(b, l, y, x).exp() / den).ln();
                }
            }
        }
        let expect = sum / 24.0;
        assert!((cross_entropy_loss(&z, &t).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = LabelBatch::new(1, 2, 2, vec![0; 4]).unwrap();
        let z = Tensor::<f64>::zeros(1, 3, 2, 3);
        assert!(matches!(cross_entropy_loss(&z, &t), Err(Error::Validation(_))));
        let bad = LabelBatch::new(1, 2, 3, vec![0, 0, 0, 0, 0, 3]).unwrap();
        assert!(matches!(soft_dice_loss(&z, &bad, &LossConfig::default()), Err(Error::Validation(_))));
    }

    fn outputs_from(rng: &mut ChaCha8Rng, heads: usize) -> (NetworkOutputs<f64>, LabelBatch, LabelBatch) {
        let mk = |rng: &mut ChaCha8Rng| BranchOutputs {
            heads: (0..heads).map(|_| random_case(rng, 2, 3, 3, 3).0).collect(),
        };
        let sa = mk(rng);
        let la = mk(rng);
        let (_, ts) = random_case(rng, 2, 3, 3, 3);
        let (_, tl) = random_case(rng, 2, 3, 3, 3);
        (NetworkOutputs { sa, la }, ts, tl)
    }

    #[test]
    fn breakdown_total_reassembles_from_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (o, ts, tl) = outputs_from(&mut rng, 3);
        let cfg = LossConfig::default();
        let lb = total_loss(&o, &ts, &tl, &cfg).unwrap();
        // independent reassembly from the primitive losses
        let mut expect = 0.0;
        for (br, t) in [(&o.sa, &ts), (&o.la, &tl)] {
            let mut s = 0.0;
            for h in &br.heads {
                s += soft_dice_loss(&h.softmax_channels(), t, &cfg).unwrap() + cross_entropy_loss(h, t).unwrap();
            }
            expect += s / 3.0;
        }
        assert!((lb.total - expect).abs() < 1e-9);
        let parts: f64 = [&lb.sa, &lb.la].iter().map(|b| b.heads.iter().map(HeadLoss::sum).sum::<f64>() / 3.0).sum();
        assert!((lb.total - parts).abs() < 1e-12);
        assert!(lb.total >= 0.0);
    }

    #[test]
    fn perfect_outputs_give_near_zero_total() {
        let ts = LabelBatch::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut logits = one_hot(&ts, 3);
        for v in logits.data_mut() {
            *v *= 40.0;
        }
        let br = BranchOutputs { heads: vec![logits.clone(), logits.clone(), logits] };
        let o = NetworkOutputs { sa: br.clone(), la: br };
        let lb = total_loss(&o, &ts, &ts, &LossConfig::default()).unwrap();
        assert!(lb.total < 1e-4, "{}", lb.total);
    }

    #[test]
    fn batch_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (o, ts, tl) = outputs_from(&mut rng, 2);
        let swap_t = |t: &Tensor<f64>| {
            let a = t.sample(0);
            let b = t.sample(1);
            let mut nchw = b.to_nchw();
            nchw.extend(a.to_nchw());
            Tensor::from_nchw(t.shape(), &nchw)
        };
        let swap_l = |t: &LabelBatch| {
            let mut l = t.sample(1).to_vec();
            l.extend_from_slice(t.sample(0));
            LabelBatch::new(2, t.height, t.width, l).unwrap()
        };
        let o2 = NetworkOutputs {
            sa: BranchOutputs { heads: o.sa.heads.iter().map(swap_t).collect() },
            la: BranchOutputs { heads: o.la.heads.iter().map(swap_t).collect() },
        };
        let cfg = LossConfig::default();
        let a = total_loss(&o, &ts, &tl, &cfg).unwrap().total;
        let b = total_loss(&o2, &swap_l(&ts), &swap_l(&tl), &cfg).unwrap().total;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (o, ts, tl) = outputs_from(&mut rng, 3);
        let cfg = LossConfig::default();
        let (_, g) = total_loss_with_grad(&o, &ts, &tl, &cfg).unwrap();
        let h = 1e-5;
        for head in 0..3 {
            for i in 0..o.sa.heads[head].data().len() {
                let mut p = o.clone();
                p.sa.heads[head].data_mut()[i] += h;
                let mut m = o.clone();
                m.sa.heads[head].data_mut()[i] -= h;
                let fd = (total_loss(&p, &ts, &tl, &cfg).unwrap().total - total_loss(&m, &ts, &tl, &cfg).unwrap().total) / (2.0 * h);
                let an = g.sa.heads[head].data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-3, "head {head} idx {i}: {fd} vs {an}");
            }
        }
    }
}
