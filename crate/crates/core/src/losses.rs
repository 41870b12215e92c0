//! Training objectives: Wasserstein critic loss with gradient penalty, the
//! label cross entropy, the embedding regression loss and the generator's
//! composite loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{GanModel, HeadWeights, StageState};
use crate::tensor::{grad, Tensor};

/// Scalar values of each objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub gp: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// The differentiable terms behind a [`LossBreakdown`].
pub struct LossTerms {
    pub adv: Tensor,
    pub gp: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            adv: self.adv.item(),
            gp: self.gp.item(),
            cls: self.cls.item(),
            reg: self.reg.item(),
            total: self.total.item(),
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.adv, &self.gp, &self.cls, &self.reg, &self.total]
            .iter()
            .all(|t| t.all_finite())
    }
}

fn check_pair(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "real batch {:?} and fake batch {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    Ok(())
}

/// mean(critic(fake)) − mean(critic(real)).
pub fn wasserstein_adv(critic_real: &Tensor, critic_fake: &Tensor) -> Tensor {
    critic_fake.mean_all().sub(&critic_real.mean_all())
}

/// Interpolates `ε·real + (1−ε)·fake` with one ε per sample.
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f64]) -> Result<Tensor> {
    check_pair(real, fake)?;
    let n = real.dim(0);
    if eps.len() != n {
        return Err(Error::Shape(format!("{} interpolation weights for a batch of {n}", eps.len())));
    }
    let mut bshape = vec![1; real.ndim()];
    bshape[0] = n;
    let e = Tensor::from_vec(eps.to_vec(), &bshape);
    let one_minus = Tensor::from_vec(eps.iter().map(|v| 1.0 - v).collect(), &bshape);
    let x = real.detach().mul(&e).add(&fake.detach().mul(&one_minus));
    Ok(x.detach_leaf())
}

/// mean over samples of (‖∇ₓ critic(x̂)‖₂ − 1)². Differentiable with respect
/// to the critic's parameters.
pub fn gradient_penalty<F>(critic: F, real: &Tensor, fake: &Tensor, eps: &[f64]) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x_hat = interpolate(real, fake, eps)?;
    let n = x_hat.dim(0);
    let scores = critic(&x_hat)?;
    let g = grad(&scores.sum_all(), &[&x_hat], true).remove(0);
    let per_sample = g.reshape(&[n, g.numel() / n]).square().sum_keepdim(&[1]);
    // The tiny offset keeps the square root differentiable at zero gradient.
    let norm = per_sample.add_scalar(1e-16).sqrt();
    Ok(norm.add_scalar(-1.0).square().mean_all())
}

/// Critic objective `adv + λ·gp`; `cls` and `reg` are zero here.
pub fn critic_loss<F>(critic: F, real: &Tensor, fake: &Tensor, eps: &[f64], lambda: f64) -> Result<LossTerms>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    check_pair(real, fake)?;
    let adv = wasserstein_adv(&critic(real)?, &critic(&fake.detach())?);
    let gp = gradient_penalty(&critic, real, fake, eps)?;
    let total = adv.add(&gp.mul_scalar(lambda));
    Ok(LossTerms { adv, gp, cls: Tensor::scalar(0.0), reg: Tensor::scalar(0.0), total })
}

/// One-hot rows (N, K) for integer labels.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::IndexOutOfRange { index: l as i64, len: k });
        }
        data[i * k + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, &[labels.len(), k]))
}

/// Mean over the batch of −log softmax(logits)[label].
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let y = one_hot(labels, logits.dim(1))?;
    Ok(logits.log_softmax().mul(&y).sum_all().mul_scalar(-1.0 / labels.len() as f64))
}

/// Mean over the batch of ‖regressed − target‖₂².
pub fn regression_loss(regressed: &Tensor, target: &Tensor) -> Result<Tensor> {
    if regressed.shape() != target.shape() || regressed.ndim() != 2 || regressed.dim(0) == 0 {
        return Err(Error::Shape(format!(
            "regressed {:?} and target {:?} differ",
            regressed.shape(),
            target.shape()
        )));
    }
    let n = regressed.dim(0) as f64;
    Ok(regressed.sub(&target.detach()).square().sum_all().mul_scalar(1.0 / n))
}

/// Generator objective from discriminator outputs on fakes:
/// `−w_adv·mean(critic) + w_cls·CE(L, y) + w_reg·L2(R, e)`.
pub fn generator_loss_from_outputs(
    critic_fake: &Tensor,
    logits_fake: &Tensor,
    regressed_fake: &Tensor,
    labels: &[usize],
    e_cond: &Tensor,
    weights: HeadWeights,
) -> Result<LossTerms> {
    let adv = critic_fake.mean_all().neg();
    let cls = classification_loss(logits_fake, labels)?;
    let reg = regression_loss(regressed_fake, e_cond)?;
    let total = adv
        .mul_scalar(weights.adv)
        .add(&cls.mul_scalar(weights.cls))
        .add(&reg.mul_scalar(weights.reg));
    Ok(LossTerms { adv, gp: Tensor::scalar(0.0), cls, reg, total })
}

pub fn generator_loss(
    model: &GanModel,
    fake: &Tensor,
    labels: &[usize],
    e_cond: &Tensor,
    stage: StageState,
    weights: HeadWeights,
) -> Result<LossTerms> {
    let out = model.discriminate(fake, stage)?;
    generator_loss_from_outputs(&out.critic, &out.label_logits, &out.regressed_e, labels, e_cond, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(gaussian(&mut rng, crate::tensor::numel(shape)), shape)
    }

    fn linear_critic(w: &Tensor) -> impl Fn(&Tensor) -> Result<Tensor> + '_ {
        move |x: &Tensor| {
            let n = x.dim(0);
            Ok(x.reshape(&[n, x.numel() / n]).matmul(w))
        }
    }

    #[test]
    fn gp_of_linear_critic() {
        // ‖w‖ = 3 over a 2×1×2×2 batch
        let w = Tensor::from_vec(vec![1.0, 2.0, 2.0, 0.0], &[4, 1]);
        let real = randn(1, &[2, 1, 2, 2]);
        let fake = randn(2, &[2, 1, 2, 2]);
        let gp = gradient_penalty(linear_critic(&w), &real, &fake, &[0.3, 0.9]).unwrap();
        assert!((gp.item() - 4.0).abs() <= 1e-6);
    }

    #[test]
    fn constant_critic() {
        let real = randn(1, &[3, 2]);
        let fake = randn(2, &[3, 2]);
        let c = |x: &Tensor| Ok(x.mul_scalar(0.0).sum_keepdim(&[1]).add_scalar(5.0));
        let terms = critic_loss(c, &real, &fake, &[0.1, 0.5, 0.9], 10.0).unwrap();
        let b = terms.breakdown();
        assert_eq!(b.adv, 0.0);
        assert!((b.gp - 1.0).abs() < 1e-6);
        assert!((b.total - 10.0).abs() < 1e-6);
    }

    #[test]
    fn batch_mismatch_is_an_error() {
        let w = Tensor::from_vec(vec![1.0; 4], &[4, 1]);
        let a = randn(1, &[2, 1, 2, 2]);
        let b = randn(1, &[3, 1, 2, 2]);
        assert!(critic_loss(linear_critic(&w), &a, &b, &[0.5, 0.5], 1.0).is_err());
        assert!(gradient_penalty(linear_critic(&w), &a, &a, &[0.5]).is_err());
    }

    #[test]
    fn classification_cases() {
        let big = Tensor::from_vec(vec![0.0, 800.0, 0.0], &[1, 3]);
        assert!(classification_loss(&big, &[1]).unwrap().item().abs() < 1e-12);
        let uniform = Tensor::zeros(&[4, 10]);
        let v = classification_loss(&uniform, &[0, 3, 9, 5]).unwrap().item();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        let l = Tensor::from_vec(vec![1f64.ln(), 3f64.ln()], &[1, 2]);
        let v = classification_loss(&l, &[1]).unwrap().item();
        assert!((v + 0.75f64.ln()).abs() < 1e-12);
        assert!((v - 0.287682).abs() < 1e-6);
        assert!(classification_loss(&l, &[2]).is_err());
    }

    #[test]
    fn regression_cases() {
        let r = Tensor::from_vec(vec![1.0, 1.0], &[1, 2]);
        assert_eq!(regression_loss(&r, &r).unwrap().item(), 0.0);
        assert_eq!(regression_loss(&r, &Tensor::zeros(&[1, 2])).unwrap().item(), 2.0);
        let r2 = Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0], &[2, 2]);
        assert_eq!(regression_loss(&r2, &Tensor::zeros(&[2, 2])).unwrap().item(), 1.0);
        assert!(regression_loss(&r, &Tensor::zeros(&[1, 3])).is_err());
    }

    proptest! {
        #[test]
        fn adv_is_antisymmetric(a in proptest::collection::vec(-5.0f64..5.0, 1..10), b in proptest::collection::vec(-5.0f64..5.0, 1..10)) {
            let ta = Tensor::from_vec(a.clone(), &[a.len(), 1]);
            let tb = Tensor::from_vec(b.clone(), &[b.len(), 1]);
            let x = wasserstein_adv(&ta, &tb).item();
            let y = wasserstein_adv(&tb, &ta).item();
            prop_assert!((x + y).abs() < 1e-12);
        }

        #[test]
        fn losses_non_negative(v in proptest::collection::vec(-20.0f64..20.0, 6), t in proptest::collection::vec(-3.0f64..3.0, 6), l in 0usize..3) {
            let logits = Tensor::from_vec(v.clone(), &[2, 3]);
            prop_assert!(classification_loss(&logits, &[l, 2 - l]).unwrap().item() >= 0.0);
            let r = Tensor::from_vec(t.clone(), &[2, 3]);
            prop_assert!(regression_loss(&logits, &r).unwrap().item() >= 0.0);
        }
    }

    /// Smooth two-layer critic with 2·3·9+2 + 2·16+1 = 89 parameters on
    /// 3×4×4 images, with L and R heads on the same trunk.
    struct TinyNet {
        store: ParamStore,
    }

    impl TinyNet {
        fn new(seed: u64) -> TinyNet {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mut put = |name: &str, shape: &[usize], s: f64| {
                let v: Vec<f64> = gaussian(&mut rng, crate::tensor::numel(shape)).into_iter().map(|x| x * s).collect();
                store.insert(name, v, shape);
            };
            put("c.w", &[2, 3, 3, 3], 0.4);
            put("c.b", &[2], 0.1);
            put("h.w", &[32, 1], 0.3);
            put("h.b", &[1], 0.1);
            put("l.w", &[32, 3], 0.3);
            put("r.w", &[32, 2], 0.3);
            TinyNet { store }
        }

        fn trunk(&self, x: &Tensor) -> Tensor {
            let s = &self.store;
            let h = x.conv2d(s.get("c.w"), 1).add(&s.get("c.b").reshape(&[1, 2, 1, 1])).tanh();
            h.reshape(&[x.dim(0), 32])
        }

        fn critic(&self, x: &Tensor) -> Result<Tensor> {
            Ok(self.trunk(x).matmul(self.store.get("h.w")).add(self.store.get("h.b")))
        }

        fn names(&self) -> Vec<String> {
            self.store.names().cloned().collect()
        }
    }

    fn fd_check(net: &mut TinyNet, loss: impl Fn(&TinyNet) -> Tensor) {
        let names = net.names();
        assert!(net.store.num_scalars() <= 500);
        let out = loss(net);
        let params: Vec<Tensor> = names.iter().map(|n| net.store.get(n).clone()).collect();
        let refs: Vec<&Tensor> = params.iter().collect();
        let analytic = grad(&out, &refs, false);
        let h = 1e-5;
        for (name, g) in names.iter().zip(&analytic) {
            let base = net.store.get(name).to_vec();
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                net.store.set(name, p.clone());
                let up = loss(net).item();
                p[i] -= 2.0 * h;
                net.store.set(name, p);
                let down = loss(net).item();
                net.store.set(name, base.clone());
                let fd = (up - down) / (2.0 * h);
                let a = g.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-9,
                    "{name}[{i}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn critic_loss_gradients_match_finite_differences() {
        let mut net = TinyNet::new(3);
        let real = randn(4, &[3, 3, 4, 4]);
        let fake = randn(5, &[3, 3, 4, 4]);
        let eps = [0.2, 0.7, 0.5];
        fd_check(&mut net, |n| critic_loss(|x: &Tensor| n.critic(x), &real, &fake, &eps, 10.0).unwrap().total);
    }

    #[test]
    fn head_loss_gradients_match_finite_differences() {
        let mut net = TinyNet::new(6);
        let x = randn(7, &[2, 3, 4, 4]);
        let e = randn(8, &[2, 2]);
        fd_check(&mut net, |n| {
            let h = n.trunk(&x);
            let logits = h.matmul(n.store.get("l.w"));
            let cls = classification_loss(&logits, &[2, 0]).unwrap();
            let reg = regression_loss(&h.matmul(n.store.get("r.w")), &e).unwrap();
            cls.add(&reg)
        });
    }

    #[test]
    fn generator_loss_gradients_match_finite_differences() {
        // Differentiate with respect to the "generator output" by treating the
        // image batch itself as a parameter.
        let mut net = TinyNet::new(9);
        net.store.insert("img", randn(10, &[2, 3, 4, 4]).to_vec(), &[2, 3, 4, 4]);
        let e = randn(11, &[2, 2]);
        let w = HeadWeights { adv: 1.0, cls: 0.5, reg: 2.0 };
        fd_check(&mut net, |n| {
            let x = n.store.get("img");
            let h = n.trunk(x);
            let c = h.matmul(n.store.get("h.w"));
            let l = h.matmul(n.store.get("l.w"));
            let r = h.matmul(n.store.get("r.w"));
            generator_loss_from_outputs(&c, &l, &r, &[1, 2], &e, w).unwrap().total
        });
    }

    #[test]
    fn gp_matches_finite_difference_norms() {
        let net = TinyNet::new(12);
        let real = randn(13, &[2, 3, 4, 4]);
        let fake = randn(14, &[2, 3, 4, 4]);
        let eps = [0.25, 0.6];
        let gp = gradient_penalty(|x: &Tensor| net.critic(x), &real, &fake, &eps).unwrap().item();
        // Per-sample scores are independent of the rest of the batch, so each
        // pixel perturbation only moves its own sample's score.
        let x_hat = interpolate(&real, &fake, &eps).unwrap().to_vec();
        let per = 48;
        let h = 1e-6;
        let mut fd_gp = 0.0;
        for s in 0..2 {
            let mut sq = 0.0;
            for p in 0..per {
                let score = |delta: f64| {
                    let mut v = x_hat.clone();
                    v[s * per + p] += delta;
                    net.critic(&Tensor::from_vec(v, &[2, 3, 4, 4])).unwrap().data()[s]
                };
                let d = (score(h) - score(-h)) / (2.0 * h);
                sq += d * d;
            }
            fd_gp += (sq.sqrt() - 1.0).powi(2) / 2.0;
        }
        assert!((gp - fd_gp).abs() <= 1e-3 * fd_gp.abs(), "{gp} vs {fd_gp}");
    }

    #[test]
    fn gp_symmetric_in_real_and_fake() {
        let net = TinyNet::new(15);
        let a = randn(16, &[2, 3, 4, 4]);
        let b = randn(17, &[2, 3, 4, 4]);
        let critic = |x: &Tensor| net.critic(x);
        let eps = [0.3, 0.8];
        let flipped: Vec<f64> = eps.iter().map(|e| 1.0 - e).collect();
        let ab = gradient_penalty(critic, &a, &b, &eps).unwrap().item();
        let ba = gradient_penalty(critic, &b, &a, &flipped).unwrap().item();
        assert!((ab - ba).abs() < 1e-10);

        // Independent ε draws: the two orderings agree in expectation.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let trials = 1000;
        let (mut s1, mut s2, mut sq1, mut sq2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..trials {
            let e1: Vec<f64> = (0..2).map(|_| rng.random()).collect();
            let e2: Vec<f64> = (0..2).map(|_| rng.random()).collect();
            let x = gradient_penalty(critic, &a, &b, &e1).unwrap().item();
            let y = gradient_penalty(critic, &b, &a, &e2).unwrap().item();
            s1 += x;
            s2 += y;
            sq1 += x * x;
            sq2 += y * y;
        }
        let n = trials as f64;
        let (m1, m2) = (s1 / n, s2 / n);
        let var = (sq1 / n - m1 * m1) / n + (sq2 / n - m2 * m2) / n;
        assert!((m1 - m2).abs() <= 4.0 * var.sqrt(), "{m1} vs {m2}");
    }

    #[test]
    fn generator_loss_on_fresh_model() {
        use crate::gan::{conditioning_batch, ConditioningVector, GanConfig};
        let cfg = GanConfig {
            d_z: 4,
            d_e: 3,
            num_sub: 5,
            num_main: 2,
            base_channels: 8,
            min_channels: 4,
            max_resolution: 8,
            ..GanConfig::default()
        };
        let model = GanModel::new(cfg.clone()).unwrap();
        let e = vec![vec![1.0, 0.0, 2.0], vec![0.0, -1.0, 0.0]];
        let labels = [1, 4];
        let conds: Vec<_> = (0..2)
            .map(|i| {
                let mut y = vec![0.0; 5];
                y[labels[i]] = 1.0;
                ConditioningVector::for_config(&cfg, vec![0.5; 4], e[i].clone(), y).unwrap()
            })
            .collect();
        let fake = model.generate(&conditioning_batch(&conds).unwrap(), StageState::stable(0)).unwrap();
        let e_t = Tensor::from_vec(e.concat(), &[2, 3]);
        let b = generator_loss(&model, &fake, &labels, &e_t, StageState::stable(0), HeadWeights::default())
            .unwrap()
            .breakdown();
        assert!((b.cls - 5f64.ln()).abs() < 1e-6);
        assert!((b.reg - 3.0).abs() < 1e-6);
        assert!((b.adv + b.cls + b.reg - b.total).abs() < 1e-6);
        let adv_only = HeadWeights { adv: 1.0, cls: 0.0, reg: 0.0 };
        let b2 = generator_loss(&model, &fake, &labels, &e_t, StageState::stable(0), adv_only)
            .unwrap()
            .breakdown();
        assert_eq!(b2.total, b2.adv);
    }
}
