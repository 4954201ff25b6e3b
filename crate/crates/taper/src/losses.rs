//! The five distillation losses and their weighted total.
//!
//! All loss functions build on the tensor tape, so calling `backward` on any
//! returned scalar yields gradients for the student weights and the
//! projection matrices. Per-sequence functions follow the shapes produced by
//! one `forward` call; `batch_losses` averages them over a batch.

use serde::{Deserialize, Serialize};

use crate::data::MlmBatch;
use crate::model::ForwardOutput;
use crate::tensor::{mse, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(teacher || student): teacher probabilities weight the log ratio.
    /// The standard soft-target formulation and the default.
    TeacherLed,
    /// KL(student || teacher), the direction as literally written in some
    /// distillation objectives.
    StudentLed,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_kd: f64,
    pub alpha_hidden: f64,
    pub alpha_emb: f64,
    pub alpha_attn: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_kd: 1.0,
            alpha_hidden: 1.0,
            alpha_emb: 1.0,
            alpha_attn: 1.0,
            temperature: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        for (name, v) in [
            ("alpha_kd", self.alpha_kd),
            ("alpha_hidden", self.alpha_hidden),
            ("alpha_emb", self.alpha_emb),
            ("alpha_attn", self.alpha_attn),
        ] {
            if !(v >= 0.0) {
                return Err(crate::Error::Config(format!("{} must be nonnegative", name)));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(crate::Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable projections mapping student representations into the teacher's
/// width: one matrix shared across every layer for hidden states, one for
/// the embedding output. Rows follow the student's hidden mask.
pub struct ProjectionSet {
    pub w_hidn: Tensor,
    pub w_emb: Tensor,
}

impl ProjectionSet {
    pub fn new(
        student_dim: usize,
        teacher_dim: usize,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> ProjectionSet {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut init = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 0.04 {
                        break v;
                    }
                })
                .collect()
        };
        ProjectionSet {
            w_hidn: Tensor::param(&[student_dim, teacher_dim], init(student_dim * teacher_dim)),
            w_emb: Tensor::param(&[student_dim, teacher_dim], init(student_dim * teacher_dim)),
        }
    }

    /// Identity projections (square), for tests of the zero-loss case.
    pub fn identity(dim: usize) -> ProjectionSet {
        let eye = |n: usize| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            d
        };
        ProjectionSet {
            w_hidn: Tensor::param(&[dim, dim], eye(dim)),
            w_emb: Tensor::param(&[dim, dim], eye(dim)),
        }
    }

    pub fn zero_grads(&self) {
        self.w_hidn.zero_grad();
        self.w_emb.zero_grad();
    }
}

/// The five loss values plus their weighted total, as plain numbers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBundle {
    pub mlm: f64,
    pub kd: f64,
    pub hidden: f64,
    pub emb: f64,
    pub attn: f64,
    pub total: f64,
}

/// Masked positions of one sequence (indices with a label).
fn masked_positions(labels: &[Option<usize>]) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i].is_some()).collect()
}

/// Mean cross-entropy over the labeled positions of one sequence.
pub fn mlm_loss(logits: &Tensor, labels: &[Option<usize>]) -> Tensor {
    assert_eq!(logits.rows(), labels.len(), "labels length mismatch");
    let coords: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|t| (i, t)))
        .collect();
    assert!(!coords.is_empty(), "mlm_loss requires at least one masked position");
    let log_probs = logits.log_softmax(1);
    log_probs.pick(&coords).sum().scale(-1.0 / coords.len() as f64)
}

/// Temperature-scaled KL divergence between student and teacher logits,
/// averaged over `positions`, scaled by temperature squared.
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    temperature: f64,
    positions: &[usize],
    direction: KlDirection,
) -> Tensor {
    assert_eq!(student_logits.shape(), teacher_logits.shape(), "logit shape mismatch");
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(!positions.is_empty(), "kd_loss requires at least one position");
    let t = temperature;
    let s = student_logits.scale(1.0 / t).log_softmax(1).select_rows(positions);
    let te = teacher_logits.scale(1.0 / t).log_softmax(1).select_rows(positions);
    let kl_sum = match direction {
        KlDirection::TeacherLed => {
            // sum p_t * (log p_t - log q_s)
            let p = te.exp();
            p.mul(&te.sub(&s)).sum()
        }
        KlDirection::StudentLed => {
            // sum q_s * (log q_s - log p_t)
            let q = s.exp();
            q.mul(&s.sub(&te)).sum()
        }
    };
    kl_sum.scale(t * t / positions.len() as f64)
}

/// Sum over layers of MSE between teacher hidden states and projected
/// student hidden states.
pub fn hidden_loss(teacher_h: &[Tensor], student_h: &[Tensor], w_hidn: &Tensor) -> Tensor {
    assert_eq!(teacher_h.len(), student_h.len(), "layer count mismatch");
    assert!(!teacher_h.is_empty(), "no hidden states");
    let mut total: Option<Tensor> = None;
    for (ht, hs) in teacher_h.iter().zip(student_h.iter()) {
        let term = mse(ht, &hs.matmul(w_hidn));
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    total.unwrap()
}

/// MSE between teacher and projected student embedding outputs.
pub fn embedding_loss(teacher_e: &Tensor, student_e: &Tensor, w_emb: &Tensor) -> Tensor {
    mse(teacher_e, &student_e.matmul(w_emb))
}

/// Sum over layers of MSE between head-averaged attention maps.
pub fn attention_loss(teacher_a: &[Tensor], student_a: &[Tensor]) -> Tensor {
    assert_eq!(teacher_a.len(), student_a.len(), "layer count mismatch");
    assert!(!teacher_a.is_empty(), "no attention maps");
    let mut total: Option<Tensor> = None;
    for (at, asx) in teacher_a.iter().zip(student_a.iter()) {
        let term = mse(at, asx);
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    total.unwrap()
}

/// Weighted total. Returns the tape scalar for backward plus the bundle of
/// plain values; the bundle's `total` recombines from its components
/// bit-exactly (same fold order as the tape).
pub fn total_loss(
    mlm: &Tensor,
    kd: &Tensor,
    hidden: &Tensor,
    emb: &Tensor,
    attn: &Tensor,
    weights: &LossWeights,
) -> (Tensor, LossBundle) {
    let total = mlm
        .add(&kd.scale(weights.alpha_kd))
        .add(&hidden.scale(weights.alpha_hidden))
        .add(&emb.scale(weights.alpha_emb))
        .add(&attn.scale(weights.alpha_attn));
    let bundle = LossBundle {
        mlm: mlm.item(),
        kd: kd.item(),
        hidden: hidden.item(),
        emb: emb.item(),
        attn: attn.item(),
        total: total.item(),
    };
    (total, bundle)
}

/// All five losses for one batch: per-sequence losses averaged over the
/// batch. Teacher outputs come first, mirroring the loss definitions.
pub fn batch_losses(
    teacher_outs: &[ForwardOutput],
    student_outs: &[ForwardOutput],
    batch: &MlmBatch,
    projections: &ProjectionSet,
    weights: &LossWeights,
    direction: KlDirection,
) -> (Tensor, LossBundle) {
    assert_eq!(teacher_outs.len(), student_outs.len(), "batch size mismatch");
    assert_eq!(teacher_outs.len(), batch.len(), "batch size mismatch");
    assert!(!teacher_outs.is_empty(), "empty batch");
    let b = teacher_outs.len() as f64;

    let mut mlm_acc: Option<Tensor> = None;
    let mut kd_acc: Option<Tensor> = None;
    let mut hid_acc: Option<Tensor> = None;
    let mut emb_acc: Option<Tensor> = None;
    let mut attn_acc: Option<Tensor> = None;
    let push = |acc: &mut Option<Tensor>, t: Tensor| {
        *acc = Some(match acc.take() {
            Some(a) => a.add(&t),
            None => t,
        });
    };

    for (i, (t_out, s_out)) in teacher_outs.iter().zip(student_outs.iter()).enumerate() {
        let labels = &batch.labels[i];
        let positions = masked_positions(labels);
        push(&mut mlm_acc, mlm_loss(&s_out.logits, labels));
        push(
            &mut kd_acc,
            kd_loss(&s_out.logits, &t_out.logits, weights.temperature, &positions, direction),
        );
        push(
            &mut hid_acc,
            hidden_loss(&t_out.hidden_states, &s_out.hidden_states, &projections.w_hidn),
        );
        push(
            &mut emb_acc,
            embedding_loss(&t_out.embedding_output, &s_out.embedding_output, &projections.w_emb),
        );
        push(&mut attn_acc, attention_loss(&t_out.attention_maps, &s_out.attention_maps));
    }

    let mlm = mlm_acc.unwrap().scale(1.0 / b);
    let kd = kd_acc.unwrap().scale(1.0 / b);
    let hidden = hid_acc.unwrap().scale(1.0 / b);
    let emb = emb_acc.unwrap().scale(1.0 / b);
    let attn = attn_acc.unwrap().scale(1.0 / b);
    total_loss(&mlm, &kd, &hidden, &emb, &attn, weights)
}

/// Plain MLM loss for one batch of student outputs (teacher-free path).
pub fn batch_mlm_loss(student_outs: &[ForwardOutput], batch: &MlmBatch) -> Tensor {
    assert!(!student_outs.is_empty(), "empty batch");
    let b = student_outs.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (i, s_out) in student_outs.iter().enumerate() {
        let term = mlm_loss(&s_out.logits, &batch.labels[i]);
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    acc.unwrap().scale(1.0 / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_param(rng: &mut ChaCha12Rng, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * scale).collect();
        Tensor::param(shape, data)
    }

    #[test]
    fn mlm_uniform_logits_give_log_vocab() {
        let v = 17;
        let logits = Tensor::zeros(&[3, v]);
        let labels = vec![None, Some(4), None];
        let loss = mlm_loss(&logits, &labels).item();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_confident_correct_is_near_zero() {
        let v = 8;
        let mut data = vec![0.0; v];
        data[3] = 50.0;
        let logits = Tensor::from_vec(&[1, v], data);
        let loss = mlm_loss(&logits, &[Some(3)]).item();
        assert!(loss < 1e-12, "loss {}", loss);
    }

    #[test]
    fn mlm_two_positions_mean_of_hand_values() {
        // Two masked rows with hand-set logits; expected value computed from
        // the closed form ce = log(sum exp) - logit[target].
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]);
        let labels = vec![Some(1), Some(0)];
        let ce = |row: &[f64], t: usize| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            lse - row[t]
        };
        let want = 0.5 * (ce(&[1.0, 2.0, 0.5], 1) + ce(&[-1.0, 0.0, 3.0], 0));
        let got = mlm_loss(&logits, &labels).item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "at least one masked position")]
    fn mlm_zero_masked_positions_is_contract_error() {
        let logits = Tensor::zeros(&[2, 4]);
        let _ = mlm_loss(&logits, &[None, None]);
    }

    #[test]
    fn kd_identical_logits_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let logits = rand_param(&mut rng, &[4, 9], 2.0);
        let same = Tensor::from_vec(&[4, 9], logits.to_vec());
        let loss =
            kd_loss(&logits, &same, 2.0, &[0, 1, 2, 3], KlDirection::TeacherLed).item();
        assert!(loss.abs() <= 1e-12, "loss {}", loss);
    }

    #[test]
    fn kd_closed_form_two_classes() {
        // teacher probs [0.75, 0.25], student [0.5, 0.5], T=1:
        // 0.75 ln 1.5 + 0.25 ln 0.5
        let teacher = Tensor::from_vec(&[1, 2], vec![3f64.ln(), 0.0]);
        let student = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let got = kd_loss(&student, &teacher, 1.0, &[0], KlDirection::TeacherLed).item();
        assert!((got - want).abs() < 1e-12, "got {} want {}", got, want);
        assert!((got - 0.13082).abs() < 1e-5);
    }

    #[test]
    fn kd_is_asymmetric() {
        let a = Tensor::from_vec(&[1, 3], vec![2.0, 0.0, -1.0]);
        let b = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.5]);
        let ab = kd_loss(&a, &b, 1.0, &[0], KlDirection::TeacherLed).item();
        let ba = kd_loss(&b, &a, 1.0, &[0], KlDirection::TeacherLed).item();
        assert!((ab - ba).abs() > 1e-6, "kd unexpectedly symmetric: {} vs {}", ab, ba);
    }

    #[test]
    fn kd_direction_flag_changes_value() {
        let s = Tensor::from_vec(&[1, 3], vec![2.0, 0.0, -1.0]);
        let t = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.5]);
        let led_t = kd_loss(&s, &t, 2.0, &[0], KlDirection::TeacherLed).item();
        let led_s = kd_loss(&s, &t, 2.0, &[0], KlDirection::StudentLed).item();
        assert!((led_t - led_s).abs() > 1e-6);
    }

    #[test]
    fn kd_temperature_scaling_keeps_gradient_scale() {
        // With the T^2 factor, gradient magnitudes stay comparable when T
        // doubles (they converge as T grows; check same order of magnitude).
        let grad_norm = |t: f64| {
            let s = rand_param(&mut ChaCha12Rng::seed_from_u64(1), &[2, 6], 2.0);
            let te = rand_param(&mut ChaCha12Rng::seed_from_u64(5), &[2, 6], 2.0);
            let te = Tensor::from_vec(&[2, 6], te.to_vec());
            let loss = kd_loss(&s, &te, t, &[0, 1], KlDirection::TeacherLed);
            loss.backward();
            s.grad().unwrap().iter().map(|g| g * g).sum::<f64>().sqrt()
        };
        let g1 = grad_norm(1.0);
        let g2 = grad_norm(2.0);
        let ratio = g1 / g2;
        assert!(
            (0.2..5.0).contains(&ratio),
            "temperature scaling broke gradient scale: {} vs {}",
            g1,
            g2
        );
    }

    #[test]
    fn kd_gradients_match_finite_differences_both_directions() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let student = rand_param(&mut rng, &[3, 5], 1.5);
        let teacher = Tensor::from_vec(&[3, 5], rand_param(&mut rng, &[3, 5], 1.5).to_vec());
        for dir in [KlDirection::TeacherLed, KlDirection::StudentLed] {
            student.zero_grad();
            let loss = kd_loss(&student, &teacher, 2.0, &[0, 2], dir);
            loss.backward();
            let analytic = student.grad().unwrap();
            let h = 1e-5;
            for i in 0..student.numel() {
                let orig = student.to_vec()[i];
                student.apply(|d| d[i] = orig + h);
                let up = kd_loss(&student, &teacher, 2.0, &[0, 2], dir).item();
                student.apply(|d| d[i] = orig - h);
                let down = kd_loss(&student, &teacher, 2.0, &[0, 2], dir).item();
                student.apply(|d| d[i] = orig);
                let fd = (up - down) / (2.0 * h);
                let err = (analytic[i] - fd).abs();
                let rel = err / analytic[i].abs().max(fd.abs()).max(1e-12);
                assert!(err < 1e-8 || rel < 1e-4, "dir {:?} entry {}: {} vs {}", dir, i, analytic[i], fd);
            }
        }
    }

    #[test]
    fn hidden_loss_identity_projection_zero() {
        let h = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 4.0, 1.0]);
        let proj = ProjectionSet::identity(3);
        let loss = hidden_loss(
            &[Tensor::from_vec(&[2, 3], h.to_vec())],
            &[h],
            &proj.w_hidn,
        )
        .item();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn hidden_loss_hand_case() {
        // K=1, H_t=[[1,0]], H_s=[[1]], W=[[1,1]] -> MSE([[1,0]],[[1,1]]) = 0.5
        let ht = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]);
        let hs = Tensor::from_vec(&[1, 1], vec![1.0]);
        let w = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]);
        assert_eq!(hidden_loss(&[ht], &[hs], &w).item(), 0.5);
    }

    #[test]
    fn hidden_loss_projection_gradient_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let ht = Tensor::from_vec(&[3, 4], rand_param(&mut rng, &[3, 4], 1.0).to_vec());
        let hs = Tensor::from_vec(&[3, 2], rand_param(&mut rng, &[3, 2], 1.0).to_vec());
        let w = rand_param(&mut rng, &[2, 4], 1.0);
        w.zero_grad();
        hidden_loss(&[ht.clone()], &[hs.clone()], &w).backward();
        let analytic = w.grad().unwrap();
        let h = 1e-5;
        for i in 0..w.numel() {
            let orig = w.to_vec()[i];
            w.apply(|d| d[i] = orig + h);
            let up = hidden_loss(&[ht.clone()], &[hs.clone()], &w).item();
            w.apply(|d| d[i] = orig - h);
            let down = hidden_loss(&[ht.clone()], &[hs.clone()], &w).item();
            w.apply(|d| d[i] = orig);
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-4, "entry {}: {} vs {}", i, analytic[i], fd);
        }
    }

    #[test]
    fn embedding_loss_cases() {
        let e = Tensor::from_vec(&[1, 1], vec![2.0]);
        let s = Tensor::from_vec(&[1, 1], vec![1.0]);
        let w = Tensor::from_vec(&[1, 1], vec![1.0]);
        assert_eq!(embedding_loss(&e, &s, &w).item(), 1.0);

        // Scaling the student scales the loss by the MSE quadratic form.
        let e2 = Tensor::zeros(&[1, 1]);
        let s1 = Tensor::from_vec(&[1, 1], vec![1.0]);
        let s3 = Tensor::from_vec(&[1, 1], vec![3.0]);
        let l1 = embedding_loss(&e2, &s1, &w).item();
        let l3 = embedding_loss(&e2, &s3, &w).item();
        assert!((l3 / l1 - 9.0).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_cases() {
        let a = Tensor::from_vec(&[2, 2], vec![0.6, 0.4, 0.5, 0.5]);
        let b = Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]);
        let same = attention_loss(
            &[Tensor::from_vec(&[2, 2], a.to_vec())],
            &[Tensor::from_vec(&[2, 2], a.to_vec())],
        );
        assert_eq!(same.item(), 0.0);

        // Elementwise mean normalization: (0.01 + 0.01) / 4.
        let got = attention_loss(&[a], &[b]).item();
        assert!((got - 0.005).abs() < 1e-15, "got {}", got);

        // Single-position maps are always [[1.0]] so the loss is 0.
        let one = Tensor::from_vec(&[1, 1], vec![1.0]);
        let one2 = Tensor::from_vec(&[1, 1], vec![1.0]);
        assert_eq!(attention_loss(&[one], &[one2]).item(), 0.0);
    }

    #[test]
    fn total_loss_recombination() {
        let parts: Vec<Tensor> = [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&v| Tensor::scalar(v)).collect();
        let w = LossWeights { alpha_kd: 1.0, alpha_hidden: 1.0, alpha_emb: 1.0, alpha_attn: 1.0, temperature: 2.0 };
        let (total, bundle) = total_loss(&parts[0], &parts[1], &parts[2], &parts[3], &parts[4], &w);
        assert_eq!(total.item(), 15.0);
        assert_eq!(bundle.total, 15.0);
        let recombined = bundle.mlm
            + w.alpha_kd * bundle.kd
            + w.alpha_hidden * bundle.hidden
            + w.alpha_emb * bundle.emb
            + w.alpha_attn * bundle.attn;
        assert!((bundle.total - recombined).abs() <= 1e-12);

        let w0 = LossWeights { alpha_kd: 0.0, alpha_hidden: 0.0, alpha_emb: 0.0, alpha_attn: 0.0, temperature: 2.0 };
        let (t0, b0) = total_loss(&parts[0], &parts[1], &parts[2], &parts[3], &parts[4], &w0);
        assert_eq!(t0.item(), b0.mlm);

        let mlm2 = Tensor::scalar(2.0);
        let z = Tensor::scalar(0.0);
        let (t2, _) = total_loss(&mlm2, &z, &z, &z, &z, &w);
        assert_eq!(t2.item(), 2.0);
    }
}
