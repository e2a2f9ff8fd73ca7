//! Central finite differences, the oracle for every backward rule.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::llm::{LmConfig, ToyLlm};
use crate::params::{Group, ParamBuilder, ParamId, ParamStore};
use crate::qava::{GeneralProjector, Qava, QavaConfig, QuestionTemplates};
use crate::scalar::{c, Scalar};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::types::DistortionType;
use crate::vision::{Image, ImageInput, VisionConfig, VisionEncoder};
use crate::vocab::Vocab;

/// Denominator floor for [`relative_error`]. Gradient entries smaller than
/// this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference gradient of `f` with respect to every coordinate of
/// parameter `id`: `(f(p + eps) − f(p − eps)) / (2 eps)`.
pub fn finite_diff_grad<T, F>(store: &mut ParamStore<T>, id: ParamId, eps: T, mut f: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    let n = store.tensor(id).len();
    let coords: Vec<usize> = (0..n).collect();
    let vals = finite_diff_coords(store, id, &coords, eps, &mut f)?;
    Tensor::new(store.tensor(id).shape().to_vec(), vals)
}

/// Central differences for a subset of coordinates of one parameter.
/// The parameter is restored exactly afterwards.
pub fn finite_diff_coords<T, F>(
    store: &mut ParamStore<T>,
    id: ParamId,
    coords: &[usize],
    eps: T,
    f: &mut F,
) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    let two: T = c(2.0);
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = store.tensor(id).data()[i];
        store.tensor_mut(id).data_mut()[i] = orig + eps;
        let plus = f(store)?;
        store.tensor_mut(id).data_mut()[i] = orig - eps;
        let minus = f(store)?;
        store.tensor_mut(id).data_mut()[i] = orig;
        out.push((plus - minus) / (two * eps));
    }
    Ok(out)
}

/// Outcome of comparing backward gradients to finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
    pub params_checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.params_checked == 0 {
            self.max_rel_error = other.max_rel_error.max(self.max_rel_error);
            self.worst_param = other.worst_param;
        }
        self.coords_checked += other.coords_checked;
        self.params_checked += other.params_checked;
    }

    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_param: String::new(),
            coords_checked: 0,
            params_checked: 0,
        }
    }
}

/// Checks the backward gradient of the scalar built by `loss` against central
/// differences, for up to `coords_per_param` randomly chosen coordinates of
/// every trainable parameter in `store`.
pub fn check_params<T, F, R>(
    store: &mut ParamStore<T>,
    eps: f64,
    coords_per_param: usize,
    rng: &mut R,
    loss: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: for<'t> Fn(&ParamStore<T>, &'t Tape<T>) -> Result<Var<'t, T>>,
{
    let grads: Gradients<T> = {
        let tape = Tape::new();
        let l = loss(store, &tape)?;
        tape.backward(l)?
    };
    let mut eval = |s: &ParamStore<T>| -> Result<T> {
        let tape = Tape::new();
        Ok(loss(s, &tape)?.value().item())
    };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = GradCheckReport::empty();
    for id in ids {
        let n = store.tensor(id).len();
        let k = coords_per_param.min(n);
        let mut coords = sample(rng, n, k).into_vec();
        coords.sort_unstable();
        let fd = finite_diff_coords(store, id, &coords, c(eps), &mut eval)?;
        let zeros;
        let ad = match grads.get(id) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(store.tensor(id).shape());
                &zeros
            }
        };
        let mut worst: f64 = 0.0;
        for (&i, f) in coords.iter().zip(&fd) {
            let a = ad.data()[i].to_f64().unwrap_or(f64::NAN);
            let b = f.to_f64().unwrap_or(f64::NAN);
            let e = relative_error(a, b, REL_ERROR_FLOOR);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        report.merge(GradCheckReport {
            max_rel_error: worst,
            worst_param: store.get(id).name.clone(),
            coords_checked: coords.len(),
            params_checked: 1,
        });
    }
    Ok(report)
}

/// Model components with a prepared gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    Vision,
    Projector,
    Qava,
    Llm,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [ModuleKind::Vision, ModuleKind::Projector, ModuleKind::Qava, ModuleKind::Llm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Vision => "vision",
            ModuleKind::Projector => "projector",
            ModuleKind::Qava => "qava",
            ModuleKind::Llm => "llm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// `Σ out ⊙ W / √numel` with `W` drawn from `seed`.
fn random_contraction<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::randn(&shape, 1.0 / (n as f64).sqrt(), &mut rng);
    out.mul(&tape.constant(w))?.sum()
}

/// Gradient check of one desk-scale module in double precision, all
/// parameters, `coords_per_param` random coordinates each.
pub fn check_module(kind: ModuleKind, seed: u64, coords_per_param: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let wseed = seed ^ 0x5eed;
    let vcfg = VisionConfig::default();
    let feat = vcfg.feat_dim;
    let llm_dim = 64;
    match kind {
        ModuleKind::Vision => {
            let enc = VisionEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng, "vision", Group::Vision), vcfg)?;
            let img = Image::from_fn(40, 24, 3, |y, x, ch| ((y * 7 + x * 3 + ch * 11) % 17) as f32 / 16.0)?;
            let input = ImageInput::Pixels(img);
            check_params(&mut store, 1e-5, coords_per_param, &mut rng, |s, tape| {
                random_contraction(tape, enc.encode(tape, s, &input)?, wseed)
            })
        }
        ModuleKind::Projector => {
            let proj =
                GeneralProjector::new(&mut ParamBuilder::new(&mut store, &mut rng, "projector", Group::Projector), feat, llm_dim)?;
            let feats = Tensor::randn(&[7, feat], 1.0, &mut rng);
            check_params(&mut store, 1e-5, coords_per_param, &mut rng, |s, tape| {
                random_contraction(tape, proj.forward(tape, s, tape.constant(feats.clone()))?, wseed)
            })
        }
        ModuleKind::Qava => {
            let vocab = Vocab::build(QuestionTemplates::default().iter().map(|(_, q)| q));
            let proj =
                GeneralProjector::new(&mut ParamBuilder::new(&mut store, &mut rng, "projector", Group::Projector), feat, llm_dim)?;
            let qava = Qava::new(
                &mut ParamBuilder::new(&mut store, &mut rng, "qava", Group::Qava),
                QavaConfig::default(),
                feat,
                llm_dim,
                vocab.len(),
            )?;
            let q = QuestionTemplates::default().question(DistortionType::Unknown);
            let ids = qava.question_ids(&vocab, &q)?;
            let feats = Tensor::randn(&[9, feat], 1.0, &mut rng);
            check_params(&mut store, 1e-5, coords_per_param, &mut rng, |s, tape| {
                let f = tape.constant(feats.clone());
                let general = proj.forward(tape, s, f)?;
                let task = qava.forward(tape, s, f, &ids)?;
                random_contraction(tape, tape.concat(&[general, task], 0)?, wseed)
            })
        }
        ModuleKind::Llm => {
            let vocab_size = 23;
            let cfg = LmConfig {
                max_seq: 64,
                ..LmConfig::desk(vocab_size)
            };
            let lm = ToyLlm::new(&mut ParamBuilder::new(&mut store, &mut rng, "llm", Group::Llm), cfg)?;
            let prefix = store.add("prefix", Tensor::randn(&[5, llm_dim], 1.0, &mut rng), Group::Qava)?;
            let ids: Vec<usize> = (0..9).map(|_| rng.random_range(0..vocab_size)).collect();
            let mask: Vec<bool> = (0..9).map(|i| i >= 4).collect();
            check_params(&mut store, 1e-5, coords_per_param, &mut rng, |s, tape| {
                lm.masked_loss(tape, s, Some(tape.param(s, prefix)), &ids, &mask)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::scalar(3.0), Group::Llm).unwrap();
        let g = finite_diff_grad(&mut store, id, 1e-5, |s| Ok(s.tensor(id).item().powi(2))).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("x", Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap(), Group::Llm)
            .unwrap();
        let g = finite_diff_grad(&mut store, id, 1e-5, |_| Ok(4.2)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert_eq!(store.tensor(id).data(), &[1.0, -2.0, 0.5]);
    }
}
