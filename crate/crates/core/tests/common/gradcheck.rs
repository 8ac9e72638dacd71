use std::collections::BTreeMap;

use lsiquant::autodiff::ResidualMode;
use lsiquant::model::ForwardMode;
use lsiquant::tensor::{seeded_rng, Matrix};
use lsiquant::train::{
    loss_and_grads, split_samples, surrogate_loss, BlockObjective, Objective, ParamClass, ParamGroup, TrainConfig,
};

pub const H: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

/// Move every parameter to a random interior point so no class sits at a
/// symmetric start.
pub fn scatter(group: &mut ParamGroup, seed: u64) {
    let mut rng = seeded_rng(seed);
    for p in &mut group.params {
        let (r, c) = p.value.shape();
        let jitter = match p.class {
            ParamClass::Increment => 0.05,
            ParamClass::Square => 0.02,
            ParamClass::LogChannelScale | ParamClass::LogAttnScale => 0.2,
            ParamClass::Shift => 0.05,
            ParamClass::ClipUpper | ParamClass::ClipLower => 0.0,
        };
        let noise = Matrix::from_fn(r, c, |_, _| jitter * rng.normal());
        p.value = match p.class {
            ParamClass::ClipUpper | ParamClass::ClipLower => Matrix::from_fn(r, c, |_, _| rng.uniform_range(1.0, 3.0)),
            _ => p.value.add(&noise).unwrap(),
        };
    }
}

fn perturbed(group: &ParamGroup, param: usize, idx: usize, delta: f64) -> ParamGroup {
    let mut g = group.clone();
    g.params[param].value.data_mut()[idx] += delta;
    g
}

#[derive(Default, Debug)]
pub struct Tally {
    pub checked: BTreeMap<String, usize>,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Tally {
    pub fn total(&self) -> usize {
        self.checked.values().sum()
    }

    pub fn count(&self, class: ParamClass) -> usize {
        self.checked.get(&format!("{class:?}")).copied().unwrap_or(0)
    }
}

/// Compare analytic gradients against central differences of `f`.
/// A coordinate whose central differences at `h` and `h/2` disagree has a
/// kink (range endpoint switch or clamp edge) within reach and is skipped.
pub fn compare(group: &ParamGroup, grads: &[Matrix], f: &dyn Fn(&ParamGroup) -> f64, stride: usize, tally: &mut Tally) {
    let central = |pi: usize, idx: usize, h: f64| {
        (f(&perturbed(group, pi, idx, h)) - f(&perturbed(group, pi, idx, -h))) / (2.0 * h)
    };
    for (pi, p) in group.params.iter().enumerate() {
        for idx in (0..p.value.len()).step_by(stride.max(1)) {
            let fd = central(pi, idx, H);
            let half = central(pi, idx, H / 2.0);
            if (fd - half).abs() > 1e-5 * fd.abs().max(ABS_FLOOR) {
                tally.skipped += 1;
                continue;
            }
            let a = grads[pi].data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(ABS_FLOOR);
            if rel >= REL_TOL {
                tally.failures.push(format!(
                    "{} [{idx}] ({:?}): analytic {a:e} vs numeric {fd:e}, rel {rel:e}",
                    p.name, p.class
                ));
            }
            tally.worst = tally.worst.max(rel);
            *tally.checked.entry(format!("{:?}", p.class)).or_default() += 1;
        }
    }
}

pub fn block_objective(seed: u64, mode: ForwardMode, square_n: usize) -> (BlockObjective, ParamGroup) {
    let seq = 6;
    let (model, _, hidden) = super::tiny_fixture(seed, 2, seq);
    let cfg = TrainConfig {
        square_n,
        ..TrainConfig::default()
    };
    let inputs = split_samples(&hidden[0], seq).unwrap();
    let targets = split_samples(&hidden[1], seq).unwrap();
    BlockObjective::new(&model.blocks[0], model.config.heads, inputs, targets, &mode, &cfg, 0).unwrap()
}

/// Block-level check over weight-only, weight-activation, grouped and
/// per-channel settings, covering all seven parameter classes.
pub fn block_suite() -> Tally {
    let mut tally = Tally::default();
    let modes = [
        ForwardMode::weight_activation(4, 8, Some(8)),
        ForwardMode::weight_only(3, Some(8)),
        ForwardMode::weight_activation(4, 6, None),
    ];
    for (k, mode) in modes.into_iter().enumerate() {
        let (obj, mut group) = block_objective(k as u64 + 1, mode, 4);
        scatter(&mut group, 40 + k as u64);
        let samples: Vec<usize> = (0..obj.sample_count()).collect();
        let (_, grads, recorded) = loss_and_grads(&obj, &group, &samples, ResidualMode::Record, true).unwrap();
        let f = |g: &ParamGroup| surrogate_loss(&obj, g, &samples, &recorded).unwrap();
        compare(&group, &grads, &f, 2, &mut tally);
    }
    tally
}
