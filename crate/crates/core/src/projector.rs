//! The trainable adapter mapping patch features into the language
//! model's embedding space — the only trainable module during the
//! alignment stage. Two variants: a single linear map and a two-layer
//! GELU MLP (the default), applied patch-wise.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::init;
use crate::tensor::{Result as TResult, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectorVariant {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "mlp2-gelu")]
    Mlp2Gelu,
}

impl std::fmt::Display for ProjectorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjectorVariant::Linear => write!(f, "linear"),
            ProjectorVariant::Mlp2Gelu => write!(f, "mlp2-gelu"),
        }
    }
}

impl std::str::FromStr for ProjectorVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ProjectorVariant::Linear),
            "mlp2-gelu" | "mlp" => Ok(ProjectorVariant::Mlp2Gelu),
            other => Err(format!("unknown projector variant '{other}'")),
        }
    }
}

/// Adapter parameters. The MLP hidden width equals the output width.
#[derive(Debug, Clone)]
pub struct Projector {
    pub variant: ProjectorVariant,
    pub input_width: usize,
    pub output_width: usize,
    w1: Tensor,
    b1: Tensor,
    /// Present only for the MLP variant.
    w2: Option<Tensor>,
    b2: Option<Tensor>,
}

/// Seeded projector init: weights uniform with std 1/sqrt(fan_in),
/// zero biases.
pub fn init_projector(
    variant: ProjectorVariant,
    input_width: usize,
    output_width: usize,
    seed: u64,
) -> Projector {
    let mut rng = init::seeded_rng(seed);
    Projector::init(&mut rng, variant, input_width, output_width)
}

impl Projector {
    pub fn init(
        rng: &mut ChaCha8Rng,
        variant: ProjectorVariant,
        input_width: usize,
        output_width: usize,
    ) -> Self {
        assert!(input_width > 0 && output_width > 0, "widths must be positive");
        let (w2, b2) = match variant {
            ProjectorVariant::Linear => (None, None),
            ProjectorVariant::Mlp2Gelu => (
                Some(init::fanin_uniform(
                    rng,
                    vec![output_width, output_width],
                    output_width,
                )),
                Some(init::zeros(vec![output_width])),
            ),
        };
        Self {
            variant,
            input_width,
            output_width,
            w1: init::fanin_uniform(rng, vec![input_width, output_width], input_width),
            b1: init::zeros(vec![output_width]),
            w2,
            b2,
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> ProjectorVars {
        let leaf = |t: &Tensor| tape.leaf(&t.clone().with_requires_grad(trainable));
        ProjectorVars {
            variant: self.variant,
            input_width: self.input_width,
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: self.w2.as_ref().map(leaf),
            b2: self.b2.as_ref().map(leaf),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("proj.w1", &self.w1);
        f("proj.b1", &self.b1);
        if let (Some(w2), Some(b2)) = (&self.w2, &self.b2) {
            f("proj.w2", w2);
            f("proj.b2", b2);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("proj.w1", &mut self.w1);
        f("proj.b1", &mut self.b1);
        if let (Some(w2), Some(b2)) = (&mut self.w2, &mut self.b2) {
            f("proj.w2", w2);
            f("proj.b2", b2);
        }
    }

    /// Overwrites the linear weights; test hook for identity setups.
    pub fn set_linear_weights(&mut self, w: Tensor, b: Tensor) {
        assert_eq!(self.variant, ProjectorVariant::Linear);
        self.w1 = w;
        self.b1 = b;
    }
}

pub struct ProjectorVars {
    pub variant: ProjectorVariant,
    input_width: usize,
    w1: Var,
    b1: Var,
    w2: Option<Var>,
    b2: Option<Var>,
}

impl ProjectorVars {
    /// Patch-wise projection of an N x d_v feature matrix into N x d.
    pub fn project(&self, features: &Var) -> TResult<Var> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.input_width {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                left: shape,
                right: vec![self.input_width],
            });
        }
        let h = features.matmul(&self.w1)?.add_row(&self.b1)?;
        match (&self.w2, &self.b2) {
            (Some(w2), Some(b2)) => h.gelu().matmul(w2)?.add_row(b2),
            _ => Ok(h),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Var)) {
        f("proj.w1", &self.w1);
        f("proj.b1", &self.b1);
        if let (Some(w2), Some(b2)) = (&self.w2, &self.b2) {
            f("proj.w2", w2);
            f("proj.b2", b2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use crate::tensor::fd::check_grads;
    use rand::prelude::*;

    #[test]
    fn same_seed_bit_identical_params() {
        let a = init_projector(ProjectorVariant::Mlp2Gelu, 8, 16, 42);
        let b = init_projector(ProjectorVariant::Mlp2Gelu, 8, 16, 42);
        let mut pa = Vec::new();
        a.visit(&mut |_, t| pa.push(t.data().to_vec()));
        let mut i = 0;
        b.visit(&mut |_, t| {
            assert_eq!(t.data(), &pa[i][..]);
            i += 1;
        });
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_projector(ProjectorVariant::Linear, 8, 16, 1);
        let b = init_projector(ProjectorVariant::Linear, 8, 16, 2);
        let mut pa = Vec::new();
        a.visit(&mut |_, t| pa.push(t.data().to_vec()));
        let mut any_diff = false;
        let mut i = 0;
        b.visit(&mut |_, t| {
            any_diff |= t.data() != &pa[i][..];
            i += 1;
        });
        assert!(any_diff);
    }

    #[test]
    fn identity_linear_weights_pass_input_through() {
        let d = 6;
        let mut p = init_projector(ProjectorVariant::Linear, d, d, 3);
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        p.set_linear_weights(
            Tensor::new(vec![d, d], eye).unwrap(),
            Tensor::zeros(vec![d]),
        );
        let tape = Tape::new();
        let vars = p.bind(&tape, false);
        let v = Tensor::new(vec![3, d], (0..3 * d).map(|i| i as f64 * 0.1).collect()).unwrap();
        let z = vars.project(&tape.constant(&v)).unwrap();
        assert_eq!(z.value().data(), v.data());
    }

    #[test]
    fn row_independence() {
        let p = init_projector(ProjectorVariant::Mlp2Gelu, 8, 12, 7);
        let tape = Tape::new();
        let vars = p.bind(&tape, false);
        let batch =
            Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64) * 0.17 - 2.0).collect()).unwrap();
        let full = vars.project(&tape.constant(&batch)).unwrap().value();
        for r in 0..4 {
            let row = Tensor::new(vec![1, 8], batch.data()[r * 8..(r + 1) * 8].to_vec()).unwrap();
            let single = vars.project(&tape.constant(&row)).unwrap().value();
            assert_eq!(single.data(), &full.data()[r * 12..(r + 1) * 12]);
        }
    }

    #[test]
    fn both_variants_gradcheck() {
        for variant in [ProjectorVariant::Linear, ProjectorVariant::Mlp2Gelu] {
            let p = init_projector(variant, 32, 16, 9);
            let mut tensors = Vec::new();
            p.visit(&mut |_, t| tensors.push(t.clone()));
            let mut rng = seeded_rng(100);
            let input_data: Vec<f64> = (0..4 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let input = Tensor::new(vec![4, 32], input_data).unwrap();

            let err = check_grads(&tensors, |tape, leaves| {
                let vars = ProjectorVars {
                    variant,
                    input_width: 32,
                    w1: leaves[0].clone(),
                    b1: leaves[1].clone(),
                    w2: leaves.get(2).cloned(),
                    b2: leaves.get(3).cloned(),
                };
                let x = tape.constant(&input);
                let z = vars.project(&x).unwrap();
                z.mul(&z).unwrap().sum_all()
            });
            assert!(err < 1e-5, "{variant} projector grad err {err}");
        }
    }

    #[test]
    fn init_output_variance_in_range_on_unit_variance_input() {
        // 1000 random rows through a fresh projector; sample variance
        // of the outputs must sit in [0.25, 4.0].
        for variant in [ProjectorVariant::Linear, ProjectorVariant::Mlp2Gelu] {
            let p = init_projector(variant, 32, 32, 5);
            let tape = Tape::new();
            let vars = p.bind(&tape, false);
            let mut rng = seeded_rng(500);
            let rows = 1000;
            let data: Vec<f64> = (0..rows * 32)
                .map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    z
                })
                .collect();
            let x = Tensor::new(vec![rows, 32], data).unwrap();
            let z = vars.project(&tape.constant(&x)).unwrap().value();
            let mean: f64 = z.data().iter().sum::<f64>() / z.numel() as f64;
            let var: f64 =
                z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.numel() as f64;
            assert!(
                (0.25..=4.0).contains(&var),
                "{variant} init output variance {var} outside [0.25, 4.0]"
            );
        }
    }

    #[test]
    fn permutation_commutes_with_projection() {
        let p = init_projector(ProjectorVariant::Mlp2Gelu, 8, 8, 21);
        let tape = Tape::new();
        let vars = p.bind(&tape, false);
        let x = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let order = [3usize, 1, 0, 2];

        let projected = vars.project(&tape.constant(&x)).unwrap().value();
        let mut permuted_then = Vec::new();
        for &r in &order {
            permuted_then.extend_from_slice(&x.data()[r * 8..(r + 1) * 8]);
        }
        let proj_of_perm = vars
            .project(&tape.constant(&Tensor::new(vec![4, 8], permuted_then).unwrap()))
            .unwrap()
            .value();
        for (new_r, &src_r) in order.iter().enumerate() {
            assert_eq!(
                &proj_of_perm.data()[new_r * 8..(new_r + 1) * 8],
                &projected.data()[src_r * 8..(src_r + 1) * 8]
            );
        }
    }
}
