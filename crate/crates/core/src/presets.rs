//! Models, input laws and smoothing parameters of the worked examples.

use crate::distributions::TiltableDistribution;
use crate::model::{Model, ModelFamily, ThetaBox};
use crate::objective::SmoothingPhi;

pub struct Preset {
    pub model: Model,
    pub dist: TiltableDistribution,
    pub phi: SmoothingPhi,
    /// Number of summands used in the reported runs.
    pub n: usize,
}

fn smoothing() -> SmoothingPhi {
    SmoothingPhi::new(1e5, 0.01).expect("valid smoothing")
}

/// Five-dimensional centred normal shared by the larger examples.
pub fn five_dim_normal() -> TiltableDistribution {
    let c = [
        [1.0, 0.3750, 0.1066, 0.7878, -0.9006],
        [0.3750, 1.0, 0.9390, 0.5709, -0.4219],
        [0.1066, 0.9390, 1.0, 0.2726, -0.0910],
        [0.7878, 0.5709, 0.2726, 1.0, -0.9228],
        [-0.9006, -0.4219, -0.0910, -0.9228, 1.0],
    ];
    TiltableDistribution::mv_normal(vec![0.0; 5], c.iter().map(|r| r.to_vec()).collect())
        .expect("positive definite")
}

/// `G(x, θ) = (x − θ)⁺ − 0.4(1.5 − θ)`, `X ~ N(0, 1)`, `Θ = [0, 1.5]`.
pub fn example1() -> Preset {
    Preset {
        model: Model::new(
            ModelFamily::HingeComponentwise {
                b: vec![0.4],
                c: vec![1.5],
            },
            ThetaBox::new(vec![0.0], vec![1.5]).unwrap(),
        )
        .unwrap(),
        dist: TiltableDistribution::standard_normal(1),
        phi: smoothing(),
        n: 100,
    }
}

/// Componentwise hinge in two dimensions with correlation 0.6.
pub fn example2_2d() -> Preset {
    Preset {
        model: Model::new(
            ModelFamily::HingeComponentwise {
                b: vec![0.4, 0.3],
                c: vec![1.5, 2.0],
            },
            ThetaBox::new(vec![0.0, 0.0], vec![1.5, 2.0]).unwrap(),
        )
        .unwrap(),
        dist: TiltableDistribution::mv_normal(vec![0.0, 0.0], vec![vec![1.0, 0.6], vec![0.6, 1.0]])
            .unwrap(),
        phi: smoothing(),
        n: 50,
    }
}

const B5: [f64; 5] = [0.3, 0.2, 0.3, 0.3, 0.2];
const C5: [f64; 5] = [1.0, 2.0, 2.0, 1.0, 2.0];

/// Componentwise hinge in five dimensions.
pub fn example2_5d() -> Preset {
    Preset {
        model: Model::new(
            ModelFamily::HingeComponentwise {
                b: B5.to_vec(),
                c: C5.to_vec(),
            },
            ThetaBox::new(vec![0.0; 5], C5.to_vec()).unwrap(),
        )
        .unwrap(),
        dist: five_dim_normal(),
        phi: smoothing(),
        n: 50,
    }
}

/// Scalar aggregate `G(x, θ) = fᵀ(x − θ)⁺ − bᵀ(c − θ)` with `f = 1`.
pub fn example3() -> Preset {
    Preset {
        model: Model::new(
            ModelFamily::HingeAggregate {
                f: vec![1.0; 5],
                b: B5.to_vec(),
                c: C5.to_vec(),
            },
            ThetaBox::new(vec![0.0; 5], C5.to_vec()).unwrap(),
        )
        .unwrap(),
        dist: five_dim_normal(),
        phi: smoothing(),
        n: 50,
    }
}

/// Looks a preset up by name.
pub fn by_name(name: &str) -> Option<Preset> {
    match name {
        "example1" => Some(example1()),
        "example2_2d" => Some(example2_2d()),
        "example2_5d" => Some(example2_5d()),
        "example3" => Some(example3()),
        _ => None,
    }
}
