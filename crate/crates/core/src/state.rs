//! The 15-dimensional navigation state and its tangent-space layout.

use nalgebra::SVector;

use crate::manifold::{Quat, Vec3};
use crate::preintegration::ImuBias;

/// Tangent dimension of one [`NavState`].
pub const STATE_DIM: usize = 15;

pub type StateVector = SVector<f64, STATE_DIM>;

/// Sub-blocks of the state tangent `(δθ, δp, δv, δb^ω, δb^a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateBlock {
    Rotation,
    Position,
    Velocity,
    GyroBias,
    AccelBias,
}

impl StateBlock {
    pub const ALL: [StateBlock; 5] = [
        StateBlock::Rotation,
        StateBlock::Position,
        StateBlock::Velocity,
        StateBlock::GyroBias,
        StateBlock::AccelBias,
    ];

    /// Column offset of the block inside a state's 15-wide tangent.
    pub const fn offset(self) -> usize {
        match self {
            StateBlock::Rotation => 0,
            StateBlock::Position => 3,
            StateBlock::Velocity => 6,
            StateBlock::GyroBias => 9,
            StateBlock::AccelBias => 12,
        }
    }
}

/// One window node: attitude (body to world), position, velocity and IMU biases.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NavState {
    pub q: Quat,
    pub p: Vec3,
    pub v: Vec3,
    pub bg: Vec3,
    pub ba: Vec3,
}

impl NavState {
    pub fn new(q: Quat, p: Vec3, v: Vec3) -> Self {
        NavState {
            q,
            p,
            v,
            bg: Vec3::zeros(),
            ba: Vec3::zeros(),
        }
    }

    pub fn bias(&self) -> ImuBias {
        ImuBias {
            gyro: self.bg,
            accel: self.ba,
        }
    }

    pub fn with_bias(mut self, bias: &ImuBias) -> Self {
        self.bg = bias.gyro;
        self.ba = bias.accel;
        self
    }

    /// Applies a tangent increment: rotation by `q ∘ E(δθ)`, the rest additively.
    pub fn retract(&self, delta: &StateVector) -> NavState {
        self.retract_with(delta, false)
    }

    /// As [`NavState::retract`], optionally with the first-order rotation update.
    pub fn retract_with(&self, delta: &StateVector, approximate: bool) -> NavState {
        let dtheta: Vec3 = delta.fixed_rows::<3>(0).into_owned();
        let q = if approximate {
            self.q.retract_approx(&dtheta)
        } else {
            self.q.retract(&dtheta)
        };
        NavState {
            q,
            p: self.p + delta.fixed_rows::<3>(3),
            v: self.v + delta.fixed_rows::<3>(6),
            bg: self.bg + delta.fixed_rows::<3>(9),
            ba: self.ba + delta.fixed_rows::<3>(12),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.coords().iter().all(|x| x.is_finite())
            && self
                .p
                .iter()
                .chain(self.v.iter())
                .chain(self.bg.iter())
                .chain(self.ba.iter())
                .all(|x| x.is_finite())
    }
}

/// A state with its timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedState {
    pub stamp: f64,
    pub state: NavState,
}
