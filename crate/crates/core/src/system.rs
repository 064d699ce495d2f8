//! Window-level embedding systems: the TDNN and HORNN d-vector extractors
//! on their own, or any combination structure over both, always ending in
//! a linear projection to the clustering embedding space.

use rand::Rng;

use crate::combination::{
    self, CombinerConfig, CombinerInput, CombinerInputs, CombinerVariant,
};
use crate::nets::{self, HornnConfig, Result, TdnnConfig};
use crate::numerics::{Tape, Var};
use crate::pooling::{self, PoolingConfig};
use crate::scalar::Scalar;
use crate::params::ParamStore;

/// Which embedding system to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Tdnn,
    Hornn,
    Combined(CombinerVariant),
}

impl SystemKind {
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Tdnn => "TDNN",
            SystemKind::Hornn => "HORNN",
            SystemKind::Combined(v) => v.name(),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "TDNN" => Some(SystemKind::Tdnn),
            "HORNN" => Some(SystemKind::Hornn),
            other => CombinerVariant::parse(other).map(SystemKind::Combined),
        }
    }

    pub fn uses_tdnn(&self) -> bool {
        !matches!(self, SystemKind::Hornn)
    }

    pub fn uses_hornn(&self) -> bool {
        !matches!(self, SystemKind::Tdnn)
    }
}

/// Complete configuration of one embedding system.
#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub tdnn: TdnnConfig,
    pub hornn: HornnConfig,
    pub pool_tdnn: PoolingConfig,
    pub pool_hornn: PoolingConfig,
    pub combiner: CombinerConfig,
    /// Final linear projection size (the clustering embedding dimension).
    pub embed_dim: usize,
}

impl SystemConfig {
    pub fn full(kind: SystemKind) -> Self {
        let variant = match kind {
            SystemKind::Combined(v) => v,
            _ => CombinerVariant::StackedSigmoid,
        };
        Self {
            kind,
            tdnn: TdnnConfig::full(),
            hornn: HornnConfig::full(),
            pool_tdnn: PoolingConfig::full(1),
            pool_hornn: PoolingConfig::full(10),
            combiner: CombinerConfig::new(variant),
            embed_dim: 128,
        }
    }

    /// Quarter-width profile for desk-scale training and tests.
    pub fn tiny(kind: SystemKind) -> Self {
        let variant = match kind {
            SystemKind::Combined(v) => v,
            _ => CombinerVariant::StackedSigmoid,
        };
        Self {
            kind,
            tdnn: TdnnConfig::tiny(),
            hornn: HornnConfig::tiny(),
            pool_tdnn: PoolingConfig::tiny(1),
            pool_hornn: PoolingConfig::tiny(10),
            combiner: CombinerConfig::tiny(variant),
            embed_dim: 32,
        }
    }

    fn combiner_inputs(&self) -> CombinerInputs {
        CombinerInputs::new(vec![
            (self.pool_tdnn.heads, self.tdnn.out_dim()),
            (self.pool_hornn.heads, self.hornn.proj),
        ])
    }

    /// Dimension of the vector entering the final projection.
    fn pre_projection_dim(&self) -> usize {
        match self.kind {
            SystemKind::Tdnn => self.pool_tdnn.heads * self.tdnn.out_dim(),
            SystemKind::Hornn => self.pool_hornn.heads * self.hornn.proj,
            SystemKind::Combined(_) => {
                combination::output_dim(&self.combiner, &self.combiner_inputs())
            }
        }
    }

    /// Registers every parameter the system needs under its conventional
    /// names (`tdnn.*`, `hornn.*`, `pool.<system>.*`, `comb.*`, `proj.*`).
    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        if self.kind.uses_tdnn() {
            nets::register_tdnn(store, "tdnn", &self.tdnn, rng);
            pooling::register_pooling(store, "pool.tdnn", self.tdnn.out_dim(), &self.pool_tdnn, rng);
        }
        if self.kind.uses_hornn() {
            nets::register_hornn(store, "hornn", &self.hornn, rng);
            pooling::register_pooling(store, "pool.hornn", self.hornn.proj, &self.pool_hornn, rng);
        }
        if let SystemKind::Combined(_) = self.kind {
            combination::register_combiner(store, &self.combiner, &self.combiner_inputs(), rng)?;
        }
        store.insert_xavier("proj.w", self.embed_dim, self.pre_projection_dim(), rng);
        store.insert_zeros("proj.b", &[self.embed_dim]);
        Ok(())
    }
}

/// One window's embedding plus every annotation matrix produced on the
/// way (for the attention penalties).
pub struct SystemOutput<'t, T: Scalar> {
    pub embedding: Var<'t, T>,
    pub attention: Vec<combination::AttentionUse<'t, T>>,
}

/// Runs the system over one feature window ([T×40] frames).
pub fn system_forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    cfg: &SystemConfig,
    window: Var<'t, T>,
) -> Result<SystemOutput<'t, T>> {
    let mut attention = Vec::new();

    let tdnn_pooled = if cfg.kind.uses_tdnn() {
        let h = nets::tdnn_forward(tape, store, "tdnn", window, &cfg.tdnn)?;
        let pooled = pooling::self_attentive_pool(tape, store, "pool.tdnn", h, &cfg.pool_tdnn)?;
        attention.push(combination::AttentionUse {
            annotation: pooled.annotation,
            lambda: cfg.pool_tdnn.lambda.clone(),
            mu: cfg.pool_tdnn.mu,
        });
        Some(pooled)
    } else {
        None
    };
    let hornn_pooled = if cfg.kind.uses_hornn() {
        let h = nets::hornn_forward(tape, store, "hornn", window, &cfg.hornn)?;
        let pooled = pooling::self_attentive_pool(tape, store, "pool.hornn", h, &cfg.pool_hornn)?;
        attention.push(combination::AttentionUse {
            annotation: pooled.annotation,
            lambda: cfg.pool_hornn.lambda.clone(),
            mu: cfg.pool_hornn.mu,
        });
        Some(pooled)
    } else {
        None
    };

    let pre_projection = match cfg.kind {
        SystemKind::Tdnn => tdnn_pooled.as_ref().expect("tdnn pooled").embedding,
        SystemKind::Hornn => hornn_pooled.as_ref().expect("hornn pooled").embedding,
        SystemKind::Combined(_) => {
            let inputs = [
                CombinerInput::from(tdnn_pooled.as_ref().expect("tdnn pooled")),
                CombinerInput::from(hornn_pooled.as_ref().expect("hornn pooled")),
            ];
            let combined = combination::combine(tape, store, &cfg.combiner, &inputs)?;
            attention.extend(combined.attention);
            combined.cvector
        }
    };

    let w = tape.param(store, "proj.w")?;
    let b = tape.param(store, "proj.b")?;
    let embedding = w.matmul(pre_projection.as_col()?)?.vectorize()?.add(b)?;
    Ok(SystemOutput { embedding, attention })
}

/// Cosine-softmax classification loss (angular softmax with m = 1):
/// class weight rows are renormalized to unit length on every forward
/// pass and there is no bias, so logit_j = ‖x‖·cos θ_j.
pub fn angular_softmax_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    embedding: Var<'t, T>,
    label: usize,
) -> Result<Var<'t, T>> {
    let w = tape.param(store, "clf.w")?.unit_rows()?;
    let logits = w.matmul(embedding.as_col()?)?.vectorize()?;
    Ok(logits.cross_entropy(label)?)
}

/// Raw cosine logits for evaluation (argmax gives the predicted class).
pub fn angular_softmax_logits<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    embedding: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let w = tape.param(store, "clf.w")?.unit_rows()?;
    Ok(w.matmul(embedding.as_col()?)?.vectorize()?)
}
