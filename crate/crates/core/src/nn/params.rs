use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};

/// Which architectural component a parameter belongs to. Used by the
/// parameter census of ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    /// Plain linear layers (no sine activation).
    Linear,
    /// Weights and biases of sine-activated INR layers.
    Sine,
    Attention,
    Fno,
    TimeEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered collection of named parameters. Layers refer to entries by
/// [`ParamId`]; [`ParamSet::bind`] puts them all on a tape in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_of(&self, kind: ParamKind) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Register every parameter as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound(self.params.iter().map(|p| tape.var(p.value.clone())).collect())
    }

    /// Register every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound(
            self.params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        )
    }

    /// Flatten all parameter values in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

/// Parameters of a [`ParamSet`] living on one tape.
#[derive(Clone, Debug)]
pub struct Bound<'t>(pub Vec<Var<'t>>);

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.0[id.0]
    }

    /// Gradients in parameter order; untouched parameters get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.0
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// Max relative error between tape gradients and central differences over
/// parameter coordinates. With `max_coords`, an evenly strided subset of the
/// flattened parameter vector is checked.
pub fn check_param_grads<F>(
    params: &ParamSet,
    loss: F,
    h: f64,
    max_coords: Option<usize>,
) -> Result<f64, crate::tensor::TensorError>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>, crate::tensor::TensorError>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let l = loss(&tape, &bound)?;
    tape.backward(l)?;
    let grads = bound.grads();

    let eval = |ps: &ParamSet| -> Result<f64, crate::tensor::TensorError> {
        let tape = Tape::new();
        let bound = ps.bind_frozen(&tape);
        Ok(loss(&tape, &bound)?.value().item())
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.numel()).map(move |j| (i, j)))
        .collect();
    let stride = match max_coords {
        Some(m) if m > 0 && coords.len() > m => coords.len().div_ceil(m),
        _ => 1,
    };
    let mut work = params.clone();
    let mut worst = 0.0_f64;
    for &(i, j) in coords.iter().step_by(stride) {
        let orig = work.params[i].value.data()[j];
        work.params[i].value.data_mut()[j] = orig + h;
        let up = eval(&work)?;
        work.params[i].value.data_mut()[j] = orig - h;
        let down = eval(&work)?;
        work.params[i].value.data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = crate::tensor::relative_error(grads[i].data()[j], numeric);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
