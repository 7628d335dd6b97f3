use super::{Scalar, Tape, Tensor, Var};

/// A named-by-owner trainable (or frozen) tensor plus its binding on the
/// current tape.
#[derive(Clone, Debug)]
pub struct Param<S: Scalar = f32> {
    pub value: Tensor<S>,
    trainable: bool,
    var: Option<Var>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        Param {
            value,
            trainable: true,
            var: None,
        }
    }

    pub fn frozen(value: Tensor<S>) -> Self {
        Param {
            value,
            trainable: false,
            var: None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Put the current value on `tape` and remember the handle.
    pub fn bind(&mut self, tape: &mut Tape<S>) -> Var {
        let leaf = self.value.clone().with_requires_grad(self.trainable);
        let v = tape.leaf(leaf);
        self.var = Some(v);
        v
    }

    pub fn var(&self) -> Option<Var> {
        self.var
    }

    /// Gradient collected for the last binding, if any.
    pub fn grad<'t>(&self, tape: &'t Tape<S>) -> Option<&'t [S]> {
        self.var.and_then(|v| tape.grad(v))
    }

    pub fn cast<T: Scalar>(&self) -> Param<T> {
        Param {
            value: self.value.cast(),
            trainable: self.trainable,
            var: None,
        }
    }
}
