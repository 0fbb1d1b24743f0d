use super::Tensor;

/// Read-only view of one named parameter bank.
pub struct Bank<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub trainable: bool,
}

pub struct BankMut<'a> {
    pub name: String,
    pub tensor: &'a mut Tensor,
    pub trainable: bool,
}

/// A collection of parameter banks visited in a fixed declaration order.
///
/// Gradients are stored in a value of the same type, so pairing a parameter
/// set with its gradient is a zip over `banks()`.
pub trait ParamSet {
    fn banks(&self) -> Vec<Bank<'_>>;
    fn banks_mut(&mut self) -> Vec<BankMut<'_>>;

    fn num_params(&self) -> usize {
        self.banks().iter().map(|b| b.tensor.len()).sum()
    }
}

pub(crate) fn bank<'a>(name: impl Into<String>, tensor: &'a Tensor) -> Bank<'a> {
    Bank {
        name: name.into(),
        tensor,
        trainable: true,
    }
}

pub(crate) fn bank_mut<'a>(name: impl Into<String>, tensor: &'a mut Tensor) -> BankMut<'a> {
    BankMut {
        name: name.into(),
        tensor,
        trainable: true,
    }
}
