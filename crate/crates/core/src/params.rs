use crate::tensor::Tensor;

/// Anything holding named trainable tensors.
pub trait Parameterized {
    /// Calls `f` with the dotted name and a mutable slot for every parameter,
    /// in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_params(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Drops accumulated gradients by replacing every parameter with a fresh leaf.
    fn reset_grads(&mut self) {
        self.visit_params(&mut |_, t| *t = t.requires_grad());
    }
}

/// Forwards a child's parameters under `prefix.`.
pub(crate) fn visit_child(
    prefix: &str,
    child: &mut dyn Parameterized,
    f: &mut dyn FnMut(&str, &mut Tensor),
) {
    child.visit_params(&mut |name, t| f(&format!("{prefix}.{name}"), t));
}
