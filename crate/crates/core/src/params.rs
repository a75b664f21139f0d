//! Named-parameter traversal.
//!
//! Everything that walks the full parameter set — the optimizer, momentum
//! updates, checkpointing — goes through [`Parameterized`] so all of them see
//! the same parameters in the same deterministic order.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub trait Parameterized<T: Real> {
    /// Visits every parameter tensor in a fixed, deterministic order.
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }
}

/// Applies `f(name, online, momentum)` pairwise over two parameter sets that
/// must have identical layout; any drift is a state error.
pub fn zip_params_mut<T: Real, M: Parameterized<T>>(
    online: &M,
    other: &mut M,
    f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
) -> Result<()> {
    let mut snapshot: Vec<(String, Tensor<T>)> = Vec::new();
    online.visit(&mut |name, t| snapshot.push((name.to_string(), t.clone())));
    let mut i = 0;
    let mut err: Option<Error> = None;
    other.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match snapshot.get(i) {
            Some((on, ot)) if on == name && ot.shape() == t.shape() => f(name, ot, t),
            Some((on, ot)) => {
                err = Some(Error::State(format!(
                    "parameter drift at #{i}: {on:?} {:?} vs {name:?} {:?}",
                    ot.shape(),
                    t.shape()
                )))
            }
            None => err = Some(Error::State(format!("extra parameter {name:?}"))),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != snapshot.len() {
        return Err(Error::State(format!(
            "parameter sets differ in length: {} vs {i}",
            snapshot.len()
        )));
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_support::Toy;
    use super::*;

    #[test]
    fn zip_applies_in_order_and_detects_drift() {
        let a = Toy { w: Tensor::<f64>::full(&[2, 2], 1.0), b: Tensor::full(&[2], 2.0) };
        let mut b = a.clone();
        let mut seen = Vec::new();
        zip_params_mut(&a, &mut b, &mut |name, on, m| {
            seen.push(name.to_string());
            m.data_mut()[0] = on.data()[0] + 1.0;
        })
        .unwrap();
        assert_eq!(seen, vec!["w", "b"]);
        assert_eq!(b.w.data()[0], 2.0);

        let mut drifted = Toy { w: Tensor::full(&[3, 2], 1.0), b: Tensor::full(&[2], 2.0) };
        assert!(matches!(
            zip_params_mut(&a, &mut drifted, &mut |_, _, _| {}),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn counting_helpers() {
        let a = Toy { w: Tensor::<f64>::full(&[2, 3], 0.0), b: Tensor::full(&[3], 0.0) };
        assert_eq!(a.num_params(), 9);
        assert_eq!(a.num_tensors(), 2);
        assert_eq!(a.param_names(), vec!["w", "b"]);
    }
}
