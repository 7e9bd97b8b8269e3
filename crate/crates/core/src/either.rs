//! Short-circuiting step chains.
//!
//! A [`Chain`] runs its steps in order, feeding each success value into the
//! next step. The first failure stops the chain and is reported together
//! with the index and name of the step that produced it; later steps are
//! never invoked.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome<T, E> {
    Success(T),
    Failure { error: E, step: usize, name: String },
}

impl<T, E> Outcome<T, E> {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success(_))
    }

    pub fn into_result(self) -> Result<T, (usize, E)> {
        match self {
            Outcome::Success(v) => Ok(v),
            Outcome::Failure { error, step, .. } => Err((step, error)),
        }
    }
}

type Step<'a, T, E> = Box<dyn FnOnce(T) -> Result<T, E> + 'a>;

pub struct Chain<'a, T, E> {
    steps: Vec<(String, Step<'a, T, E>)>,
}

impl<T, E> Default for Chain<'_, T, E> {
    fn default() -> Self {
        Chain { steps: Vec::new() }
    }
}

impl<'a, T, E> Chain<'a, T, E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn then(
        mut self,
        name: impl Into<String>,
        step: impl FnOnce(T) -> Result<T, E> + 'a,
    ) -> Self {
        self.steps.push((name.into(), Box::new(step)));
        self
    }

    /// Appends all steps of `other` after this chain's steps.
    pub fn append(mut self, other: Chain<'a, T, E>) -> Self {
        self.steps.extend(other.steps);
        self
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn run(self, initial: T) -> Outcome<T, E> {
        let mut value = initial;
        for (step, (name, f)) in self.steps.into_iter().enumerate() {
            match f(value) {
                Ok(v) => value = v,
                Err(error) => return Outcome::Failure { error, step, name },
            }
        }
        Outcome::Success(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::rc::Rc;
    use core::cell::Cell;
    use proptest::prelude::*;

    #[test]
    fn all_steps_succeed() {
        let out = Chain::<i32, &str>::new()
            .then("set_params", |v| Ok(v + 1))
            .then("bind", |v| Ok(v * 2))
            .then("run", |v| Ok(v + 3))
            .then("construct", |v| Ok(v - 1))
            .run(0);
        assert_eq!(out, Outcome::Success(4));
    }

    #[test]
    fn first_failure_short_circuits() {
        let probe = Rc::new(Cell::new(0));
        let p = probe.clone();
        let out = Chain::<i32, &str>::new()
            .then("set_params", |_| Err("bad parameter"))
            .then("bind", move |v| {
                p.set(p.get() + 1);
                Ok(v)
            })
            .run(0);
        assert_eq!(
            out,
            Outcome::Failure {
                error: "bad parameter",
                step: 0,
                name: "set_params".into()
            }
        );
        assert_eq!(probe.get(), 0);
    }

    #[test]
    fn empty_chain_returns_initial() {
        assert_eq!(Chain::<u8, ()>::new().run(9), Outcome::Success(9));
    }

    fn step(fail_at: Option<i64>, add: i64) -> impl FnOnce(i64) -> Result<i64, i64> {
        move |v| match fail_at {
            Some(t) if v >= t => Err(v),
            _ => Ok(v + add),
        }
    }

    proptest! {
        #[test]
        fn chaining_is_associative(
            init in -5i64..5,
            specs in prop::collection::vec((prop::option::of(-5i64..10), -3i64..4), 3),
        ) {
            let build = |i: usize| step(specs[i].0, specs[i].1);
            let left = Chain::new().then("a", build(0)).then("b", build(1))
                .append(Chain::new().then("c", build(2)))
                .run(init);
            let right = Chain::new().then("a", build(0))
                .append(Chain::new().then("b", build(1)).then("c", build(2)))
                .run(init);
            prop_assert_eq!(left, right);
        }
    }
}
