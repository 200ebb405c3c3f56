use crate::error::{Error, Result};

/// Finite MDP `(S, A, P, rho0, R, gamma)` with dense tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P[s][a][s']`, flattened.
    pub transition: Vec<f64>,
    /// `R[s][a]`, flattened.
    pub reward: Vec<f64>,
    pub initial: Vec<f64>,
    pub gamma: f64,
}

const ROW_TOL: f64 = 1e-12;

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::EmptyInput("tabular mdp"));
        }
        crate::error::check_dim("transition table", ns * na * ns, self.transition.len())?;
        crate::error::check_dim("reward table", ns * na, self.reward.len())?;
        crate::error::check_dim("initial distribution", ns, self.initial.len())?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.p_row(s, a);
                if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                    return Err(Error::invalid(format!("P[{s}][{a}] is not a distribution")));
                }
            }
        }
        if self.initial.iter().any(|&p| !(p >= 0.0))
            || (self.initial.iter().sum::<f64>() - 1.0).abs() > ROW_TOL
        {
            return Err(Error::invalid("initial distribution does not sum to 1"));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward table"));
        }
        Ok(())
    }

    pub fn p_row(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.n_states;
        let start = (s * self.n_actions + a) * ns;
        &self.transition[start..start + ns]
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.p_row(s, a)[next]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}
