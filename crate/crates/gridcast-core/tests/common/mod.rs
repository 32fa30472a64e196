//! Shared oracles for the integration suites. Everything here is computed by
//! enumeration or direct summation, independent of the library's planning and
//! decoding code paths.

use gridcast_core::mdp::{Action, GridMdp, NonStationaryPolicy, RewardStack, Transition};

/// All `N`-step action sequences under the absorbing semantics, with their
/// unnormalized MaxEnt weights `exp(sum of rewards)`. Transitions, rewards
/// and the absorbing rule are applied directly from the definitions: moving
/// off the grid keeps the state, `end` enters a zero-reward absorbing state
/// that only self-loops.
pub fn enumerate_sequences(
    r: &RewardStack,
    mdp: &GridMdp,
    start: [usize; 2],
) -> Vec<(Vec<usize>, f64)> {
    fn rec(
        r: &RewardStack,
        mdp: &GridMdp,
        n: usize,
        state: Option<[usize; 2]>,
        prefix: &mut Vec<usize>,
        total: f64,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if n == mdp.horizon {
            out.push((prefix.clone(), total.exp()));
            return;
        }
        match state {
            None => {
                prefix.push(Action::End.index());
                rec(r, mdp, n + 1, None, prefix, total, out);
                prefix.pop();
            }
            Some(cell) => {
                for a in Action::ALL {
                    let reward = r.r[[n, a.index(), cell[1], cell[0]]];
                    let next = match mdp.transition(cell, a) {
                        Transition::Cell(c) => Some(c),
                        Transition::Absorbing => None,
                    };
                    prefix.push(a.index());
                    rec(r, mdp, n + 1, next, prefix, total + reward, out);
                    prefix.pop();
                }
            }
        }
    }
    let mut out = Vec::new();
    rec(r, mdp, 0, Some(start), &mut Vec::new(), 0.0, &mut out);
    out
}

/// Probability of an action sequence under a policy roll-out from `start`.
pub fn policy_sequence_prob(
    seq: &[usize],
    pol: &NonStationaryPolicy,
    mdp: &GridMdp,
    start: [usize; 2],
) -> f64 {
    let mut p = 1.0;
    let mut state = Some(start);
    for (n, &ai) in seq.iter().enumerate() {
        match state {
            None => assert_eq!(ai, Action::End.index(), "absorbing states only stay"),
            Some(cell) => {
                p *= pol.pi[[n, ai, cell[1], cell[0]]];
                state = match mdp.transition(cell, Action::from_index(ai)) {
                    Transition::Cell(c) => Some(c),
                    Transition::Absorbing => None,
                };
            }
        }
    }
    p
}
