"""
Shaping over action counts leaves optimal policies alone
========================================================

The potential depends on the counts of past actions, so it is a function of
an augmented state.  On small random MDPs we compare the optimal action sets
with and without the shaping term, then show that a bonus which is not a
potential difference does change them.
"""

from collections import Counter

from langshape import invariance

rows, dumps = invariance.verification_table(n_instances=20, n_potentials=5, seed=0)
print(f"{sum(r['passed'] for r in rows)}/{len(rows)} (MDP, potential) pairs keep every optimal action set")
print("augmented states checked per instance, largest:", max(r["checked_states"] for r in rows))
print("horizons covered:", dict(sorted(Counter(r["horizon"] for r in rows).items())))

mdp, bonus, H = invariance.action_bonus_counterexample()
report = invariance.verify_policy_invariance(mdp, None, H, shaping=bonus)
print("\nplain action bonus, invariance holds:", report.passed)
print(report.counterexample)
