"""The two regret audits at a scale that runs in well under a minute.

First the convex audit: OGD with event-driven activation on separable data
and a linear split model, measured against the best fixed parameters in
hindsight.  Then the dynamic local regret of DLR on a drifting non-convex
task, one run per horizon with window sqrt(T) and rate T^(-1/4).  In both
cases a log-log slope below one means the regret grows sublinearly.

    python demos/regret_audits.py
"""

from evfl.regret_audit import convex_audit_run, dlr_growth_series, sublinearity_slope


def convex():
    checkpoints = [300, 600, 1000, 2000, 3000]
    res = convex_audit_run(3000, checkpoints, seed=0)
    print("convex regret (OGD-Event, logistic loss)")
    print(f"{'T':>6} {'regret':>9} {'online mean':>12} {'oracle mean':>12}")
    for (T, r), on, orc in zip(res.series.checkpoints, res.online_mean_loss,
                               res.oracle_mean_loss):
        print(f"{T:>6} {r:9.3f} {on:12.4f} {orc:12.4f}")
    print(f"slope {sublinearity_slope(res.series):.3f} (linear growth would be 1)\n")


def dynamic_local():
    series = dlr_growth_series(horizons=(300, 1000, 3000, 5000), seed=0)
    print("dynamic local regret (DLR, drifting Gaussian stream)")
    for T, v in series.checkpoints:
        print(f"{T:>6} {v:9.3f}")
    print(f"slope {sublinearity_slope(series):.3f}")


if __name__ == "__main__":
    convex()
    dynamic_local()
