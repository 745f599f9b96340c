"""Thresholding at an orthonormal (identity) dictionary: how much the bias
model matters.

With A = I everything is available in closed form, so this is the cleanest
place to watch the two flavors of the selective CRB against the measured
MSE of the MSL estimator as the threshold c varies:

  * zero bias   — the unbiased-form bound.  Valid for selective unbiased
    estimators, but the MSL estimator is not one: hard thresholding
    shrinks, so in easy regimes (strong signal, small noise) the measured
    MSE can undercut this bound.
  * identity bias — the closed-form selective bias of the MSL estimator at
    A = I plugged into the biased bound.  This one tracks the estimator
    from below at every threshold, usually within a few percent.
"""

import numpy as np

from selcrb import ExperimentConfig, OstRule, SparseModel, SupportSet, sweep

GRID = (0.2, 0.5, 0.8, 1.1, 1.4, 1.7, 2.0)


def run(theta_value, sigma, bias_source, trials=8000, seed=808):
    m = 8
    model = SparseModel(A=np.eye(m), sigma=sigma,
                        true_support=SupportSet(tuple(range(m)), m),
                        theta_true=np.full(m, theta_value))
    config = ExperimentConfig(
        family="sparse-ost", model=model, rule=OstRule(GRID[0]),
        trials=trials, seed=seed, sweep_axis="threshold", grid=GRID,
        s_max=m, bias_source=bias_source)
    return sweep(config)


def show(tag, rows_zero, rows_id):
    print(tag)
    print("{:>6} {:>12} {:>14} {:>14}".format(
        "c", "mse(msl)", "scrb(zero)", "scrb(identity)"))
    for rz, ri in zip(rows_zero, rows_id):
        mark = " *" if rz.scrb > rz.mse_msl + 3 * rz.stderr_mse else ""
        print("{:6.2f} {:12.5g} {:14.5g}{} {:14.5g}".format(
            rz.value, rz.mse_msl, rz.scrb, mark or "  ", ri.scrb))
    print()


def main():
    print("A = I, M = 8, all coordinates active; '*' marks thresholds where "
          "the zero-bias bound exceeds the measured MSE\n")

    show("scenario 1: theta = 1.0, sigma = 0.4 (strong signal)",
         run(1.0, 0.4, "zero"), run(1.0, 0.4, "identity"))
    show("scenario 2: theta = 0.5, sigma = 1.2 (weak signal)",
         run(0.5, 1.2, "zero"), run(0.5, 1.2, "identity"))

    print("the identity-bias bound stays at or below the measured MSE in "
          "both scenarios; the zero-bias bound is only a bound on unbiased "
          "constructions, which the shrinking MSL estimator is not.")


if __name__ == "__main__":
    main()
