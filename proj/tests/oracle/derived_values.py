"""Independent 64-bit oracle for the frozen constants used by the unit tests.

Run with `python3 tests/oracle/derived_values.py`; the printed values are
copied verbatim into the C++ tests.
"""
import math

import numpy as np


def schedule(betas):
    betas = np.asarray(betas, dtype=np.float64)
    alpha = 1.0 - betas
    abar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    beta_tilde = (1.0 - abar_prev) / (1.0 - abar) * betas
    coef_x0 = np.sqrt(abar_prev) * betas / (1.0 - abar)
    coef_xt = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    return abar, beta_tilde, coef_x0, coef_xt


def main():
    abar, bt, c0, ct = schedule([0.1, 0.2])
    print("two-step alpha_bar", repr(float(abar[0])), repr(float(abar[1])))
    print("two-step beta_tilde_2", repr(float(bt[1])))
    q = math.sqrt(abar[1]) * 1.0 + math.sqrt(1.0 - abar[1]) * 1.0
    print("q_sample t=2 x0=eps=1", repr(q))
    mean = c0[1] + ct[1]
    print("posterior_mean t=2 x0=xt=1", repr(float(mean)))
    print("p_sample t=2 f=xt=z=1", repr(float(mean + math.sqrt(bt[1]))))

    print("ndcg rank 2", repr(1.0 / math.log2(3.0)))

    # Bayes HR@1 of the noisy permutation law: the law's successor wins with
    # probability (1 - noise) + noise / n.
    for noise in (0.0, 0.1, 0.5):
        print(f"bayes hr@1 noise={noise}", repr((1 - noise) + noise / 100))

    # First AdamW step from zero state: lr * m_hat / (sqrt(v_hat) + eps).
    lr, b1, b2, eps, g = 1e-3, 0.9, 0.999, 1e-8, 0.5
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    step = lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    print("adamw first step g=0.5", repr(step))

    # Variational weight of step 2 in the two-step schedule.
    print("variational weight t=2", repr(float(abar[0] / (2 * bt[1]))))

    # Linear schedule default endpoints, T = 100.
    abar100, bt100, _, _ = schedule(np.linspace(1e-4, 0.02, 100))
    print("T=100 alpha_bar_100", repr(float(abar100[-1])))
    print("T=100 beta_tilde_100", repr(float(bt100[-1])))


if __name__ == "__main__":
    main()
