"""Adaptation-law energy budget on a synthetic realizable target.

The truth is h = W*' phi for a fixed in-bounds W*, so the projection update
must dissipate: the running prediction-error energy stays under the analytic
budget no matter how long the run is.  Prints the budget utilization every
couple thousand steps.
"""

import numpy as np

from lbmpc import oracle as om


class Model:
    def __init__(self, rng, d=4, m=1):
        self.A = 0.5 * np.eye(d) + 0.05 * rng.normal(size=(d, d))
        self.B = rng.normal(size=(d, m))


def main():
    rng = np.random.default_rng(0)
    gamma = 0.3
    arch = om.NetworkArch(n_in=5, hidden=(16, 8), n_out=4)
    st = om.new_oracle(arch, W_bar=np.full(4, 0.25), gamma=gamma, seed=0)
    model = Model(rng)
    W_star = rng.normal(size=st.K.shape)
    W_star /= np.maximum(np.linalg.norm(W_star, axis=0) / st.W_bar, 1.0)

    sigma2 = st.arch.sigma ** 2
    budget = (sigma2 / (1 - gamma)) * (4 / gamma) * np.sum(st.W_bar ** 2)
    print("energy budget: %.4f" % budget)

    energy = 0.0
    for t in range(1, 20001):
        x = rng.uniform(-2, 2, 4)
        u = rng.uniform(-2, 2, 1)
        phi = om.features(st, x, u)
        x_next = model.A @ x + model.B @ u + phi @ W_star
        x_tilde = phi @ (st.K - W_star)
        energy += float(x_tilde @ x_tilde)
        st = om.adapt(st, x, u, x_next, model, phi=phi)
        if t % 2000 == 0:
            print("step %6d  V_a %8.4f  energy %8.4f  (%.1f%% of budget)"
                  % (t, om.lyapunov_Va(st, W_star), energy,
                     100 * energy / budget))


if __name__ == "__main__":
    main()
