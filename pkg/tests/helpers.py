import numpy as np

from visservo import targetdyn as td
from visservo.rigidmotion import canonical


def random_quat(rng):
    return canonical(rng.standard_normal(4))


def random_state(rng, omega_scale=1.0, sigma_bound=0.9):
    return td.TargetState(
        q=random_quat(rng),
        omega=rng.uniform(-omega_scale, omega_scale, 3),
        rho_o=rng.uniform(-1.0, 1.0, 3) + np.array([0.0, 0.0, 3.0]),
        rho_o_dot=rng.uniform(-0.1, 0.1, 3),
        sigma=rng.uniform(-sigma_bound, sigma_bound, 2),
        varrho=rng.uniform(-0.5, 0.5, 3),
        mu=random_quat(rng),
    )


def central_jacobian(f, n, h=1e-6):
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        cols.append((f(e) - f(-e)) / (2.0 * h))
    return np.column_stack(cols)
