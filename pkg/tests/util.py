"""Shared generators and independent oracles for the test suite.

The samplers and density evaluations here deliberately avoid the package's
own mixture code paths so they can serve as independent checks.
"""

import numpy as np

from mr2ct import MixtureModel


def random_spd(dim, rng, scale=1.0):
    a = rng.normal(size=(dim, dim))
    return scale * (a @ a.T + dim * np.eye(dim))


def random_mixture(n_components, dim, rng, mean_spread=4.0, cov_scale=1.0):
    weights = rng.dirichlet(np.full(n_components, 5.0))
    means = rng.normal(scale=mean_spread, size=(n_components, dim))
    covs = np.stack([random_spd(dim, rng, cov_scale) for _ in range(n_components)])
    return MixtureModel(weights=weights, means=means, covariances=covs)


def sample_joint(weights, means, covs, n, rng):
    """Independent mixture sampler used as a generation oracle."""
    weights = np.asarray(weights, dtype=float)
    comp = rng.choice(len(weights), size=n, p=weights / weights.sum())
    chol = np.linalg.cholesky(np.asarray(covs, dtype=float))
    z = rng.standard_normal((n, np.asarray(means).shape[1]))
    return np.asarray(means)[comp] + np.einsum("nab,nb->na", chol[comp], z)


def naive_mixture_density(weights, means, covs, v):
    """Direct per-component normal pdf summation, no log-sum-exp."""
    v = np.asarray(v, dtype=float)
    dim = v.shape[-1]
    total = 0.0
    for w, mu, cov in zip(weights, means, covs):
        diff = v - mu
        inv = np.linalg.inv(cov)
        det = np.linalg.det(cov)
        quad = diff @ inv @ diff
        total += w * np.exp(-0.5 * quad) / np.sqrt((2 * np.pi) ** dim * det)
    return total


def mc_conditional_mean(weights, means, covs, x_probe, n_draws, rng, half_width):
    """Rejection estimate of E[y | x ~= x_probe] from joint draws.

    Only for 2-dim joints (one target, one feature).  Returns
    (estimate, standard_error, n_accepted).
    """
    draws = sample_joint(weights, means, covs, n_draws, rng)
    accepted = draws[np.abs(draws[:, 1] - x_probe) <= half_width, 0]
    if accepted.size < 2:
        return np.nan, np.inf, int(accepted.size)
    return (
        float(accepted.mean()),
        float(accepted.std(ddof=1) / np.sqrt(accepted.size)),
        int(accepted.size),
    )


def two_component_truth():
    """Well-separated 2-dim, 2-component ground truth for recovery tests."""
    weights = np.array([0.35, 0.65])
    means = np.array([[-4.0, -3.0], [4.0, 3.5]])
    covs = np.stack([
        np.array([[1.0, 0.45], [0.45, 0.8]]),
        np.array([[1.3, -0.5], [-0.5, 1.1]]),
    ])
    return weights, means, covs


def match_components(est_means, true_means):
    """Greedy assignment of estimated components to truth by mean distance."""
    est = list(range(est_means.shape[0]))
    order = []
    for t in range(true_means.shape[0]):
        dists = [np.linalg.norm(est_means[e] - true_means[t]) for e in est]
        pick = est.pop(int(np.argmin(dists)))
        order.append(pick)
    return order
