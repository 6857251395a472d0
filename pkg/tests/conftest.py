import numpy as np

from red_density.model import ModelConfig, build_model, init_model
from red_density.numerics import make_rng

CORR = 0.9
SIGMA = np.array([[1.0, CORR], [CORR, 1.0]])


def random_model(d=5, hidden=8, K=3, scale=0.3, seed=0, num_fcs=2, activation="sigmoid", alpha=0.1):
    """Model with all parameters perturbed well away from the init."""
    rng = make_rng(seed)
    cfg = ModelConfig(
        d=d, num_units=hidden, transform_hidden=hidden, num_components=K,
        num_fcs=num_fcs, candidate_activation=activation, alpha=alpha,
    )
    m = init_model(cfg, rng)
    for v in m.named_parameters().values():
        v += scale * rng.standard_normal(v.shape)
    m.project()
    return m


def identity_model(d, K=1, alpha=1.0):
    """Stack that is exactly the identity (alpha=1 removes the leaky kink) and
    a zero-weight head, i.e. a standard normal density."""
    cfg = ModelConfig(d=d, num_units=4, transform_hidden=3, num_components=K, alpha=alpha)
    return build_model(cfg)


def gaussian_data(n, seed):
    return make_rng(seed).multivariate_normal(np.zeros(2), SIGMA, size=n)

