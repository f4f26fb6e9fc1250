"""scikit-learn style wrappers around EFN and NF training.

``fit`` trains, ``transform`` maps natural parameters to flow parameters,
``sample`` draws from the fitted approximation and ``score`` returns the mean
Monte-Carlo ELBO.  Constructor arguments are plain hyperparameters, so
``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from efn.evaluation import elbo
from efn.families import Family, family_from_spec
from efn.flows import DensityNetwork, default_flow_kinds
from efn.training import TrainConfig, _seed_rng, init_efn, init_nf, train


def check_etas(family, X):
    """Validate a (n, eta_dim) batch of natural parameters."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != family.eta_dim:
        raise ValueError(f"X has {X.shape[1]} columns, {family.name} natural parameters have {family.eta_dim}")
    return X


def _family(family):
    if isinstance(family, Family):
        return family
    if isinstance(family, dict):
        return family_from_spec(family)
    raise TypeError("family must be a Family instance or a family spec dict")


class _FlowEstimator(BaseEstimator):
    def _net(self, family):
        kinds = default_flow_kinds(family.latent_dim, kind=self.flow_kind, n_layers=self.n_layers)
        return DensityNetwork.build(kinds, family.support_transform())

    def _config(self, mode, k):
        return TrainConfig(
            mode=mode, K=k, M=self.M, lr=self.lr, max_iters=self.max_iters,
            min_iters=self.min_iters, eval_every=self.eval_every,
            held_out_etas=self.held_out_etas, eval_M=self.eval_M, seed=self.random_state,
        )

    def sample(self, eta, n, random_state=None):
        """n draws and their log densities under the fitted q(z; eta)."""
        check_is_fitted(self, "model_")
        eta = check_etas(self.family_, np.atleast_2d(eta))[0]
        rng = np.random.default_rng(random_state)
        return self.model_.sample(eta, n, rng)

    def _elbo_rows(self, X, n):
        rng = _seed_rng(self.random_state, 9)
        return np.array([elbo(self.model_, self.family_, eta, n=n, rng=rng)[0] for eta in X])


class ExponentialFamilyNetwork(_FlowEstimator):
    """Learn q(z; eta) for every member of an exponential family at once.

    Args:
        family: a :class:`~efn.families.Family` or its spec dict.
        flow_kind: "planar" or "radial" layers ahead of the final affine layer.
        n_layers: number of non-affine layers (default: the family-size rule).
        K: natural parameters per minibatch.
        M: base draws per natural parameter.
    """

    def __init__(self, family=None, flow_kind="planar", n_layers=None, depth=None, K=100, M=1000,
                 lr=1e-3, max_iters=1000, min_iters=0, eval_every=100, held_out_etas=20,
                 eval_M=500, output_gain=1.0, random_state=0):
        self.family = family
        self.flow_kind = flow_kind
        self.n_layers = n_layers
        self.depth = depth
        self.K = K
        self.M = M
        self.lr = lr
        self.max_iters = max_iters
        self.min_iters = min_iters
        self.eval_every = eval_every
        self.held_out_etas = held_out_etas
        self.eval_M = eval_M
        self.output_gain = output_gain
        self.random_state = random_state

    def fit(self, X=None, y=None):
        """Train over p(eta); X, if given, fixes the held-out etas that are logged."""
        family = _family(self.family)
        eval_etas = None if X is None else check_etas(family, X)
        cfg = self._config("efn", self.K)
        model = init_efn(cfg, family, self._net(family), depth=self.depth, output_gain=self.output_gain)
        result = train(cfg, model, eval_etas=eval_etas)
        self.family_ = family
        self.model_ = result.model
        self.log_ = result.log
        self.n_iter_ = result.checkpoint.iteration
        self.checkpoint_ = result.checkpoint
        return self

    def transform(self, X):
        """Flow parameters theta = f_phi(eta), one row per eta."""
        check_is_fitted(self, "model_")
        X = check_etas(self.family_, X)
        return self.model_.theta(X).value

    def score(self, X, y=None, n=1000):
        """Mean Monte-Carlo ELBO over the rows of X."""
        check_is_fitted(self, "model_")
        return float(self._elbo_rows(check_etas(self.family_, X), n).mean())


class NormalizingFlow(_FlowEstimator):
    """A density network fitted to one natural parameter (the NF baseline)."""

    def __init__(self, family=None, flow_kind="planar", n_layers=None, M=1000, lr=1e-3,
                 max_iters=1000, min_iters=0, eval_every=100, eval_M=500, random_state=0):
        self.family = family
        self.flow_kind = flow_kind
        self.n_layers = n_layers
        self.M = M
        self.lr = lr
        self.max_iters = max_iters
        self.min_iters = min_iters
        self.eval_every = eval_every
        self.eval_M = eval_M
        self.random_state = random_state

    held_out_etas = 1

    def fit(self, X, y=None):
        """X holds exactly one natural parameter (shape (1, eta_dim) or (eta_dim,))."""
        family = _family(self.family)
        X = check_etas(family, np.atleast_2d(X))
        if X.shape[0] != 1:
            raise ValueError("NormalizingFlow fits a single natural parameter; X must have one row")
        cfg = self._config("nf", 1)
        result = train(cfg, init_nf(cfg, family, self._net(family), X[0]))
        self.family_ = family
        self.model_ = result.model
        self.eta_ = X[0]
        self.log_ = result.log
        self.n_iter_ = result.checkpoint.iteration
        self.checkpoint_ = result.checkpoint
        return self

    def transform(self, X=None):
        check_is_fitted(self, "model_")
        return self.model_.theta_vec.data[None].copy()

    def score(self, X=None, y=None, n=1000):
        check_is_fitted(self, "model_")
        return float(self._elbo_rows(self.eta_[None], n).mean())
