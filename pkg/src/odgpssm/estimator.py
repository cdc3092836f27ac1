"""scikit-learn style front end: fit on one sequence, forecast its continuation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ContractError
from .experiments import rmse, uniform_inducing_inputs
from .model import GPSSMParams, Trajectory, forecast, sample_paths
from .training import TrainConfig, train


class OutputDependentGPSSM(BaseEstimator):
    """GP state-space model with coupled transition outputs.

    Parameters:
        state_dim: latent state dimension d_x (>= number of observed channels).
        num_latent: number of independent latent GPs Q mixed into the state.
        num_inducing: inducing points shared by the latent GPs.
        independent: fix the mixing matrix at the identity (one GP per state).
        x0: known initial state; when None it is inferred from the first
            ``window`` observations.

    Attributes:
        params_: fitted :class:`GPSSMParams`.
        training_log_: per-epoch ELBO terms.
        n_features_in_: number of observed channels.
    """

    def __init__(self, state_dim=4, num_latent=4, num_inducing=20, epochs=3000,
                 learning_rate=0.01, n_samples=8, window=10, independent=False, x0=None,
                 random_state=0):
        self.state_dim = state_dim
        self.num_latent = num_latent
        self.num_inducing = num_inducing
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.n_samples = n_samples
        self.window = window
        self.independent = independent
        self.x0 = x0
        self.random_state = random_state

    def _trajectory(self, Y, U):
        Y = check_array(Y, ensure_min_samples=1)
        if U is not None:
            U = check_array(U)
            if U.shape[0] != Y.shape[0]:
                raise ContractError("Y and U need the same number of rows")
        return Trajectory(Y, U)

    def fit(self, Y, U=None):
        """Fit to observations ``Y`` (T, d_y) with optional controls ``U`` (T, d_c)."""
        traj = self._trajectory(Y, U)
        if self.state_dim < traj.obs_dim:
            raise ContractError(f"state_dim {self.state_dim} < {traj.obs_dim} observed channels")
        if self.x0 is None and traj.length < self.window:
            raise ContractError(f"need at least window={self.window} observations")
        rng = np.random.default_rng(self.random_state)
        d_in = self.state_dim + traj.control_dim
        z = uniform_inducing_inputs(traj.observations, self.num_inducing, d_in, rng)
        params = GPSSMParams.initial(
            self.state_dim, traj.obs_dim, self.state_dim if self.independent else self.num_latent,
            self.num_inducing, control_dim=traj.control_dim, rng=rng, z=z, x0=self.x0,
            window=self.window, independent=self.independent)
        config = TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                             n_samples=self.n_samples, frozen=("A",) if self.independent else ())
        self.params_, self.training_log_ = train(config, traj, self.random_state, params)
        self.n_features_in_ = traj.obs_dim
        self.control_dim_ = traj.control_dim
        self._train = traj
        return self

    def predict(self, horizon, U=None):
        """Forecast the next ``horizon`` observations after the training sequence."""
        check_is_fitted(self, "params_")
        if U is not None:
            U = check_array(U)
        return forecast(self.params_, self._train, int(horizon), controls=U)

    def score(self, Y, U=None):
        """Negative forecast RMSE on the observations that follow the training sequence."""
        Y = check_array(Y)
        if Y.shape[1] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} channels, got {Y.shape[1]}")
        return -rmse(self.predict(Y.shape[0], U), Y)

    def infer_states(self, n_paths=64):
        """Mean of ``n_paths`` sampled state paths over the training sequence, (T + 1, d_x)."""
        check_is_fitted(self, "params_")
        rng = np.random.default_rng(self.random_state)
        eps = rng.standard_normal((n_paths, self._train.length + 1, self.state_dim))
        return sample_paths(self.params_, self._train, eps).mean(axis=0)
