"""scikit-learn compatible wrapper around the training core."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import core
from .autograd import Tensor, no_grad
from .core import ArchConfig, TrainConfig


class DHAGDetector(BaseEstimator):
    """Anomaly detector trained against learned, diversified perturbations.

    Labels follow the 1 = anomaly convention: :meth:`predict` returns 1
    where the anomaly probability exceeds ``threshold``.

    Parameters
    ----------
    lambda1, lambda2 : float
        Weights of the perturbation-norm and diversity losses.
    n_augment : int
        Per perturbator and batch, how many smallest perturbations are
        treated as augmented normals (K).
    n_perturbators : int
        Number of perturbator networks (L).
    batch_size : int
        Mini-batch size (m).
    lr_encoder, lr_discriminator, lr_perturbator : float
        Adam learning rates of the three parameter groups.
    epochs : int
        Fixed number of passes over the training data.
    perturb_mode : {"latent", "feature"}
        Perturb encoder outputs (default) or raw input features.
    adversarial_perturbators : bool
        Flip the sign of the cross-entropy gradient reaching the perturbators.
    latent_dim, encoder_hidden, discriminator_hidden, perturbator_channels, perturbator_arch
        Network sizes.
    threshold : float
        Decision threshold on the anomaly probability.
    random_state : int
        Seed for initialisation, shuffling and perturbation noise.
    """

    def __init__(
        self,
        lambda1=0.1,
        lambda2=0.1,
        n_augment=50,
        n_perturbators=3,
        batch_size=512,
        lr_encoder=5e-3,
        lr_discriminator=5e-3,
        lr_perturbator=1e-5,
        epochs=200,
        perturb_mode="latent",
        adversarial_perturbators=False,
        latent_dim=32,
        encoder_hidden=(64,),
        discriminator_hidden=(32,),
        perturbator_channels=(32, 32),
        perturbator_arch="cnn",
        threshold=0.5,
        random_state=0,
    ):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.n_augment = n_augment
        self.n_perturbators = n_perturbators
        self.batch_size = batch_size
        self.lr_encoder = lr_encoder
        self.lr_discriminator = lr_discriminator
        self.lr_perturbator = lr_perturbator
        self.epochs = epochs
        self.perturb_mode = perturb_mode
        self.adversarial_perturbators = adversarial_perturbators
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.discriminator_hidden = discriminator_hidden
        self.perturbator_channels = perturbator_channels
        self.perturbator_arch = perturbator_arch
        self.threshold = threshold
        self.random_state = random_state

    def _train_config(self, gamma):
        return TrainConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            n_augment=self.n_augment,
            n_perturbators=self.n_perturbators,
            batch_size=self.batch_size,
            lr_encoder=self.lr_encoder,
            lr_discriminator=self.lr_discriminator,
            lr_perturbator=self.lr_perturbator,
            epochs=self.epochs,
            seed=self.random_state,
            perturb_mode=self.perturb_mode,
            gamma=gamma,
            adversarial_perturbators=self.adversarial_perturbators,
        ).validate()

    def _arch_config(self):
        return ArchConfig(
            latent_dim=self.latent_dim,
            encoder_hidden=self.encoder_hidden,
            discriminator_hidden=self.discriminator_hidden,
            perturbator_channels=self.perturbator_channels,
            perturbator_arch=self.perturbator_arch,
        )

    def fit(self, X, y=None):
        """Train on ``X``.

        Without ``y`` every row is taken as normal. With ``y``, rows labelled
        1 are used as known anomalies by the semi-supervised loss and rows
        labelled 0 as the normal training set.
        """
        X = check_array(X, dtype=np.float64)
        x_anom = None
        if y is not None:
            y = np.asarray(y).astype(np.int64)
            if y.shape != (X.shape[0],) or not np.all((y == 0) | (y == 1)):
                raise ValueError("y must hold one 0/1 label per row")
            x_anom = X[y == 1]
            X = X[y == 0]
        gamma = 0.0
        if x_anom is not None and len(x_anom):
            gamma = len(x_anom) / (len(X) + len(x_anom))
        config = self._train_config(gamma)
        model = core.build_model(X.shape[1], config, self._arch_config())
        result = core.fit(model, X, config, x_anom=x_anom)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        """Anomaly probability per row (higher means more anomalous)."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return core.anomaly_score(self.model_, X)

    def decision_function(self, X):
        """Signed distance to the threshold; positive means anomalous."""
        return self.score_samples(X) - self.threshold

    def predict(self, X):
        return core.classify(self.score_samples(X), self.threshold)

    def transform(self, X):
        """Latent representation of each row."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        with no_grad():
            return self.model_.encode(Tensor(X)).data.copy()

    def fit_predict(self, X, y=None):
        return self.fit(X, y).predict(X)
