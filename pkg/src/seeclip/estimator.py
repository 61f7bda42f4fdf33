"""scikit-learn style open-set classifier over patch-embedding arrays."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .backend import BackendSpec, SyntheticBackend
from .evaluation import prompt_matrix, similarity_scores
from .losses import LossWeights
from .pseudo import PerturbationConfig
from .semantic import compute_domain_token
from .trainer import HyperParams, train


def _check_patches(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ValueError(f"expected (n_samples, n_patches, d) patches, got shape {X.shape}")
    return X


class SeeCLIPClassifier(ClassifierMixin, BaseEstimator):
    """Open-set classifier built from semantic-enhanced prompts.

    ``X`` holds per-image patch embeddings, shape ``(n_samples, n_patches, d)``
    (2-D input is read as one patch per image). ``predict`` returns one of the
    training labels, or ``unknown_label`` when the unknown prompt wins.

    Parameters
    ----------
    backend : object, optional
        Frozen encoder backend; defaults to a synthetic one seeded by
        ``random_state``.
    transductive : bool
        Build the domain token from the batch being predicted instead of the
        mean of the source-domain tokens.
    """

    def __init__(self, n_heads=4, n_unknown_tokens=3, epochs=10, learning_rate=1e-4, batch_size=6,
                 pseudo_per_domain=3, alpha=0.5, beta=0.3, gamma=0.1, delta=0.2, tau=0.07,
                 lambda_inner=1.0, ema_momentum=0.9, sigma=0.2, guidance_scale=7.5,
                 denoising_steps=50, phase_schedule="alternate_per_batch", weight_decay=0.01,
                 use_semantic=True, backend=None, unknown_label=-1, transductive=False,
                 random_state=0):
        self.n_heads = n_heads
        self.n_unknown_tokens = n_unknown_tokens
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.pseudo_per_domain = pseudo_per_domain
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.delta = delta
        self.tau = tau
        self.lambda_inner = lambda_inner
        self.ema_momentum = ema_momentum
        self.sigma = sigma
        self.guidance_scale = guidance_scale
        self.denoising_steps = denoising_steps
        self.phase_schedule = phase_schedule
        self.weight_decay = weight_decay
        self.use_semantic = use_semantic
        self.backend = backend
        self.unknown_label = unknown_label
        self.transductive = transductive
        self.random_state = random_state

    def _hyper(self) -> HyperParams:
        seed = int(self.random_state or 0)
        return HyperParams(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
            pseudo_per_domain=self.pseudo_per_domain,
            loss_weights=LossWeights(self.alpha, self.beta, self.gamma, self.delta, self.tau,
                                     self.lambda_inner),
            ema_momentum=self.ema_momentum, seed=seed, phase_schedule=self.phase_schedule,
            n_heads=self.n_heads, n_unknown_tokens=self.n_unknown_tokens,
            weight_decay=self.weight_decay,
            perturbation=PerturbationConfig(self.sigma, seed),
            guidance_scale=self.guidance_scale, denoising_steps=self.denoising_steps,
            use_semantic=self.use_semantic)

    def fit(self, X, y, domains=None, class_names=None, domain_names=None):
        """Train on source-domain samples.

        ``domains`` gives each sample's source domain (any hashable labels);
        ``class_names`` / ``domain_names`` name the sorted unique labels and
        feed the class-name tokens and pseudo-unknown prompts.
        """
        X = _check_patches(X)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples, y has {len(y)}")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        domains = np.zeros(len(y), dtype=int) if domains is None else np.asarray(domains)
        if domains.shape != (len(y),):
            raise ValueError(f"domains must have shape ({len(y)},), got {domains.shape}")
        self.domains_, dom_enc = np.unique(domains, return_inverse=True)
        names = [str(c) for c in self.classes_] if class_names is None else list(class_names)
        dnames = [str(m) for m in self.domains_] if domain_names is None else list(domain_names)
        if len(names) != len(self.classes_) or len(dnames) != len(self.domains_):
            raise ValueError("class_names / domain_names must match the unique labels")

        self.backend_ = self.backend or SyntheticBackend(
            BackendSpec(d=X.shape[-1], N=X.shape[1], seed=int(self.random_state or 0)))
        self.state_, self.training_log_ = train(X, y_enc, dom_enc, class_names=names,
                                                domain_names=dnames, hyper=self._hyper(),
                                                backend=self.backend_)
        self.n_features_in_ = X.shape[-1]
        self.prompts_ = prompt_matrix(self.state_, self.backend_)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Cosine similarity to each known prompt, then the unknown prompt: ``(n, C+1)``."""
        check_is_fitted(self, "state_")
        X = _check_patches(X)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"X has d={X.shape[-1]}, fitted with d={self.n_features_in_}")
        prompts = self.prompts_
        if self.transductive:
            prompts = prompt_matrix(self.state_, self.backend_, compute_domain_token(X))
        return similarity_scores(X, prompts).numpy()

    def predict_open(self, X) -> np.ndarray:
        """Indices in ``[0, C]``; ``C`` means unknown."""
        return np.argmax(self.decision_function(X), axis=1)

    def predict(self, X) -> np.ndarray:
        idx = self.predict_open(X)
        C = len(self.classes_)
        unk = np.asarray(self.unknown_label)
        numeric = self.classes_.dtype.kind in "iuf" and unk.dtype.kind in "iuf"
        out = np.empty(len(idx), dtype=np.result_type(self.classes_.dtype, unk.dtype) if numeric else object)
        known = idx < C
        out[known] = self.classes_[idx[known]]
        out[~known] = self.unknown_label
        return out
