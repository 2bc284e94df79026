"""Multi-granular image/metadata alignment and fusion classification."""

import json as _json

import numpy as _np

from . import _prima
from ._prima import ConfigError, DomainError, PrimaError, ShapeError, class_vocabulary, set_log_level

__all__ = [
    "ConfigError",
    "DomainError",
    "PrimaError",
    "ShapeError",
    "alignment_losses",
    "class_vocabulary",
    "default_config",
    "generate_cohort",
    "gradcheck",
    "metrics",
    "restricted_probabilities",
    "set_log_level",
    "soft_targets",
    "train",
]


def _as_matrix(a):
    return _np.ascontiguousarray(_np.asarray(a, dtype=_np.float64))


def alignment_losses(image1, image2, text, soft=None, betas=(0.2, 0.3, 0.2, 0.3), tau=0.07):
    """Alignment loss parts for one batch.

    Each of ``image1``, ``image2`` and ``text`` is a pair ``(cls, seq)`` with
    ``cls`` of shape (N, d) and ``seq`` a list of N arrays of shape (tokens, d).
    Returns a dict with keys img, glo, loc, soft, loc_dir and total.
    """
    args = []
    for cls, seq in (image1, image2, text):
        args.append(_as_matrix(cls))
        args.append([_as_matrix(s) for s in seq])
    soft = None if soft is None else _as_matrix(soft)
    return _json.loads(_prima.alignment_losses(*args, soft=soft, betas=list(betas), tau=tau))


def soft_targets(metadata, tau_label=0.5):
    """Soft target matrix from encoded metadata rows (N, D)."""
    return _prima.soft_targets(_as_matrix(metadata), tau_label)


def restricted_probabilities(logits, vocabulary):
    """Class probabilities from full-vocabulary logits restricted to the class tokens."""
    return _prima.restricted_probabilities(_np.asarray(logits, dtype=_np.float64).ravel(), vocabulary)


def metrics(predictions, truths, classes):
    """Per-class F1, macro F1, accuracy and balanced accuracy (percent)."""
    return _json.loads(_prima.metrics(list(predictions), list(truths), list(classes)))


def gradcheck(seed=0, instances=20, corrupt=""):
    """Finite-difference checks of the five alignment losses."""
    return _json.loads(_prima.gradcheck(seed, instances, corrupt))


def generate_cohort(out, patients=600, classes=3, correlation=0.8, image_signal=0.5, seed=7, documents=50):
    """Write a synthetic cohort and corpus under ``out``; returns paths and class counts."""
    return _json.loads(
        _prima.generate_cohort(str(out), patients, classes, correlation, image_signal, seed, documents)
    )


def default_config(profile="desk"):
    """Default run configuration as a dict."""
    return _json.loads(_prima.default_config(profile))


def train(config="", overrides=()):
    """Run all stages and folds; returns the aggregate metrics report."""
    return _json.loads(_prima.train(str(config), list(overrides)))
