"""Viewer identification from eye-gaze scanpaths.

Generative scanpath models (Markov saccade models and an attention/
inhibition walk over a saliency grid) provide log-likelihood gradients
that feed Fisher-score features into a discriminative linear classifier;
a synthetic-cohort simulator closes the loop for end-to-end verification.
"""

__version__ = "0.1.0"
