"""Cognitive-concern screening toolkit.

Detects cognitive-concern labels for patients from EHR-style data using
four models (structured baseline, regex concept counts, TF-IDF, windowed
attention) plus an active-learning annotation loop with a review API.
"""

__version__ = "0.1.0"
