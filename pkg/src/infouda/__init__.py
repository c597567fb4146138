"""Information-theoretic analysis tools for unsupervised domain adaptation.

Modules: ``autodiff`` (reverse-mode engine), ``distributions``, ``estimators``,
``oracle`` (exact finite-world enumeration), ``bounds``, ``training``,
``tasks``, ``harness`` and ``cli``.
"""

__version__ = "0.1.0"
