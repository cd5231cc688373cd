"""Bayesian mixed models for single-cell cytometry count data.

Two complementary regression models for paired stimulation experiments:
a multivariate Poisson log-normal mixed model that explains marker counts
from the experimental condition, and a logistic linear mixed model that
predicts the condition from transformed marker expressions. Both are fit
with the package's own Hamiltonian Monte Carlo engine.
"""

__version__ = "0.1.0"
