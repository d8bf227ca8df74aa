"""Infer daily fatal-infection trajectories (and R) from death counts.

Deaths are modelled as negative binomial around a latent expected-deaths
curve obtained by convolving a smooth fatal-incidence curve with an
infection-to-death duration distribution. Smoothing parameters are chosen
by Laplace approximate marginal likelihood; posterior uncertainty comes
from the large-sample Gaussian approximation or a Metropolis-Hastings
sampler, pooled over replicate duration distributions.
"""

__version__ = "0.1.0"
