"""Invariant causal representation learning.

Three phases: an identifiable VAE recovers latent factors from observations
using the target and environment as auxiliary variables, a rule engine over
conditional-independence tests picks the latent parents of the target, and
two separately trained networks map observations to those parents and
parents to the target.
"""

__version__ = "0.1.0"
