"""Wide MLPs, their empirical neural tangent kernels, and the regularized /
shifted training that turns gradient descent into an NTK-GP posterior mean."""

__version__ = "0.1.0"
