"""Conditionally whitened generative models for multivariate time series.

The package trains a joint mean/covariance estimator on history windows,
whitens future windows with the estimated per-step covariance factors, and
runs score-based diffusion or flow matching in the whitened space (or with a
reparameterized terminal distribution).  A metric suite and a theorem
verification harness round out the pipeline; see README.md for usage.
"""

__version__ = "0.1.0"
