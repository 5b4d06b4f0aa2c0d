"""Train and refine neural image denoisers from noisy data alone, using
unbiased risk estimates for Gaussian and Poisson noise."""

__version__ = "0.1.0"
