"""Missing-value imputation by unsupervised backpropagation, with competitor imputers
and an evaluation harness."""

__version__ = "0.1.0"
