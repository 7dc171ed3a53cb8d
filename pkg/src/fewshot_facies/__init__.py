"""Class-count-adaptive few-shot segmentation of seismic facies."""

__version__ = "0.1.0"
