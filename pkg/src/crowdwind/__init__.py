"""Bias correction and grouped-noise Gaussian-process fusion of crowdsourced wind observations.

Subpackages and modules:

``core``             station, series and dataset types
``io``               CSV schemas
``distributions``    wind-speed distributions and maximum likelihood
``quality_control``  missing-data and neighbour-correlation screening
``bias_correction``  grid calibration and quantile mapping
``gp``               spatio-temporal model, priors, fitting and prediction
``evaluation``       scores and leave-one-station-out cross-validation
``simulation``       synthetic data and the strategy comparison
"""
__version__ = "0.1.0"
