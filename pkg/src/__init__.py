"""CoCAI: conformalized copula anomaly scoring for multivariate time series."""
