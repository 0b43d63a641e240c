# Estimator, metrics and ablations
