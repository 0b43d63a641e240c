# Samplers and the two-stage pipeline
