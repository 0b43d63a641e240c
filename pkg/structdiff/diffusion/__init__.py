# Noise schedules and parameterization algebra
