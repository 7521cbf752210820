# Numerical core, data and artifact helpers
