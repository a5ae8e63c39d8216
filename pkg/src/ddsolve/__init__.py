"""Volume and substructured restricted additive Schwarz solvers."""
