"""Numerical, wire and data services of the federated GLMM."""
