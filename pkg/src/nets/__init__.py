"""Nonequilibrium transport samplers: potentials, drifts, integrators, training."""
