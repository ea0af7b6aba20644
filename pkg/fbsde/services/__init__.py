"""Solver services: simulation, backward sweeps, Picard iteration, pasting, oracles."""
