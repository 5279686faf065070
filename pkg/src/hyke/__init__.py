"""Dynamic PET simulation and reconstruction with hybrid physics+neural
tracer kinetics embedded in a differentiable encode-decode pipeline."""

__version__ = "0.1.0"
