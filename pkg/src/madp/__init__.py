"""Differentially private training on multi-attribution data.

Modules:
  hypergraph  user/example hypergraphs, selections, schedules, file I/O
  graphgen    synthetic regular and skewed hypergraphs
  datagen     synthetic logistic-regression data on hyperedges
  bounding    greedy contribution bounding and bias-study helpers
  ilp         LP export and a small exact solver
  accounting  noise calibration (analytic Gaussian, RDP, group privacy)
  dptrain     DP-SGD / DP-MF training and evaluation
  harness     config-driven experiments
"""

__version__ = '0.1.0'
