"""BSDE solvers driven by finite-state Markov chains.

Subpackages:
  chain       generator schedules, Psi/seminorm algebra, simulation
  linalg      matrix exponential, pseudoinverse
  markovian   Lipschitz BSDE solver via the backward ODE reduction
  tree        exhaustive backward induction (full tree and per-state lattice)
  envelope    inf-convolution approximations and minimal solutions
  market      chain-driven market, pricing, replication
  expressions driver/payoff expression language
  scenario    JSON scenario ingestion
  verify      deterministic self-check registry
  cli         command line entry point
"""

__version__ = "0.1.0"
