"""Mean-field-game model of corruption in a hierarchical organisation.

Modules: :mod:`grid` (discretisation), :mod:`model` (coefficients and the
mean-field coupling), :mod:`solvers` (HJB / Fokker-Planck), :mod:`agents`
(Monte Carlo), :mod:`carleman` (weighted estimate checks), :mod:`retro`
(reconstruction from terminal data) and :mod:`cli`.
"""

__version__ = "0.1.0"
