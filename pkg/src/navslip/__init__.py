"""navslip: adjoint-based boundary optimal control of 2D stochastic
Navier-Stokes flow with Navier-slip boundary conditions.

Modules
-------
geometry   staggered grid, boundary mesh, boundary calculus
operators  discrete operators, slip-Stokes eigenbasis, Stokes lifting
noise      noise-operator families and assumption validation
dynamics   forward / linearized Euler-Maruyama solvers and diagnostics
adjoint    pathwise and regression adjoints, duality, pressure recovery
control    cost, exact gradients, projected gradient descent
cli        experiment configuration and run-directory orchestration
"""

__version__ = "0.1.0"
