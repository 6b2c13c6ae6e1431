"""
Learning
Residual GP dynamics, belief rollouts, policy gradients and the outer
calibration loop
"""
