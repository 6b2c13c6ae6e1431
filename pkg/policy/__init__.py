"""
Policy
LQR synthesis, the parameterised gearshift controller and policy files
"""
