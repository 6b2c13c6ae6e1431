"""
Plant
Driveline model, gearshift reference and the virtual test bench
"""
