"""
CLI
Subcommands, report writers and fixed-width result tables
"""
