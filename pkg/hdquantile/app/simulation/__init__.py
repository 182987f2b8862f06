"""
Monte Carlo harness: the two simulation designs and the seeded study runner.
"""
