"""cexp: a desk-scale continuous-experimentation testbed.

Deploy experimental software variants next to a production stub over a
simulated constrained link, run them under a supervising enforcement
loop, and turn the collected results into a variant-selection decision.
"""

__version__ = "0.1.0"
